"""Acceptance criteria as runnable checks.

``python -m nth_lab.acceptance [--only 1,4,7]`` prints one PASS/FAIL line per
criterion; ``tests/test_acceptance.py`` runs the same functions under pytest.
"""

from __future__ import annotations

import argparse
import sys
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import experiments, kernel, limitgram
from .cli import ExperimentSpec, main as cli_main
from .dynamics import grad_theta_f
from .experiments import Check, Result
from .model import NetworkConfig, forward, init_params, make_dataset

TEN_SEEDS = list(range(10))


@dataclass
class CriterionResult:
    number: int
    title: str
    checks: list = field(default_factory=list)
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return bool(self.checks) and all(c.passed for c in self.checks)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        failed = [c for c in self.checks if not c.passed]
        shown = failed or self.checks
        detail = "; ".join(f"{c.name}: {c.detail}" if c.detail else c.name for c in shown)
        return f"[{status}] criterion {self.number} ({self.title}, {self.seconds:.1f} s) {detail}"


def _spec(**raw) -> ExperimentSpec:
    return ExperimentSpec.from_dict(raw)


def _pick(result: Result, names) -> list:
    by_name = {c.name: c for c in result.checks}
    return [by_name[n] for n in names]


def _runtime(name: str, seconds: float, limit: float) -> Check:
    return Check(name, seconds < limit, f"{seconds:.1f} s < {limit:.0f} s")


def criterion_1() -> list:
    spec = _spec(command="grad-check", config={"d": 4, "m": 16, "L": 3},
                 dataset={"generated": {"seed": 0, "n": 5}}, seeds=[0, 1, 2, 3, 4], probes=200)
    t = time.perf_counter()
    res = experiments.cmd_grad_check(spec)
    dt = time.perf_counter() - t
    return _pick(res, ["grad_f"]) + [_runtime("runtime", dt, 10.0)]


def criterion_2() -> list:
    worst = 0.0
    for seed in range(5):
        cfg = NetworkConfig(d=4, m=32, L=4)
        ds = make_dataset(6, 4, seed)
        params = init_params(cfg, seed)
        cache = forward(cfg, params, ds.inputs)
        K = kernel.layer_kernels(cfg, params, cache).sum(axis=0)
        J = np.array([grad_theta_f(cfg, params, cache.sample(i)).flatten() for i in range(ds.n)])
        ref = J @ J.T
        worst = max(worst, float(np.max(np.abs(K - ref) / np.abs(ref))))
    return [Check("decomposition", worst <= 1e-9, f"max entrywise relative error {worst:.3e}")]


def criterion_3() -> list:
    cfg = NetworkConfig(d=4, m=512, L=4)
    ds = make_dataset(8, 4, 0)
    stack = limitgram.build_limit_stack(ds, cfg.activation, cfg.c_res, cfg.c_sigma, cfg.L)
    res = Result()
    experiments.limit_stack_checks(res, stack, ds, cfg, nodes=60)
    return _pick(res, ["Kt1_diag_one", "b_below_diag", "hierarchy_increasing", "KL1_above_lambda0",
                       "quadrature_agreement"])


def criterion_4() -> list:
    cfg = NetworkConfig(d=4, m=4096, L=4)
    ds = make_dataset(8, 4, 0)
    t = time.perf_counter()
    stack = limitgram.build_limit_stack(ds, cfg.activation, cfg.c_res, cfg.c_sigma, cfg.L)
    report = limitgram.init_concentration(ds, cfg, [256, 512, 1024, 2048, 4096], TEN_SEEDS, stack)
    res = Result()
    experiments.concentration_checks(res, report, stack.lambda0)
    dt = time.perf_counter() - t
    return _pick(res, ["init_gap_vs_K_L1", "init_lambda_min", "init_gap_slope_vs_K_L1"]) + [
        _runtime("runtime", dt, 300.0)]


def criterion_5(heavy: bool = False) -> list:
    spec = ExperimentSpec.from_dict(
        {"command": "drift-scan", "config": {"d": 4, "m": 128, "L": 4}, "m_list": [128, 256, 512, 1024, 2048],
         "seeds": TEN_SEEDS, "T": 2.0}, heavy=heavy)
    t = time.perf_counter()
    res = experiments.cmd_drift_scan(spec)
    dt = time.perf_counter() - t
    return _pick(res, ["kernel_slope", "param_slope", "separation"]) + [_runtime("runtime", dt, 600.0)]


def criterion_6() -> list:
    res = experiments.cmd_flow(_spec(command="flow", config={"d": 4, "m": 512, "L": 4}, T=5.0))
    return _pick(res, ["decay", "monotone", "rate"])


def criterion_7() -> list:
    res = experiments.cmd_nth_check(_spec(command="nth-check", config={"d": 4, "m": 64, "L": 3},
                                          dataset={"generated": {"seed": 0, "n": 6}}, T=2.0, delta=1e-3))
    return _pick(res, ["relative_residual", "halving"])


def criterion_8() -> list:
    res = experiments.cmd_depth_scan(_spec(command="depth-scan", config={"d": 4, "m": 512, "L": 2},
                                           L_list=[2, 4, 8, 16, 32], seeds=TEN_SEEDS))
    return _pick(res, ["depth_stability", "feedforward_growth"])


def criterion_9() -> list:
    cfg = NetworkConfig(d=4, m=2048, L=4)
    ds = make_dataset(8, 4, 0)
    stack = limitgram.build_limit_stack(ds, cfg.activation, cfg.c_res, cfg.c_sigma, cfg.L)
    mean, se = limitgram.mc_layer_kernel(ds, cfg, cfg.L, 2048, 32, 0, stack)
    res = Result()
    experiments.mc_checks(res, mean, se, stack.K_L)
    return res.checks


DETERMINISM_SPECS = {
    "flow": {"command": "flow", "config": {"d": 4, "m": 64, "L": 3}, "T": 1.0},
    "drift-scan": {"command": "drift-scan", "config": {"d": 4, "m": 32, "L": 3}, "m_list": [32, 48, 64, 96],
                   "seeds": [0, 1, 2], "T": 0.5},
    "limit-gram": {"command": "limit-gram", "config": {"d": 4, "m": 256, "L": 3}, "m_list": [256, 512],
                   "seeds": [0, 1], "m_probe": 256, "replicates": 8},
}


def criterion_10() -> list:
    """Re-run each experiment through the CLI (also with 2 threads) and compare bytes."""
    import json

    checks = []
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        for name, raw in DETERMINISM_SPECS.items():
            cfg = tmp / f"{name}.json"
            cfg.write_text(json.dumps(raw))
            outs = []
            for run, threads in (("a", 1), ("b", 1), ("c", 2)):
                out = tmp / f"{name}-{run}"
                cli_main([name, "--config", str(cfg), "--out", str(out), "--threads", str(threads)])
                outs.append({p.name: p.read_bytes() for p in sorted(out.iterdir())})
            same = bool(outs[0]) and outs[0] == outs[1] == outs[2]
            checks.append(Check(name, same, f"{len(outs[0])} files identical across reruns and thread counts"))
    return checks


CRITERIA = {
    1: ("gradient exactness", criterion_1),
    2: ("NTK decomposition identity", criterion_2),
    3: ("limit-kernel recursion", criterion_3),
    4: ("initialization concentration", criterion_4),
    5: ("kernel vs parameter drift", criterion_5),
    6: ("exponential decay", criterion_6),
    7: ("order-3 hierarchy consistency", criterion_7),
    8: ("depth stability", criterion_8),
    9: ("Monte-Carlo layer kernel", criterion_9),
    10: ("determinism", criterion_10),
}


def run_criterion(number: int, **kwargs) -> CriterionResult:
    title, fn = CRITERIA[number]
    t = time.perf_counter()
    checks = fn(**kwargs)
    return CriterionResult(number, title, checks, time.perf_counter() - t)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="python -m nth_lab.acceptance")
    parser.add_argument("--only", default=None, help="comma-separated criterion numbers")
    parser.add_argument("--heavy", action="store_true", help="include m = 4096 in the drift sweep")
    args = parser.parse_args(argv)
    numbers = sorted(CRITERIA) if args.only is None else [int(s) for s in args.only.split(",")]
    ok = True
    for k in numbers:
        r = run_criterion(k, **({"heavy": True} if (k == 5 and args.heavy) else {}))
        print(r.line(), flush=True)
        ok &= r.passed
    return 0 if ok else 2


if __name__ == "__main__":
    sys.exit(main())
