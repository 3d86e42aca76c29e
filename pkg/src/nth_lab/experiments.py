"""Experiment drivers behind the ``nth-lab`` commands.

Every driver takes an :class:`~nth_lab.cli.ExperimentSpec`-like object and
returns a :class:`Result` (CSV rows, a JSON summary and named pass/fail
checks).  Nothing here touches the file system.
"""

from __future__ import annotations

import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import kernel, limitgram, linalg
from .dynamics import (
    StepSizeWarning,
    default_step,
    grad_loss,
    grad_theta_f,
    integrate,
    spectral_diag,
)
from .model import Dataset, NetworkConfig, Params, feedforward_norms, forward, init_params, network_output

FD_STEP = 1e-5
GRAD_TOL = 1e-6


class NumericalFailure(RuntimeError):
    """A run produced non-finite numbers; ``state`` holds the last good parameters."""

    def __init__(self, message, state=None, t=None):
        super().__init__(message)
        self.state = state
        self.t = t


@dataclass
class Check:
    name: str
    passed: bool
    detail: str = ""


@dataclass
class Result:
    rows: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    checks: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def check(self, name: str, passed, detail: str = "") -> bool:
        self.checks.append(Check(name, bool(passed), detail))
        return bool(passed)


def run_cells(fn, cells, threads: int = 1):
    """Map ``fn`` over ``cells``; results come back in cell order for any thread count."""
    cells = list(cells)
    if threads <= 1 or len(cells) <= 1:
        return [fn(c) for c in cells]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, cells))


def loglog_fit(x, y, groups=None, n_boot: int = 1000, seed: int = 0):
    """Pooled least-squares log-log slope with a 95% bootstrap interval.

    ``groups`` labels each point by its x-cell; the bootstrap resamples points
    with replacement inside every group (that is, over seeds at fixed width).
    """
    x, y = np.asarray(x, float), np.asarray(y, float)
    lx, ly = np.log(x), np.log(y)
    slope = float(np.polyfit(lx, ly, 1)[0])
    if groups is None:
        return slope, (float("nan"), float("nan"))
    groups = np.asarray(groups)
    members = [np.flatnonzero(groups == gval) for gval in np.unique(groups)]
    rng = linalg.make_rng(seed)
    boots = np.empty(n_boot)
    for b in range(n_boot):
        idx = np.concatenate([rng.choice(ix, size=ix.size, replace=True) for ix in members])
        boots[b] = np.polyfit(lx[idx], ly[idx], 1)[0]
    lo, hi = np.quantile(boots, [0.025, 0.975])
    return slope, (float(lo), float(hi))


# -- trajectories -------------------------------------------------------------------------------


@dataclass
class Trajectory:
    """Quantities recorded along one gradient-flow run."""

    times: list = field(default_factory=list)
    losses: list = field(default_factory=list)
    lambda_min: list = field(default_factory=list)
    kernel_drift_inf: list = field(default_factory=list)
    kernel_drift_fro: list = field(default_factory=list)
    output_kernel_drift_inf: list = field(default_factory=list)
    param_drift_fro: list = field(default_factory=list)
    xi: list = field(default_factory=list)
    residuals: list = field(default_factory=list)
    rate: list = field(default_factory=list)
    rate_rayleigh: list = field(default_factory=list)
    step: float = float("nan")
    warnings: list = field(default_factory=list)

    SERIES = ("times", "losses", "lambda_min", "rate", "rate_rayleigh", "kernel_drift_inf",
              "kernel_drift_fro", "output_kernel_drift_inf", "param_drift_fro", "xi")

    def validate(self) -> None:
        lengths = {len(getattr(self, s)) for s in self.SERIES}
        if len(lengths) != 1:
            raise ValueError(f"trajectory series have unequal lengths {sorted(lengths)}")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("trajectory times must be strictly increasing")

    def rows(self) -> list:
        names = ("t", "loss", "lambda_min", "rate", "rate_rayleigh", "kernel_drift_inf",
                 "kernel_drift_fro", "output_kernel_drift_inf", "param_drift_fro", "xi")
        return [dict(zip(names, vals)) for vals in zip(*(getattr(self, s) for s in self.SERIES))]


def loss_rate(times, losses) -> np.ndarray:
    """Measured -d/dt ln(sum_a (f_a - y_a)^2) by second-order finite differences.

    NaN where the loss is zero (the rate is undefined there).
    """
    t = np.asarray(times, float)
    S = np.asarray(losses, float)
    out = np.full(t.shape, np.nan)
    if t.size < 3 or np.any(S <= 0):
        return out
    return -np.gradient(np.log(S), t, edge_order=2)


def record_flow(config: NetworkConfig, params0: Params, dataset: Dataset, T: float,
                step: float | None = None, scheme: str = "rk4", with_xi: bool = True,
                record_every: int = 1) -> Trajectory:
    """Integrate the flow to ``T`` and record a :class:`Trajectory`.

    The step defaults to :func:`default_step` on the initial NTK spectrum.
    """
    n = dataset.n
    cache0 = forward(config, params0, dataset.inputs)
    G0 = kernel.layer_kernels(config, params0, cache0)
    K0 = G0.sum(axis=0)
    if step is None:
        w = np.linalg.eigvalsh(K0)
        step = default_step(linalg.sym_eig_min(K0), n, float(w[-1]))
    traj = Trajectory(step=step)
    count = {"k": 0}
    last = {"params": params0, "t": 0.0}
    n_steps = max(1, int(np.ceil(T / step - 1e-9)))

    def observe(state):
        k = count["k"]
        count["k"] += 1
        last["params"], last["t"] = state.params, state.t
        if not (k % record_every == 0 or k == n_steps):
            return
        cache = forward(config, state.params, dataset.inputs)
        G = kernel.layer_kernels(config, state.params, cache)
        K = linalg.symmetrize(G.sum(axis=0))
        r = cache.x[-1] @ state.params.a - dataset.labels
        dK = K - K0
        traj.times.append(float(state.t))
        traj.losses.append(float(0.5 * np.mean(r * r)))
        traj.lambda_min.append(linalg.sym_eig_min(K))
        rr = float(r @ r)
        traj.rate_rayleigh.append(2.0 * float(r @ K @ r) / (n * rr) if rr > 0 else float("nan"))
        traj.kernel_drift_inf.append(float(np.max(np.abs(dK))))
        traj.kernel_drift_fro.append(float(np.linalg.norm(dK)))
        traj.output_kernel_drift_inf.append(float(np.max(np.abs(G[-1] - G0[-1]))))
        traj.param_drift_fro.append((state.params - params0).frobenius())
        traj.xi.append(spectral_diag(config, state.params, tol=1e-8).xi if with_xi else float("nan"))
        traj.residuals.append(r)

    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", StepSizeWarning)
        try:
            integrate(config, params0, dataset, T, step, scheme, observer=observe)
        except FloatingPointError as exc:
            raise NumericalFailure(str(exc), state=last["params"], t=last["t"]) from exc
    traj.warnings = [str(w.message) for w in caught if issubclass(w.category, StepSizeWarning)]
    traj.rate = [float(v) for v in loss_rate(traj.times, traj.losses)]
    traj.validate()
    return traj


# -- gradient check -----------------------------------------------------------------------------


def _block_slices(params: Params):
    names = ["W1"] + [f"W{l}" for l in range(2, params.W.shape[0] + 2)] + ["a"]
    sizes = [params.W1.size] + [params.W[0].size] * params.W.shape[0] + [params.a.size]
    bounds = np.concatenate([[0], np.cumsum(sizes)])
    return names, bounds


def _output_ext(config, theta, like, x):
    """f(x, theta) evaluated in extended precision (the finite-difference oracle)."""
    p = Params.unflatten(theta, like)
    return (forward(config, p, x).x[-1] @ p.a)


def _loss_ext(config, theta, like, dataset):
    p = Params.unflatten(theta, like)
    r = forward(config, p, dataset.inputs).x[-1] @ p.a - dataset.labels
    return 0.5 * np.mean(r * r)


def grad_check(config: NetworkConfig, params: Params, dataset: Dataset, probes: int, rng,
               fault=None) -> dict:
    """Central finite differences of f(x_alpha) against the analytic gradient.

    Probes are spread evenly over the blocks; each picks a random sample and
    coordinate.  ``fault = (block, index)`` adds 1e-3 to one analytic entry
    (a test hook for the failure path) and that entry is always probed.
    The error measure is
    |analytic - fd| / (|analytic| + 1e-12).  The two shifted outputs are
    evaluated in extended precision so that rounding in f(theta +- h e_k)
    does not swamp small gradient entries.
    """
    names, bounds = _block_slices(params)
    theta = params.flatten().astype(np.longdouble)
    cache = forward(config, params, dataset.inputs)
    grads = [grad_theta_f(config, params, cache.sample(i)).flatten() for i in range(dataset.n)]
    if fault is not None:
        block, index = fault
        b = names.index(block)
        for g in grads:
            g[bounds[b] + index] += 1e-3
    worst = {"error": -1.0}
    per_block = {}
    nb = len(names)
    for p in range(probes):
        b = p % nb
        k = int(rng.integers(bounds[b], bounds[b + 1]))
        alpha = int(rng.integers(dataset.n))
        if fault is not None and p == 0:
            b = names.index(fault[0])
            k = bounds[b] + fault[1]
        x = dataset.inputs[alpha]
        e = np.zeros_like(theta)
        e[k] = FD_STEP
        fd = float((_output_ext(config, theta + e, params, x) - _output_ext(config, theta - e, params, x))
                   / (2 * FD_STEP))
        an = grads[alpha][k]
        err = abs(an - fd) / (abs(an) + 1e-12)
        per_block[names[b]] = max(per_block.get(names[b], 0.0), err)
        if err > worst["error"]:
            worst = {"error": float(err), "block": names[b], "index": int(k - bounds[b]), "sample": alpha,
                     "analytic": float(an), "fd": float(fd)}
    return {"max_rel_error": worst["error"], "worst": worst, "per_block": per_block}


def loss_grad_check(config: NetworkConfig, params: Params, dataset: Dataset, probes: int, rng) -> float:
    """Same protocol for the gradient of R_S."""
    names, bounds = _block_slices(params)
    theta = params.flatten().astype(np.longdouble)
    g = grad_loss(config, params, dataset)[0].flatten()
    worst = 0.0
    for p in range(probes):
        b = p % len(names)
        k = int(rng.integers(bounds[b], bounds[b + 1]))
        e = np.zeros_like(theta)
        e[k] = FD_STEP
        fd = float((_loss_ext(config, theta + e, params, dataset) - _loss_ext(config, theta - e, params, dataset))
                   / (2 * FD_STEP))
        worst = max(worst, abs(g[k] - fd) / (abs(g[k]) + 1e-12))
    return float(worst)


GRAD_CHECK_C_RES = (0.1, 0.3, 0.5, 0.7, 0.9)


def cmd_grad_check(spec) -> Result:
    res = Result()
    worst_all = {"max_rel_error": -1.0}
    for i, seed in enumerate(spec.init_seeds):
        c_res = GRAD_CHECK_C_RES[i % len(GRAD_CHECK_C_RES)]
        cfg = spec.network.with_(c_res=c_res)
        ds = spec.load_dataset(offset=i)
        params = init_params(cfg, seed)
        rep = grad_check(cfg, params, ds, spec.probes, linalg.make_rng(seed + 1_000_003), fault=spec.fault)
        loss_err = loss_grad_check(cfg, params, ds, max(1, spec.probes // 4), linalg.make_rng(seed + 2_000_003))
        res.rows.append({"seed": seed, "c_res": c_res, "max_rel_error": rep["max_rel_error"],
                         "loss_max_rel_error": loss_err, "worst_block": rep["worst"]["block"],
                         "worst_index": rep["worst"]["index"]})
        if rep["max_rel_error"] > worst_all["max_rel_error"]:
            worst_all = dict(rep, seed=seed)
    res.summary = {"max_rel_error": worst_all["max_rel_error"], "worst": worst_all["worst"],
                   "loss_max_rel_error": max(r["loss_max_rel_error"] for r in res.rows)}
    w = worst_all["worst"]
    res.check("grad_f", worst_all["max_rel_error"] <= GRAD_TOL,
              f"max rel error {worst_all['max_rel_error']:.3e} at block {w['block']} index {w['index']}")
    res.check("grad_loss", res.summary["loss_max_rel_error"] <= GRAD_TOL,
              f"max rel error {res.summary['loss_max_rel_error']:.3e}")
    return res


# -- flow -----------------------------------------------------------------------------------------


def flow_checks(res: Result, traj: Trajectory, n: int, T: float) -> None:
    losses = np.array(traj.losses)
    lam_hat = float(np.min(traj.lambda_min))
    ratio = losses[-1] / losses[0] if losses[0] > 0 else 0.0
    bound = float(np.exp(-0.9 * lam_hat * T / n))
    res.check("decay", ratio <= bound, f"R(T)/R(0) = {ratio:.6e}, bound {bound:.6e}")
    rises = np.diff(losses)
    res.check("monotone", np.all(rises <= 1e-12), f"largest increase {np.max(rises, initial=0.0):.3e}")
    rate = np.array(traj.rate)
    floor = 2.0 * np.array(traj.lambda_min) / n - 1e-6
    if np.any(losses <= 0):
        # ln R is undefined once the loss is exactly zero; nothing to compare
        res.check("rate", bool(np.all(losses == 0)), "vacuous: loss is identically zero")
        return
    ok = rate >= floor  # NaN fails
    margin = np.min(rate - floor)
    res.check("rate", bool(np.all(ok)), f"min(rate - 2 lambda_min / n + 1e-6) = {margin:.3e}")


def cmd_flow(spec) -> Result:
    cfg, ds = spec.network, spec.load_dataset()
    params = init_params(cfg, spec.init_seeds[0])
    if spec.zero_residual:
        ds = ds.with_labels(network_output(forward(cfg, params, ds.inputs), params), bounded=False)
    traj = record_flow(cfg, params, ds, spec.T, spec.step, spec.scheme, with_xi=True)
    res = Result(rows=traj.rows())
    losses = np.array(traj.losses)
    pos = losses > 0
    fitted = -np.polyfit(np.array(traj.times)[pos], np.log(losses[pos]), 1)[0] if pos.sum() >= 2 else 0.0
    lam_hat = float(np.min(traj.lambda_min))
    res.summary = {
        "step": traj.step,
        "lambda_hat": lam_hat,
        "fitted_decay_constant": float(fitted),
        "guaranteed_decay_constant": lam_hat / ds.n,
        "loss_ratio": float(losses[-1] / losses[0]) if losses[0] > 0 else 0.0,
        "xi_max_relative_increase": float(np.max(traj.xi) / traj.xi[0] - 1.0),
        "step_warnings": traj.warnings,
    }
    flow_checks(res, traj, ds.n, spec.T)
    return res


# -- width and depth sweeps ---------------------------------------------------------------------


def drift_cell(cfg: NetworkConfig, ds: Dataset, seed: int, T: float, step, scheme: str) -> dict:
    params = init_params(cfg, seed)
    traj = record_flow(cfg, params, ds, T, step, scheme, with_xi=False)
    r0 = float(np.linalg.norm(traj.residuals[0]))
    unit = r0 / np.sqrt(ds.n)  # RMS initial residual
    kd = float(np.max(traj.output_kernel_drift_inf))
    kd2 = float(np.max(traj.kernel_drift_inf))
    pd = float(np.max(traj.param_drift_fro))
    rt = np.sqrt(cfg.m)
    return {
        "m": cfg.m, "L": cfg.L, "seed": seed, "step": traj.step, "residual_rms0": unit,
        "kernel_drift": kd, "ntk_drift": kd2, "param_drift_fro": pd, "param_drift_scaled": pd / rt,
        "kernel_drift_per_residual": kd / unit, "param_drift_per_residual": pd / rt / unit,
    }


KERNEL_SLOPE = (-1.3, -0.7)
PARAM_SLOPE = (-0.65, -0.35)


def cmd_drift_scan(spec) -> Result:
    ds = spec.load_dataset()
    m_list = list(spec.m_list) + (list(spec.heavy_m_list) if spec.heavy else [])
    cells = [(m, s) for m in m_list for s in spec.init_seeds]
    rows = run_cells(lambda c: drift_cell(spec.network.with_(m=c[0]), ds, c[1], spec.T, spec.step, spec.scheme),
                     cells, spec.threads)
    rows.sort(key=lambda r: (r["m"], r["L"], r["seed"]))
    res = Result(rows=rows)
    ms = [r["m"] for r in rows]
    ks, kci = loglog_fit(ms, [r["kernel_drift_per_residual"] for r in rows], ms, seed=spec.base_seed)
    ps, pci = loglog_fit(ms, [r["param_drift_per_residual"] for r in rows], ms, seed=spec.base_seed + 1)
    ks_raw, _ = loglog_fit(ms, [r["kernel_drift"] for r in rows])
    ps_raw, _ = loglog_fit(ms, [r["param_drift_scaled"] for r in rows])
    ps_fro, _ = loglog_fit(ms, [r["param_drift_fro"] for r in rows])
    res.summary = {
        "kernel_slope": ks, "kernel_slope_ci95": kci,
        "param_slope": ps, "param_slope_ci95": pci,
        "kernel_slope_unnormalised": ks_raw, "param_slope_unnormalised": ps_raw,
        "param_fro_slope_unscaled": ps_fro, "m_list": m_list,
    }
    res.check("kernel_slope", KERNEL_SLOPE[0] <= ks <= KERNEL_SLOPE[1], f"{ks:.3f} in {KERNEL_SLOPE}")
    res.check("param_slope", PARAM_SLOPE[0] <= ps <= PARAM_SLOPE[1], f"{ps:.3f} in {PARAM_SLOPE}")
    res.check("separation", ks < ps - 0.2, f"{ks:.3f} < {ps:.3f} - 0.2")
    return res


def depth_cell(cfg: NetworkConfig, ds: Dataset, seed: int) -> dict:
    params = init_params(cfg, seed)
    cache = forward(cfg, params, ds.inputs)
    snap = kernel.empirical_ntk(cfg, params, ds, cache=cache)
    norms = np.linalg.norm(cache.x[-1], axis=1)
    ff = [feedforward_norms(cfg, params, x)[-1] for x in ds.inputs]
    return {"L": cfg.L, "seed": seed, "median_norm": float(np.median(norms)), "min_norm": float(norms.min()),
            "max_norm": float(norms.max()), "lambda_min_K2": snap.lambda_min,
            "xi": spectral_diag(cfg, params, tol=1e-8).xi, "feedforward_norm": float(np.median(ff))}


def cmd_depth_scan(spec) -> Result:
    ds = spec.load_dataset()
    cells = [(L, s) for L in spec.L_list for s in spec.init_seeds]
    rows = run_cells(lambda c: depth_cell(spec.network.with_(L=c[0]), ds, c[1]), cells, spec.threads)
    rows.sort(key=lambda r: (r["L"], r["seed"]))
    res = Result(rows=rows)
    Ls = sorted(spec.L_list)
    med = {L: float(np.median([r["median_norm"] for r in rows if r["L"] == L])) for L in Ls}
    ff = {L: float(np.median([r["feedforward_norm"] for r in rows if r["L"] == L])) for L in Ls}
    base = med[Ls[0]]
    flagged = [L for L in Ls if med[L] > 2 * base]
    res.summary = {"median_norm": med, "feedforward_median_norm": ff, "flagged": flagged,
                   "spread": max(med.values()) / min(med.values())}
    res.check("depth_stability", max(med.values()) <= 2 * min(med.values()),
              f"median norms {[round(med[L], 4) for L in Ls]}")
    res.check("no_flags", not flagged, f"flagged depths {flagged}")
    res.check("feedforward_growth", all(ff[a] < ff[b] for a, b in zip(Ls, Ls[1:])),
              f"feedforward norms {[f'{ff[L]:.3g}' for L in Ls]}")
    xis = [r["xi"] for r in rows]
    res.check("xi_range", all(1.0 <= x <= 3.0 for x in xis), f"xi in [{min(xis):.3f}, {max(xis):.3f}]")
    return res


# -- limit kernels ------------------------------------------------------------------------------


def _band(stack, activation, c_res, c_sigma):
    c = limitgram.diagonal_band_constant(activation, c_res, c_sigma)
    L = stack.L
    out = []
    for l in range(1, L + 1):
        lo = (1 - (l / L) * c / np.sqrt(c_sigma)) ** 2
        hi = (1 + (l / L) * c / np.sqrt(c_sigma)) ** 2
        d = np.diag(stack.Ktilde[l])
        out.append({"l": l, "lower": lo, "upper": hi, "min_diag": float(d.min()), "max_diag": float(d.max())})
    return c, out


def limit_stack_checks(res: Result, stack, ds, cfg, nodes: int) -> None:
    """Structural properties of the width-limit recursion."""
    L = stack.L
    res.check("Kt1_diag_one", np.max(np.abs(np.diag(stack.Ktilde[1]) - 1.0)) <= 1e-8,
              f"max |Kt1_ii - 1| = {np.max(np.abs(np.diag(stack.Ktilde[1]) - 1.0)):.3e}")
    diag_spread = max(float(np.ptp(np.diag(K))) for K in stack.Ktilde)
    res.check("diag_equal", diag_spread <= 1e-10, f"max diagonal spread {diag_spread:.3e}")
    res.check("b_below_diag", all(np.all(stack.btilde[l] ** 2 < np.diag(stack.Ktilde[l])) for l in range(1, L + 1)))
    h = stack.hierarchy
    res.check("hierarchy_increasing", all(a < b for a, b in zip(h, h[1:])), f"{[f'{v:.6e}' for v in h]}")
    lam_top = linalg.sym_eig_min(stack.K_L1)
    res.check("KL1_above_lambda0", lam_top > stack.lambda0 > 0,
              f"lambda_min(K^[L+1]) = {lam_top:.6e}, lambda0 = {stack.lambda0:.6e}")
    agree = limitgram.quadrature_agreement(ds, cfg.activation, cfg.c_res, cfg.c_sigma, L, nodes, nodes + 30)
    res.check("quadrature_agreement", agree <= 1e-9, f"{nodes} vs {nodes + 30} nodes: {agree:.3e}")
    _, band = _band(stack, cfg.activation, cfg.c_res, cfg.c_sigma)
    res.check("diagonal_band", all(b["lower"] <= b["min_diag"] and b["max_diag"] <= b["upper"] for b in band))
    res.summary["lambda_min_K_L1"] = lam_top
    res.summary["quadrature_agreement"] = agree


def concentration_checks(res: Result, report: dict, lambda0: float) -> None:
    s = report["summary"]
    rows = report["rows"]
    m_top = max(r["m"] for r in rows)
    top = [r for r in rows if r["m"] == m_top]
    tol = 5 / np.sqrt(m_top)
    gap = max(r["gap_output_vs_KL1"] for r in top)
    res.check("init_gap_vs_K_L1", gap <= tol, f"max |G^[L+1](0) - K^[L+1]| = {gap:.4f} vs 5/sqrt(m) = {tol:.4f}")
    good = sum(r["lambda_min_output"] >= 0.75 * lambda0 for r in top)
    res.check("init_lambda_min", good >= int(np.ceil(0.9 * len(top))),
              f"{good}/{len(top)} seeds with lambda_min >= 3/4 lambda0")
    ms = sorted({r["m"] for r in rows})
    slope = loglog_fit(ms, [s["gap_output_vs_KL1"][m]["median"] for m in ms])[0]
    res.check("init_gap_slope_vs_K_L1", -0.65 <= slope <= -0.35, f"slope {slope:.3f}")
    # the same two statistics against Kt[L], the limit G^[L+1](0) actually converges to
    gap_t = max(r["gap_layerL"] for r in top)
    slope_t = loglog_fit(ms, [s["gap_layerL"][m]["median"] for m in ms])[0]
    res.summary["gap_vs_Kt_L_max_at_top_m"] = gap_t
    res.summary["gap_vs_Kt_L_slope"] = slope_t
    res.summary["gap_vs_K_L1_slope"] = slope
    res.check("init_gap_vs_Kt_L", gap_t <= tol, f"max |G^[L+1](0) - Kt[L]| = {gap_t:.4f} vs {tol:.4f}")
    res.check("init_gap_slope_vs_Kt_L", -0.65 <= slope_t <= -0.35, f"slope {slope_t:.3f}")


def mc_checks(res: Result, mean, se, target) -> None:
    z = np.abs(mean - target) / se
    res.summary["mc_max_z"] = float(np.max(z))
    res.check("mc_layer_kernel", np.all(z <= 3.0), f"max |mc - quadrature| / se = {np.max(z):.3f}")


def cmd_limit_gram(spec) -> Result:
    cfg, ds = spec.network, spec.load_dataset()
    stack = limitgram.build_limit_stack(ds, cfg.activation, cfg.c_res, cfg.c_sigma, cfg.L, nodes=spec.nodes)
    res = Result()
    c, band = _band(stack, cfg.activation, cfg.c_res, cfg.c_sigma)
    res.summary.update({
        "Ktilde": stack.Ktilde, "btilde": stack.btilde[1:], "K_L1": stack.K_L1, "K_L": stack.K_L,
        "lambda0": limitgram.lambda0(stack), "hierarchy": stack.hierarchy, "band_constant": c, "band": band,
        "lambda_min_K_L": linalg.sym_eig_min(stack.K_L),
        "kappa_hat": linalg.sym_eig_min(stack.K_L * (cfg.L / cfg.c_res) ** 2),
    })
    limit_stack_checks(res, stack, ds, cfg, spec.nodes)
    report = limitgram.init_concentration(ds, cfg, spec.m_list, spec.init_seeds, stack)
    res.rows = report["rows"]
    res.summary["init_concentration"] = report["summary"]
    concentration_checks(res, report, stack.lambda0)
    if spec.replicates > 0:
        mean, se = limitgram.mc_layer_kernel(ds, cfg, cfg.L, spec.m_probe, spec.replicates, spec.base_seed, stack)
        res.summary["mc_K_L"] = {"mean": mean, "stderr": se}
        mc_checks(res, mean, se, stack.K_L)
    return res


# -- hierarchy check ----------------------------------------------------------------------------


def cmd_nth_check(spec) -> Result:
    cfg, ds = spec.network, spec.load_dataset()
    params0 = init_params(cfg, spec.init_seeds[0])
    times = np.linspace(0.0, spec.T, spec.checkpoints)
    K0 = kernel.empirical_ntk(cfg, params0, ds).K2.data
    step = spec.step or default_step(linalg.sym_eig_min(K0), ds.n, float(np.linalg.eigvalsh(K0)[-1]))
    res = Result()
    params, t_now, prev_g3 = params0, 0.0, None
    for t in times:
        if t > t_now:
            params = integrate(cfg, params, ds, t - t_now, step, spec.scheme, check_loss=False).params
            t_now = t
        a = kernel.nth_check_at(cfg, params, ds, spec.delta)
        b = kernel.nth_check_at(cfg, params, ds, spec.delta / 2)
        g3 = kernel.g3_kernel(cfg, params, forward(cfg, params, ds.inputs))
        row = {"t": float(t), "relative": a["relative"], "relative_half": b["relative"],
               "residual": a["residual"], "residual_half": b["residual"], "drift_inf": a["drift_inf"],
               "shrink": a["residual"] / b["residual"] if b["residual"] > 0 else float("inf"),
               "g3_max_abs": float(np.max(np.abs(g3))),
               "g3_time_variation": float("nan") if prev_g3 is None
               else float(np.max(np.abs(g3 - prev_g3[1])) / (t - prev_g3[0]))}
        prev_g3 = (t, g3)
        res.rows.append(row)
    rel = max(r["relative"] for r in res.rows)
    shrink = min(r["shrink"] for r in res.rows)
    res.summary = {"max_relative": rel, "min_shrink": shrink, "delta": spec.delta, "step": step}
    res.check("relative_residual", rel <= 5e-2, f"max relative residual {rel:.3e}")
    res.check("halving", shrink >= 2.0, f"min residual shrink on halving delta {shrink:.3f}")
    return res


# -- frozen-kernel comparison ---------------------------------------------------------------------


def regression_cell(cfg: NetworkConfig, ds: Dataset, seed: int, T: float, step, scheme: str) -> dict:
    params = init_params(cfg, seed)
    traj = record_flow(cfg, params, ds, T, step, scheme, with_xi=False)
    K0 = kernel.empirical_ntk(cfg, params, ds).K2
    r0 = traj.residuals[0]
    gaps = [float(np.max(np.abs(r - kernel.kernel_regression_predict(K0, r0, t))))
            for t, r in zip(traj.times, traj.residuals)]
    return {"m": cfg.m, "seed": seed, "gap_t0": gaps[0], "sup_gap": max(gaps),
            "residual_rms0": float(np.linalg.norm(r0) / np.sqrt(ds.n))}


def cmd_kernel_regression(spec) -> Result:
    ds = spec.load_dataset()
    cells = [(m, s) for m in spec.m_list for s in spec.init_seeds]
    rows = run_cells(lambda c: regression_cell(spec.network.with_(m=c[0]), ds, c[1], spec.T, spec.step, spec.scheme),
                     cells, spec.threads)
    rows.sort(key=lambda r: (r["m"], r["seed"]))
    res = Result(rows=rows)
    ms = [r["m"] for r in rows]
    slope, ci = loglog_fit(ms, [r["sup_gap"] / r["residual_rms0"] for r in rows], ms, seed=spec.base_seed)
    res.summary = {"slope": slope, "slope_ci95": ci,
                   "median_sup_gap": {m: float(np.median([r["sup_gap"] for r in rows if r["m"] == m]))
                                      for m in spec.m_list}}
    res.check("gap_t0", all(r["gap_t0"] == 0.0 for r in rows))
    res.check("gap_shrinks", slope < 0, f"slope {slope:.3f}")
    return res


COMMANDS = {
    "grad-check": cmd_grad_check,
    "flow": cmd_flow,
    "drift-scan": cmd_drift_scan,
    "depth-scan": cmd_depth_scan,
    "limit-gram": cmd_limit_gram,
    "nth-check": cmd_nth_check,
    "kernel-regression": cmd_kernel_regression,
}
