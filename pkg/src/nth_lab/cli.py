"""``nth-lab`` command-line harness.

    nth-lab <command> --config <path> [--out <dir>] [--threads N] [--heavy]

The config is one JSON document (unknown keys are rejected).  Every command
writes ``<command>.json`` and, when it produces rows, ``<command>.csv`` into
the output directory.  Both files carry the resolved spec, the seed list and
a build identifier, and contain no timestamps, so identical specs give
byte-identical files.

Exit codes: 0 pass, 2 check failure, 3 numerical failure, 4 config error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import math
import os
import subprocess
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, linalg
from .experiments import COMMANDS, NumericalFailure, Result
from .limitgram import QuadratureError
from .model import Dataset, NetworkConfig, make_dataset

EXIT_PASS, EXIT_CHECK, EXIT_NUMERIC, EXIT_CONFIG = 0, 2, 3, 4
SEED_ENV = "NTH_LAB_SEED"


class SpecError(ValueError):
    """Invalid experiment configuration."""


CONFIG_KEYS = {"d", "m", "L", "c_res", "activation"}


@dataclass
class ExperimentSpec:
    command: str
    config: dict = field(default_factory=lambda: {"d": 4, "m": 512, "L": 4})
    dataset: dict = field(default_factory=lambda: {"generated": {"seed": 0, "n": 8}})
    m_list: list = None
    L_list: list = None
    T: float = 5.0
    step: float | None = None
    scheme: str = "rk4"
    seeds: list = field(default_factory=lambda: [0])
    base_seed: int = 0
    output_dir: str = "out"
    # command-specific knobs
    delta: float = 1e-3
    checkpoints: int = 5
    probes: int = 200
    nodes: int = 60
    m_probe: int = 2048
    replicates: int = 32
    heavy_m_list: list = field(default_factory=lambda: [4096])
    zero_residual: bool = False
    fault_injection: dict | None = None
    # set from the command line, not the file
    threads: int = field(default=1, metadata={"runtime": True})
    heavy: bool = field(default=False, metadata={"runtime": True})

    def __post_init__(self):
        if self.command not in COMMANDS:
            raise SpecError(f"unknown command {self.command!r}; choose from {sorted(COMMANDS)}")
        if not isinstance(self.config, dict) or set(self.config) - CONFIG_KEYS:
            raise SpecError(f"config accepts only {sorted(CONFIG_KEYS)}")
        try:
            self.network = NetworkConfig(**self.config)
        except (TypeError, ValueError) as exc:
            raise SpecError(f"bad network config: {exc}") from None
        if self.m_list is None:
            self.m_list = [self.network.m]
        if self.L_list is None:
            self.L_list = [self.network.L]
        for name in ("m_list", "L_list", "seeds"):
            vals = getattr(self, name)
            if not isinstance(vals, list) or not vals or not all(isinstance(v, int) for v in vals):
                raise SpecError(f"{name} must be a nonempty list of integers")
        if len(set(self.seeds)) != len(self.seeds):
            raise SpecError("seeds must be distinct")
        if not isinstance(self.base_seed, int) or min(self.seeds) + self.base_seed < 0:
            raise SpecError("seeds (after base_seed) must be non-negative integers")
        if min(self.m_list) < 1 or min(self.L_list) < 2:
            raise SpecError("widths must be positive and depths at least 2")
        if not (isinstance(self.T, (int, float)) and self.T > 0):
            raise SpecError("T must be positive")
        if self.step is not None and not self.step > 0:
            raise SpecError("step must be positive")
        if self.scheme not in ("euler", "rk4"):
            raise SpecError(f"unknown scheme {self.scheme!r}")
        if not self.delta > 0:
            raise SpecError("delta must be positive")
        if self.command == "drift-scan" and len(self.m_list) < 4:
            raise SpecError("drift-scan needs at least 4 widths in m_list")
        if self.command == "depth-scan" and len(self.L_list) < 4:
            raise SpecError("depth-scan needs at least 4 depths in L_list")
        if self.fault_injection is not None:
            if set(self.fault_injection) != {"block", "index"}:
                raise SpecError("fault_injection needs exactly 'block' and 'index'")
        self._check_dataset()

    def _check_dataset(self):
        ds = self.dataset
        if not isinstance(ds, dict) or len(ds) != 1 or next(iter(ds)) not in ("generated", "file"):
            raise SpecError("dataset must be {'generated': {...}} or {'file': path}")
        if "generated" in ds:
            g = ds["generated"]
            if not isinstance(g, dict) or set(g) - {"seed", "n", "d"} or "n" not in g:
                raise SpecError("generated dataset takes keys seed, n and optionally d")
            if g.get("d", self.network.d) != self.network.d:
                raise SpecError("dataset d differs from config d")

    # -- derived values ----------------------------------------------------------------------

    @property
    def init_seeds(self) -> list:
        return [self.base_seed + s for s in self.seeds]

    @property
    def fault(self):
        if self.fault_injection is None:
            return None
        return self.fault_injection["block"], int(self.fault_injection["index"])

    def load_dataset(self, offset: int = 0) -> Dataset:
        ds = self.dataset
        try:
            if "generated" in ds:
                g = ds["generated"]
                return make_dataset(int(g["n"]), self.network.d, int(g.get("seed", 0)) + offset)
            data = np.loadtxt(ds["file"], delimiter=",", ndmin=2)
            if data.shape[1] != self.network.d + 1:
                raise SpecError(f"dataset file needs {self.network.d + 1} columns (inputs then label)")
            return Dataset(data[:, :-1], data[:, -1])
        except (OSError, ValueError) as exc:
            raise SpecError(f"dataset: {exc}") from None

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in dataclasses.fields(self) if not f.metadata.get("runtime")}

    @classmethod
    def from_dict(cls, raw: dict, **runtime) -> "ExperimentSpec":
        if not isinstance(raw, dict):
            raise SpecError("config must be a JSON object")
        known = {f.name for f in dataclasses.fields(cls) if not f.metadata.get("runtime")}
        unknown = set(raw) - known
        if unknown:
            raise SpecError(f"unknown keys {sorted(unknown)}")
        if "command" not in raw:
            raise SpecError("missing key 'command'")
        try:
            return cls(**raw, **runtime)
        except TypeError as exc:
            raise SpecError(str(exc)) from None


def load_spec(path, command: str | None = None, **runtime) -> ExperimentSpec:
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise SpecError(f"cannot read config {path}: {exc}") from None
    if command is not None:
        if raw.get("command", command) != command:
            raise SpecError(f"config is for {raw['command']!r}, not {command!r}")
        raw = dict(raw, command=command)
    env = os.environ.get(SEED_ENV)
    if env is not None:
        try:
            raw = dict(raw, base_seed=int(env))
        except ValueError:
            raise SpecError(f"{SEED_ENV} must be an integer, got {env!r}") from None
    return ExperimentSpec.from_dict(raw, **runtime)


# -- output ----------------------------------------------------------------------------------


def build_id() -> str:
    """``git describe`` of the source tree, or the package version outside a checkout."""
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=Path(__file__).resolve().parent, capture_output=True, text=True, timeout=10,
        )
        if out.returncode == 0 and out.stdout.strip():
            return f"nth-lab-{__version__}-{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return f"nth-lab-{__version__}"


def to_jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj


def format_cell(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return format(v, ".17g") if math.isfinite(v) else ("nan" if v != v else ("inf" if v > 0 else "-inf"))
    return str(v)


def render_csv(rows: list, meta: dict) -> str:
    """RFC-4180 body preceded by ``#`` lines carrying the metadata."""
    buf = io.StringIO()
    for key in ("build", "seeds", "spec"):
        buf.write(f"# {key}: {json.dumps(to_jsonable(meta[key]), sort_keys=True)}\r\n")
    writer = csv.writer(buf, lineterminator="\r\n")
    header = list(rows[0])
    writer.writerow(header)
    for row in rows:
        writer.writerow([format_cell(row[h]) for h in header])
    return buf.getvalue()


def render_json(result: Result, meta: dict) -> str:
    doc = dict(meta)
    doc["passed"] = result.passed
    doc["checks"] = [dataclasses.asdict(c) for c in result.checks]
    doc["summary"] = result.summary
    return json.dumps(to_jsonable(doc), sort_keys=True, indent=2) + "\n"


def write_outputs(spec: ExperimentSpec, result: Result, out_dir) -> list:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    meta = {"build": build_id(), "seeds": spec.init_seeds, "spec": spec.to_dict(), "command": spec.command}
    paths = []
    if result.rows:
        p = out / f"{spec.command}.csv"
        p.write_bytes(render_csv(result.rows, meta).encode())
        paths.append(p)
    p = out / f"{spec.command}.json"
    p.write_bytes(render_json(result, meta).encode())
    paths.append(p)
    return paths


def dump_failure(spec: ExperimentSpec, exc: NumericalFailure, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if exc.state is not None:
        np.savez(out / f"{spec.command}-last-state.npz", W1=exc.state.W1, W=exc.state.W, a=exc.state.a)
    doc = {"build": build_id(), "spec": spec.to_dict(), "error": str(exc), "t": exc.t}
    p = out / f"{spec.command}-failure.json"
    p.write_text(json.dumps(to_jsonable(doc), sort_keys=True, indent=2) + "\n")
    return p


def run(spec: ExperimentSpec) -> Result:
    return COMMANDS[spec.command](spec)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="nth-lab", description=__doc__.split("\n\n")[0])
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", required=True, help="JSON experiment config")
    parser.add_argument("--out", default=None, help="output directory (overrides output_dir)")
    parser.add_argument("--threads", type=int, default=1, help="worker threads for sweep cells")
    parser.add_argument("--heavy", action="store_true", help="add the heavy widths to drift-scan")
    args = parser.parse_args(argv)

    try:
        spec = load_spec(args.config, args.command, threads=max(1, args.threads), heavy=args.heavy)
    except SpecError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out_dir = args.out or spec.output_dir
    try:
        result = run(spec)
    except SpecError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalFailure as exc:
        p = dump_failure(spec, exc, out_dir)
        print(f"numerical failure: {exc} (state dumped to {p.parent})", file=sys.stderr)
        return EXIT_NUMERIC
    except (FloatingPointError, QuadratureError, linalg.NotPSDError, linalg.ConvergenceError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC

    for path in write_outputs(spec, result, out_dir):
        print(f"wrote {path}")
    for c in result.checks:
        print(f"{'PASS' if c.passed else 'FAIL'} {spec.command}:{c.name} {c.detail}".rstrip())
    return EXIT_PASS if result.passed else EXIT_CHECK


if __name__ == "__main__":
    sys.exit(main())
