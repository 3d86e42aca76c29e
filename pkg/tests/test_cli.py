import json

import numpy as np
import pytest

from nth_lab.cli import (
    EXIT_CHECK,
    EXIT_CONFIG,
    EXIT_NUMERIC,
    EXIT_PASS,
    SEED_ENV,
    ExperimentSpec,
    SpecError,
    format_cell,
    main,
)


def _run(tmp_path, raw, *extra, name="cfg.json"):
    cfg = tmp_path / name
    cfg.write_text(json.dumps(raw))
    out = tmp_path / "out"
    code = main([raw["command"], "--config", str(cfg), "--out", str(out), *extra])
    return code, out


GRAD = {"command": "grad-check", "config": {"d": 4, "m": 8, "L": 3},
        "dataset": {"generated": {"seed": 0, "n": 3}}, "seeds": [0], "probes": 40}
FLOW = {"command": "flow", "config": {"d": 4, "m": 32, "L": 3}, "T": 0.5}


@pytest.mark.parametrize("raw", [
    dict(GRAD, colour="blue"),
    dict(GRAD, seeds=[-1]),
    dict(FLOW, T=-1.0),
    dict(FLOW, config={"d": 4, "m": 32, "L": 3, "c_res": 1.5}),
    {"command": "drift-scan", "config": {"d": 4, "m": 32, "L": 3}, "m_list": [32, 64]},
])
def test_bad_configs_exit_with_config_code(tmp_path, raw):
    code, out = _run(tmp_path, raw)
    assert code == EXIT_CONFIG
    assert not out.exists()


def test_unreadable_config(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["flow", "--config", str(bad)]) == EXIT_CONFIG


def test_spec_round_trip_and_unknown_keys():
    spec = ExperimentSpec.from_dict(dict(FLOW))
    assert ExperimentSpec.from_dict(spec.to_dict()) == spec
    with pytest.raises(SpecError):
        ExperimentSpec.from_dict(dict(FLOW, threads=4))


def test_csv_and_json_layout(tmp_path):
    code, out = _run(tmp_path, GRAD)
    assert code == EXIT_PASS
    raw = (out / "grad-check.csv").read_bytes()
    lines = raw.decode().split("\r\n")
    assert b"\n" not in raw.replace(b"\r\n", b"")
    assert [l.split(":")[0] for l in lines[:3]] == ["# build", "# seeds", "# spec"]
    header = lines[3].split(",")
    first = dict(zip(header, lines[4].split(",")))
    err = first["max_rel_error"]
    assert float(format_cell(float(err))) == float(err)
    doc = json.loads((out / "grad-check.json").read_text())
    assert doc["spec"]["command"] == "grad-check"
    assert doc["build"].startswith("nth-lab-")
    assert doc["passed"] is True


def test_format_cell_round_trips():
    for v in (0.1, 1 / 3, 1e-300, -2.5e17):
        assert float(format_cell(v)) == v
    assert format_cell(True) == "true" and format_cell(np.int64(3)) == "3"
    assert format_cell(float("inf")) == "inf"


def test_seed_env_override_is_recorded(tmp_path, monkeypatch):
    monkeypatch.setenv(SEED_ENV, "17")
    code, out = _run(tmp_path, GRAD)
    assert code == EXIT_PASS
    doc = json.loads((out / "grad-check.json").read_text())
    assert doc["spec"]["base_seed"] == 17 and doc["seeds"] == [17]
    monkeypatch.setenv(SEED_ENV, "seventeen")
    assert _run(tmp_path, GRAD)[0] == EXIT_CONFIG


def test_fault_injection_names_block(tmp_path, capsys):
    raw = dict(GRAD, fault_injection={"block": "W3", "index": 2})
    code, out = _run(tmp_path, raw)
    assert code == EXIT_CHECK
    doc = json.loads((out / "grad-check.json").read_text())
    failed = [c for c in doc["checks"] if not c["passed"]]
    assert failed and "W3" in failed[0]["detail"]
    assert "FAIL" in capsys.readouterr().out


def test_identity_activation_grad_check(tmp_path):
    raw = dict(GRAD, config={"d": 4, "m": 8, "L": 3, "activation": "identity"})
    assert _run(tmp_path, raw)[0] == EXIT_PASS


def test_zero_residual_flow_stays_at_zero(tmp_path):
    code, out = _run(tmp_path, dict(FLOW, zero_residual=True, config={"d": 4, "m": 128, "L": 3}))
    assert code == EXIT_PASS
    lines = (out / "flow.csv").read_text().splitlines()[3:]
    header = lines[0].split(",")
    losses = [float(dict(zip(header, l.split(",")))["loss"]) for l in lines[1:]]
    assert max(losses) == 0.0


def test_blow_up_dumps_state(tmp_path, capsys):
    raw = dict(FLOW, T=1e6, step=1e4, scheme="euler")
    code, out = _run(tmp_path, raw)
    assert code == EXIT_NUMERIC
    assert "numerical failure" in capsys.readouterr().err
    state = np.load(out / "flow-last-state.npz")
    assert state["W1"].shape == (32, 4)
    doc = json.loads((out / "flow-failure.json").read_text())
    assert doc["t"] > 0


def test_threads_do_not_change_output(tmp_path):
    raw = {"command": "depth-scan", "config": {"d": 4, "m": 64, "L": 2}, "L_list": [2, 3, 4, 5], "seeds": [0, 1]}
    cfg = tmp_path / "depth.json"
    cfg.write_text(json.dumps(raw))
    outs = []
    for threads in ("1", "3"):
        out = tmp_path / f"out{threads}"
        main(["depth-scan", "--config", str(cfg), "--out", str(out), "--threads", threads])
        outs.append({p.name: p.read_bytes() for p in out.iterdir()})
    assert outs[0] == outs[1] and outs[0]
