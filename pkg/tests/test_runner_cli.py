import hashlib
import json

import numpy as np
import pytest

from vnslab.cli import main, scenario_config
from vnslab.diagnostics import read_timeseries
from vnslab.errors import ConfigError, NumericalError
from vnslab.runner import RunConfig, replay, run

SMALL = {
    "fluid": {"resolution": 16, "dt": 0.01, "u0_amplitude": 0.02},
    "particles": {"count": 300, "seed": 4},
    "run": {"horizon": 0.2},
    "monitors": {"nq_every": 5},
    "metrics": {"hminus1_every": 5},
}


def _cfg(**over):
    data = json.loads(json.dumps(SMALL))
    for sec, vals in over.items():
        data.setdefault(sec, {}).update(vals)
    return RunConfig.from_dict(data)


def _sha(p):
    return hashlib.sha256(p.read_bytes()).hexdigest()


def test_deterministic_rerun(tmp_path):
    cfg = _cfg()
    run(cfg, tmp_path / "a")
    run(cfg, tmp_path / "b")
    for name in ("timeseries.csv", "ledger.csv", "initial.npz", "fields/u_final_c0.bin", "hminus1.csv"):
        assert _sha(tmp_path / "a" / name) == _sha(tmp_path / "b" / name)


def test_artifacts_and_manifest(tmp_path):
    man = run(_cfg(), tmp_path)
    assert man.status == "ok"
    data = json.loads((tmp_path / "manifest.json").read_text())
    assert data["config_hash"] == _cfg().hash()
    for f in data["files"]:
        assert _sha(tmp_path / f["path"]) == f["sha256"]
    summary = json.loads((tmp_path / "summary.json").read_text(), parse_constant=pytest.fail)
    assert summary["smallness"]["t_star"] == "inf"
    ts = read_timeseries(tmp_path / "timeseries.csv")
    assert np.all(ts["mass_alive"] + ts["mass_absorbed"] == 1.0)


def test_null_config(tmp_path):
    cfg = _cfg(fluid={"u0_amplitude": 0.0}, initial_data={"v_radius": 0.0})
    run(cfg, tmp_path)
    ts = read_timeseries(tmp_path / "timeseries.csv")
    for c in ("E", "D", "u_L2", "grad_u_Linf", "mass_absorbed"):
        assert np.all(ts[c] == 0.0)
    assert (tmp_path / "ledger.csv").read_text().count("\n") == 1


def test_config_errors(tmp_path):
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"bogus": {}})
    with pytest.raises(ConfigError):
        _cfg(run={"horizon": 0.0})
    with pytest.raises(ConfigError):
        _cfg(initial_data={"center": [0.9, 0.5], "radius": 0.2})
    with pytest.raises(ConfigError):
        _cfg(domain={"dim": 3})
    bad = tmp_path / "bad.toml"
    bad.write_text("this is = = not toml")
    with pytest.raises(ConfigError):
        RunConfig.load(bad)


def test_toml_and_json_load_agree(tmp_path):
    t = tmp_path / "c.toml"
    t.write_text('[fluid]\nresolution = 16\ndt = 0.01\n\n[particles]\ncount = 300\nseed = 4\n')
    j = tmp_path / "c.json"
    j.write_text(json.dumps({"fluid": {"resolution": 16, "dt": 0.01}, "particles": {"count": 300, "seed": 4}}))
    assert RunConfig.load(t).hash() == RunConfig.load(j).hash()


def test_numerical_failure_is_recorded(tmp_path):
    cfg = _cfg(fluid={"solver": "cg", "poisson_maxiter": 1, "u0_amplitude": 0.5})
    with pytest.raises(NumericalError):
        run(cfg, tmp_path)
    data = json.loads((tmp_path / "manifest.json").read_text())
    assert data["status"] == "failed" and data["error"]


def test_cli_exit_codes(tmp_path, capsys):
    good = tmp_path / "good.json"
    good.write_text(json.dumps(SMALL))
    assert main(["run", "--config", str(good), "--out", str(tmp_path / "g")]) == 0
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"run": {"horizon": -1}}))
    assert main(["run", "--config", str(bad)]) == 2
    num = tmp_path / "num.json"
    num.write_text(json.dumps(dict(SMALL, fluid={"resolution": 16, "dt": 0.01, "solver": "cg",
                                                 "poisson_maxiter": 1, "u0_amplitude": 0.5})))
    assert main(["run", "--config", str(num), "--out", str(tmp_path / "n")]) == 3
    assert main(["scenario", "confinement", "--alpha", "0.5"]) == 2
    assert main(["replay", "--manifest", str(tmp_path / "missing.json"), "--task", "xinfty"]) == 2
    nosnap = tmp_path / "nosnap.json"
    nosnap.write_text(json.dumps(dict(SMALL, run={"horizon": 0.1, "snapshot_stride": 0})))
    assert main(["run", "--config", str(nosnap), "--out", str(tmp_path / "s")]) == 0
    assert main(["replay", "--manifest", str(tmp_path / "s" / "manifest.json"), "--task", "xinfty"]) == 2


def test_scenario_config_defaults():
    cfg = scenario_config("mixed", alpha=0.3, out="x")
    assert cfg["scenario"]["alpha"] == 0.3 and cfg["fluid"]["u0_amplitude"] == 0.02
    assert cfg.scenario().derived["delta"] == pytest.approx(0.025)


def test_replay_tasks(tmp_path):
    cfg = RunConfig.from_dict({
        "scenario": {"kind": "confinement", "epsilon": 0.2, "R": 0.1},
        "fluid": {"resolution": 16, "dt": 0.01, "u0_amplitude": 0.02},
        "particles": {"count": 2000, "seed": 1},
        "run": {"horizon": 0.5, "snapshot_stride": 1},
        "metrics": {"profile_resolution": 8, "n_v": 8, "representation_time": 0.2},
    })
    man = run(cfg, tmp_path)
    assert json.loads((tmp_path / "scenario_report.json").read_text())["pass"]
    mp = tmp_path / "manifest.json"
    x = replay(mp, "xinfty")
    assert x["survival_fraction"] == 1.0
    assert (tmp_path / "replay" / "xinfty.csv").exists()
    r = replay(mp, "representation-check")
    assert r["agree"]
    p = replay(mp, "profiles")
    assert p["mass_pushforward"] == pytest.approx(1.0)
    assert main(["replay", "--manifest", str(mp), "--task", "xinfty"]) == 0
    # tampering is detected
    (tmp_path / "timeseries.csv").write_text("t\n0\n")
    assert main(["replay", "--manifest", str(mp), "--task", "xinfty"]) == 2
    assert man.status == "ok"
