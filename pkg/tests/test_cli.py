import csv
import json
import math

import numpy as np
import pytest

from lcmi.cli import DECISION_FIELDS, EXIT_ACCEPT, EXIT_EMPTY, EXIT_ERROR, EXIT_REJECT, main
from lcmi.critical_values import SimDraws
from lcmi.inference import TestSpec, linear_ci_bound
from lcmi.moments import NormalModel, ObservationSet, build_normal_model, write_observations


def _one_moment(tmp_path, t_stat=3.0, n=100):
    """One moment whose studentized mean is exactly ``t_stat``."""
    e = np.tile([-1.0, 1.0], n // 2)
    e = e / e.std(ddof=1)
    y = e + t_stat / np.sqrt(n)
    path = tmp_path / "one.csv"
    write_observations(path, ObservationSet(y[:, None], np.zeros((n, 1, 0)), np.zeros((n, 0))))
    return path


def _linear(tmp_path, n=300, seed=0):
    rng = np.random.default_rng(seed)
    z = rng.normal(size=(n, 1))
    y = np.column_stack([rng.normal(size=n) - 1, rng.normal(size=n) - 1, rng.normal(size=n)])
    x = np.zeros((n, 3, 1))
    x[:, 0, 0], x[:, 1, 0], x[:, 2, 0] = 1.0, -1.0, 0.5
    path = tmp_path / "lin.csv"
    obs = ObservationSet(y, x, z)
    write_observations(path, obs)
    return path, obs


def test_large_mean_rejects_then_accepts_at_tiny_level(tmp_path):
    data = _one_moment(tmp_path)
    out = tmp_path / "a"
    assert main(["test", "--data", str(data), "--method", "cond", "--out-dir", str(out)]) == EXIT_REJECT
    out2 = tmp_path / "b"
    assert main(["test", "--data", str(data), "--method", "cond", "--alpha", "1e-6", "--out-dir", str(out2)]) == EXIT_ACCEPT
    rec = json.loads((out2 / "decision.json").read_text())
    assert rec["statistic"] == pytest.approx(3.0, rel=1e-9)
    assert rec["critical_value"] == pytest.approx(4.753424308822899, abs=1e-6)


def test_decision_record_schema(tmp_path):
    data = _one_moment(tmp_path)
    out = tmp_path / "r"
    main(["test", "--data", str(data), "--method", "lf", "--out-dir", str(out)])
    rec = json.loads((out / "decision.json").read_text())
    assert sorted(rec) == sorted(DECISION_FIELDS)
    assert (rec["n"], rec["k"], rec["p"], rec["method"], rec["lp_status"]) == (100, 1, 0, "lf", "optimal")
    rows = list(csv.reader((out / "decision.csv").open()))
    assert rows[0] == list(DECISION_FIELDS)
    manifest = json.loads((out / "manifest.json").read_text())
    for key in ("command", "config", "seeds", "version", "wall_clock_seconds", "timings", "outputs"):
        assert key in manifest
    assert manifest["outputs"] == ["decision.csv", "decision.json"]


def test_malformed_csv_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("y_1,z_1\n1,2\n3,oops\n")
    assert main(["test", "--data", str(bad), "--out-dir", str(tmp_path / "o")]) == EXIT_ERROR
    assert "bad.csv:3" in capsys.readouterr().err


def test_config_file_and_flag_override(tmp_path):
    data = _one_moment(tmp_path)
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"data": str(data), "method": "cond", "alpha": 1e-6}))
    assert main(["test", "--config", str(cfg), "--out-dir", str(tmp_path / "x")]) == EXIT_ACCEPT
    assert main(["test", "--config", str(cfg), "--alpha", "0.05", "--out-dir", str(tmp_path / "y")]) == EXIT_REJECT
    cfg.write_text(json.dumps({"data": str(data), "colour": "red"}))
    assert main(["test", "--config", str(cfg), "--out-dir", str(tmp_path / "z")]) == EXIT_ERROR


def test_lf_interval_matches_lp_bounds(tmp_path):
    data, obs = _linear(tmp_path)
    out = tmp_path / "cs"
    code = main(["confidence-set", "--data", str(data), "--method", "lf", "--grid-lo", "-6", "--grid-hi", "6",
                 "--grid-n", "1201", "--out-dir", str(out)])
    assert code == EXIT_ACCEPT
    summary = json.loads((out / "confidence_set.json").read_text())
    step = 12 / 1200
    assert abs(summary["lower"] - summary["lp_lower"]) <= step + 1e-9
    assert abs(summary["upper"] - summary["lp_upper"]) <= step + 1e-9
    assert summary["lp_lower"] <= summary["lower"] and summary["upper"] <= summary["lp_upper"]
    rows = list(csv.DictReader((out / "grid_records.csv").open()))
    assert len(rows) == 1201
    assert list(rows[0]) == ["beta", "method", "statistic", "critical_value", "reject", "vertex_ok", "v_lo", "v_up"]


def test_empty_set_exit_code(tmp_path, capsys):
    data, _ = _linear(tmp_path)
    code = main(["confidence-set", "--data", str(data), "--method", "lfp", "--grid-lo", "20", "--grid-hi", "30",
                 "--grid-n", "11", "--out-dir", str(tmp_path / "e")])
    assert code == EXIT_EMPTY
    assert "empty" in capsys.readouterr().err


def test_grid_truncation_warning(tmp_path, capsys):
    data, _ = _linear(tmp_path)
    main(["confidence-set", "--data", str(data), "--method", "hybrid", "--grid-lo", "-0.2", "--grid-hi", "0.2",
          "--grid-n", "5", "--out-dir", str(tmp_path / "w")])
    assert "edge of the grid" in capsys.readouterr().err
    summary = json.loads((tmp_path / "w" / "confidence_set.json").read_text())
    assert summary["may_be_truncated"]
    main(["confidence-set", "--data", str(data), "--method", "hybrid", "--grid-lo", "-6", "--grid-hi", "6",
          "--grid-n", "61", "--out-dir", str(tmp_path / "w2")])
    assert "edge of the grid" not in capsys.readouterr().err


def test_estimate_sigma_command(tmp_path):
    data, obs = _linear(tmp_path)
    out = tmp_path / "s"
    assert main(["estimate-sigma", "--data", str(data), "--out-dir", str(out)]) == EXIT_ACCEPT
    s = np.loadtxt(out / "sigma.csv", delimiter=",")
    assert s.shape == (3, 3)
    assert np.array_equal(s, s.T)
    # the written estimate can be fed back to a test
    assert main(["test", "--data", str(data), "--sigma", str(out / "sigma.csv"), "--out-dir",
                 str(tmp_path / "t")]) in (EXIT_ACCEPT, EXIT_REJECT)


def test_rerun_reproduces_outputs(tmp_path):
    data, _ = _linear(tmp_path)
    out = tmp_path / "orig"
    main(["confidence-set", "--data", str(data), "--method", "hybrid", "--grid-lo", "-4", "--grid-hi", "4",
          "--grid-n", "41", "--seed", "7", "--out-dir", str(out)])
    again = tmp_path / "again"
    main(["rerun", str(out / "manifest.json"), "--out-dir", str(again)])
    for name in ("grid_records.csv", "confidence_set.json"):
        assert (out / name).read_bytes() == (again / name).read_bytes()


MC_ARGS = ["--reps", "2", "--threads", "1", "--grid-n", "11"]


def _mc_config(tmp_path):
    cfg = tmp_path / "mc.json"
    cfg.write_text(json.dumps({"n_markets": 100, "chain_length": 2500, "burnout": 500, "lf_sims": 100,
                               "lfp_sims": 200, "idset_n": 100000, "idset_chains": 50}))
    return cfg


def test_monte_carlo_smoke_and_determinism(tmp_path):
    cfg = _mc_config(tmp_path)
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["monte-carlo", "--config", str(cfg), *MC_ARGS, "--out-dir", str(a)]) == EXIT_ACCEPT
    assert main(["monte-carlo", "--config", str(cfg), *MC_ARGS, "--out-dir", str(b)]) == EXIT_ACCEPT
    for name in ("rejection_curves.csv", "excess_length.csv", "size.csv", "identified_set.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    header = next(csv.reader((a / "excess_length.csv").open()))
    assert header == ["n_params", "n_moments", "LFP", "LF", "Conditional", "Hybrid"]
    manifest = json.loads((a / "manifest.json").read_text())
    assert manifest["config"]["reps"] == 2 and manifest["config"]["n_markets"] == 100
    c = tmp_path / "c"
    assert main(["rerun", str(a / "manifest.json"), "--out-dir", str(c)]) == EXIT_ACCEPT
    assert (a / "rejection_curves.csv").read_bytes() == (c / "rejection_curves.csv").read_bytes()


def test_monte_carlo_rejects_unknown_settings(tmp_path):
    cfg = tmp_path / "mc.json"
    cfg.write_text(json.dumps({"replications": 5}))
    assert main(["monte-carlo", "--config", str(cfg), "--out-dir", str(tmp_path / "o")]) == EXIT_ERROR
