import json
import subprocess
import sys

import numpy as np
import pytest

from seqint.cli import EXIT_INPUT, EXIT_NUMERIC, EXIT_OK, main

FAST = ["--B", "100", "--steps", "2"]


@pytest.fixture
def csv_file(tmp_path):
    rng = np.random.default_rng(0)
    n = 120
    x = rng.standard_normal((n, 3))
    a = (rng.random(n) < 0.5).astype(int)
    y = x[:, 0] + a * (1.2 * x[:, 2]) + rng.standard_normal(n)
    lines = ["y,a,ps,u,v,w"] + [f"{y[i]},{a[i]},0.5,{x[i, 0]},{x[i, 1]},{x[i, 2]}" for i in range(n)]
    path = tmp_path / "trial.csv"
    path.write_text("\n".join(lines) + "\n")
    return path


def test_test_command_on_csv(csv_file, tmp_path, capsys):
    out = tmp_path / "rep.json"
    code = main(["test", "--data", str(csv_file), "--propensity", "ps", "--out", str(out)] + FAST)
    assert code == EXIT_OK
    printed = capsys.readouterr().out
    assert printed.splitlines()[0].split() == ["step", "covariate", "coef", "m_hat", "r_hat", "p"]
    assert printed.splitlines()[1].split()[1] == "w"
    doc = json.loads(out.read_text())
    assert doc["result"]["steps"][0]["name"] == "w"
    assert (tmp_path / "rep.csv").exists()


def test_rct_without_propensity_exits_2(csv_file, tmp_path, capsys):
    code = main(["test", "--data", str(csv_file), "--propensity", "none", "--out", str(tmp_path / "r.json")])
    assert code == EXIT_INPUT
    assert "propensity" in capsys.readouterr().err
    assert not (tmp_path / "r.json").exists()


def test_bad_inputs_exit_2(tmp_path, csv_file):
    assert main(["test", "--data", str(tmp_path / "none.csv"), "--propensity", "ps"]) == EXIT_INPUT
    assert main(["test", "--data", str(csv_file), "--propensity", "ps", "--outcome", "zz"]) == EXIT_INPUT
    cfg = tmp_path / "c.yaml"
    cfg.write_text("scenario: {n: 100, p: 3, covariance: equicorrelated, rho: -0.9}\nreps: 100\n")
    assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "s.json")]) == EXIT_INPUT
    assert not (tmp_path / "s.json").exists()


def test_numerical_failure_exits_3(tmp_path):
    # a 10-row design with 5 covariates leaves the F test no residual df
    code = main(["simulate", "--scenario", "N1", "--method", "lrt", "--reps", "100", "--out",
                 str(tmp_path / "s.json")] + ["--config", str(_cfg(tmp_path, "n: 10\np: 5\n"))])
    assert code == EXIT_NUMERIC


def _cfg(tmp_path, text):
    path = tmp_path / "extra.yaml"
    path.write_text(text)
    return path


def test_simulate_writes_report_and_table(tmp_path, capsys):
    out = tmp_path / "sim.csv"
    code = main(["simulate", "--scenario", "S1", "--methods", "null,bonf,lrt", "--reps", "100", "--format", "csv",
                 "--out", str(out), "--config", str(_cfg(tmp_path, "n: 80\np: 4\nb: 1.0\nM_null: 1000\n"))] + FAST)
    assert code == EXIT_OK
    rows = out.read_text().splitlines()
    assert rows[0].startswith("method,step,rate,se")
    assert len(rows) == 1 + 3 * 2
    doc = json.loads((tmp_path / "sim.json").read_text())
    assert [m["label"] for m in doc["result"]["methods"]] == ["null", "bonf", "lrt"]
    assert "null" in capsys.readouterr().out


def test_seed_flag_and_env(tmp_path, monkeypatch):
    args = ["test", "--scenario", "N1", "--method", "null"] + FAST
    cfg = _cfg(tmp_path, "n: 60\np: 3\nM_null: 500\n")
    monkeypatch.setenv("SEQINT_SEED", "5")
    main(args + ["--config", str(cfg), "--out", str(tmp_path / "env.json")])
    monkeypatch.delenv("SEQINT_SEED")
    main(args + ["--config", str(cfg), "--out", str(tmp_path / "flag.json"), "--seed", "5"])
    main(args + ["--config", str(cfg), "--out", str(tmp_path / "other.json"), "--seed", "6"])
    assert (tmp_path / "env.json").read_bytes() == (tmp_path / "flag.json").read_bytes()
    assert (tmp_path / "env.json").read_bytes() != (tmp_path / "other.json").read_bytes()


def test_entropy_seed_is_recorded(tmp_path):
    cfg = _cfg(tmp_path, "n: 60\np: 3\nM_null: 500\n")
    main(["test", "--scenario", "N1", "--method", "null", "--entropy-seed", "--config", str(cfg),
          "--out", str(tmp_path / "e.json")] + FAST)
    doc = json.loads((tmp_path / "e.json").read_text())
    assert doc["provenance"]["seed"] == doc["provenance"]["config"]["seed"]


def test_timestamps_opt_in(tmp_path):
    cfg = _cfg(tmp_path, "n: 60\np: 3\nM_null: 500\n")
    base = ["test", "--scenario", "N1", "--method", "null", "--config", str(cfg)] + FAST
    main(base + ["--out", str(tmp_path / "a.json")])
    main(base + ["--out", str(tmp_path / "b.json"), "--timestamps"])
    assert "started" not in json.loads((tmp_path / "a.json").read_text())["provenance"]
    assert "started" in json.loads((tmp_path / "b.json").read_text())["provenance"]


def test_fixed_steps(tmp_path):
    cfg = _cfg(tmp_path, "n: 80\np: 4\nM_null: 500\n")
    main(["test", "--scenario", "N1", "--method", "null", "--fixed-steps", "3", "--config", str(cfg),
          "--out", str(tmp_path / "f.json")] + FAST)
    assert len(json.loads((tmp_path / "f.json").read_text())["result"]["steps"]) == 3


def test_console_script_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "seqint.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "simulate" in res.stdout
    res = subprocess.run([sys.executable, "-m", "seqint.cli", "test", "--method", "bogus"], capture_output=True)
    assert res.returncode == 2
