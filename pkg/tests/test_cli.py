import json
import subprocess
import sys

import pytest

from ipsavg import config as cfgmod
from ipsavg.cli import EXIT_CONFIG, EXIT_FAIL, EXIT_NUMERIC, EXIT_PASS, main


def write(tmp_path, cfg, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return str(path)


@pytest.mark.parametrize("name", cfgmod.shipped_configs())
def test_shipped_configs_valid(name):
    assert cfgmod.validate(cfgmod.load(name)) == []


def test_every_experiment_has_a_shipped_config():
    kinds = {cfgmod.load(n)["experiment"] for n in cfgmod.shipped_configs()}
    assert kinds == set(cfgmod.EXPERIMENTS)


def test_validate_n_exceeds_m():
    cfg = cfgmod.load("averaging-sweep")
    cfg["truncation"]["N"] = 5
    assert "truncation.N: N=5 exceeds M=3" in cfgmod.validate(cfg)


def test_validate_epsilon():
    cfg = cfgmod.load("averaging-sweep")
    cfg["sweep"]["epsilon"][2] = 0.0
    assert "sweep.epsilon[2]: epsilon must be positive" in cfgmod.validate(cfg)
    cfg = cfgmod.load("mc-compare")
    cfg["env"]["epsilon"] = 0
    assert "env.epsilon: epsilon must be positive" in cfgmod.validate(cfg)


def test_validate_a_plus_density():
    cfg = cfgmod.load("delta-sweep")
    cfg["model"]["a_plus"] = {"shape": "gaussian", "amplitude": 1.0, "range": 0.2}
    assert any("a_plus must be a probability density" in v for v in cfgmod.validate(cfg))


def test_validate_schema_paths():
    cfg = cfgmod.load("delta-sweep")
    cfg["model"]["kappa"]["shape"] = "cauchy"
    cfg["sweep"]["delta"] = [0.1, -0.1]
    del cfg["domain"]["side"]
    problems = cfgmod.validate(cfg)
    assert any(p.startswith("domain:") for p in problems)
    assert any(p.startswith("model.kappa.shape:") for p in problems)
    cfg = cfgmod.load("delta-sweep")
    cfg["sweep"]["delta"] = [0.1, -0.1]
    assert cfgmod.validate(cfg) == ["sweep.delta[1]: delta must be >= 0"]
    assert cfgmod.validate({"experiment": "nope"})


def test_validate_missing_block():
    cfg = cfgmod.load("averaging-sweep")
    del cfg["env"]
    assert "env: required for experiment averaging-sweep" in cfgmod.validate(cfg)


def test_range_warning():
    cfg = cfgmod.load("delta-sweep")
    cfg["model"]["a_minus"]["range"] = 0.8
    assert cfgmod.warnings(cfg) == ["model.a_minus: range exceeds half the torus side; periodization is visible"]
    assert cfgmod.warnings(cfgmod.load("delta-sweep")) == []


def test_hash_ignores_output_only():
    cfg = cfgmod.load("delta-sweep")
    other = dict(cfg, output="/elsewhere")
    assert cfgmod.config_hash(cfg) == cfgmod.config_hash(other)
    assert cfgmod.config_hash(cfg) != cfgmod.config_hash(dict(cfg, seed=1))


def test_cli_validate_exit_codes(tmp_path, capsys):
    assert main(["validate", "delta-sweep"]) == EXIT_PASS
    assert capsys.readouterr().out.strip() == "ok"
    cfg = cfgmod.load("averaging-sweep")
    cfg["truncation"]["N"] = 5
    assert main(["validate", write(tmp_path, cfg)]) == EXIT_CONFIG
    assert "truncation.N" in capsys.readouterr().out
    assert main(["validate", "no-such-config"]) == EXIT_CONFIG
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["validate", str(bad)]) == EXIT_CONFIG


def test_cli_run_config_error(tmp_path, capsys):
    cfg = cfgmod.load("averaging-sweep")
    cfg["truncation"]["N"] = 5
    assert main(["run", write(tmp_path, cfg), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    assert "truncation.N: N=5 exceeds M=3" in capsys.readouterr().err
    assert main(["run", "delta-sweep", "--threads", "0"]) == EXIT_CONFIG


def test_cli_list(capsys):
    assert main(["list"]) == EXIT_PASS
    assert capsys.readouterr().out.split() == cfgmod.shipped_configs()


def test_run_writes_summary_and_headers(tmp_path, capsys):
    out = tmp_path / "delta"
    assert main(["run", "delta-sweep", "--out", str(out)]) == EXIT_PASS
    summary = json.loads((out / "summary.json").read_text())
    assert summary["pass"] is True
    assert summary["reproducibility"]["config_sha256"] == cfgmod.config_hash(cfgmod.load("delta-sweep"))
    assert summary["reproducibility"]["seed"] == 0
    assert summary["wall_time_s"] > 0
    for name in summary["files"]:
        head = (out / name).read_text().splitlines()[:4]
        assert head[1] == "# experiment=delta-sweep"
        assert head[2] == f"# config_sha256={summary['reproducibility']['config_sha256']}"
    assert "[PASS]" in capsys.readouterr().out


def test_verify_round_trip_and_tamper(tmp_path):
    cfg = cfgmod.load("resolvent-check")
    path = write(tmp_path, cfg)
    out = str(tmp_path / "r")
    assert main(["run", path, "--out", out]) == EXIT_PASS
    assert main(["run", path, "--out", out, "--verify"]) == EXIT_PASS
    cfg["sweep"]["t_grid"] = [0.5]
    assert main(["run", write(tmp_path, cfg, "tampered.json"), "--out", out, "--verify"]) == EXIT_FAIL
    assert main(["run", path, "--out", str(tmp_path / "empty"), "--verify"]) == EXIT_CONFIG


def test_verify_detects_edited_output(tmp_path):
    out = tmp_path / "d"
    assert main(["run", "delta-sweep", "--out", str(out)]) == EXIT_PASS
    csv_path = out / "delta.csv"
    csv_path.write_text(csv_path.read_text().replace("e-", "E-", 1))
    assert main(["run", "delta-sweep", "--out", str(out), "--verify"]) == EXIT_FAIL


def test_criterion_failure_exit_code(tmp_path):
    cfg = cfgmod.load("delta-sweep")
    cfg["criteria"]["max_final_error"] = 1e-12
    assert main(["run", write(tmp_path, cfg), "--out", str(tmp_path / "o")]) == EXIT_FAIL


def test_numeric_error_exit_code(tmp_path, monkeypatch):
    from ipsavg import experiments
    from ipsavg.truncated import EvolveError

    def boom(ctx):
        raise EvolveError("uniformization term cap reached", 0.5)

    monkeypatch.setitem(experiments.RUNNERS, "delta-sweep", boom)
    assert main(["run", "delta-sweep", "--out", str(tmp_path / "o")]) == EXIT_NUMERIC


def test_default_output_dir(tmp_path, monkeypatch):
    monkeypatch.setenv("IPSAVG_OUT", str(tmp_path / "base"))
    assert main(["run", "delta-sweep"]) == EXIT_PASS
    assert (tmp_path / "base" / "delta-sweep" / "summary.json").exists()
    cfg = cfgmod.load("lyapunov")
    assert main(["run", write(tmp_path, cfg, "my-lyap.json")]) == EXIT_PASS
    assert (tmp_path / "base" / "my-lyap" / "summary.json").exists()


def test_console_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "ipsavg.cli", "validate", "lyapunov"], capture_output=True, text=True)
    assert res.returncode == 0 and res.stdout.strip() == "ok"
