import json

import pytest

from dagfl.cli import EXIT_CONFIG, EXIT_FAIL, EXIT_INSEPARABLE, EXIT_OK, main, render_report
from dagfl.config import ConfigError, ExperimentConfig, load_config, parse_overrides, render_config

SMALL = ["iterations=2", "runners=4", "settlement.committee_size=3", "worker.beta=3", "worker.sigma=2",
         "worker.eta=6", "model.hidden=16", "model.epochs=2", "pol.calibration_trials=10", "data.shard_size=60"]


def sets(pairs):
    out = []
    for p in pairs:
        out += ["--set", p]
    return out


def test_defaults_and_aliases():
    cfg = ExperimentConfig()
    assert cfg["iterations"] == 200 and cfg["model.lr"] == 0.05
    assert ExperimentConfig({"framework": "ironforge"}).framework == "dag"
    assert ExperimentConfig({"runners": 5, "profile.cpu": "0.5,1"}).profile_list("cpu") == [0.5, 1, 0.5, 1, 0.5]


@pytest.mark.parametrize("values", [
    {"nope": 1}, {"runners": "many"}, {"runners": 0}, {"framework": "raft"}, {"worker.sigma": 9},
    {"pol.refund_fraction": 1.0}, {"adversary.stealing": 0.6, "adversary.lazy": 0.6}, {"profile.cpu": "fast"},
    {"profile.memory": "0.5"}, {"pol.enabled": "maybe"}, {"data.train_fraction": 1.5},
])
def test_invalid_values_raise(values):
    with pytest.raises(ConfigError):
        ExperimentConfig(values)


def test_ini_roundtrip(tmp_path):
    path = tmp_path / "exp.ini"
    path.write_text("[experiment]\nseed = 4\nframework = google\n\n[worker]\nidle_prob = 0.3\n")
    cfg = load_config(path, {"seed": "5"})
    assert (cfg["seed"], cfg.framework, cfg["worker.idle_prob"]) == (5, "google", 0.3)
    path.write_text(render_config(cfg))
    assert load_config(path).as_dict() == cfg.as_dict()
    path.write_text("[worker]\nspeed = 3\n")
    with pytest.raises(ConfigError):
        load_config(path)
    with pytest.raises(ConfigError):
        parse_overrides(["seed"])


def test_cli_run_and_report(tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["run", "--seed", "0", "--out", str(a)] + sets(SMALL)) == EXIT_OK
    assert main(["run", "--seed", "0", "--out", str(b)] + sets(SMALL + ["framework=google"])) == EXIT_OK
    assert json.loads((a / "summary.json").read_text())["invariants_ok"]
    capsys.readouterr()
    assert main(["report", str(a), str(b), str(tmp_path / "missing"), "--csv", str(tmp_path / "r.csv")]) == EXIT_OK
    out = capsys.readouterr()
    assert "final_accuracy" in out.out and "skipping" in out.err
    assert (tmp_path / "r.csv").exists()
    assert main(["report", str(tmp_path / "missing")]) == EXIT_FAIL


def test_cli_run_requires_seed():
    with pytest.raises(SystemExit):
        main(["run"])


def test_cli_config_errors(tmp_path):
    assert main(["run", "--seed", "0", "--set", "runners=0"]) == EXIT_CONFIG
    assert main(["run", "--seed", "0", "--set", "bogus"]) == EXIT_CONFIG
    assert main(["run", "--seed", "0", "--config", str(tmp_path / "none.ini")]) == EXIT_CONFIG


def test_cli_output_root_env(tmp_path, monkeypatch):
    monkeypatch.setenv("DAGFL_OUTPUT_ROOT", str(tmp_path))
    assert main(["run", "--seed", "3"] + sets(SMALL + ["framework=async"])) == EXIT_OK
    assert (tmp_path / "run-async-seed3" / "metrics.csv").exists()


def test_cli_calibrate(tmp_path):
    out = tmp_path / "cal.json"
    assert main(["calibrate-pol", "--out", str(out)] + sets(SMALL)) == EXIT_OK
    rep = json.loads(out.read_text())
    assert rep["honest_max"] < rep["epsilon"] < rep["falsified_min"]
    assert main(["calibrate-pol", "--out", str(out)] + sets(SMALL + ["pol.sigma=50"])) == EXIT_INSEPARABLE


def test_cli_gen_data(tmp_path):
    assert main(["gen-data", "--out", str(tmp_path)] + sets(SMALL)) == EXIT_OK
    assert {p.name for p in tmp_path.iterdir()} == {"train.csv", "test.csv", "shards.json"}


def test_render_report_warns_on_mismatched_budgets():
    base = {"framework": "dag", "seed": 0, "final_accuracy": 0.9, "best_accuracy": 0.95, "node_count": 3,
            "ticks": 10, "iterations": 2}
    text, warnings = render_report({"x": base, "y": {**base, "iterations": 5, "ticks": 12}})
    assert len(warnings) == 2 and text.splitlines()[0].split() == ["metric", "x", "y"]


def test_cli_invariant_failure_exit_code(monkeypatch, tmp_path):
    import dagfl.cli as cli
    from dagfl.sim import run_experiment as real

    def broken(cfg, out):
        r = real(cfg, out)
        r.summary["invariants"]["ledger_conserved"] = False
        r.summary["invariants_ok"] = False
        return r

    monkeypatch.setattr(cli, "run_experiment", broken)
    assert main(["run", "--seed", "0", "--out", str(tmp_path)] + sets(SMALL)) == EXIT_FAIL
