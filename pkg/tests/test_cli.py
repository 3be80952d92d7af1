import json
import logging

import numpy as np
import pytest

from anchorlab import checks, cli, experiment, schedule
from anchorlab.cli import main, parse_seeds
from anchorlab.learned import load_denoiser, Denoiser, state_arrays
from anchorlab.prior import predict_noise

from conftest import CONFIGS


def small_config(tmp_path, steps=50, **guidance):
    raw = json.loads((CONFIGS / "bimodal.json").read_text())
    raw["run"]["steps"] = steps
    raw["guidance"].update(guidance)
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(raw))
    return path


def test_run_writes_outputs(tmp_path):
    cfg = small_config(tmp_path)
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
    lines = (tmp_path / "o" / "trajectory.csv").read_text().splitlines()
    assert len(lines) == 51
    summary = json.loads((tmp_path / "o" / "summary.json").read_text())
    assert summary["steps_completed"] == 50


def test_env_var_sets_output_root(tmp_path, monkeypatch):
    cfg = small_config(tmp_path, steps=5)
    monkeypatch.setenv(cli.OUT_ENV, str(tmp_path / "root"))
    assert main(["run", "--config", str(cfg)]) == 0
    assert (tmp_path / "root" / "cfg" / "summary.json").exists()


def test_unknown_variant_exit_code(tmp_path, caplog):
    cfg = small_config(tmp_path, variant="magic")
    with caplog.at_level(logging.ERROR):
        assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "o")]) == cli.EXIT_CONFIG
    assert "guidance.variant" in caplog.text


def test_bad_json_exit_code(tmp_path, caplog):
    path = tmp_path / "x.json"
    path.write_text("{")
    with caplog.at_level(logging.ERROR):
        assert main(["run", "--config", str(path)]) == cli.EXIT_CONFIG
    assert "line 1" in caplog.text


def test_runtime_abort_keeps_partial_outputs(tmp_path, monkeypatch):
    real = experiment.build_prior

    class Flaky:
        def __init__(self, prior):
            self.prior, self.calls = prior, 0

        def predict_noise(self, z_t, t, cond, sched):
            self.calls += 1
            out = predict_noise(self.prior, z_t, t, cond, sched)
            return out * np.nan if self.calls > 30 else out

    monkeypatch.setattr(experiment, "build_prior", lambda cfg: (Flaky(real(cfg)[0]), None))
    out = tmp_path / "o"
    assert main(["run", "--config", str(small_config(tmp_path)), "--out", str(out)]) == cli.EXIT_RUNTIME
    summary = json.loads((out / "summary.json").read_text())
    assert summary["status"].startswith("aborted") and summary["steps_completed"] == 10
    assert len((out / "trajectory.csv").read_text().splitlines()) == 11


def test_missing_checkpoint_is_runtime_failure(tmp_path):
    raw = json.loads((CONFIGS / "learned.json").read_text())
    raw["learned"]["checkpoint"] = str(tmp_path / "nope.ckpt")
    path = tmp_path / "l.json"
    path.write_text(json.dumps(raw))
    assert main(["run", "--config", str(path), "--out", str(tmp_path / "o")]) == cli.EXIT_RUNTIME


def test_parse_seeds():
    assert parse_seeds("0-3") == [0, 1, 2, 3]
    assert parse_seeds("5,1-2") == [5, 1, 2]
    with pytest.raises(cli.ConfigError):
        parse_seeds(",")


def test_sweep_single_cell_matches_run(tmp_path):
    cfg = small_config(tmp_path)
    assert main(["sweep", "--config", str(cfg), "--out", str(tmp_path / "s"), "--seeds", "0",
                 "--variants", "anchords"]) == 0
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "r")]) == 0
    assert (tmp_path / "s" / "seed0_anchords" / "trajectory.csv").read_bytes() == \
        (tmp_path / "r" / "trajectory.csv").read_bytes()
    rows = (tmp_path / "s" / "sweep.csv").read_text().splitlines()
    assert rows[0].startswith("variant,n_runs,mean_terminal_distance") and len(rows) == 2


def test_sweep_parallel_matches_serial(tmp_path):
    cfg = small_config(tmp_path, steps=30)
    args = ["--seeds", "0-1", "--variants", "vanilla-sds,anchords"]
    assert main(["sweep", "--config", str(cfg), "--out", str(tmp_path / "a")] + args) == 0
    assert main(["sweep", "--config", str(cfg), "--out", str(tmp_path / "b"), "--jobs", "2"] + args) == 0
    assert (tmp_path / "a" / "sweep.csv").read_bytes() == (tmp_path / "b" / "sweep.csv").read_bytes()
    pairing = json.loads((tmp_path / "a" / "sweep.json").read_text())["pairing"]
    assert all(p["paired"] for p in pairing.values())


def test_sweep_records_child_failure(tmp_path):
    raw = json.loads((CONFIGS / "bimodal.json").read_text())
    raw["run"]["steps"] = 10
    del raw["guidance"]["neg_label"]
    path = tmp_path / "c.json"
    path.write_text(json.dumps(raw))
    code = main(["sweep", "--config", str(path), "--out", str(tmp_path / "s"), "--seeds", "0-1",
                 "--variants", "anchords,neg-source"])
    assert code == cli.EXIT_RUNTIME
    report = json.loads((tmp_path / "s" / "sweep.json").read_text())
    assert len(report["failures"]) == 2
    assert (tmp_path / "s" / "seed1_anchords" / "summary.json").exists()


def test_sweep_bad_variant(tmp_path):
    assert main(["sweep", "--config", str(small_config(tmp_path)), "--variants", "x"]) == cli.EXIT_CONFIG


def test_validate(tmp_path):
    out = tmp_path / "v.json"
    assert main(["validate", "--out", str(out)]) == 0
    report = json.loads(out.read_text())
    assert report["passed"] and report["n_checks"] >= 12
    for c in report["checks"]:
        assert {"name", "tolerance", "observed", "passed"} <= set(c)


def test_validate_catches_corrupted_eta():
    def bad_eta(t, sched):
        return 1.001 * schedule.eta(t, sched)

    results = {c["name"]: c["passed"] for c in checks.run_checks(eta_fn=bad_eta)}
    assert not results["m1_reconstruction_identity"]
    assert not results["eta_squared_identity"]
    assert sum(not v for v in results.values()) == 2


def test_validate_failure_exit_code(monkeypatch):
    monkeypatch.setattr("anchorlab.checks.run_checks",
                        lambda seed=0: [{"name": "x", "tolerance": 0, "observed": 1, "passed": False}])
    assert main(["validate"]) == cli.EXIT_VALIDATION


def test_train_prior_zero_steps(tmp_path):
    ck = tmp_path / "m.ckpt"
    assert main(["train-prior", "--config", str(CONFIGS / "learned.json"), "--out", str(tmp_path / "t"),
                 "--checkpoint", str(ck), "--steps", "0"]) == 0
    init = Denoiser(2, ["left", "right", "y"], seed=0)
    for k, v in state_arrays(load_denoiser(ck)).items():
        assert v.tobytes() == state_arrays(init)[k].tobytes()
    summary = json.loads((tmp_path / "t" / "train_summary.json").read_text())
    assert summary["initial_validation_loss"] == summary["final_validation_loss"]


def test_train_prior_short(tmp_path):
    ck = tmp_path / "m.ckpt"
    assert main(["train-prior", "--config", str(CONFIGS / "learned.json"), "--out", str(tmp_path / "t"),
                 "--checkpoint", str(ck), "--steps", "200"]) == 0
    summary = json.loads((tmp_path / "t" / "train_summary.json").read_text())
    assert summary["final_validation_loss"] < summary["initial_validation_loss"]
    curve = (tmp_path / "t" / "loss_curve.csv").read_text().splitlines()
    assert curve[0] == "step,train_loss" and len(curve) == 3


def test_report_writes_svg(tmp_path):
    cfg = small_config(tmp_path, steps=30)
    assert main(["sweep", "--config", str(cfg), "--out", str(tmp_path / "s"), "--seeds", "0",
                 "--variants", "vanilla-sds,anchords"]) == 0
    assert main(["report", "--out", str(tmp_path / "s")]) == 0
    svg = (tmp_path / "s" / "nearest_mode_distance.svg").read_text()
    assert svg.startswith("<svg") and svg.count("<polyline") == 2
    assert main(["report", "--out", str(tmp_path / "empty")]) == cli.EXIT_CONFIG


def test_run_variant_override(tmp_path):
    cfg = small_config(tmp_path, steps=10)
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "o"), "--variant", "vanilla-sds",
                 "--seed", "4"]) == 0
    summary = json.loads((tmp_path / "o" / "summary.json").read_text())
    assert summary["variant"] == "vanilla-sds" and summary["seed"] == 4
    raw = json.loads(cfg.read_text())
    del raw["guidance"]["neg_label"]
    cfg.write_text(json.dumps(raw))
    assert main(["run", "--config", str(cfg), "--variant", "neg-source"]) == cli.EXIT_CONFIG
