import json
import re

import numpy as np
import pytest

from connfuse.checkpoint import load_checkpoint
from connfuse.cli import run
from connfuse.training import TrainConfig, init_state

ERROR_LINE = re.compile(r'^error code=(\d) kind=(\w+) message=".*"$')


def _error(capsys):
    lines = [l for l in capsys.readouterr().err.splitlines() if l.startswith("error ")]
    assert len(lines) == 1 and ERROR_LINE.match(lines[0]), lines
    return lines[0]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    spec = {"n": 8, "T": 30, "n_blocks": 2, "seed": 3,
            "subjects_per_stage": {"NC": 4, "EMCI": 4, "LMCI": 4, "AD": 4}}
    (root / "spec.json").write_text(json.dumps(spec))
    (root / "train.json").write_text(json.dumps({"epochs": 2, "d": 4, "hidden": 16, "batch_size": 8,
                                                 "seed": 5}))
    assert run(["gen-phantom", "--spec", str(root / "spec.json"), "--out", str(root / "cohort")]) == 0
    assert run(["train", "--cohort", str(root / "cohort"), "--config", str(root / "train.json"),
                "--out", str(root / "run"), "--epochs", "3"]) == 0
    return root


def test_gen_phantom_writes_cohort(workspace):
    manifest = json.loads((workspace / "cohort" / "manifest.json").read_text())
    assert len(manifest) == 16 and manifest[0]["n"] == 8


def test_flag_overrides_file_and_effective_config_recorded(workspace):
    eff = json.loads((workspace / "run" / "config_effective.json").read_text())
    assert eff["epochs"] == 3 and eff["d"] == 4 and eff["seed"] == 5
    state = load_checkpoint(workspace / "run" / "checkpoint.npz")
    assert state.epoch == 3 and len(state.history) == 3
    assert (workspace / "run" / "metrics.csv").read_text().startswith("epoch,loss_d_sc")
    assert (workspace / "run" / "loss_curves.png").stat().st_size > 0


def test_effective_values_are_logged(workspace, tmp_path, caplog):
    with caplog.at_level("INFO", logger="connfuse"):
        assert run(["-v", "train", "--cohort", str(workspace / "cohort"), "--config",
                    str(workspace / "train.json"), "--out", str(tmp_path), "--epochs", "0",
                    "--no-plots"]) == 0
    text = caplog.text
    assert "config epochs = 0 (flag)" in text
    assert "config d = 4 (file)" in text
    assert "config lr = 0.001 (default)" in text


def test_train_zero_epochs_equals_init(workspace, tmp_path):
    assert run(["train", "--cohort", str(workspace / "cohort"), "--config", str(workspace / "train.json"),
                "--out", str(tmp_path), "--epochs", "0", "--no-plots"]) == 0
    loaded = load_checkpoint(tmp_path / "checkpoint.npz")
    fresh = init_state(TrainConfig.from_dict(json.loads((workspace / "train.json").read_text())), 8, 30)
    for k, t in fresh.model.g_store:
        assert np.array_equal(t.data, loaded.model.g_store[k].data)


def test_cli_training_is_deterministic(workspace, tmp_path):
    args = ["train", "--cohort", str(workspace / "cohort"), "--config", str(workspace / "train.json"),
            "--no-plots", "--epochs", "3", "--out"]
    assert run(args + [str(tmp_path)]) == 0
    assert (tmp_path / "metrics.csv").read_bytes() == (workspace / "run" / "metrics.csv").read_bytes()


def test_eval_writes_metrics(workspace, capsys):
    out = workspace / "eval.csv"
    assert run(["eval", "--cohort", str(workspace / "cohort"), "--checkpoint",
                str(workspace / "run" / "checkpoint.npz"), "--experiment", "ad-nc", "--folds", "4",
                "--mode", "renormalize", "--out", str(out)]) == 0
    assert out.read_text().splitlines()[0] == "experiment,fold,tp,fn,tn,fp,acc,sen,spe"
    assert "mean acc" in capsys.readouterr().out


def test_analyze_writes_tables_and_figures(workspace, capsys):
    out = workspace / "analysis"
    assert run(["analyze", "--cohort", str(workspace / "cohort"), "--checkpoint",
                str(workspace / "run" / "checkpoint.npz"), "--from", "NC", "--to", "AD",
                "--topk", "3", "--out", str(out)]) == 0
    names = {p.name for p in out.iterdir()}
    assert {"mean_mc_NC.csv", "mean_mc_AD.csv", "delta_NC_AD.csv", "roi_ranking_NC_AD.csv",
            "edges_NC_AD_q0.5.csv", "edges_NC_AD_q0.9.csv", "mean_mc.png", "delta_NC_AD.png",
            "top_rois_NC_AD.png"} <= names
    stdout = capsys.readouterr().out.splitlines()
    assert stdout[0] == "rank,roi,score" and len(stdout) == 4


def test_unknown_subcommand_is_usage_error(capsys):
    assert run(["frobnicate"]) == 2
    err = capsys.readouterr().err
    assert "usage:" in err and "kind=usage" in err


def test_missing_subcommand_and_unknown_flag(capsys):
    assert run([]) == 2
    _error(capsys)
    assert run(["gradcheck", "--bogus"]) == 2
    _error(capsys)


def test_required_flags_enforced(capsys):
    assert run(["train", "--cohort", "x"]) == 2
    assert "--out" in _error(capsys)


def test_help_at_every_level(capsys):
    assert run(["--help"]) == 0
    for cmd in ("gen-phantom", "train", "eval", "analyze", "gradcheck"):
        assert run([cmd, "--help"]) == 0
    assert "--weight-decay" in capsys.readouterr().out


def test_bad_path_is_io_error(tmp_path, capsys):
    assert run(["train", "--cohort", str(tmp_path / "nope"), "--out", str(tmp_path)]) == 3
    assert "kind=io" in _error(capsys)
    assert run(["gen-phantom", "--spec", str(tmp_path / "missing.json"), "--out", str(tmp_path)]) == 3
    _error(capsys)


def test_invalid_config_key_is_usage_error(workspace, tmp_path, capsys):
    (tmp_path / "bad.json").write_text(json.dumps({"learning_rate": 1}))
    assert run(["train", "--cohort", str(workspace / "cohort"), "--config", str(tmp_path / "bad.json"),
                "--out", str(tmp_path)]) == 2
    assert "learning_rate" in _error(capsys)


def test_invariant_violation_exit_code(workspace, tmp_path, capsys):
    import shutil
    bad = tmp_path / "cohort"
    shutil.copytree(workspace / "cohort", bad)
    victim = sorted(bad.glob("*_sc.csv"))[0]
    m = np.loadtxt(victim, delimiter=",")
    m[0, 1] += 1.0
    np.savetxt(victim, m, delimiter=",")
    assert run(["train", "--cohort", str(bad), "--out", str(tmp_path / "o"), "--epochs", "0"]) == 4
    assert "kind=invariant" in _error(capsys)


def test_nan_abort_exit_code(workspace, tmp_path, capsys):
    assert run(["train", "--cohort", str(workspace / "cohort"), "--out", str(tmp_path),
                "--epochs", "1", "--lr", "1e300", "--d", "4", "--hidden", "16", "--no-plots"]) == 5
    assert "kind=numerical" in _error(capsys)


def test_gradcheck_small(capsys):
    assert run(["gradcheck", "--scale", "small", "--probes", "100"]) == 0
    out = capsys.readouterr().out.splitlines()
    body = [l for l in out if l.split() and l.split()[-1] in ("ok", "FAIL")]
    assert body and all(l.split()[-1] == "ok" for l in body)
    assert any(l.startswith("full_model_total_loss") for l in body)
