import csv
import json

import numpy as np
import pytest

from setloc.cli import EXIT_OK, EXIT_RUNTIME, EXIT_VALIDATION, build_parser, main

FAST_TRAIN = [
    "--set", "synth.num_videos=4",
    "--set", "train.total_steps=4",
    "--set", "train.decay_step=3",
    "--set", "train.eval_interval=2",
]


def run(argv):
    return main(argv)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """One synthesized corpus and one short training run shared by the tests."""
    root = tmp_path_factory.mktemp("cli")
    data = str(root / "corpus.slds")
    out = str(root / "run")
    assert run(["synth", "--preset", "toy-overfit", "--set", "synth.num_videos=4", "-o", data]) == EXIT_OK
    assert run(["train", "--preset", "toy-overfit", *FAST_TRAIN, "--data", data, "--out", out]) == EXIT_OK
    return {"root": root, "data": data, "ckpt": str(root / "run" / "step0000004.ckpt")}


def test_help_lists_commands(capsys):
    with pytest.raises(SystemExit):
        build_parser().parse_args(["--help"])
    text = capsys.readouterr().out
    for cmd in ("synth", "train", "eval", "predict", "gradcheck", "analyze", "dump-config"):
        assert cmd in text


def test_synth_deterministic_bytes(workspace):
    other = str(workspace["root"] / "again.slds")
    assert run(["synth", "--preset", "toy-overfit", "--set", "synth.num_videos=4", "-o", other]) == EXIT_OK
    assert (workspace["root"] / "corpus.slds").read_bytes() == (workspace["root"] / "again.slds").read_bytes()


def test_synth_stats_report_instance_count(workspace, capsys):
    from setloc.data import load_dataset

    out = str(workspace["root"] / "stats.slds")
    assert run(["synth", "--preset", "toy-overfit", "--set", "synth.num_videos=4", "-o", out]) == EXIT_OK
    printed = capsys.readouterr().out
    total = sum(len(r.annotations) for r in load_dataset(out))
    assert f"instances: {total}" in printed


def test_synth_validation_failure_before_write(tmp_path):
    out = tmp_path / "never.slds"
    code = run(["synth", "--preset", "toy-overfit", "--set", "synth.num_videos=0", "-o", str(out)])
    assert code == EXIT_VALIDATION
    assert not out.exists()


def test_train_writes_checkpoints_and_csvs(workspace):
    run_dir = workspace["root"] / "run"
    assert (run_dir / "loss_curve.csv").exists()
    assert (run_dir / "step0000004.ckpt").exists()
    with open(run_dir / "loss_curve.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["step", "loss", "lr"]
    assert len(rows) == 5


def test_eval_writes_report(workspace):
    out = str(workspace["root"] / "report.csv")
    code = run(
        ["eval", "--preset", "toy-overfit", "--checkpoint", workspace["ckpt"],
         "--data", workspace["data"], "-o", out]
    )
    assert code == EXIT_OK
    with open(out) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["metric", "threshold", "label", "value"]
    assert any(r[0] == "avg_map" for r in rows)


def test_predict_writes_detections(workspace):
    out = str(workspace["root"] / "dets.csv")
    code = run(
        ["predict", "--preset", "toy-overfit", "--checkpoint", workspace["ckpt"],
         "--data", workspace["data"], "-o", out]
    )
    assert code == EXIT_OK
    with open(out) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["video_id", "label", "score", "start", "end"]
    for row in rows[1:]:
        assert 0.0 <= float(row[2]) <= 1.0
        assert float(row[3]) <= float(row[4])


def test_analyze_writes_bins(workspace):
    out = str(workspace["root"] / "analysis.csv")
    code = run(
        ["analyze", "--preset", "toy-overfit", "--checkpoint", workspace["ckpt"],
         "--data", workspace["data"], "-o", out, "--bins", "5"]
    )
    assert code == EXIT_OK
    with open(out) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["bin_low", "bin_high", "count", "mean_gt_duration", "mean_l1_error"]
    assert len(rows) == 6


def test_gradcheck_reports_small_errors(tmp_path, capsys):
    out = str(tmp_path / "gradcheck.csv")
    code = run(["gradcheck", "--preset", "toy-gradcheck", "-o", out])
    assert code == EXIT_OK
    printed = capsys.readouterr().out
    assert "hungarian_loss" in printed
    with open(out) as fh:
        rows = list(csv.reader(fh))[1:]
    assert all(float(r[2]) < 1e-4 for r in rows)


def test_dump_config_round_trip(tmp_path):
    c1 = tmp_path / "c1.json"
    c2 = tmp_path / "c2.json"
    assert run(["dump-config", "--preset", "toy-overfit", "-o", str(c1)]) == EXIT_OK
    assert run(["dump-config", "--config", str(c1), "-o", str(c2)]) == EXIT_OK
    assert c1.read_text() == c2.read_text()
    json.loads(c1.read_text())  # well-formed JSON


def test_missing_checkpoint_is_runtime_error(workspace):
    code = run(
        ["eval", "--preset", "toy-overfit", "--checkpoint", "/nonexistent.ckpt",
         "--data", workspace["data"]]
    )
    assert code == EXIT_RUNTIME


def test_bad_config_key_is_validation_error(tmp_path):
    code = run(["dump-config", "--set", "train.bogus=1"])
    assert code == EXIT_VALIDATION


def test_malformed_dataset_is_runtime_error(workspace, tmp_path):
    bad = tmp_path / "bad.slds"
    bad.write_bytes(b"definitely not a dataset")
    code = run(
        ["eval", "--preset", "toy-overfit", "--checkpoint", workspace["ckpt"], "--data", str(bad)]
    )
    assert code == EXIT_RUNTIME


def test_resume_flag(workspace):
    out = str(workspace["root"] / "resumed")
    code = run(
        ["train", "--preset", "toy-overfit", *FAST_TRAIN,
         "--set", "train.total_steps=6", "--set", "train.decay_step=5",
         "--data", workspace["data"], "--out", out, "--resume", workspace["ckpt"]]
    )
    assert code == EXIT_OK
    import os

    assert os.path.exists(os.path.join(out, "step0000006.ckpt"))
