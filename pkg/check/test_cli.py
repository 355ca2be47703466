# test_cli.py

import json

import numpy as np

from data_pipeline.dataio import load_manifest, partition
from preview_cli import main

TINY_NET = ["--d-t", "16", "--base-channels", "8", "--epochs", "1", "--batch-size", "8"]


def _tree(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_synth_gen_all_labeled(tmp_path):
    out = tmp_path / "d"

    assert main(["synth-gen", "--n", "12", "--labeled-fraction", "1.0", "--seed", "7", "--out", str(out)]) == 0

    dataset = load_manifest(out)
    assert len(dataset) == 12
    assert len(dataset.labeled_ids()) == 12


def test_synth_gen_is_reproducible(tmp_path):
    for parent in ("a", "b"):
        args = ["synth-gen", "--n", "3", "--labeled-fraction", "0.5", "--seed", "7", "--out", str(tmp_path / parent / "d")]
        assert main(args) == 0

    assert _tree(tmp_path / "a" / "d") == _tree(tmp_path / "b" / "d")


def test_invalid_fraction_exits_with_config_error(tmp_path, capsys):
    code = main(["synth-gen", "--n", "3", "--labeled-fraction", "1.5", "--out", str(tmp_path / "d")])

    assert code == 2
    assert "synth.labeled_fraction" in capsys.readouterr().err


def test_unknown_config_key_rejected(tmp_path):
    config = tmp_path / "config.json"
    config.write_text(json.dumps({"synth": {"n": 2, "colour": "red"}}))

    assert main(["synth-gen", "--config", str(config), "--out", str(tmp_path / "d")]) == 2


def test_flags_override_config_file(tmp_path):
    config = tmp_path / "config.json"
    config.write_text(json.dumps({"synth": {"n": 2, "labeled_fraction": 0.0, "seed": 1}}))

    assert main(["synth-gen", "--config", str(config), "--n", "4", "--out", str(tmp_path / "d")]) == 0

    dataset = load_manifest(tmp_path / "d")
    assert len(dataset) == 4
    assert dataset.labeled_ids() == []


def test_missing_dataset_exits_with_io_error(tmp_path):
    assert main(["train", "--dataset", str(tmp_path / "nope"), "--run-dir", str(tmp_path / "run")]) == 3


def test_train_semi_on_all_labeled_falls_back(tmp_path, labeled_dataset_path):
    run_dir = tmp_path / "run"

    code = main(["train", "--mode", "semi", "--n", "100", "--dataset", str(labeled_dataset_path), "--run-dir", str(run_dir), *TINY_NET])

    assert code == 0
    assert json.loads((run_dir / "report.json").read_text())["fallback"] == "supervised"
    snapshot = json.loads((run_dir / "config.json").read_text())
    assert snapshot["manifest_sha256"] == load_manifest(labeled_dataset_path).manifest_hash()
    assert snapshot["config"]["train"]["network"]["d_T"] == 16
    assert (run_dir / "preview.log").is_file()


def _adversarial_snapshot(tmp_path, dataset_path, *flags):
    run_dir = tmp_path / "run"
    args = ["train", "--mode", "semi_adversarial", "--dataset", str(dataset_path), "--run-dir", str(run_dir)]
    assert main([*args, *TINY_NET, *flags]) == 0
    return json.loads((run_dir / "config.json").read_text())["config"]["train"]


def test_explicit_zero_adversarial_weight_is_kept(tmp_path, tiny_dataset_path):
    train_config = _adversarial_snapshot(tmp_path, tiny_dataset_path, "--lambda-a", "0")

    assert train_config["weights"]["lambda_a"] == 0.0
    assert train_config["network"]["discriminator_condition"] == "input"


def test_adversarial_defaults_fill_unset_flags(tmp_path, tiny_dataset_path):
    train_config = _adversarial_snapshot(tmp_path, tiny_dataset_path, "--condition", "input_pose")

    assert train_config["weights"]["lambda_a"] == 0.01
    assert train_config["network"]["discriminator_condition"] == "input_pose"


def test_eval_lists_missing_predictions(tmp_path, tiny_dataset_path, capsys):
    dataset = load_manifest(tiny_dataset_path)
    test_ids = partition(dataset).test
    predictions = {i: dataset.entry(i).joints for i in test_ids[1:]}
    path = tmp_path / "predictions.json"
    path.write_text(json.dumps(predictions))

    code = main(["eval", "--dataset", str(tiny_dataset_path), "--predictions", str(path), "--run-dir", str(tmp_path / "run")])

    assert code == 2
    assert test_ids[0] in capsys.readouterr().err


def test_predict_then_eval(tmp_path, tiny_dataset_path, tiny_checkpoint):
    predictions = tmp_path / "predictions.json"
    common = ["--dataset", str(tiny_dataset_path), "--split", "all"]

    assert main(["predict", *common, "--checkpoint", str(tiny_checkpoint), "--out", str(predictions), "--run-dir", str(tmp_path / "p")]) == 0
    assert main(["eval", *common, "--predictions", str(predictions), "--run-dir", str(tmp_path / "e")]) == 0

    report = json.loads((tmp_path / "e" / "eval_report.json").read_text())
    assert report["frame_count"] == 20
    assert np.isfinite(report["me_mm"])


def test_analyze_grid(tmp_path, tiny_dataset_path, tiny_checkpoint):
    run_dir = tmp_path / "run"

    code = main(["analyze", "--mode", "grid", "--count", "2", "--dataset", str(tiny_dataset_path), "--checkpoint", str(tiny_checkpoint), "--run-dir", str(run_dir)])

    assert code == 0
    assert (run_dir / "grid.png").is_file()
