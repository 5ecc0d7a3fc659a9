"""
End-to-end tests of the command-line interface (gen-data, train, eval, sweep).

Every test drives main([...]) in-process with a tiny config and checks exit
codes and the files each command leaves behind.

Usage:
    pytest tests/test_main.py
"""

import csv
import json
import sys
from pathlib import Path
from unittest.mock import patch

import pytest
import torch

# Ensure project root is on path (tests/ is one level below root)
_ROOT = Path(__file__).resolve().parent.parent
if str(_ROOT) not in sys.path:
    sys.path.insert(0, str(_ROOT))

from checkpoint_utils import MANIFEST_NAME
from main import EXIT_INTEGRITY, EXIT_OK, EXIT_TRAINING_ABORTED, EXIT_USAGE, EVAL_REPORT_NAME, build_parser, main
from segmentation.trainer import METRICS_CSV

TINY = {
    "image_height": 32,
    "image_width": 32,
    "n_slices": 40,
    "lesion_probability": 0.6,
    "lesion_radius_max": 6,
    "batch_size": 4,
    "iterations": 3,
    "base_width": 4,
    "eval_every": 0,
    "checkpoint_every": 0,
}


@pytest.fixture
def tiny_config(tmp_path) -> str:
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(TINY))
    return str(path)


def _manifest(run_dir: Path) -> dict:
    return json.loads((run_dir / MANIFEST_NAME).read_text())


# ============================================================================
# gen-data
# ============================================================================


def test_profile_flag_defaults_to_standard():
    args = build_parser().parse_args(["gen-data"])
    assert args.profile == "standard"
    with pytest.raises(SystemExit):
        build_parser().parse_args(["gen-data", "--profile", "laptop"])


def test_gen_data_is_deterministic(tmp_path, tiny_config):
    for name in ("a", "b"):
        assert main(["gen-data", "--config", tiny_config, "--seed", "5", "--out", str(tmp_path / name)]) == EXIT_OK
    a, b = _manifest(tmp_path / "a"), _manifest(tmp_path / "b")
    assert a["artifact_hashes"]["dataset"] == b["artifact_hashes"]["dataset"]
    assert a["config"]["data_seed"] == 5
    assert len(list((tmp_path / "a" / "images").glob("*.png"))) == 40


def test_gen_data_without_lesions(tmp_path, tiny_config):
    out = tmp_path / "empty"
    assert main(["gen-data", "--config", tiny_config, "--lesion-probability", "0", "--out", str(out)]) == EXIT_OK
    assert json.loads((out / "manifest.json").read_text())["n_lesion_slices"] == 0


def test_existing_output_needs_force(tmp_path, tiny_config):
    out = str(tmp_path / "data")
    assert main(["gen-data", "--config", tiny_config, "--out", out]) == EXIT_OK
    assert main(["gen-data", "--config", tiny_config, "--out", out]) == EXIT_USAGE
    assert main(["gen-data", "--config", tiny_config, "--out", out, "--force"]) == EXIT_OK


def test_invalid_configuration_is_a_usage_error(tmp_path, tiny_config):
    assert main(["gen-data", "--config", tiny_config, "--lesion-probability", "1.5", "--out", str(tmp_path / "x")]) == EXIT_USAGE
    assert main(["train", "--config", str(tmp_path / "missing.json"), "--out", str(tmp_path / "y")]) == EXIT_USAGE


# ============================================================================
# train and eval
# ============================================================================


def test_train_then_eval_on_exported_dataset(tmp_path, tiny_config):
    data, run = tmp_path / "data", tmp_path / "run"
    assert main(["gen-data", "--config", tiny_config, "--out", str(data)]) == EXIT_OK
    argv = ["train", "--config", tiny_config, "--dataset", str(data), "--out", str(run), "--iterations", "10"]
    assert main(argv) == EXIT_OK

    with (run / METRICS_CSV).open(newline="") as f:
        assert len(list(csv.DictReader(f))) == 10
    manifest = _manifest(run)
    assert manifest["input_hashes"]["dataset"] == _manifest(data)["artifact_hashes"]["dataset"]
    assert "checkpoint_000010.json" in manifest["artifact_hashes"]
    assert (run / "discriminator_000010.pt").exists()

    eval_argv = ["eval", "--run", str(run), "--dataset", str(data)]
    assert main(eval_argv) == EXIT_OK
    first = (run / EVAL_REPORT_NAME).read_text()
    assert main(eval_argv) == EXIT_OK
    assert (run / EVAL_REPORT_NAME).read_text() == first

    report = json.loads(first)
    assert report["n_test_slices"] == 8
    assert report["mode"] == "semi-supervised"
    assert list((run / "overlays").glob("*.png"))


def test_fully_supervised_run_has_no_discriminator(tmp_path, tiny_config):
    run = tmp_path / "sup"
    assert main(["train", "--config", tiny_config, "--mode", "fully-supervised", "--out", str(run)]) == EXIT_OK
    assert not list(run.glob("discriminator_*.pt"))
    assert _manifest(run)["config"]["mode"] == "fully-supervised"


def test_flag_overrides_config_file_in_manifest(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({**TINY, "tau": 0.7}))
    run = tmp_path / "run"
    assert main(["train", "--config", str(path), "--tau", "0.9", "--seed", "4", "--out", str(run)]) == EXIT_OK
    config = _manifest(run)["config"]
    assert config["tau"] == 0.9
    assert config["seed"] == 4
    sidecar = json.loads((run / "checkpoint_000003.json").read_text())
    assert sidecar["train_config"]["tau"] == 0.9


def test_resume_continues_from_latest_checkpoint(tmp_path, tiny_config):
    run = str(tmp_path / "run")
    assert main(["train", "--config", tiny_config, "--out", run]) == EXIT_OK
    assert main(["train", "--config", tiny_config, "--out", run, "--iterations", "5", "--resume"]) == EXIT_OK
    with (Path(run) / METRICS_CSV).open(newline="") as f:
        assert [int(r["iteration"]) for r in csv.DictReader(f)] == [1, 2, 3, 4, 5]
    assert main(["train", "--config", tiny_config, "--out", str(tmp_path / "fresh"), "--resume"]) == EXIT_USAGE


def test_tampered_checkpoint_fails_eval(tmp_path, tiny_config):
    run = tmp_path / "run"
    assert main(["train", "--config", tiny_config, "--out", str(run)]) == EXIT_OK
    blob = run / "generator_000003.pt"
    weights = torch.load(blob, weights_only=True)
    first = next(iter(weights))
    weights[first] = weights[first] + 1.0
    torch.save(weights, blob)
    assert main(["eval", "--run", str(run)]) == EXIT_INTEGRITY


def test_eval_with_empty_test_split(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({**TINY, "n_slices": 2}))
    run = tmp_path / "run"
    assert main(["train", "--config", str(path), "--out", str(run)]) == EXIT_OK
    assert main(["eval", "--run", str(run)]) == EXIT_USAGE


def test_missing_inputs_are_usage_errors(tmp_path, tiny_config):
    assert main(["train", "--config", tiny_config, "--dataset", str(tmp_path / "nope"), "--out", str(tmp_path / "r")]) == EXIT_USAGE
    assert main(["eval", "--run", str(tmp_path / "no_run")]) == EXIT_USAGE


def test_diverging_loss_exits_with_abort_code(tmp_path, tiny_config):
    with patch("segmentation.trainer.compute_ce_loss", return_value=torch.tensor(float("nan"))):
        assert main(["train", "--config", tiny_config, "--out", str(tmp_path / "run")]) == EXIT_TRAINING_ABORTED


# ============================================================================
# sweep
# ============================================================================


def test_sweep_writes_report(tmp_path, tiny_config):
    out = tmp_path / "sweep"
    argv = ["sweep", "--config", tiny_config, "--axis", "unlabeled", "--ratios", "baseline,1", "--seeds", "1", "--out", str(out)]
    assert main(argv) == EXIT_OK

    with (out / "sweep_unlabeled.csv").open(newline="") as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["axis", "ratio", "mode", "seed", "iou", "dice", "recall", "precision"]
    assert [r[1] for r in rows[1:]] == ["baseline"] * 3 + ["1"] * 3
    assert [r[3] for r in rows[1:]] == ["1", "mean", "std"] * 2
    assert (out / "sweep_unlabeled.png").exists()
    assert "sweep_unlabeled.csv" in _manifest(out)["artifact_hashes"]


def test_sweep_rejects_baseline_on_labeled_axis(tmp_path, tiny_config):
    argv = ["sweep", "--config", tiny_config, "--axis", "labeled", "--ratios", "baseline,0.5", "--seeds", "1", "--out", str(tmp_path / "s")]
    assert main(argv) == EXIT_USAGE


def test_sweep_cell_abort_maps_to_abort_code(tmp_path, tiny_config):
    argv = ["sweep", "--config", tiny_config, "--axis", "labeled", "--ratios", "0.5", "--seeds", "1", "--out", str(tmp_path / "s")]
    with patch("segmentation.trainer.compute_ce_loss", return_value=torch.tensor(float("nan"))):
        assert main(argv) == EXIT_TRAINING_ABORTED
