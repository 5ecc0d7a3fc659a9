"""
Tests for pooled lesion metrics, prediction hardening, evaluation and overlays.

Usage:
    pytest tests/test_metrics.py
"""

import logging
import sys
from pathlib import Path

import numpy as np
import pytest
import torch
from PIL import Image
from scipy.spatial import distance

# Ensure project root is on path (tests/ is one level below root)
_ROOT = Path(__file__).resolve().parent.parent
if str(_ROOT) not in sys.path:
    sys.path.insert(0, str(_ROOT))

from datagen import generate_phantoms
from segmentation.metrics import (
    compute_metrics,
    confusion_counts,
    evaluate_generator,
    export_overlay,
    export_overlays,
    harden_prediction,
    predict,
)
from shared.errors import DatasetError, ShapeError
from shared.schemas import PhantomSpec
from state import ImageSlice, MaskLabel


def _mask(rows) -> MaskLabel:
    return MaskLabel(labels=np.asarray(rows, dtype=np.int64))


class ThresholdGenerator(torch.nn.Module):
    """Predicts lesion wherever the intensity is below a fixed threshold."""

    def __init__(self, threshold: float):
        super().__init__()
        self.threshold = threshold
        self.anchor = torch.nn.Parameter(torch.zeros(1))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        lesion = (x < self.threshold).to(x.dtype)
        return torch.cat([1.0 - lesion, lesion], dim=1)


# ============================================================================
# compute_metrics
# ============================================================================


def test_identical_masks_score_one():
    target = _mask([[0, 1, 1], [0, 0, 1], [1, 0, 0]])
    report = compute_metrics([target], [target])
    assert report.metric_values() == {"iou": 1.0, "dice": 1.0, "recall": 1.0, "precision": 1.0}


def test_small_example():
    pred = _mask([[1, 1], [1, 0]])
    target = _mask([[1, 1], [0, 1]])
    report = compute_metrics([pred], [target])
    assert (report.tp, report.fp, report.fn) == (2, 1, 1)
    assert report.iou == pytest.approx(0.5)
    assert report.dice == pytest.approx(2 / 3)
    assert report.recall == pytest.approx(2 / 3)
    assert report.precision == pytest.approx(2 / 3)


def test_vacuous_test_set_reports_one_and_warns(caplog):
    empty = _mask(np.zeros((4, 4)))
    with caplog.at_level(logging.WARNING, logger="segmentation.metrics"):
        report = compute_metrics([empty, empty], [empty, empty])
    assert report.metric_values() == {"iou": 1.0, "dice": 1.0, "recall": 1.0, "precision": 1.0}
    assert report.n_vacuous_slices == 2
    assert report.n_test_slices == 2
    assert any("0/0" in r.message for r in caplog.records)


def test_metrics_match_brute_force_oracle():
    rng = np.random.default_rng(0)
    for _ in range(100):
        n = int(rng.integers(1, 4))
        preds = [_mask(rng.integers(0, 2, (16, 16))) for _ in range(n)]
        targets = [_mask(rng.integers(0, 2, (16, 16))) for _ in range(n)]

        tp = fp = fn = 0
        for p, t in zip(preds, targets):
            for a, b in zip(p.labels.ravel().tolist(), t.labels.ravel().tolist()):
                tp += a == 1 and b == 1
                fp += a == 1 and b == 0
                fn += a == 0 and b == 1

        report = compute_metrics(preds, targets)
        assert (report.tp, report.fp, report.fn) == (tp, fp, fn)
        assert report.iou == pytest.approx(tp / (tp + fp + fn), abs=1e-12)
        assert report.dice == pytest.approx(2 * tp / (2 * tp + fp + fn), abs=1e-12)
        assert report.recall == pytest.approx(tp / (tp + fn), abs=1e-12)
        assert report.precision == pytest.approx(tp / (tp + fp), abs=1e-12)
        assert report.dice == pytest.approx(2 * report.iou / (1 + report.iou), abs=1e-12)

        flat_p = np.concatenate([p.labels.ravel() for p in preds]).astype(bool)
        flat_t = np.concatenate([t.labels.ravel() for t in targets]).astype(bool)
        assert report.iou == pytest.approx(1.0 - distance.jaccard(flat_p, flat_t), abs=1e-12)
        assert report.dice == pytest.approx(1.0 - distance.dice(flat_p, flat_t), abs=1e-12)


def test_swapping_roles_swaps_recall_and_precision():
    rng = np.random.default_rng(1)
    preds = [_mask(rng.integers(0, 2, (16, 16))) for _ in range(3)]
    targets = [_mask(rng.integers(0, 2, (16, 16))) for _ in range(3)]
    forward = compute_metrics(preds, targets)
    backward = compute_metrics(targets, preds)
    assert forward.iou == backward.iou
    assert forward.dice == backward.dice
    assert forward.recall == backward.precision
    assert forward.precision == backward.recall


def test_compute_metrics_errors():
    a = _mask(np.zeros((4, 4)))
    b = _mask(np.zeros((4, 8)))
    with pytest.raises(ValueError):
        compute_metrics([], [])
    with pytest.raises(ValueError):
        compute_metrics([a], [a, a])
    with pytest.raises(ShapeError, match="slice_7"):
        compute_metrics([a], [b], slice_ids=["slice_7"])


def test_confusion_counts_only_score_the_lesion_class():
    pred = np.array([[0, 1], [1, 1]])
    target = np.array([[0, 0], [1, 1]])
    assert confusion_counts(pred, target) == (2, 1, 0)


# ============================================================================
# Hardening and prediction
# ============================================================================


def test_harden_prediction_argmax_and_ties():
    pred = torch.tensor([[[0.9, 0.5, 0.2]], [[0.1, 0.5, 0.8]]])
    hard = harden_prediction(pred)
    assert hard.labels.tolist() == [[0, 0, 1]]
    assert hard.labels.dtype == np.int64
    with pytest.raises(ShapeError):
        harden_prediction(torch.rand(1, 2, 4, 4))


def test_predict_restores_training_mode():
    gen = ThresholdGenerator(0.46)
    gen.train()
    slices = [ImageSlice(pixels=np.full((16, 16), 0.3), slice_id=f"s{i}") for i in range(5)]
    out = predict(gen, slices, batch_size=2)
    assert len(out) == 5
    assert out[0].shape == (2, 16, 16)
    assert gen.training


# ============================================================================
# Evaluation and overlays
# ============================================================================


def _noiseless_pairs(n=12):
    spec = PhantomSpec(image_size=(32, 32), n_slices=n, lesion_probability=0.7, noise_sigma=0.0, seed=9)
    return generate_phantoms(spec)


def test_evaluate_generator_on_separable_phantoms():
    pairs = _noiseless_pairs()
    report = evaluate_generator(ThresholdGenerator(0.46), pairs, batch_size=5)
    assert report.metric_values() == {"iou": 1.0, "dice": 1.0, "recall": 1.0, "precision": 1.0}
    assert report.n_test_slices == 12
    assert report.n_vacuous_slices == sum(1 for _, m in pairs if not m.has_lesion())


def test_evaluate_generator_rejects_empty_test_set():
    with pytest.raises(DatasetError):
        evaluate_generator(ThresholdGenerator(0.46), [])


def test_overlay_colors(tmp_path):
    image = ImageSlice(pixels=np.full((16, 16), 0.4), slice_id="ov")
    target = np.zeros((16, 16), dtype=np.int64)
    pred = np.zeros((16, 16), dtype=np.int64)
    target[0, 0:2] = 1
    pred[0, 1:3] = 1
    path = export_overlay(image, MaskLabel(labels=target), MaskLabel(labels=pred), tmp_path / "ov.png")

    rgb = np.asarray(Image.open(path).convert("RGB"))
    assert tuple(rgb[0, 0]) == (255, 0, 0), "missed lesion is red"
    assert tuple(rgb[0, 1]) == (255, 255, 0), "overlap is yellow"
    assert tuple(rgb[0, 2]) == (0, 255, 0), "false positive is green"
    assert tuple(rgb[8, 8]) == (102, 102, 102)


def test_export_overlays_respects_limit(tmp_path):
    pairs = _noiseless_pairs(6)
    paths = export_overlays(ThresholdGenerator(0.46), pairs, tmp_path, limit=4)
    assert len(paths) == 4
    assert sorted(p.name for p in paths) == sorted(f"{img.slice_id}.png" for img, _ in pairs[:4])
