"""
Lesion metrics, prediction hardening and evaluation of a trained generator.

Metrics pool TP/FP/FN over every pixel of every test slice (micro-aggregation)
and then form IoU, Dice, recall and precision from the pooled counts. A ratio
whose numerator and denominator are both 0 is defined as 1.
"""

from __future__ import annotations

import logging
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
from PIL import Image

from datagen import stack_images
from shared.errors import DatasetError, ShapeError
from shared.schemas import MetricsReport
from state import ImageSlice, MaskLabel, Pair

logger = logging.getLogger(__name__)

LESION_CLASS = 1


def _ratio(num: int, den: int, name: str) -> float:
    if den == 0:
        logger.warning(f"{name} is 0/0 on this test set; reporting 1.0")
        return 1.0
    return num / den


def confusion_counts(pred: np.ndarray, target: np.ndarray, lesion_class: int = LESION_CLASS) -> Tuple[int, int, int]:
    """(TP, FP, FN) of the lesion class for one pair of hard label arrays."""
    p = pred == lesion_class
    g = target == lesion_class
    return int(np.sum(p & g)), int(np.sum(p & ~g)), int(np.sum(~p & g))


def compute_metrics(
    preds: Sequence[MaskLabel],
    targets: Sequence[MaskLabel],
    slice_ids: Optional[Sequence[str]] = None,
) -> MetricsReport:
    """Micro-aggregated IoU, Dice, recall and precision of the lesion class."""
    if not preds or not targets:
        raise ValueError("compute_metrics needs at least one prediction/target pair")
    if len(preds) != len(targets):
        raise ValueError(f"Got {len(preds)} predictions for {len(targets)} targets")

    tp = fp = fn = 0
    n_vacuous = 0
    for i, (pred, target) in enumerate(zip(preds, targets)):
        if pred.shape != target.shape:
            name = slice_ids[i] if slice_ids is not None else f"#{i}"
            raise ShapeError(f"Slice {name}: prediction {pred.shape} vs target {target.shape}")
        s_tp, s_fp, s_fn = confusion_counts(pred.labels, target.labels)
        tp, fp, fn = tp + s_tp, fp + s_fp, fn + s_fn
        if not pred.has_lesion() and not target.has_lesion():
            n_vacuous += 1

    if n_vacuous:
        logger.info(f"{n_vacuous}/{len(preds)} test slices have no predicted and no true lesion pixels")

    return MetricsReport(
        iou=_ratio(tp, tp + fp + fn, "IoU"),
        dice=_ratio(2 * tp, 2 * tp + fp + fn, "Dice"),
        recall=_ratio(tp, tp + fn, "recall"),
        precision=_ratio(tp, tp + fp, "precision"),
        tp=tp,
        fp=fp,
        fn=fn,
        n_test_slices=len(preds),
        n_vacuous_slices=n_vacuous,
    )


def harden_prediction(pred: torch.Tensor) -> MaskLabel:
    """Per-pixel argmax of a (C, H, W) soft prediction; ties go to background."""
    if pred.dim() != 3:
        raise ShapeError(f"Expected a single (C, H, W) prediction, got {tuple(pred.shape)}")
    labels = pred.detach().argmax(dim=0).cpu().numpy().astype(np.int64)
    return MaskLabel(labels=labels, n_classes=pred.shape[0])


def predict(generator: torch.nn.Module, slices: Sequence[ImageSlice], batch_size: int = 12) -> List[torch.Tensor]:
    """Soft predictions (C, H, W) for each slice, computed in eval mode without gradients."""
    was_training = generator.training
    generator.eval()
    device = next(generator.parameters()).device
    out: List[torch.Tensor] = []
    try:
        with torch.no_grad():
            for start in range(0, len(slices), batch_size):
                x = stack_images(slices[start:start + batch_size]).to(device)
                out.extend(generator(x).cpu())
    finally:
        generator.train(was_training)
    return out


def evaluate_generator(generator: torch.nn.Module, test_pairs: Sequence[Pair], batch_size: int = 12) -> MetricsReport:
    if not test_pairs:
        raise DatasetError("Test split is empty")
    images = [img for img, _ in test_pairs]
    hard = [harden_prediction(p) for p in predict(generator, images, batch_size)]
    return compute_metrics(hard, [m for _, m in test_pairs], [img.slice_id for img in images])


def export_overlay(image: ImageSlice, target: MaskLabel, pred: MaskLabel, path: Path) -> Path:
    """RGB overlay: true lesion pixels red, predicted green, overlap yellow."""
    gray = np.round(image.pixels * 255.0).astype(np.uint8)
    rgb = np.stack([gray, gray, gray], axis=-1)
    g = target.labels == LESION_CLASS
    p = pred.labels == LESION_CLASS
    rgb[g & ~p] = (255, 0, 0)
    rgb[p & ~g] = (0, 255, 0)
    rgb[p & g] = (255, 255, 0)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(rgb).save(path)
    return path


def export_overlays(
    generator: torch.nn.Module,
    test_pairs: Sequence[Pair],
    out_dir: Path,
    limit: int = 16,
    batch_size: int = 12,
) -> List[Path]:
    """Write overlays for the first `limit` test slices as <out_dir>/<slice_id>.png."""
    pairs = list(test_pairs)[:limit]
    preds = predict(generator, [img for img, _ in pairs], batch_size)
    paths = [
        export_overlay(img, mask, harden_prediction(p), Path(out_dir) / f"{img.slice_id}.png")
        for (img, mask), p in zip(pairs, preds)
    ]
    logger.info(f"Wrote {len(paths)} overlays to {out_dir}")
    return paths
