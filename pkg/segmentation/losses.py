"""
Generator and discriminator losses.

Generator objective = w_ce * CE + w_dice * Dice + w_fm * FM + w_st * ST, where
  - CE and Dice are supervised terms on labeled slices,
  - FM matches batch-mean discriminator features of real and generated pairs,
  - ST is cross-entropy against confidence-gated pseudo-labels of unlabeled slices.
The discriminator minimizes binary cross-entropy between real and generated pairs.

Every log takes its argument clamped to [EPS, 1] (or [EPS, 1 - EPS] for the
discriminator), so saturated outputs give large but finite losses.
"""

from __future__ import annotations

import logging
from typing import NamedTuple, Union

import torch
import torch.nn.functional as F

from shared.errors import NonFiniteLossError, ShapeError
from shared.schemas import LossWeights

logger = logging.getLogger(__name__)

EPS = 1e-7
DICE_SMOOTH = 1e-6

Scalar = Union[torch.Tensor, float]


class PseudoLabel(NamedTuple):
    """Hardened generator prediction used as an unlabeled training target."""

    onehot: torch.Tensor  # (B, C, H, W), exactly one 1 per pixel, no grad
    confidence: torch.Tensor  # (B,) discriminator prob_real, no grad


def _check_pred_target(pred: torch.Tensor, target: torch.Tensor, term: str) -> None:
    if pred.dim() != 4:
        raise ShapeError(f"{term}: predictions must be (B, C, H, W), got {tuple(pred.shape)}")
    if target.dim() != 3 or target.shape[0] != pred.shape[0] or target.shape[-2:] != pred.shape[-2:]:
        raise ShapeError(f"{term}: target {tuple(target.shape)} does not match prediction {tuple(pred.shape)}")
    if not torch.isfinite(pred).all():
        raise NonFiniteLossError(term, float("nan"))


def _clamped_log(p: torch.Tensor) -> torch.Tensor:
    return torch.log(p.clamp(min=EPS, max=1.0))


def compute_ce_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Pixel-averaged cross-entropy of soft predictions (B, C, H, W) against hard labels (B, H, W)."""
    _check_pred_target(pred, target, "ce")
    log_p = _clamped_log(pred)
    picked = log_p.gather(1, target.long().unsqueeze(1)).squeeze(1)
    return -picked.mean()


def compute_dice_loss(pred: torch.Tensor, target: torch.Tensor, class_index: int = 1) -> torch.Tensor:
    """
    1 - DSC for one class, with DSC = (2 sum(p g) + s) / (sum(p^2) + sum(g^2) + s).

    Sums run over every pixel of the batch. With an empty target and an empty
    prediction DSC is 1, so the loss is 0.
    """
    _check_pred_target(pred, target, "dice")
    if not 0 <= class_index < pred.shape[1]:
        raise ValueError(f"class_index {class_index} out of range for {pred.shape[1]} classes")
    p = pred[:, class_index]
    g = (target == class_index).to(p.dtype)
    numerator = 2.0 * (p * g).sum() + DICE_SMOOTH
    denominator = (p * p).sum() + (g * g).sum() + DICE_SMOOTH
    return 1.0 - numerator / denominator


def compute_fm_loss(real_features: torch.Tensor, fake_features: torch.Tensor) -> torch.Tensor:
    """Mean absolute difference between batch-mean real and fake discriminator features."""
    if real_features.shape[0] == 0 or fake_features.shape[0] == 0:
        raise ValueError("fm: feature batches must be nonempty")
    if real_features.shape[1:] != fake_features.shape[1:]:
        raise ShapeError(
            f"fm: real features {tuple(real_features.shape)} and fake features "
            f"{tuple(fake_features.shape)} differ"
        )
    real_mean = real_features.detach().mean(dim=0)
    fake_mean = fake_features.mean(dim=0)
    return torch.mean(torch.abs(real_mean - fake_mean))


def harden_pseudo_label(pred: torch.Tensor, d_prob: torch.Tensor) -> PseudoLabel:
    """
    Per-pixel argmax of (B, C, H, W) predictions paired with per-sample confidences.

    Ties go to the lower class index. Both outputs are detached from the graph.
    """
    if pred.dim() != 4:
        raise ShapeError(f"Predictions must be (B, C, H, W), got {tuple(pred.shape)}")
    d_prob = torch.as_tensor(d_prob, dtype=pred.dtype, device=pred.device).reshape(-1)
    if d_prob.shape[0] != pred.shape[0]:
        raise ShapeError(f"Got {d_prob.shape[0]} confidences for {pred.shape[0]} predictions")
    if (d_prob < 0).any() or (d_prob > 1).any():
        raise ValueError("Confidences must lie in [0, 1]")
    with torch.no_grad():
        # torch.argmax returns the first maximal index.
        labels = pred.argmax(dim=1)
        onehot = F.one_hot(labels, num_classes=pred.shape[1]).permute(0, 3, 1, 2).to(pred.dtype)
    return PseudoLabel(onehot=onehot.detach(), confidence=d_prob.detach())


def gate_mask(confidence: torch.Tensor, tau: float) -> torch.Tensor:
    """Boolean (B,) mask of samples whose confidence clears the threshold."""
    return confidence >= tau


def compute_st_loss(pred: torch.Tensor, pseudo: PseudoLabel, tau: float) -> torch.Tensor:
    """
    Self-training loss over gated-in samples.

    Each sample with confidence >= tau contributes its pixel-summed cross-entropy
    against its pseudo-label; the total is divided by the number of such samples.
    Returns exactly 0 when no sample is gated in.
    """
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must be in [0, 1], got {tau}")
    if pred.shape != pseudo.onehot.shape:
        raise ShapeError(f"st: prediction {tuple(pred.shape)} and pseudo-label {tuple(pseudo.onehot.shape)} differ")
    if pseudo.confidence.shape[0] != pred.shape[0]:
        raise ShapeError(f"st: {pseudo.confidence.shape[0]} confidences for {pred.shape[0]} predictions")
    if not torch.isfinite(pred).all():
        raise NonFiniteLossError("st", float("nan"))

    gate = gate_mask(pseudo.confidence, tau).to(pred.dtype)
    per_sample = -(pseudo.onehot.detach() * _clamped_log(pred)).sum(dim=(1, 2, 3))
    n_gated = gate.sum()
    return (per_sample * gate).sum() / n_gated.clamp(min=1.0)


def compute_total_generator_loss(
    ce: Scalar,
    dice: Scalar,
    fm: Scalar,
    st: Scalar,
    w: LossWeights,
) -> torch.Tensor:
    """Weighted sum of the four generator terms; raises NonFiniteLossError naming a bad term."""
    terms = {"ce": ce, "dice": dice, "fm": fm, "st": st}
    for name, value in terms.items():
        value_t = torch.as_tensor(value)
        if not torch.isfinite(value_t).all():
            raise NonFiniteLossError(name, float(value_t.detach().reshape(-1)[0]))
    total = w.w_ce * terms["ce"] + w.w_dice * terms["dice"] + w.w_fm * terms["fm"] + w.w_st * terms["st"]
    return torch.as_tensor(total)


def compute_discriminator_loss(d_real: torch.Tensor, d_fake: torch.Tensor) -> torch.Tensor:
    """-(mean log D(real) + mean log(1 - D(fake))), the minimization form of the GAN objective."""
    d_real = torch.as_tensor(d_real).reshape(-1)
    d_fake = torch.as_tensor(d_fake).reshape(-1)
    if d_real.numel() == 0 or d_fake.numel() == 0:
        raise ValueError("Discriminator loss needs nonempty real and fake batches")
    if not (torch.isfinite(d_real).all() and torch.isfinite(d_fake).all()):
        raise NonFiniteLossError("d", float("nan"))
    for name, values in (("d_real", d_real), ("d_fake", d_fake)):
        if (values < 0).any() or (values > 1).any():
            raise ValueError(f"{name} must lie in [0, 1]")
    log_real = torch.log(d_real.clamp(min=EPS, max=1.0 - EPS))
    log_not_fake = torch.log((1.0 - d_fake).clamp(min=EPS, max=1.0 - EPS))
    return -(log_real.mean() + log_not_fake.mean())
