"""
Adversarial semi-supervised training loop.

Each iteration draws one labeled and one unlabeled batch of equal size and
  1. updates the discriminator on real pairs (labeled image + one-hot mask)
     against fake pairs (unlabeled image + detached generator prediction),
  2. updates the generator on CE + Dice (labeled), feature matching and the
     confidence-gated self-training loss (unlabeled). The discriminator is in
     eval mode for the generator-side passes, and the self-training term is
     pixel-averaged by default (cfg.st_normalization).
Without unlabeled data the loop runs fully supervised: no discriminator, and
the FM, ST and discriminator terms are recorded as 0.
"""

from __future__ import annotations

import contextlib
import csv
import json
import logging
import signal
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterator, List, Optional, Tuple

import numpy as np
import torch

import feature_flags
from checkpoint_utils import load_checkpoint, save_checkpoint
from datagen import stack_images, stack_masks
from segmentation.losses import (
    compute_ce_loss,
    compute_dice_loss,
    compute_discriminator_loss,
    compute_fm_loss,
    compute_st_loss,
    compute_total_generator_loss,
    gate_mask,
    harden_pseudo_label,
)
from segmentation.metrics import evaluate_generator
from segmentation.nets import GeneratorBackbone, build_discriminator, build_reference_generator, concat_image_mask
from shared.errors import DatasetError, NonFiniteLossError, TrainingAborted
from shared.schemas import METRIC_NAMES, MetricsReport, TrainConfig
from state import BatchStream, DatasetSplit, LossRecord, TrainState

logger = logging.getLogger(__name__)

METRICS_CSV = "metrics.csv"
CONFIG_COPY = "train_config.json"
LOSS_COLUMNS = ("l_ce", "l_dice", "l_fm", "l_st", "l_d")
CSV_COLUMNS = (
    ("iteration",)
    + LOSS_COLUMNS
    + ("gated_in", "gated_in_fraction")
    + tuple(f"test_{name}" for name in METRIC_NAMES)
)

ProgressCallback = Callable[[int, int], None]


@dataclass
class TrainResult:
    state: TrainState
    history: List[LossRecord] = field(default_factory=list)
    evals: List[Tuple[int, MetricsReport]] = field(default_factory=list)
    final_checkpoint: Optional[Path] = None


# ============================================================================
# Construction
# ============================================================================


def make_generator_optimizer(params, lr: float, momentum: float, weight_decay: float) -> torch.optim.SGD:
    return torch.optim.SGD(params, lr=lr, momentum=momentum, weight_decay=weight_decay)


def make_discriminator_optimizer(params, lr: float, betas: Tuple[float, float]) -> torch.optim.Adam:
    return torch.optim.Adam(params, lr=lr, betas=betas)


def build_train_state(
    cfg: TrainConfig,
    n_labeled: int,
    n_unlabeled: int,
    backbone: Optional[GeneratorBackbone] = None,
) -> TrainState:
    """
    Seed torch, build networks and optimizers, and create the batch streams.

    The two streams use independent child seeds of cfg.seed so the labeled batch
    order does not depend on the size of the unlabeled set.
    """
    if n_labeled < 1:
        raise DatasetError("Training needs at least one labeled slice")
    torch.manual_seed(cfg.seed)
    generator = backbone if backbone is not None else build_reference_generator(1, cfg.n_classes, cfg.base_width)
    gen_optimizer = make_generator_optimizer(
        generator.trainable_parameters(), cfg.gen_lr, cfg.gen_momentum, cfg.gen_weight_decay
    )
    labeled_seed, unlabeled_seed = np.random.SeedSequence(cfg.seed).spawn(2)
    state = TrainState(
        generator=generator,
        gen_optimizer=gen_optimizer,
        labeled_stream=BatchStream(n_labeled, np.random.default_rng(labeled_seed)),
        gate_history=deque(maxlen=cfg.gate_window),
    )
    if n_unlabeled > 0:
        in_channels = getattr(generator, "in_channels", 1) + cfg.n_classes
        state.discriminator = build_discriminator(in_channels, cfg.feature_layer)
        state.disc_optimizer = make_discriminator_optimizer(
            state.discriminator.parameters(), cfg.disc_lr, cfg.disc_betas
        )
        state.unlabeled_stream = BatchStream(n_unlabeled, np.random.default_rng(unlabeled_seed))
    return state


# ============================================================================
# One iteration
# ============================================================================


def _set_requires_grad(module: torch.nn.Module, flag: bool) -> None:
    for param in module.parameters():
        param.requires_grad_(flag)


def scale_st_loss(st: torch.Tensor, pred: torch.Tensor, normalization: str) -> torch.Tensor:
    """
    Bring the per-sample pixel-summed self-training loss onto the scale of the supervised terms.

    "pixel" divides by H * W, giving the pixel-averaged cross-entropy over gated
    samples; "sample" keeps the pixel sum.
    """
    if normalization == "pixel":
        return st / (pred.shape[-2] * pred.shape[-1])
    if normalization == "sample":
        return st
    raise ValueError(f"Unknown st_normalization '{normalization}'")


def train_step(
    state: TrainState,
    labeled_batch: Tuple[torch.Tensor, torch.Tensor],
    unlabeled_batch: Optional[torch.Tensor],
    cfg: TrainConfig,
) -> Tuple[TrainState, LossRecord]:
    """
    One discriminator update followed by one generator update.

    Args:
        state: Mutable training state; its iteration counter is advanced
        labeled_batch: images (B, 1, H, W) and hard masks (B, H, W)
        unlabeled_batch: images (B, 1, H, W), or None / empty for a supervised step
        cfg: Loss weights, tau and class count

    Returns:
        The same state and the loss record of this iteration

    Raises:
        TrainingAborted: a loss term is NaN or infinite
    """
    x_l, y_l = labeled_batch
    if x_l.shape[0] == 0:
        raise ValueError("Labeled batch is empty")
    iteration = state.iteration + 1
    semi = state.semi_supervised and unlabeled_batch is not None and unlabeled_batch.shape[0] > 0
    generator = state.generator
    generator.train()

    try:
        pred_l = generator(x_l)
        zero = pred_l.new_zeros(())
        fm, st, loss_d = zero, zero, zero
        gated_in, n_unlabeled = 0, 0

        if semi:
            disc = state.discriminator
            disc.train()
            x_u = unlabeled_batch
            pred_u = generator(x_u)
            real_pairs = concat_image_mask(x_l, y_l, cfg.n_classes)

            # Discriminator update; the fake masks carry no gradient back to G.
            _set_requires_grad(disc, True)
            state.disc_optimizer.zero_grad(set_to_none=True)
            d_real = disc(real_pairs).prob_real
            d_fake = disc(concat_image_mask(x_u, pred_u.detach())).prob_real
            loss_d = compute_discriminator_loss(d_real, d_fake)
            loss_d.backward()
            state.disc_optimizer.step()

            # Generator-side terms through a frozen discriminator in eval mode, so the
            # FM features and the gate confidences carry no dropout noise.
            _set_requires_grad(disc, False)
            disc.eval()
            try:
                with torch.no_grad():
                    real_features = disc(real_pairs).features
                fake_out = disc(concat_image_mask(x_u, pred_u))
                fm = compute_fm_loss(real_features, fake_out.features)
                pseudo = harden_pseudo_label(pred_u, fake_out.prob_real.detach())
                st = scale_st_loss(compute_st_loss(pred_u, pseudo, cfg.tau), pred_u, cfg.st_normalization)
                gated_in = int(gate_mask(pseudo.confidence, cfg.tau).sum().item())
                n_unlabeled = int(x_u.shape[0])
            finally:
                disc.train()
                _set_requires_grad(disc, True)

        ce = compute_ce_loss(pred_l, y_l)
        dice = compute_dice_loss(pred_l, y_l, class_index=1)
        total = compute_total_generator_loss(ce, dice, fm, st, cfg.loss_weights)
        state.gen_optimizer.zero_grad(set_to_none=True)
        total.backward()
        state.gen_optimizer.step()
    except NonFiniteLossError as exc:
        raise TrainingAborted(iteration, exc.term, exc.value) from exc

    state.iteration = iteration
    record: LossRecord = {
        "iteration": iteration,
        "ce": float(ce.detach()),
        "dice": float(dice.detach()),
        "fm": float(fm.detach()),
        "st": float(st.detach()),
        "d": float(loss_d.detach()),
        "gated_in": gated_in,
        "n_unlabeled": n_unlabeled,
    }
    if semi:
        state.record_gate(gated_in, n_unlabeled)
    state.update_running({k: record[k] for k in ("ce", "dice", "fm", "st", "d")})
    logger.debug(
        f"iter {iteration}: ce={record['ce']:.4f} dice={record['dice']:.4f} fm={record['fm']:.4f} "
        f"st={record['st']:.4f} d={record['d']:.4f} gated={gated_in}/{n_unlabeled}"
    )
    return state, record


# ============================================================================
# Metrics stream
# ============================================================================


def _fmt(value: float) -> str:
    return f"{value:.9g}"


class MetricsLog:
    """Append-only metrics.csv writer; on resume, rows past the checkpoint are dropped."""

    def __init__(self, path: Path, resume_iteration: int = 0):
        self.path = Path(path)
        kept: List[Dict[str, str]] = []
        if resume_iteration and self.path.exists():
            with self.path.open("r", newline="", encoding="utf-8") as f:
                kept = [row for row in csv.DictReader(f) if int(row["iteration"]) <= resume_iteration]
        with self.path.open("w", newline="", encoding="utf-8") as f:
            writer = csv.DictWriter(f, fieldnames=CSV_COLUMNS)
            writer.writeheader()
            writer.writerows(kept)

    def append(self, record: LossRecord, gated_fraction: float, report: Optional[MetricsReport] = None) -> None:
        row = {
            "iteration": record["iteration"],
            "l_ce": _fmt(record["ce"]),
            "l_dice": _fmt(record["dice"]),
            "l_fm": _fmt(record["fm"]),
            "l_st": _fmt(record["st"]),
            "l_d": _fmt(record["d"]),
            "gated_in": record["gated_in"],
            "gated_in_fraction": _fmt(gated_fraction),
        }
        for name in METRIC_NAMES:
            row[f"test_{name}"] = _fmt(getattr(report, name)) if report is not None else ""
        with self.path.open("a", newline="", encoding="utf-8") as f:
            csv.DictWriter(f, fieldnames=CSV_COLUMNS).writerow(row)


def read_metrics_csv(path: Path) -> List[Dict[str, str]]:
    with Path(path).open("r", newline="", encoding="utf-8") as f:
        return list(csv.DictReader(f))


# ============================================================================
# Signals
# ============================================================================


class _StopFlag:
    def __init__(self) -> None:
        self.signum: Optional[int] = None

    @property
    def requested(self) -> bool:
        return self.signum is not None


@contextlib.contextmanager
def graceful_stop(enabled: bool = True) -> Iterator[_StopFlag]:
    """Turn SIGINT/SIGTERM into a flag the loop checks after each iteration."""
    flag = _StopFlag()
    if not enabled:
        yield flag
        return

    def _handler(signum, _frame):
        logger.warning(f"Received signal {signum}; stopping after the current iteration")
        flag.signum = signum

    previous = {}
    try:
        for sig in (signal.SIGINT, signal.SIGTERM):
            previous[sig] = signal.signal(sig, _handler)
    except ValueError:
        # signal.signal only works in the main thread.
        pass
    try:
        yield flag
    finally:
        for sig, handler in previous.items():
            signal.signal(sig, handler)


# ============================================================================
# Full run
# ============================================================================


def train(
    split: DatasetSplit,
    cfg: TrainConfig,
    backbone: Optional[GeneratorBackbone] = None,
    *,
    run_dir: Optional[Path] = None,
    resume_from: Optional[Path] = None,
    progress: Optional[ProgressCallback] = None,
) -> TrainResult:
    """
    Run cfg.iterations training steps over a dataset split.

    Fully supervised when split.unlabeled is empty. With a run directory, writes
    metrics.csv, train_config.json, periodic checkpoints and a final checkpoint;
    a SIGINT/SIGTERM writes a checkpoint and then raises KeyboardInterrupt.

    Raises:
        DatasetError: split.labeled is empty
        TrainingAborted: a loss went non-finite (iteration and term attached)
    """
    if not split.labeled:
        raise DatasetError("Training needs at least one labeled slice")
    if feature_flags.ENABLE_DETERMINISTIC_ALGORITHMS:
        torch.use_deterministic_algorithms(True, warn_only=True)

    state = build_train_state(cfg, len(split.labeled), len(split.unlabeled), backbone)
    mode = "semi-supervised" if state.semi_supervised else "fully-supervised"
    x_labeled = stack_images([img for img, _ in split.labeled])
    y_labeled = stack_masks([mask for _, mask in split.labeled])
    x_unlabeled = stack_images(split.unlabeled) if state.semi_supervised else None

    if resume_from is not None:
        load_checkpoint(Path(resume_from), state)

    metrics_log: Optional[MetricsLog] = None
    if run_dir is not None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / CONFIG_COPY).write_text(
            json.dumps(cfg.model_dump(mode="json"), indent=2, sort_keys=True), encoding="utf-8"
        )
        metrics_log = MetricsLog(run_dir / METRICS_CSV, resume_iteration=state.iteration)

    logger.info(
        f"Training {mode}: {len(split.labeled)} labeled, {len(split.unlabeled)} unlabeled, "
        f"{cfg.iterations} iterations, batch {cfg.batch_size}, tau={cfg.tau}"
        + (f", resuming at {state.iteration}" if state.iteration else "")
    )

    result = TrainResult(state=state)
    saved_at = -1
    with graceful_stop(enabled=run_dir is not None) as stop:
        while state.iteration < cfg.iterations:
            idx = state.labeled_stream.next_indices(cfg.batch_size)
            labeled_batch = (x_labeled[idx], y_labeled[idx])
            unlabeled_batch = None
            if state.semi_supervised:
                unlabeled_batch = x_unlabeled[state.unlabeled_stream.next_indices(cfg.batch_size)]

            _, record = train_step(state, labeled_batch, unlabeled_batch, cfg)
            result.history.append(record)
            it = state.iteration

            report: Optional[MetricsReport] = None
            if cfg.eval_every and it % cfg.eval_every == 0 and split.test:
                report = evaluate_generator(state.generator, split.test, cfg.batch_size)
                result.evals.append((it, report))
                logger.info(
                    f"iter {it}: test dice={report.dice:.4f} iou={report.iou:.4f} "
                    f"recall={report.recall:.4f} precision={report.precision:.4f} "
                    f"gated_in_fraction={state.gated_in_fraction:.3f}"
                )

            if metrics_log is not None and (it % cfg.log_every == 0 or report is not None):
                metrics_log.append(record, state.gated_in_fraction, report)

            if run_dir is not None and cfg.checkpoint_every and it % cfg.checkpoint_every == 0:
                result.final_checkpoint = save_checkpoint(run_dir, state, cfg)
                saved_at = it

            if progress is not None:
                progress(it, cfg.iterations)

            if stop.requested and it < cfg.iterations:
                if saved_at != it:
                    result.final_checkpoint = save_checkpoint(run_dir, state, cfg)
                raise KeyboardInterrupt(f"Interrupted at iteration {it}")

    if run_dir is not None and saved_at != state.iteration:
        result.final_checkpoint = save_checkpoint(run_dir, state, cfg)
    logger.info(f"Training finished at iteration {state.iteration} ({mode})")
    return result
