from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Any, Deque, Dict, List, Optional, Tuple, TypedDict

import numpy as np
import torch

from shared.errors import DatasetError, ShapeError


# --- Data (one 2D slice per sample) ---
@dataclass(frozen=True, eq=False)
class ImageSlice:
    """One grayscale slice with intensities in [0, 1]."""

    pixels: np.ndarray  # (H, W) float64
    slice_id: str

    def __post_init__(self) -> None:
        if self.pixels.ndim != 2:
            raise ShapeError(f"Slice '{self.slice_id}': expected a 2D array, got shape {self.pixels.shape}")
        h, w = self.pixels.shape
        if h < 16 or w < 16 or h % 16 or w % 16:
            raise ShapeError(f"Slice '{self.slice_id}': height and width must be >= 16 and divisible by 16, got {h}x{w}")
        if not np.all(np.isfinite(self.pixels)) or self.pixels.min() < 0.0 or self.pixels.max() > 1.0:
            raise DatasetError(f"Slice '{self.slice_id}': intensities must lie in [0, 1]")

    @property
    def shape(self) -> Tuple[int, int]:
        return self.pixels.shape


@dataclass(frozen=True, eq=False)
class MaskLabel:
    """Per-pixel hard class indices (0 = background, 1 = lesion for C = 2)."""

    labels: np.ndarray  # (H, W) int64
    n_classes: int = 2

    def __post_init__(self) -> None:
        if self.labels.ndim != 2:
            raise ShapeError(f"Mask must be 2D, got shape {self.labels.shape}")
        if self.n_classes < 2:
            raise ValueError(f"n_classes must be >= 2, got {self.n_classes}")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise DatasetError(f"Mask entries must lie in [0, {self.n_classes - 1}]")

    @property
    def shape(self) -> Tuple[int, int]:
        return self.labels.shape

    def has_lesion(self) -> bool:
        return bool(np.any(self.labels > 0))


Pair = Tuple[ImageSlice, MaskLabel]


@dataclass
class DatasetSplit:
    """Labeled, unlabeled (masks discarded) and test partitions of one dataset."""

    labeled: List[Pair]
    unlabeled: List[ImageSlice]
    test: List[Pair]
    labeled_ratio: float
    unlabeled_ratio: float
    unlabeled_pool_size: int = 0

    def __post_init__(self) -> None:
        groups = {
            "labeled": {s.slice_id for s, _ in self.labeled},
            "unlabeled": {s.slice_id for s in self.unlabeled},
            "test": {s.slice_id for s, _ in self.test},
        }
        names = list(groups)
        for i, a in enumerate(names):
            for b in names[i + 1:]:
                overlap = groups[a] & groups[b]
                if overlap:
                    raise DatasetError(f"{a} and {b} sets share slice ids: {sorted(overlap)[:5]}")

    @property
    def mode(self) -> str:
        return "semi-supervised" if self.unlabeled else "fully-supervised"


# --- Training ---
class LossRecord(TypedDict):
    """One logged training iteration."""

    iteration: int
    ce: float
    dice: float
    fm: float
    st: float
    d: float
    gated_in: int
    n_unlabeled: int


class BatchStream:
    """
    Endless index stream over a dataset, reshuffled each time it is exhausted.

    The order, cursor and RNG state are checkpointed so a resumed run draws the
    same batches as an uninterrupted one.
    """

    def __init__(self, size: int, rng: np.random.Generator):
        if size < 1:
            raise ValueError("BatchStream needs at least one item")
        self.size = size
        self.rng = rng
        self.order = rng.permutation(size)
        self.cursor = 0

    def next_indices(self, batch_size: int) -> List[int]:
        out: List[int] = []
        while len(out) < batch_size:
            if self.cursor >= self.size:
                self.order = self.rng.permutation(self.size)
                self.cursor = 0
            out.append(int(self.order[self.cursor]))
            self.cursor += 1
        return out

    def state_dict(self) -> Dict[str, Any]:
        return {
            "size": self.size,
            "order": [int(i) for i in self.order],
            "cursor": self.cursor,
            "rng": self.rng.bit_generator.state,
        }

    def load_state_dict(self, state: Dict[str, Any]) -> None:
        if state["size"] != self.size:
            raise DatasetError(f"Checkpoint stream covers {state['size']} items, dataset has {self.size}")
        self.order = np.asarray(state["order"], dtype=np.int64)
        self.cursor = int(state["cursor"])
        self.rng.bit_generator.state = state["rng"]


@dataclass
class TrainState:
    """Everything needed to continue a training run bit-for-bit."""

    generator: torch.nn.Module
    gen_optimizer: torch.optim.Optimizer
    labeled_stream: BatchStream
    discriminator: Optional[torch.nn.Module] = None
    disc_optimizer: Optional[torch.optim.Optimizer] = None
    unlabeled_stream: Optional[BatchStream] = None
    iteration: int = 0
    running: Dict[str, float] = field(default_factory=dict)
    gate_history: Deque[Tuple[int, int]] = field(default_factory=lambda: deque(maxlen=50))

    @property
    def semi_supervised(self) -> bool:
        return self.discriminator is not None

    @property
    def gated_in_fraction(self) -> float:
        """Fraction of unlabeled samples that passed the τ gate over the recent window."""
        gated = sum(g for g, _ in self.gate_history)
        total = sum(n for _, n in self.gate_history)
        return gated / total if total else 0.0

    def record_gate(self, gated: int, total: int) -> None:
        self.gate_history.append((gated, total))

    def update_running(self, values: Dict[str, float], decay: float = 0.98) -> None:
        for key, value in values.items():
            prev = self.running.get(key)
            self.running[key] = value if prev is None else decay * prev + (1.0 - decay) * value
