"""
Shared Pydantic schemas for configuration, reports and run manifests.

Everything here is JSON serializable so it can be written next to run
artifacts and read back by the CLI.
"""

from __future__ import annotations

import math
from typing import Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

Mode = Literal["semi-supervised", "fully-supervised"]
Axis = Literal["labeled", "unlabeled"]
StNormalization = Literal["pixel", "sample"]


class PhantomSpec(BaseModel):
    """Recipe for a synthetic lesion dataset (one 2D slice per sample)."""

    model_config = ConfigDict(frozen=True)

    image_size: Tuple[int, int] = (64, 64)
    n_slices: int = Field(default=1000, ge=0)
    lesion_probability: float = Field(default=0.4, ge=0.0, le=1.0)
    lesion_intensity_delta: float = -0.08
    lesion_radius_range: Tuple[int, int] = (2, 8)
    max_lesions_per_slice: int = Field(default=3, ge=1)
    noise_sigma: float = Field(default=0.05, ge=0.0)
    background_mean: float = Field(default=0.5, ge=0.0, le=1.0)
    seed: int = 0

    @field_validator("image_size")
    @classmethod
    def _check_image_size(cls, value: Tuple[int, int]) -> Tuple[int, int]:
        for dim in value:
            if dim < 16 or dim % 16:
                raise ValueError(f"each image dimension must be >= 16 and divisible by 16, got {value}")
        return value

    @model_validator(mode="after")
    def _check_radius_range(self) -> "PhantomSpec":
        lo, hi = self.lesion_radius_range
        if lo < 1:
            raise ValueError(f"lesion_radius_range: minimum must be >= 1, got {lo}")
        if hi < lo:
            raise ValueError(f"lesion_radius_range: maximum {hi} is below minimum {lo}")
        if hi > min(self.image_size) / 2:
            raise ValueError(
                f"lesion_radius_range: maximum {hi} exceeds half the smallest image side {min(self.image_size)}"
            )
        return self


class LossWeights(BaseModel):
    """Weights of the four generator loss terms (Dice 0.6, CE 0.4, FM 0.1, ST 1)."""

    model_config = ConfigDict(frozen=True)

    w_ce: float = Field(default=0.4, ge=0.0)
    w_dice: float = Field(default=0.6, ge=0.0)
    w_fm: float = Field(default=0.1, ge=0.0)
    w_st: float = Field(default=1.0, ge=0.0)


class TrainConfig(BaseModel):
    """Hyperparameters for adversarial training. Defaults are the full-scale "standard" profile."""

    model_config = ConfigDict(frozen=True)

    loss_weights: LossWeights = Field(default_factory=LossWeights)
    tau: float = Field(default=0.6, ge=0.0, le=1.0)
    gen_lr: float = Field(default=2.5e-4, gt=0.0)
    gen_momentum: float = Field(default=0.9, ge=0.0)
    gen_weight_decay: float = Field(default=5e-4, ge=0.0)
    disc_lr: float = Field(default=1e-4, gt=0.0)
    disc_betas: Tuple[float, float] = (0.9, 0.999)
    batch_size: int = Field(default=12, ge=1)
    iterations: int = Field(default=2000, ge=1)
    seed: int = 1
    checkpoint_every: int = Field(default=500, ge=0, description="0 disables periodic checkpoints")
    eval_every: int = Field(default=250, ge=0, description="0 disables periodic evaluation")
    log_every: int = Field(default=1, ge=1)
    n_classes: int = Field(default=2, ge=2)
    base_width: int = Field(default=16, ge=4)
    feature_layer: int = Field(default=4, ge=1, le=4, description="Discriminator layer tapped for feature matching")
    gate_window: int = Field(default=50, ge=1, description="Iterations averaged into gated_in_fraction")
    st_normalization: StNormalization = Field(
        default="pixel", description="'pixel' averages the self-training CE over H*W; 'sample' keeps the pixel sum"
    )


class MetricsReport(BaseModel):
    """Pooled-pixel lesion metrics plus the run metadata they belong to."""

    iou: float = Field(ge=0.0, le=1.0)
    dice: float = Field(ge=0.0, le=1.0)
    recall: float = Field(ge=0.0, le=1.0)
    precision: float = Field(ge=0.0, le=1.0)
    tp: int = Field(default=0, ge=0)
    fp: int = Field(default=0, ge=0)
    fn: int = Field(default=0, ge=0)
    n_test_slices: int = Field(default=0, ge=0)
    n_vacuous_slices: int = Field(default=0, ge=0)
    labeled_ratio: Optional[float] = None
    unlabeled_ratio: Optional[float] = None
    mode: Optional[Mode] = None
    seed: Optional[int] = None

    def metric_values(self) -> Dict[str, float]:
        return {"iou": self.iou, "dice": self.dice, "recall": self.recall, "precision": self.precision}


METRIC_NAMES: Tuple[str, ...] = ("iou", "dice", "recall", "precision")


class SweepRow(BaseModel):
    """One ratio of a sweep: per-seed reports and their aggregate."""

    label: str = Field(description="Ratio as printed, or 'baseline' for the fully supervised row")
    ratio: Optional[float] = None
    mode: Mode
    reports: List[MetricsReport]
    mean: Dict[str, float]
    std: Dict[str, float]


class SweepResult(BaseModel):
    axis: Axis
    rows: List[SweepRow]


class RunManifest(BaseModel):
    """Self-description of one CLI run directory."""

    command: str
    config: Dict
    started_at: str
    finished_at: Optional[str] = None
    artifacts: Dict[str, str] = Field(default_factory=dict)
    input_hashes: Dict[str, str] = Field(default_factory=dict)
    artifact_hashes: Dict[str, str] = Field(default_factory=dict)


class RunConfig(BaseModel):
    """
    Flat, file-level configuration covering PhantomSpec, the split and TrainConfig.

    This is the schema of the JSON file passed with --config. Keys are flat so the
    file stays readable from any language.
    """

    model_config = ConfigDict(extra="forbid")

    # Phantom data
    image_height: int = 64
    image_width: int = 64
    n_slices: int = Field(default=1000, ge=0)
    lesion_probability: float = Field(default=0.4, ge=0.0, le=1.0)
    lesion_intensity_delta: float = -0.08
    lesion_radius_min: int = 2
    lesion_radius_max: int = 8
    max_lesions_per_slice: int = Field(default=3, ge=1)
    noise_sigma: float = Field(default=0.05, ge=0.0)
    background_mean: float = Field(default=0.5, ge=0.0, le=1.0)
    data_seed: int = 0

    # Split
    labeled_ratio: float = Field(default=0.3, gt=0.0, le=1.0)
    unlabeled_ratio: float = Field(default=1.0, ge=0.0, le=1.0)
    test_fraction: float = Field(default=0.2, gt=0.0, lt=1.0)
    split_seed: int = 0
    mode: Mode = "semi-supervised"

    # Training
    w_ce: float = Field(default=0.4, ge=0.0)
    w_dice: float = Field(default=0.6, ge=0.0)
    w_fm: float = Field(default=0.1, ge=0.0)
    w_st: float = Field(default=1.0, ge=0.0)
    tau: float = Field(default=0.6, ge=0.0, le=1.0)
    gen_lr: float = Field(default=2.5e-4, gt=0.0)
    gen_momentum: float = Field(default=0.9, ge=0.0)
    gen_weight_decay: float = Field(default=5e-4, ge=0.0)
    disc_lr: float = Field(default=1e-4, gt=0.0)
    disc_beta1: float = Field(default=0.9, ge=0.0, lt=1.0)
    disc_beta2: float = Field(default=0.999, ge=0.0, lt=1.0)
    batch_size: int = Field(default=12, ge=1)
    iterations: int = Field(default=2000, ge=1)
    seed: int = 1
    checkpoint_every: int = Field(default=500, ge=0)
    eval_every: int = Field(default=250, ge=0)
    log_every: int = Field(default=1, ge=1)
    base_width: int = Field(default=16, ge=4)
    feature_layer: int = Field(default=4, ge=1, le=4)
    gate_window: int = Field(default=50, ge=1)
    st_normalization: StNormalization = "pixel"

    @field_validator(
        "w_ce", "w_dice", "w_fm", "w_st", "tau", "gen_lr", "disc_lr", "lesion_intensity_delta", "noise_sigma"
    )
    @classmethod
    def _finite(cls, value: float) -> float:
        if not math.isfinite(value):
            raise ValueError("must be a finite number")
        return value

    def phantom_spec(self) -> PhantomSpec:
        return PhantomSpec(
            image_size=(self.image_height, self.image_width),
            n_slices=self.n_slices,
            lesion_probability=self.lesion_probability,
            lesion_intensity_delta=self.lesion_intensity_delta,
            lesion_radius_range=(self.lesion_radius_min, self.lesion_radius_max),
            max_lesions_per_slice=self.max_lesions_per_slice,
            noise_sigma=self.noise_sigma,
            background_mean=self.background_mean,
            seed=self.data_seed,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            loss_weights=LossWeights(w_ce=self.w_ce, w_dice=self.w_dice, w_fm=self.w_fm, w_st=self.w_st),
            tau=self.tau,
            gen_lr=self.gen_lr,
            gen_momentum=self.gen_momentum,
            gen_weight_decay=self.gen_weight_decay,
            disc_lr=self.disc_lr,
            disc_betas=(self.disc_beta1, self.disc_beta2),
            batch_size=self.batch_size,
            iterations=self.iterations,
            seed=self.seed,
            checkpoint_every=self.checkpoint_every,
            eval_every=self.eval_every,
            log_every=self.log_every,
            base_width=self.base_width,
            feature_layer=self.feature_layer,
            gate_window=self.gate_window,
            st_normalization=self.st_normalization,
        )

    def effective_unlabeled_ratio(self) -> float:
        """Fully supervised mode discards the unlabeled pool entirely."""
        return 0.0 if self.mode == "fully-supervised" else self.unlabeled_ratio
