"""
Synthetic phantom lesions, PNG slice/mask loading and labeled/unlabeled/test splits.

Phantoms mimic faint hypoattenuating lesions on a flat background: every lesion
is a rotated ellipse whose pixels are shifted by lesion_intensity_delta before
Gaussian noise is added. The mask is exactly the union of the ellipses.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterator, List, Sequence, Tuple

import numpy as np
import torch
from PIL import Image

from shared.errors import DatasetError, ShapeError
from shared.schemas import PhantomSpec
from state import DatasetSplit, ImageSlice, MaskLabel, Pair

logger = logging.getLogger(__name__)

IMAGES_SUBDIR = "images"
MASKS_SUBDIR = "masks"
MANIFEST_NAME = "manifest.json"


@dataclass(frozen=True)
class Ellipse:
    """Rotated ellipse in pixel coordinates (center row/col, semi-axes, angle in radians)."""

    cy: int
    cx: int
    a: int
    b: int
    theta: float


@dataclass(frozen=True, eq=False)
class PhantomSample:
    image: ImageSlice
    mask: MaskLabel
    ellipses: Tuple[Ellipse, ...]

    @property
    def has_lesion(self) -> bool:
        return bool(self.ellipses)


def ellipse_mask(shape: Tuple[int, int], ellipse: Ellipse) -> np.ndarray:
    """Boolean (H, W) array of the pixel centers inside the ellipse."""
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w]
    dy = yy - ellipse.cy
    dx = xx - ellipse.cx
    cos_t, sin_t = math.cos(ellipse.theta), math.sin(ellipse.theta)
    u = dx * cos_t + dy * sin_t
    v = -dx * sin_t + dy * cos_t
    return (u / ellipse.a) ** 2 + (v / ellipse.b) ** 2 <= 1.0


def _sample_ellipses(rng: np.random.Generator, spec: PhantomSpec) -> Tuple[Ellipse, ...]:
    h, w = spec.image_size
    lo, hi = spec.lesion_radius_range
    n = int(rng.integers(1, spec.max_lesions_per_slice + 1))
    out = []
    for _ in range(n):
        out.append(
            Ellipse(
                cy=int(rng.integers(0, h)),
                cx=int(rng.integers(0, w)),
                a=int(rng.integers(lo, hi + 1)),
                b=int(rng.integers(lo, hi + 1)),
                theta=float(rng.uniform(0.0, math.pi)),
            )
        )
    return tuple(out)


def iter_phantoms(spec: PhantomSpec) -> Iterator[PhantomSample]:
    """
    Yield spec.n_slices phantoms. Deterministic for a fixed spec (seed included).

    Random draws per slice, in order: lesion flag, ellipses (lesion slices only), noise.
    """
    rng = np.random.default_rng(spec.seed)
    h, w = spec.image_size
    for i in range(spec.n_slices):
        has_lesion = rng.random() < spec.lesion_probability
        ellipses = _sample_ellipses(rng, spec) if has_lesion else ()

        lesion = np.zeros((h, w), dtype=bool)
        for ellipse in ellipses:
            lesion |= ellipse_mask((h, w), ellipse)

        noise = rng.normal(0.0, spec.noise_sigma, size=(h, w))
        pixels = spec.background_mean + spec.lesion_intensity_delta * lesion + noise
        pixels = np.clip(pixels, 0.0, 1.0)

        yield PhantomSample(
            image=ImageSlice(pixels=pixels, slice_id=f"slice_{i:05d}"),
            mask=MaskLabel(labels=lesion.astype(np.int64)),
            ellipses=ellipses,
        )


def generate_phantoms(spec: PhantomSpec) -> List[Pair]:
    """Return exactly spec.n_slices (ImageSlice, MaskLabel) pairs."""
    pairs = [(s.image, s.mask) for s in iter_phantoms(spec)]
    n_lesion = sum(1 for _, m in pairs if m.has_lesion())
    logger.info(f"Generated {len(pairs)} phantom slices ({n_lesion} with lesions, seed={spec.seed})")
    return pairs


def export_phantoms(spec: PhantomSpec, out_dir: Path) -> Path:
    """
    Write phantoms as 8-bit PNG images/masks plus a JSON manifest.

    Layout: out_dir/images/<id>.png, out_dir/masks/<id>.png (lesion = 255),
    out_dir/manifest.json. Returns the manifest path.
    """
    out_dir = Path(out_dir)
    image_dir = out_dir / IMAGES_SUBDIR
    mask_dir = out_dir / MASKS_SUBDIR
    image_dir.mkdir(parents=True, exist_ok=True)
    mask_dir.mkdir(parents=True, exist_ok=True)

    slices = []
    for sample in iter_phantoms(spec):
        sid = sample.image.slice_id
        img8 = np.round(sample.image.pixels * 255.0).astype(np.uint8)
        Image.fromarray(img8).save(image_dir / f"{sid}.png")
        mask8 = (sample.mask.labels > 0).astype(np.uint8) * 255
        Image.fromarray(mask8).save(mask_dir / f"{sid}.png")
        slices.append(
            {
                "slice_id": sid,
                "has_lesion": sample.has_lesion,
                "ellipses": [asdict(e) for e in sample.ellipses],
            }
        )

    manifest = {
        "phantom_spec": spec.model_dump(mode="json"),
        "n_slices": len(slices),
        "n_lesion_slices": sum(1 for s in slices if s["has_lesion"]),
        # The labeled/unlabeled split samples individual slices, not whole scans.
        "sampling_level": "slice",
        "slices": slices,
    }
    manifest_path = out_dir / MANIFEST_NAME
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
    logger.info(f"Exported {len(slices)} phantoms to {out_dir}")
    return manifest_path


def _read_gray8(path: Path) -> np.ndarray:
    with Image.open(path) as img:
        if img.mode != "L":
            img = img.convert("L")
        return np.asarray(img, dtype=np.uint8)


def load_png_dataset(image_dir: Path, mask_dir: Path, *, n_classes: int = 2) -> List[Pair]:
    """
    Load 8-bit grayscale slice/mask pairs matched by base filename.

    Intensities become value / 255; any nonzero mask pixel is lesion (class 1).
    """
    image_dir, mask_dir = Path(image_dir), Path(mask_dir)
    for d in (image_dir, mask_dir):
        if not d.is_dir():
            raise DatasetError(f"Directory not found: {d}")

    images = {p.stem: p for p in sorted(image_dir.glob("*.png"))}
    masks = {p.stem: p for p in sorted(mask_dir.glob("*.png"))}
    unmatched = sorted(set(images) - set(masks))
    if unmatched:
        raise DatasetError(f"No mask found for {len(unmatched)} image(s): {', '.join(unmatched)}")

    pairs: List[Pair] = []
    for stem, image_path in images.items():
        raw = _read_gray8(image_path)
        raw_mask = _read_gray8(masks[stem])
        if raw.shape != raw_mask.shape:
            raise DatasetError(
                f"Size mismatch for '{image_path.name}': image {raw.shape} vs mask {raw_mask.shape}"
            )
        try:
            image = ImageSlice(pixels=raw.astype(np.float64) / 255.0, slice_id=stem)
        except ShapeError as exc:
            raise DatasetError(f"{image_path}: {exc}") from exc
        mask = MaskLabel(labels=(raw_mask > 0).astype(np.int64), n_classes=n_classes)
        pairs.append((image, mask))

    logger.info(f"Loaded {len(pairs)} slice/mask pairs from {image_dir}")
    return pairs


def load_dataset_dir(dataset_dir: Path) -> List[Pair]:
    """Load a directory laid out like export_phantoms output."""
    dataset_dir = Path(dataset_dir)
    return load_png_dataset(dataset_dir / IMAGES_SUBDIR, dataset_dir / MASKS_SUBDIR)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def make_split(
    pairs: Sequence[Pair],
    labeled_ratio: float,
    unlabeled_ratio: float,
    test_fraction: float,
    seed: int,
) -> DatasetSplit:
    """
    Carve a test set, then split the remaining pool into labeled and unlabeled parts.

    The three random choices (test carve, pool order, unlabeled subsample) use
    independent child seeds of `seed`, so for one seed the test set and the pool
    order are the same for every ratio and smaller labeled sets are prefixes of
    larger ones.
    """
    if not 0.0 < labeled_ratio <= 1.0:
        raise ValueError(f"labeled_ratio must be in (0, 1], got {labeled_ratio}")
    if not 0.0 <= unlabeled_ratio <= 1.0:
        raise ValueError(f"unlabeled_ratio must be in [0, 1], got {unlabeled_ratio}")
    if not 0.0 < test_fraction < 1.0:
        raise ValueError(f"test_fraction must be in (0, 1), got {test_fraction}")

    test_rng, pool_rng, sub_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(3))

    n = len(pairs)
    n_test = _round_half_up(test_fraction * n)
    perm = test_rng.permutation(n)
    test_idx = np.sort(perm[:n_test])
    pool_idx = np.sort(perm[n_test:])
    pool_idx = pool_idx[pool_rng.permutation(len(pool_idx))]

    n_labeled = _round_half_up(labeled_ratio * len(pool_idx))
    if n_labeled == 0:
        raise DatasetError(
            f"labeled_ratio={labeled_ratio} of a {len(pool_idx)}-slice pool leaves no labeled slices"
        )
    labeled_idx = pool_idx[:n_labeled]
    remainder = pool_idx[n_labeled:]
    n_unlabeled = _round_half_up(unlabeled_ratio * len(remainder))
    chosen = np.sort(sub_rng.permutation(len(remainder))[:n_unlabeled])
    unlabeled_idx = remainder[chosen]

    split = DatasetSplit(
        labeled=[pairs[i] for i in labeled_idx],
        # Masks of unlabeled slices are dropped here and never reach training.
        unlabeled=[pairs[i][0] for i in unlabeled_idx],
        test=[pairs[i] for i in test_idx],
        labeled_ratio=labeled_ratio,
        unlabeled_ratio=unlabeled_ratio,
        unlabeled_pool_size=len(remainder),
    )
    logger.info(
        f"Split {n} slices: {len(split.labeled)} labeled, {len(split.unlabeled)}/{len(remainder)} unlabeled, "
        f"{len(split.test)} test (seed={seed})"
    )
    return split


def stack_images(slices: Sequence[ImageSlice]) -> torch.Tensor:
    """float32 tensor of shape (B, 1, H, W)."""
    if not slices:
        raise ShapeError("Cannot stack an empty list of slices")
    shapes = {s.shape for s in slices}
    if len(shapes) != 1:
        raise ShapeError(f"Slices have different shapes: {sorted(shapes)}")
    arr = np.stack([s.pixels for s in slices]).astype(np.float32)
    return torch.from_numpy(arr).unsqueeze(1)


def stack_masks(masks: Sequence[MaskLabel]) -> torch.Tensor:
    """int64 tensor of shape (B, H, W)."""
    if not masks:
        raise ShapeError("Cannot stack an empty list of masks")
    shapes = {m.shape for m in masks}
    if len(shapes) != 1:
        raise ShapeError(f"Masks have different shapes: {sorted(shapes)}")
    return torch.from_numpy(np.stack([m.labels for m in masks]).astype(np.int64))
