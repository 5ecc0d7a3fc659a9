"""
Ratio sweeps over labeled or unlabeled data, aggregated across training seeds.

Labeled axis: vary labeled_ratio, use every remaining pool slice as unlabeled data.
Unlabeled axis: fix labeled_ratio (0.3 by default), vary unlabeled_ratio; the
token "baseline" adds the fully supervised row.

The test set and the pool order depend only on split_seed, so every cell of a
sweep is scored on the same test slices and labeled sets are nested across
ratios. Training seeds vary per cell.
"""

from __future__ import annotations

import csv
import logging
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np
import torch

from datagen import make_split
from segmentation.metrics import evaluate_generator
from segmentation.trainer import train
from shared.errors import SweepCellError
from shared.schemas import METRIC_NAMES, Axis, MetricsReport, SweepResult, SweepRow, TrainConfig
from state import DatasetSplit, Pair

logger = logging.getLogger(__name__)

BASELINE = "baseline"
DEFAULT_SEEDS: Tuple[int, ...] = (1, 2, 3)
LABELED_AXIS_RATIOS: Tuple[str, ...] = ("0.1", "0.3", "0.5", "0.8")
UNLABELED_AXIS_RATIOS: Tuple[str, ...] = (BASELINE, "0.5", "1")
CSV_HEADER = ("axis", "ratio", "mode", "seed") + METRIC_NAMES

RatioToken = Union[str, float]


def parse_ratio_token(token: RatioToken, axis: Axis) -> Tuple[str, Optional[float]]:
    """
    Normalize one --ratios entry to (label, value).

    "baseline" maps to ("baseline", None) and is only valid on the unlabeled axis.
    """
    if isinstance(token, str) and token.strip().lower() == BASELINE:
        if axis != "unlabeled":
            raise ValueError("'baseline' is only valid on the unlabeled axis")
        return BASELINE, None
    try:
        value = float(token)
    except (TypeError, ValueError):
        raise ValueError(f"Invalid ratio '{token}'") from None
    low_ok = value > 0.0 if axis == "labeled" else value >= 0.0
    if not (low_ok and value <= 1.0):
        raise ValueError(f"Ratio {value} out of range for the {axis} axis")
    return f"{value:g}", value


def split_for_ratio(
    pairs: Sequence[Pair],
    axis: Axis,
    value: Optional[float],
    *,
    labeled_ratio: float,
    test_fraction: float,
    split_seed: int,
) -> DatasetSplit:
    if axis == "labeled":
        return make_split(pairs, value, 1.0, test_fraction, split_seed)
    unlabeled_ratio = 0.0 if value is None else value
    return make_split(pairs, labeled_ratio, unlabeled_ratio, test_fraction, split_seed)


def _init_worker() -> None:
    torch.set_num_threads(1)


def _run_cell(
    split: DatasetSplit,
    cfg: TrainConfig,
    label: str,
    seed: int,
    run_dir: Optional[Path],
) -> MetricsReport:
    """Train and score one (ratio, seed) cell. Top-level so process pools can pickle it."""
    try:
        cell_cfg = cfg.model_copy(update={"seed": seed})
        result = train(split, cell_cfg, run_dir=run_dir)
        report = evaluate_generator(result.state.generator, split.test, cfg.batch_size)
    except Exception as exc:
        raise SweepCellError(label, seed, exc) from exc
    return report.model_copy(
        update={
            "labeled_ratio": split.labeled_ratio,
            "unlabeled_ratio": split.unlabeled_ratio,
            "mode": split.mode,
            "seed": seed,
        }
    )


def aggregate(reports: Sequence[MetricsReport]) -> Tuple[Dict[str, float], Dict[str, float]]:
    """Per-metric arithmetic mean and population standard deviation."""
    values = {name: np.array([getattr(r, name) for r in reports], dtype=np.float64) for name in METRIC_NAMES}
    mean = {name: float(np.mean(v)) for name, v in values.items()}
    std = {name: float(np.std(v, ddof=0)) for name, v in values.items()}
    return mean, std


def run_ratio_sweep(
    pairs: Sequence[Pair],
    ratios: Sequence[RatioToken],
    axis: Axis,
    seeds: Sequence[int],
    cfg: TrainConfig,
    *,
    labeled_ratio: float = 0.3,
    test_fraction: float = 0.2,
    split_seed: int = 0,
    workers: int = 1,
    out_dir: Optional[Path] = None,
    progress: Optional[Callable[[int, int], None]] = None,
) -> SweepResult:
    """
    Train every (ratio, seed) cell and aggregate test metrics per ratio.

    Args:
        pairs: Full dataset; the test set is carved from it with split_seed
        ratios: Ratio values or tokens ("baseline" on the unlabeled axis)
        axis: "labeled" or "unlabeled"
        seeds: Training seeds, one run per seed and ratio
        cfg: Training configuration shared by all cells (its seed is replaced)
        labeled_ratio: Fixed labeled ratio of the unlabeled axis
        workers: >1 trains cells in a process pool
        out_dir: When set, each cell writes its run directory under out_dir/cells/

    Raises:
        SweepCellError: a cell failed; carries the ratio label, seed and cause
    """
    if not ratios:
        raise ValueError("Sweep needs at least one ratio")
    if not seeds:
        raise ValueError("Sweep needs at least one seed")

    parsed = [parse_ratio_token(token, axis) for token in ratios]
    labels = [label for label, _ in parsed]
    if len(set(labels)) != len(labels):
        raise ValueError(f"Duplicate ratios in {labels}")
    splits = {
        label: split_for_ratio(
            pairs, axis, value, labeled_ratio=labeled_ratio, test_fraction=test_fraction, split_seed=split_seed
        )
        for label, value in parsed
    }

    cells = []
    for label, _ in parsed:
        for seed in seeds:
            run_dir = Path(out_dir) / "cells" / f"{axis}_{label}_seed{seed}" if out_dir is not None else None
            cells.append((label, seed, run_dir))
    logger.info(f"Sweep over {axis} ratios {[label for label, _ in parsed]} x seeds {list(seeds)}: {len(cells)} runs")

    reports: Dict[Tuple[str, int], MetricsReport] = {}
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers, initializer=_init_worker) as pool:
            futures = {
                (label, seed): pool.submit(_run_cell, splits[label], cfg, label, seed, run_dir)
                for label, seed, run_dir in cells
            }
            for done, (key, future) in enumerate(futures.items(), start=1):
                reports[key] = future.result()
                if progress is not None:
                    progress(done, len(cells))
    else:
        for done, (label, seed, run_dir) in enumerate(cells, start=1):
            reports[(label, seed)] = _run_cell(splits[label], cfg, label, seed, run_dir)
            logger.info(f"Cell {axis}={label} seed={seed}: dice={reports[(label, seed)].dice:.4f}")
            if progress is not None:
                progress(done, len(cells))

    rows: List[SweepRow] = []
    for label, value in parsed:
        cell_reports = [reports[(label, seed)] for seed in seeds]
        mean, std = aggregate(cell_reports)
        rows.append(
            SweepRow(label=label, ratio=value, mode=splits[label].mode, reports=cell_reports, mean=mean, std=std)
        )
    return SweepResult(axis=axis, rows=rows)


def _fmt(value: float) -> str:
    return f"{value:.4f}"


def emit_report(result: SweepResult, out_dir: Path) -> Dict[str, Path]:
    """
    Write sweep_<axis>.csv, sweep_<axis>.png and sweep_<axis>.json.

    CSV rows per ratio: one per seed, then "mean" and "std" rows.
    """
    out_dir = Path(out_dir)
    stem = f"sweep_{result.axis}"
    paths = {"csv": out_dir / f"{stem}.csv", "plot": out_dir / f"{stem}.png", "json": out_dir / f"{stem}.json"}
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        with paths["csv"].open("w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(CSV_HEADER)
            for row in result.rows:
                for report in row.reports:
                    writer.writerow(
                        [result.axis, row.label, row.mode, report.seed] + [_fmt(getattr(report, m)) for m in METRIC_NAMES]
                    )
                writer.writerow([result.axis, row.label, row.mode, "mean"] + [_fmt(row.mean[m]) for m in METRIC_NAMES])
                writer.writerow([result.axis, row.label, row.mode, "std"] + [_fmt(row.std[m]) for m in METRIC_NAMES])

        paths["json"].write_text(result.model_dump_json(indent=2), encoding="utf-8")
        _plot(result, paths["plot"])
    except OSError as exc:
        raise OSError(f"Could not write sweep report to {out_dir}: {exc}") from exc

    logger.info(f"Wrote sweep report to {paths['csv']} and {paths['plot']}")
    return paths


def _plot(result: SweepResult, path: Path) -> None:
    labels = [row.label for row in result.rows]
    x = np.arange(len(labels))
    fig, ax = plt.subplots(figsize=(6, 4))
    try:
        for name in METRIC_NAMES:
            means = [row.mean[name] for row in result.rows]
            stds = [row.std[name] for row in result.rows]
            ax.errorbar(x, means, yerr=stds, marker="o", capsize=3, label=name)
        ax.set_xticks(x)
        ax.set_xticklabels(labels)
        ax.set_xlabel(f"{result.axis} ratio")
        ax.set_ylabel("test metric")
        ax.set_ylim(0.0, 1.0)
        ax.grid(alpha=0.3)
        ax.legend(loc="lower right")
        fig.tight_layout()
        fig.savefig(path, dpi=100, metadata={"Software": None})
    finally:
        plt.close(fig)
