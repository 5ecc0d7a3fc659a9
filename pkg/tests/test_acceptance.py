"""
Desk-scale trend and determinism checks on 64x64 phantoms.

These train for tens of minutes on CPU and are skipped unless S4SEG_RUN_SLOW=1.

Usage:
    S4SEG_RUN_SLOW=1 pytest tests/test_acceptance.py -m slow
"""

import os
import sys
from pathlib import Path

import numpy as np
import pytest

# Ensure project root is on path (tests/ is one level below root)
_ROOT = Path(__file__).resolve().parent.parent
if str(_ROOT) not in sys.path:
    sys.path.insert(0, str(_ROOT))

from checkpoint_utils import list_checkpoints
from config import load_run_config
from datagen import generate_phantoms, make_split
from segmentation.trainer import METRICS_CSV, read_metrics_csv, train
from sweep import run_ratio_sweep

pytestmark = [
    pytest.mark.slow,
    pytest.mark.skipif(os.getenv("S4SEG_RUN_SLOW") != "1", reason="set S4SEG_RUN_SLOW=1 to run desk-scale training"),
]

SEEDS = (1, 2, 3)


@pytest.fixture(scope="module")
def desk():
    cfg = load_run_config(profile="desk", overrides={"eval_every": 0, "checkpoint_every": 0})
    return cfg, generate_phantoms(cfg.phantom_spec())


def _workers() -> int:
    return int(os.getenv("S4SEG_TEST_WORKERS", "1"))


def test_unlabeled_data_helps(desk):
    cfg, pairs = desk
    result = run_ratio_sweep(pairs, ["baseline", "1"], "unlabeled", SEEDS, cfg.train_config(), workers=_workers())
    baseline, semi = result.rows
    assert baseline.mode == "fully-supervised"
    assert baseline.mean["dice"] > 0.5
    assert semi.mean["dice"] >= baseline.mean["dice"] + 0.005, (semi.mean, baseline.mean)


def test_more_labels_help(desk):
    cfg, pairs = desk
    result = run_ratio_sweep(pairs, ["0.1", "0.3", "0.8"], "labeled", SEEDS, cfg.train_config(), workers=_workers())
    dice = [row.mean["dice"] for row in result.rows]
    assert all(d > 0.5 for d in dice), dice
    assert dice[2] >= dice[1] - 0.01, dice
    assert dice[1] >= dice[0] - 0.01, dice


def _csv_matrix(path: Path) -> np.ndarray:
    rows = read_metrics_csv(path)
    return np.array([[float(v) if v else np.nan for v in row.values()] for row in rows])


def test_runs_are_reproducible_and_resumable(desk, tmp_path):
    cfg, pairs = desk
    split = make_split(pairs, cfg.labeled_ratio, cfg.unlabeled_ratio, cfg.test_fraction, cfg.split_seed)
    train_cfg = cfg.train_config().model_copy(update={"eval_every": 500})
    half = train_cfg.iterations // 2

    train(split, train_cfg, run_dir=tmp_path / "a")
    train(split, train_cfg, run_dir=tmp_path / "b")
    a = _csv_matrix(tmp_path / "a" / METRICS_CSV)
    b = _csv_matrix(tmp_path / "b" / METRICS_CSV)
    np.testing.assert_allclose(a, b, atol=1e-6, equal_nan=True)

    train(split, train_cfg.model_copy(update={"iterations": half}), run_dir=tmp_path / "c")
    train(split, train_cfg, run_dir=tmp_path / "c", resume_from=list_checkpoints(tmp_path / "c")[-1])
    c = _csv_matrix(tmp_path / "c" / METRICS_CSV)
    np.testing.assert_allclose(a, c, atol=1e-6, equal_nan=True)

    gated = a[:, 7]
    quarter = len(gated) // 4
    assert gated[:quarter].mean() <= gated[-quarter:].mean()
