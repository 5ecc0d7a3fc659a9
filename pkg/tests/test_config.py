"""
Tests for configuration precedence, profiles and validation messages.

Usage:
    pytest tests/test_config.py
"""

import json
import sys
from pathlib import Path

import pytest
from pydantic import ValidationError

# Ensure project root is on path (tests/ is one level below root)
_ROOT = Path(__file__).resolve().parent.parent
if str(_ROOT) not in sys.path:
    sys.path.insert(0, str(_ROOT))

from config import OUT_ROOT_ENV, PROFILES, format_validation_error, get_out_root, load_run_config, read_config_file


def _write(tmp_path, data) -> Path:
    path = tmp_path / "run.json"
    path.write_text(json.dumps(data))
    return path


def test_defaults_without_file_or_flags():
    cfg = load_run_config()
    assert cfg.tau == 0.6
    assert cfg.batch_size == 12
    assert cfg.labeled_ratio == 0.3
    assert cfg.train_config().loss_weights.w_dice == 0.6


def test_flag_beats_file_beats_profile(tmp_path):
    path = _write(tmp_path, {"tau": 0.7, "batch_size": 8})
    cfg = load_run_config(path, {"tau": 0.9, "iterations": None}, profile="desk")
    assert cfg.tau == 0.9, "flag wins over file"
    assert cfg.batch_size == 8, "file wins over profile"
    assert cfg.iterations == PROFILES["desk"]["iterations"], "None overrides are ignored"

    cfg = load_run_config(path, {}, profile="desk")
    assert cfg.tau == 0.7


def test_desk_profile_values():
    cfg = load_run_config(profile="desk")
    assert (cfg.image_height, cfg.image_width) == (64, 64)
    assert cfg.batch_size == 6
    assert cfg.phantom_spec().image_size == (64, 64)


def test_unknown_profile_and_missing_file(tmp_path):
    with pytest.raises(KeyError):
        load_run_config(profile="laptop")
    with pytest.raises(FileNotFoundError):
        load_run_config(tmp_path / "absent.json")
    assert read_config_file(None) == {}


def test_invalid_values_are_reported_per_field(tmp_path):
    path = _write(tmp_path, {"tau": 1.5, "colour": "blue"})
    with pytest.raises(ValidationError) as info:
        load_run_config(path)
    message = format_validation_error(info.value)
    assert "tau" in message
    assert "colour" in message
    assert len(message.splitlines()) == 2


def test_non_object_config_file(tmp_path):
    path = _write(tmp_path, [1, 2, 3])
    with pytest.raises(ValueError):
        read_config_file(path)


def test_non_finite_weight_is_rejected():
    with pytest.raises(ValidationError):
        load_run_config(overrides={"w_st": float("nan")})


def test_fully_supervised_mode_discards_unlabeled_ratio():
    cfg = load_run_config(overrides={"mode": "fully-supervised", "unlabeled_ratio": 0.5})
    assert cfg.effective_unlabeled_ratio() == 0.0
    assert load_run_config(overrides={"unlabeled_ratio": 0.5}).effective_unlabeled_ratio() == 0.5


def test_out_root_from_environment(monkeypatch, tmp_path):
    monkeypatch.delenv(OUT_ROOT_ENV, raising=False)
    assert get_out_root() == Path("runs")
    monkeypatch.setenv(OUT_ROOT_ENV, str(tmp_path))
    assert get_out_root() == tmp_path


def test_self_training_normalization_key(tmp_path):
    assert load_run_config().train_config().st_normalization == "pixel"
    cfg = load_run_config(_write(tmp_path, {"st_normalization": "sample"}))
    assert cfg.train_config().st_normalization == "sample"
    with pytest.raises(ValidationError):
        load_run_config(overrides={"st_normalization": "batch"})
