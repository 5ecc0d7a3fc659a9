"""
Checkpoint Utilities for Training Runs

Save, list, verify and restore training checkpoints inside a run directory.

One checkpoint at iteration N consists of
    generator_<N>.pt       generator state_dict
    discriminator_<N>.pt   discriminator state_dict (semi-supervised runs only)
    trainer_<N>.pt         optimizers, torch RNG, batch streams, running averages
    checkpoint_<N>.json    sidecar: iteration, TrainConfig, architecture,
                           parameter counts and the SHA-256 of every blob
with N zero-padded to six digits so lexical and numeric order agree.
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
from collections import deque
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional

import torch

from segmentation.nets import ReferenceGenerator, build_reference_generator
from shared.errors import IntegrityError
from shared.schemas import TrainConfig
from state import TrainState

logger = logging.getLogger(__name__)

SIDECAR_PATTERN = re.compile(r"^checkpoint_(\d{6})\.json$")
MANIFEST_NAME = "run_manifest.json"


def _tag(iteration: int) -> str:
    return f"{iteration:06d}"


def file_sha256(path: Path) -> str:
    """Hex SHA-256 of a file's bytes."""
    digest = hashlib.sha256()
    with Path(path).open("rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def directory_hash(directory: Path, exclude: Iterable[str] = (MANIFEST_NAME,)) -> str:
    """
    Content hash of a directory tree.

    Covers relative paths and file bytes, so two directories hash equal iff they
    hold the same files with the same contents.

    Args:
        directory: Root of the tree
        exclude: File names skipped anywhere in the tree (the run manifest holds timestamps)

    Returns:
        Hex SHA-256 digest
    """
    directory = Path(directory)
    skip = set(exclude)
    digest = hashlib.sha256()
    for path in sorted(p for p in directory.rglob("*") if p.is_file() and p.name not in skip):
        digest.update(path.relative_to(directory).as_posix().encode("utf-8"))
        digest.update(b"\0")
        digest.update(file_sha256(path).encode("ascii"))
        digest.update(b"\n")
    return digest.hexdigest()


def _parameter_count(module: torch.nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def _architecture(module: torch.nn.Module) -> Dict[str, Any]:
    describe = getattr(module, "architecture", None)
    return describe() if callable(describe) else {"class": type(module).__name__}


def save_checkpoint(run_dir: Path, state: TrainState, cfg: TrainConfig) -> Path:
    """
    Write all checkpoint files for the current iteration.

    Args:
        run_dir: Run directory (created if missing)
        state: Training state to persist
        cfg: Config the run was started with, stored in the sidecar

    Returns:
        Path to the JSON sidecar
    """
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    tag = _tag(state.iteration)

    files: Dict[str, Path] = {"generator": run_dir / f"generator_{tag}.pt"}
    torch.save(state.generator.state_dict(), files["generator"])

    if state.semi_supervised:
        files["discriminator"] = run_dir / f"discriminator_{tag}.pt"
        torch.save(state.discriminator.state_dict(), files["discriminator"])

    files["trainer"] = run_dir / f"trainer_{tag}.pt"
    torch.save(
        {
            "iteration": state.iteration,
            "gen_optimizer": state.gen_optimizer.state_dict(),
            "disc_optimizer": state.disc_optimizer.state_dict() if state.disc_optimizer is not None else None,
            "torch_rng": torch.get_rng_state(),
            "labeled_stream": state.labeled_stream.state_dict(),
            "unlabeled_stream": state.unlabeled_stream.state_dict() if state.unlabeled_stream is not None else None,
            "running": dict(state.running),
            "gate_history": list(state.gate_history),
        },
        files["trainer"],
    )

    sidecar = {
        "iteration": state.iteration,
        "mode": "semi-supervised" if state.semi_supervised else "fully-supervised",
        "train_config": cfg.model_dump(mode="json"),
        "architecture": {"generator": _architecture(state.generator)},
        "parameter_counts": {"generator": _parameter_count(state.generator)},
        "files": {role: path.name for role, path in files.items()},
        "sha256": {path.name: file_sha256(path) for path in files.values()},
    }
    if state.semi_supervised:
        sidecar["architecture"]["discriminator"] = _architecture(state.discriminator)
        sidecar["parameter_counts"]["discriminator"] = _parameter_count(state.discriminator)

    sidecar_path = run_dir / f"checkpoint_{tag}.json"
    sidecar_path.write_text(json.dumps(sidecar, indent=2, sort_keys=True), encoding="utf-8")
    logger.info(f"Saved checkpoint at iteration {state.iteration} to {sidecar_path}")
    return sidecar_path


def read_sidecar(sidecar_path: Path) -> Dict[str, Any]:
    sidecar_path = Path(sidecar_path)
    if not sidecar_path.exists():
        raise FileNotFoundError(f"Checkpoint sidecar not found: {sidecar_path}")
    return json.loads(sidecar_path.read_text(encoding="utf-8"))


def verify_checkpoint(sidecar_path: Path, expected_hashes: Optional[Dict[str, str]] = None) -> Dict[str, Any]:
    """
    Check every blob against the hashes in its sidecar (and optionally a manifest).

    Args:
        sidecar_path: checkpoint_<N>.json
        expected_hashes: File name -> SHA-256 recorded elsewhere, e.g. in run_manifest.json

    Returns:
        The parsed sidecar

    Raises:
        IntegrityError: A blob is missing or its hash differs from a recorded one
    """
    sidecar_path = Path(sidecar_path)
    sidecar = read_sidecar(sidecar_path)
    for name, recorded in sidecar["sha256"].items():
        blob = sidecar_path.parent / name
        if not blob.exists():
            raise IntegrityError(f"Checkpoint file missing: {blob}")
        actual = file_sha256(blob)
        if actual != recorded:
            raise IntegrityError(f"{blob.name}: hash {actual[:12]} does not match sidecar {recorded[:12]}")
        if expected_hashes and name in expected_hashes and expected_hashes[name] != actual:
            raise IntegrityError(f"{blob.name}: hash {actual[:12]} does not match manifest {expected_hashes[name][:12]}")
    return sidecar


def load_checkpoint(sidecar_path: Path, state: TrainState) -> int:
    """
    Restore a verified checkpoint into an already-built TrainState.

    Returns:
        The restored iteration
    """
    sidecar_path = Path(sidecar_path)
    sidecar = verify_checkpoint(sidecar_path)
    files = sidecar["files"]
    root = sidecar_path.parent

    if ("discriminator" in files) != state.semi_supervised:
        raise ValueError(f"Checkpoint mode '{sidecar['mode']}' does not match the run being resumed")

    state.generator.load_state_dict(torch.load(root / files["generator"], map_location="cpu", weights_only=True))
    if state.semi_supervised:
        state.discriminator.load_state_dict(
            torch.load(root / files["discriminator"], map_location="cpu", weights_only=True)
        )

    # Holds numpy bit-generator states; the file was hash-verified above.
    trainer = torch.load(root / files["trainer"], map_location="cpu", weights_only=False)
    state.gen_optimizer.load_state_dict(trainer["gen_optimizer"])
    if state.disc_optimizer is not None and trainer["disc_optimizer"] is not None:
        state.disc_optimizer.load_state_dict(trainer["disc_optimizer"])
    state.labeled_stream.load_state_dict(trainer["labeled_stream"])
    if state.unlabeled_stream is not None and trainer["unlabeled_stream"] is not None:
        state.unlabeled_stream.load_state_dict(trainer["unlabeled_stream"])
    torch.set_rng_state(trainer["torch_rng"])
    state.running = dict(trainer["running"])
    state.gate_history = deque((tuple(x) for x in trainer["gate_history"]), maxlen=state.gate_history.maxlen)
    state.iteration = int(trainer["iteration"])

    logger.info(f"Restored checkpoint {sidecar_path.name} (iteration {state.iteration})")
    return state.iteration


def list_checkpoints(run_dir: Path) -> List[Path]:
    """Sidecar paths in a run directory, oldest first."""
    run_dir = Path(run_dir)
    if not run_dir.is_dir():
        return []
    return sorted(p for p in run_dir.iterdir() if SIDECAR_PATTERN.match(p.name))


def latest_checkpoint(run_dir: Path) -> Optional[Path]:
    checkpoints = list_checkpoints(run_dir)
    return checkpoints[-1] if checkpoints else None


def load_generator(sidecar_path: Path, expected_hashes: Optional[Dict[str, str]] = None) -> torch.nn.Module:
    """
    Rebuild the reference generator described by a sidecar and load its weights.

    Raises:
        IntegrityError: see verify_checkpoint
        ValueError: the checkpoint holds a generator class this project cannot rebuild
    """
    sidecar_path = Path(sidecar_path)
    sidecar = verify_checkpoint(sidecar_path, expected_hashes)
    arch = sidecar["architecture"]["generator"]
    if arch.get("class") != ReferenceGenerator.__name__:
        raise ValueError(f"Cannot rebuild generator class '{arch.get('class')}' from {sidecar_path.name}")
    generator = build_reference_generator(
        in_channels=arch["in_channels"], n_classes=arch["n_classes"], base_width=arch["base_width"]
    )
    weights = torch.load(sidecar_path.parent / sidecar["files"]["generator"], map_location="cpu", weights_only=True)
    generator.load_state_dict(weights)
    generator.eval()
    return generator
