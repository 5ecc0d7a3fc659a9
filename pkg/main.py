from __future__ import annotations

import argparse
import logging
import shutil
import sys
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence

from pydantic import ValidationError
from rich.console import Console
from rich.logging import RichHandler
from rich.progress import BarColumn, MofNCompleteColumn, Progress, TextColumn, TimeElapsedColumn
from rich.table import Table

# Ensure project root is on path (fixes "No module named 'config'" when run from other dirs)
_ROOT = Path(__file__).resolve().parent
if str(_ROOT) not in sys.path:
    sys.path.insert(0, str(_ROOT))

import config  # Load .env before anything reads S4SEG_OUT_ROOT
import feature_flags
from checkpoint_utils import MANIFEST_NAME, directory_hash, file_sha256, latest_checkpoint, load_generator, read_sidecar
from datagen import export_phantoms, generate_phantoms, load_dataset_dir, make_split
from segmentation.metrics import evaluate_generator, export_overlays
from segmentation.trainer import train
from shared.errors import (
    DatasetError,
    IntegrityError,
    RunDirectoryExists,
    SweepCellError,
    TrainingAborted,
)
from shared.schemas import METRIC_NAMES, MetricsReport, RunConfig, RunManifest, SweepResult
from state import Pair
from sweep import DEFAULT_SEEDS, LABELED_AXIS_RATIOS, UNLABELED_AXIS_RATIOS, emit_report, run_ratio_sweep

logger = logging.getLogger("s4seg")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_TRAINING_ABORTED = 3
EXIT_INTEGRITY = 4
EXIT_INTERRUPTED = 130

EVAL_REPORT_NAME = "eval_report.json"


# ============================================================================
# Helpers
# ============================================================================


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _overrides(args: argparse.Namespace, seed_key: Optional[str]) -> Dict[str, Any]:
    """Flag values that override the config file; None means 'flag not given'."""
    keys = (
        "tau",
        "iterations",
        "batch_size",
        "labeled_ratio",
        "unlabeled_ratio",
        "log_every",
        "n_slices",
        "lesion_probability",
        "mode",
    )
    out = {key: getattr(args, key, None) for key in keys}
    if seed_key is not None:
        out[seed_key] = getattr(args, "seed", None)
    return out


def _resolve(args: argparse.Namespace, seed_key: Optional[str]) -> RunConfig:
    return config.load_run_config(
        Path(args.config) if args.config else None,
        _overrides(args, seed_key),
        profile=args.profile,
    )


def prepare_output_dir(path: Path, *, force: bool, allow_existing: bool = False) -> Path:
    """
    Create an output directory, refusing to reuse a non-empty one.

    With force the old contents are removed first; allow_existing keeps them (resume).
    """
    path = Path(path)
    if path.exists() and any(path.iterdir()):
        if force:
            logger.warning(f"--force: removing existing contents of {path}")
            shutil.rmtree(path)
        elif not allow_existing:
            raise RunDirectoryExists(f"{path} is not empty; choose another --out or pass --force")
    path.mkdir(parents=True, exist_ok=True)
    return path


def write_manifest(run_dir: Path, manifest: RunManifest) -> Path:
    path = Path(run_dir) / MANIFEST_NAME
    path.write_text(manifest.model_dump_json(indent=2), encoding="utf-8")
    return path


def read_manifest(run_dir: Path) -> RunManifest:
    path = Path(run_dir) / MANIFEST_NAME
    if not path.exists():
        raise DatasetError(f"No {MANIFEST_NAME} in {run_dir}")
    return RunManifest.model_validate_json(path.read_text(encoding="utf-8"))


def _load_pairs(dataset: Optional[str], cfg: RunConfig) -> List[Pair]:
    if dataset:
        path = Path(dataset)
        if not path.is_dir():
            raise DatasetError(f"Dataset directory not found: {path}")
        return load_dataset_dir(path)
    logger.info("No --dataset given; generating phantoms in memory from the resolved config")
    return generate_phantoms(cfg.phantom_spec())


def _input_hashes(dataset: Optional[str]) -> Dict[str, str]:
    return {"dataset": directory_hash(Path(dataset))} if dataset else {}


def _progress_bar() -> Progress:
    return Progress(
        TextColumn("[bold]{task.description}"),
        BarColumn(),
        MofNCompleteColumn(),
        TimeElapsedColumn(),
        transient=True,
    )


def _with_progress(description: str, total: int, fn: Callable[[Callable[[int, int], None]], Any]) -> Any:
    with _progress_bar() as progress:
        task = progress.add_task(description, total=total)

        def _update(done: int, _total: int) -> None:
            progress.update(task, completed=done)

        return fn(_update)


def _report_table(title: str, report: MetricsReport) -> Table:
    table = Table(title=title)
    for name in METRIC_NAMES:
        table.add_column(name, justify="right")
    table.add_row(*(f"{getattr(report, name):.4f}" for name in METRIC_NAMES))
    return table


def _sweep_table(result: SweepResult) -> Table:
    table = Table(title=f"Sweep over {result.axis} ratio (mean ± std)")
    table.add_column("ratio")
    table.add_column("mode")
    for name in METRIC_NAMES:
        table.add_column(name, justify="right")
    for row in result.rows:
        table.add_row(
            row.label, row.mode, *(f"{row.mean[name]:.4f} ± {row.std[name]:.4f}" for name in METRIC_NAMES)
        )
    return table


# ============================================================================
# Commands
# ============================================================================


def cmd_gen_data(args: argparse.Namespace) -> Path:
    cfg = _resolve(args, seed_key="data_seed")
    spec = cfg.phantom_spec()
    out_dir = Path(args.out) if args.out else config.get_out_root() / "datasets" / f"phantoms_seed{spec.seed}"
    prepare_output_dir(out_dir, force=args.force)

    started = _now()
    manifest_path = export_phantoms(spec, out_dir)
    write_manifest(
        out_dir,
        RunManifest(
            command="gen-data",
            config=cfg.model_dump(mode="json"),
            started_at=started,
            finished_at=_now(),
            artifacts={"manifest": manifest_path.name, "images": "images/", "masks": "masks/"},
            artifact_hashes={"dataset": directory_hash(out_dir)},
        ),
    )
    Console().print(f"Wrote {spec.n_slices} phantom slices to {out_dir}")
    return out_dir


def cmd_train(args: argparse.Namespace) -> Path:
    cfg = _resolve(args, seed_key="seed")
    train_cfg = cfg.train_config()
    unlabeled_ratio = cfg.effective_unlabeled_ratio()
    default_name = f"{cfg.mode}_l{cfg.labeled_ratio:g}_u{unlabeled_ratio:g}_seed{cfg.seed}"
    run_dir = Path(args.out) if args.out else config.get_out_root() / "train" / default_name

    resume_from = None
    if args.resume:
        resume_from = latest_checkpoint(run_dir)
        if resume_from is None:
            raise DatasetError(f"--resume: no checkpoint found in {run_dir}")
        prepare_output_dir(run_dir, force=False, allow_existing=True)
    else:
        prepare_output_dir(run_dir, force=args.force)

    pairs = _load_pairs(args.dataset, cfg)
    split = make_split(pairs, cfg.labeled_ratio, unlabeled_ratio, cfg.test_fraction, cfg.split_seed)

    manifest = RunManifest(
        command="train",
        config=cfg.model_dump(mode="json"),
        started_at=_now(),
        input_hashes=_input_hashes(args.dataset),
    )
    write_manifest(run_dir, manifest)

    result = _with_progress(
        "train",
        train_cfg.iterations,
        lambda update: train(split, train_cfg, run_dir=run_dir, resume_from=resume_from, progress=update),
    )

    sidecar = read_sidecar(result.final_checkpoint)
    blobs = [result.final_checkpoint.name] + list(sidecar["files"].values())
    manifest.finished_at = _now()
    manifest.artifacts = {"metrics": "metrics.csv", "checkpoint": result.final_checkpoint.name}
    manifest.artifact_hashes = {name: file_sha256(run_dir / name) for name in blobs}
    write_manifest(run_dir, manifest)

    Console().print(f"Run directory: {run_dir} ({split.mode}, {train_cfg.iterations} iterations)")
    return run_dir


def cmd_eval(args: argparse.Namespace) -> Path:
    run_dir = Path(args.run)
    manifest = read_manifest(run_dir)
    cfg = RunConfig(**manifest.config)
    sidecar = latest_checkpoint(run_dir)
    if sidecar is None:
        raise DatasetError(f"No checkpoint in {run_dir}")

    generator = load_generator(sidecar, expected_hashes=manifest.artifact_hashes)
    pairs = _load_pairs(args.dataset, cfg)
    split = make_split(
        pairs, cfg.labeled_ratio, cfg.effective_unlabeled_ratio(), cfg.test_fraction, cfg.split_seed
    )
    report = evaluate_generator(generator, split.test, cfg.batch_size).model_copy(
        update={
            "labeled_ratio": split.labeled_ratio,
            "unlabeled_ratio": split.unlabeled_ratio,
            "mode": cfg.mode,
            "seed": cfg.seed,
        }
    )
    report_path = run_dir / EVAL_REPORT_NAME
    report_path.write_text(report.model_dump_json(indent=2), encoding="utf-8")

    if feature_flags.ENABLE_OVERLAY_EXPORT:
        export_overlays(generator, split.test, run_dir / "overlays", limit=feature_flags.OVERLAY_LIMIT)

    Console().print(_report_table(f"Test metrics ({sidecar.name}, {report.n_test_slices} slices)", report))
    return report_path


def _parse_seeds(args: argparse.Namespace) -> List[int]:
    if args.seeds:
        try:
            return [int(s) for s in args.seeds.split(",") if s.strip()]
        except ValueError:
            raise ValueError(f"--seeds must be comma-separated integers, got '{args.seeds}'") from None
    if args.seed is not None:
        return [args.seed]
    return list(DEFAULT_SEEDS)


def cmd_sweep(args: argparse.Namespace) -> Path:
    cfg = _resolve(args, seed_key=None)
    if args.ratios:
        ratios: Sequence[str] = [r.strip() for r in args.ratios.split(",") if r.strip()]
    else:
        ratios = LABELED_AXIS_RATIOS if args.axis == "labeled" else UNLABELED_AXIS_RATIOS
    seeds = _parse_seeds(args)

    out_dir = Path(args.out) if args.out else config.get_out_root() / "sweeps" / args.axis
    prepare_output_dir(out_dir, force=args.force)

    pairs = _load_pairs(args.dataset, cfg)
    manifest = RunManifest(
        command="sweep",
        config={**cfg.model_dump(mode="json"), "axis": args.axis, "ratios": list(ratios), "seeds": seeds},
        started_at=_now(),
        input_hashes=_input_hashes(args.dataset),
    )
    write_manifest(out_dir, manifest)

    result = _with_progress(
        f"sweep {args.axis}",
        len(ratios) * len(seeds),
        lambda update: run_ratio_sweep(
            pairs,
            ratios,
            args.axis,
            seeds,
            cfg.train_config(),
            labeled_ratio=cfg.labeled_ratio,
            test_fraction=cfg.test_fraction,
            split_seed=cfg.split_seed,
            workers=args.workers,
            out_dir=out_dir,
            progress=update,
        ),
    )
    paths = emit_report(result, out_dir)

    manifest.finished_at = _now()
    manifest.artifacts = {key: path.name for key, path in paths.items()}
    manifest.artifact_hashes = {path.name: file_sha256(path) for key, path in paths.items() if key != "plot"}
    write_manifest(out_dir, manifest)

    Console().print(_sweep_table(result))
    return out_dir


# ============================================================================
# Parser
# ============================================================================


def _common_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help="Flat JSON config file (see docs/QUICKSTART.md)")
    common.add_argument("--out", default=None, help="Output directory (default: under $S4SEG_OUT_ROOT or ./runs)")
    common.add_argument("--seed", type=int, default=None, help="Phantom seed for gen-data, training seed for train/sweep")
    common.add_argument("--force", action="store_true", help="Overwrite a non-empty output directory")
    common.add_argument("--profile", default="standard", choices=sorted(config.PROFILES), help="Named defaults below the config file")
    common.add_argument("--verbose", action="store_true", help="Log per-iteration losses (DEBUG)")
    return common


def _add_data_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--n-slices", dest="n_slices", type=int, default=None, help="Number of phantom slices")
    p.add_argument(
        "--lesion-probability", dest="lesion_probability", type=float, default=None, help="Probability a slice has lesions"
    )


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--dataset", default=None, help="Dataset directory (images/, masks/); default: in-memory phantoms")
    p.add_argument("--mode", default=None, choices=["semi-supervised", "fully-supervised"], help="Training mode")
    p.add_argument("--tau", type=float, default=None, help="Pseudo-label confidence threshold")
    p.add_argument("--iterations", type=int, default=None, help="Training iterations")
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None, help="Batch size (labeled and unlabeled)")
    p.add_argument("--labeled-ratio", dest="labeled_ratio", type=float, default=None, help="Labeled fraction of the pool")
    p.add_argument(
        "--unlabeled-ratio", dest="unlabeled_ratio", type=float, default=None, help="Fraction of the remainder used unlabeled"
    )
    p.add_argument("--log-every", dest="log_every", type=int, default=None, help="Write a metrics row every N iterations")
    _add_data_flags(p)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Semi-supervised adversarial lesion segmentation CLI.")
    sub = parser.add_subparsers(dest="cmd", required=True)
    common = _common_parser()

    p_gen = sub.add_parser("gen-data", parents=[common], help="Write a synthetic phantom dataset (PNG + manifest)")
    _add_data_flags(p_gen)
    p_gen.set_defaults(func=cmd_gen_data)

    p_train = sub.add_parser("train", parents=[common], help="Train a generator (and discriminator) on one split")
    _add_train_flags(p_train)
    p_train.add_argument("--resume", action="store_true", help="Continue from the latest checkpoint in --out")
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", parents=[common], help="Score the final checkpoint of a run on its test split")
    p_eval.add_argument("--run", required=True, help="Run directory written by 'train'")
    p_eval.add_argument("--dataset", default=None, help="Dataset directory; default: regenerate from the run's config")
    p_eval.set_defaults(func=cmd_eval)

    p_sweep = sub.add_parser("sweep", parents=[common], help="Labeled- or unlabeled-ratio sweep across seeds")
    _add_train_flags(p_sweep)
    p_sweep.add_argument("--axis", required=True, choices=["labeled", "unlabeled"], help="Which ratio to vary")
    p_sweep.add_argument("--ratios", default=None, help="Comma-separated ratios; 'baseline' = fully supervised")
    p_sweep.add_argument("--seeds", default=None, help="Comma-separated training seeds (default 1,2,3)")
    p_sweep.add_argument("--workers", type=int, default=1, help="Train sweep cells in N processes")
    p_sweep.set_defaults(func=cmd_sweep)

    return parser


def configure_logging(verbose: bool) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(message)s",
        datefmt="[%X]",
        handlers=[RichHandler(show_path=False)],
        force=True,
    )


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.verbose)
    try:
        args.func(args)
    except ValidationError as exc:
        logger.error(f"Invalid configuration:\n{config.format_validation_error(exc)}")
        return EXIT_USAGE
    except TrainingAborted as exc:
        logger.error(str(exc))
        return EXIT_TRAINING_ABORTED
    except SweepCellError as exc:
        logger.error(str(exc))
        if isinstance(exc.cause, TrainingAborted):
            return EXIT_TRAINING_ABORTED
        if isinstance(exc.cause, IntegrityError):
            return EXIT_INTEGRITY
        return EXIT_USAGE
    except IntegrityError as exc:
        logger.error(f"Integrity check failed: {exc}")
        return EXIT_INTEGRITY
    except KeyboardInterrupt:
        logger.warning("Interrupted; the latest checkpoint is on disk")
        return EXIT_INTERRUPTED
    except (DatasetError, RunDirectoryExists, FileNotFoundError, KeyError, ValueError) as exc:
        logger.error(str(exc))
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
