"""Command-line entry point: ``ssmvdm <command> [options]``.

Commands:
    gen-data   write a synthetic dataset
    train      train a denoiser on a dataset
    sample     sample videos from a checkpoint
    bench      sequence-length scaling study of the temporal layers
    plot       draw the scaling curves of a bench CSV
    gradcheck  finite-difference check of every differentiable layer

Exit codes: 0 success, 1 unexpected error, 2 configuration or argument
error, 3 data or file format error, 4 capacity exceeded, 5 gradient check
failure.
"""

import argparse
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

from ._errors import (
    CapacityError,
    ConfigurationError,
    DataError,
    FormatError,
    GradientCheckError,
    ShapeError,
    SsmVdmError,
    ValidationError,
)
from .bench import plot_bench, read_bench_csv, run_bench, summarize, write_bench_csv
from .config import RunConfig, load_config
from .data import SynthSpec, write_dataset
from .gradcheck import CHECK_NAMES, CORRUPTIONS, GradCheckReport, run_gradcheck
from .logging import bind_run_context, clear_run_context, get_logger, log_operation, setup_logging
from .numerics import configure_threads
from .training import LATEST_CHECKPOINT, TrainResult, sample_videos, train
from .types import BENCH_KINDS, BenchRecord

logger = get_logger(__name__)

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_CAPACITY = 4
EXIT_GRADCHECK = 5

DEFAULT_BENCH_KINDS = ("attention", "ssm_bidirectional")


def exit_code_for(error: BaseException) -> int:
    if isinstance(error, GradientCheckError):
        return EXIT_GRADCHECK
    if isinstance(error, CapacityError):
        return EXIT_CAPACITY
    if isinstance(error, (DataError, FormatError)):
        return EXIT_DATA
    if isinstance(error, (ConfigurationError, ValidationError, ShapeError)):
        return EXIT_CONFIG
    return EXIT_UNEXPECTED


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_gen_data(config: RunConfig, force: bool = False) -> Path:
    """Write ``num_videos`` synthetic videos and a manifest to ``dataset_dir``."""
    spec = SynthSpec(
        kind=config.synth_kind,
        frames=config.frames,
        resolution=config.resolution,
        channels=config.channels,
    )
    write_dataset(config.dataset_dir, spec, config.num_videos, config.seed, force=force)
    return Path(config.dataset_dir)


def cmd_train(config: RunConfig, resume: Optional[Path] = None) -> TrainResult:
    return train(config, resume=resume)


def cmd_sample(
    config: RunConfig,
    checkpoint: Optional[Path] = None,
    count: Optional[int] = None,
    out_dir: Optional[Path] = None,
) -> List[Path]:
    """Sample with the EMA weights of ``checkpoint`` (default: the run's latest)."""
    checkpoint = checkpoint or Path(config.out_dir) / LATEST_CHECKPOINT
    out_dir = out_dir or Path(config.out_dir) / "samples"
    return sample_videos(checkpoint, count if count is not None else config.sample_count, config.seed, out_dir, config=config)


def cmd_bench(
    config: RunConfig,
    kinds: Sequence[str] = DEFAULT_BENCH_KINDS,
    training: bool = False,
    out: Optional[Path] = None,
) -> Tuple[List[BenchRecord], Path, Dict[str, float]]:
    """Measure every kind over ``bench_lengths``, write the CSV, then fit exponents.

    The CSV is written before fitting, so a refused fit still leaves the rows.
    """
    records = run_bench(
        kinds,
        config.bench_lengths,
        config.bench_groups,
        config.bench_channels,
        reps=config.bench_reps,
        limit_bytes=config.bench_limit_bytes,
        training=training,
    )
    path = write_bench_csv(records, out or Path(config.out_dir) / "bench.csv")
    return records, path, summarize(records)


def cmd_plot(config: RunConfig, csv_path: Optional[Path] = None, out: Optional[Path] = None) -> Path:
    """Draw the scaling curves of a bench CSV (default: the run's bench.csv)."""
    csv_path = csv_path or Path(config.out_dir) / "bench.csv"
    if not csv_path.is_file():
        raise DataError(f"no bench CSV at {csv_path}", path=str(csv_path))
    return plot_bench(read_bench_csv(csv_path), out or csv_path.with_suffix(".png"))


def cmd_gradcheck(seed: int = 0, corrupt: Optional[str] = None, only: Optional[Sequence[str]] = None) -> GradCheckReport:
    return run_gradcheck(seed=seed, only=only, corrupt=corrupt)


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="key=value run configuration file")
    parser.add_argument("--seed", type=int, help="override the configured seed")
    parser.add_argument("--log-level", help="override the configured log level")
    parser.add_argument("--log-file", help="also write logs to this rotating file")
    parser.add_argument("--console-logs", action="store_true", help="human-readable logs instead of JSON")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ssmvdm", description="Video diffusion with state-space temporal layers")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-data", help="write a synthetic dataset")
    _common(gen)
    gen.add_argument("--force", action="store_true", help="overwrite a non-empty dataset directory")
    gen.add_argument("--count", type=int, help="number of videos (overrides num_videos)")
    gen.add_argument("--out", type=Path, help="dataset directory (overrides dataset_dir)")

    tr = sub.add_parser("train", help="train a denoiser")
    _common(tr)
    tr.add_argument("--resume", type=Path, help="continue from this checkpoint")
    tr.add_argument("--steps", type=int, help="total training steps (overrides steps)")

    sa = sub.add_parser("sample", help="sample videos from a checkpoint")
    _common(sa)
    sa.add_argument("--checkpoint", type=Path, help="checkpoint file (default: <out_dir>/checkpoint.vdmc)")
    sa.add_argument("--count", type=int, help="number of videos (overrides sample_count)")
    sa.add_argument("--out", type=Path, help="output directory (default: <out_dir>/samples)")

    be = sub.add_parser("bench", help="memory and time scaling of the temporal layers")
    _common(be)
    be.add_argument("--kinds", default=",".join(DEFAULT_BENCH_KINDS), help=f"comma-separated subset of {BENCH_KINDS}")
    be.add_argument("--lengths", help="comma-separated L grid (overrides bench_lengths)")
    be.add_argument("--training", action="store_true", help="count activations with the autograd tape kept")
    be.add_argument("--out", type=Path, help="CSV path (default: <out_dir>/bench.csv)")
    be.add_argument("--plot", type=Path, help="also draw the scaling curves to this image file")

    pl = sub.add_parser("plot", help="draw the scaling curves of a bench CSV")
    _common(pl)
    pl.add_argument("--csv", type=Path, help="bench CSV (default: <out_dir>/bench.csv)")
    pl.add_argument("--out", type=Path, help="image path (default: the CSV path with .png)")

    gc = sub.add_parser("gradcheck", help="64-bit finite-difference gradient checks")
    _common(gc)
    gc.add_argument("--only", help=f"comma-separated subset of {', '.join(CHECK_NAMES)}")
    gc.add_argument("--corrupt", choices=sorted(CORRUPTIONS), help="deliberately corrupt a backward pass")
    return parser


def _split(value: Optional[str]) -> Optional[List[str]]:
    if value is None:
        return None
    return [part.strip() for part in value.split(",") if part.strip()]


def _resolve_config(args: argparse.Namespace) -> RunConfig:
    config = load_config(args.config)
    overrides = {"seed": args.seed, "log_level": args.log_level}
    if args.command == "gen-data":
        overrides.update(num_videos=args.count, dataset_dir=args.out)
    elif args.command == "train":
        overrides.update(steps=args.steps)
    elif args.command == "bench":
        overrides.update(bench_lengths=args.lengths)
    return config.with_overrides(**overrides)


def _run(args: argparse.Namespace, config: RunConfig) -> int:
    if args.command == "gen-data":
        directory = cmd_gen_data(config, force=args.force)
        print(f"wrote {config.num_videos} videos to {directory}")
    elif args.command == "train":
        result = cmd_train(config, resume=args.resume)
        print(f"trained to step {result.final_step}: smoothed loss {result.smoothed_loss:.6f}")
        print(f"checkpoint {result.checkpoint}, loss log {result.loss_log}")
    elif args.command == "sample":
        paths = cmd_sample(config, checkpoint=args.checkpoint, count=args.count, out_dir=args.out)
        for path in paths:
            print(path)
    elif args.command == "bench":
        kinds = _split(args.kinds) or list(DEFAULT_BENCH_KINDS)
        unknown = [k for k in kinds if k not in BENCH_KINDS]
        if unknown:
            raise ValidationError(f"unknown bench kinds {unknown}", field="kinds", value=unknown)
        records, path, exponents = cmd_bench(config, kinds, training=args.training, out=args.out)
        print(f"wrote {len(records)} rows to {path}")
        if args.plot is not None:
            print(f"plotted to {plot_bench(records, args.plot)}")
        for kind, exponent in exponents.items():
            print(f"{kind}: peak-bytes exponent {exponent:.3f}")
    elif args.command == "plot":
        print(f"plotted to {cmd_plot(config, csv_path=args.csv, out=args.out)}")
    elif args.command == "gradcheck":
        report = cmd_gradcheck(seed=config.seed, corrupt=args.corrupt, only=_split(args.only))
        for line in report.lines():
            print(line)
        report.raise_for_failures()
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = _resolve_config(args)
    except SsmVdmError as e:
        print(f"error: {e}", file=sys.stderr)
        return exit_code_for(e)

    setup_logging(config.log_level, log_file=args.log_file, json_format=not args.console_logs)
    bind_run_context(args.command, seed=config.seed)
    try:
        configure_threads()
        with log_operation(logger, args.command):
            return _run(args, config)
    except SsmVdmError as e:
        logger.error("command_failed", error_type=type(e).__name__, error=str(e))
        print(f"error: {e}", file=sys.stderr)
        return exit_code_for(e)
    except Exception as e:  # noqa: BLE001
        logger.exception("command_crashed", error_type=type(e).__name__)
        print(f"unexpected error: {e}", file=sys.stderr)
        return EXIT_UNEXPECTED
    finally:
        clear_run_context()


if __name__ == "__main__":
    sys.exit(main())
