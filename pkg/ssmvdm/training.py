"""Training and sampling loops.

All per-step randomness (batch indices, diffusion steps, noise) is drawn from
``Rng(seed).child(f"train/step/{step}")``, so a run resumed from a checkpoint
reproduces the losses of the uninterrupted run.
"""

import csv
import statistics
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import torch

from ._errors import ConfigurationError, DataError
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import RunConfig
from .data import VideoFile, export_frames_pgm, load_dataset, write_video
from .diffusion import NoiseSchedule, eps_loss, make_batch, make_noise_schedule, sample
from .logging import get_logger, log_operation
from .numerics import EmaState, OptimizerState, Rng, adam_step, ema_update, grad
from .unet import VideoUNet, build_unet, named_parameters_dict, parameter_breakdown

logger = get_logger(__name__)

Tensor = torch.Tensor

LOSS_LOG = "loss.csv"
LATEST_CHECKPOINT = "checkpoint.vdmc"
SMOOTHING_WINDOW = 50


@dataclass
class TrainResult:
    losses: List[float]
    checkpoint: Path
    loss_log: Path
    parameters: Dict[str, int] = field(default_factory=dict)

    @property
    def final_step(self) -> int:
        return len(self.losses)

    @property
    def smoothed_loss(self) -> float:
        return smoothed(self.losses)


def smoothed(losses: Sequence[float], window: int = SMOOTHING_WINDOW) -> float:
    """Mean of the last ``window`` losses."""
    if not losses:
        raise DataError("no losses recorded")
    return statistics.fmean(losses[-window:])


def schedule_for(config: RunConfig) -> NoiseSchedule:
    return make_noise_schedule(config.timesteps, config.beta_start, config.beta_end)


def sample_batch(data: Tensor, batch: int, rng: Rng) -> Tensor:
    """``batch`` videos drawn uniformly with replacement from (N, L, C, H, W)."""
    idx = rng.integers(0, data.size(0) - 1, size=batch)
    return data[idx]


def train_step(
    model: VideoUNet,
    optimizer: OptimizerState,
    ema: EmaState,
    data: Tensor,
    sched: NoiseSchedule,
    batch: int,
    rng: Rng,
) -> float:
    """One Adam update on the ε-prediction loss followed by an EMA update."""
    x0 = sample_batch(data, batch, rng.child("batch")).to(torch.get_default_dtype())
    diffusion_batch = make_batch(x0, sched, rng.child("noise"))
    params = named_parameters_dict(model)

    loss_value = 0.0

    def loss_fn(_: object) -> Tensor:
        nonlocal loss_value
        loss = eps_loss(model, diffusion_batch, sched)
        loss_value = loss.item()
        return loss

    grads = grad(loss_fn, params)
    adam_step(params, grads, optimizer)
    ema_update(ema, params)
    return loss_value


def _read_loss_log(path: Path, upto: int) -> List[float]:
    """Losses of steps ``0..upto-1`` from an existing log."""
    if not path.is_file():
        return []
    with path.open(newline="", encoding="utf-8") as f:
        rows = list(csv.DictReader(f))
    losses = [float(r["loss"]) for r in rows if int(r["step"]) < upto]
    if len(losses) != upto:
        logger.warning("loss_log_incomplete", path=str(path), expected=upto, found=len(losses))
    return losses


def _write_loss_log(path: Path, losses: Sequence[float]) -> None:
    with path.open("w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["step", "loss"])
        writer.writerows((step, repr(loss)) for step, loss in enumerate(losses))


def _schedule_meta(config: RunConfig) -> Dict[str, object]:
    return {
        "timesteps": config.timesteps,
        "beta_start": config.beta_start,
        "beta_end": config.beta_end,
        "seed": config.seed,
        "batch": config.batch,
    }


def _resume(path: Path, config: RunConfig) -> Tuple[VideoUNet, OptimizerState, EmaState]:
    ckpt = load_checkpoint(path)
    if ckpt.config != config.unet_config():
        raise ConfigurationError(
            f"checkpoint {path} was trained with a different architecture",
            parameter="checkpoint",
            suggestion="resume with the config the checkpoint was written with",
        )
    model = ckpt.build_model()
    optimizer = ckpt.optimizer_state(model)
    ema = ckpt.ema_state(model)
    if optimizer is None or ema is None:
        raise ConfigurationError(f"checkpoint {path} holds no training state", parameter="checkpoint")
    return model, optimizer, ema


def train(
    config: RunConfig,
    resume: Optional[Union[str, Path]] = None,
    data: Optional[Tensor] = None,
) -> TrainResult:
    """Run the ε-prediction loop for ``config.steps`` total steps.

    Writes ``loss.csv`` and ``checkpoint.vdmc`` under ``config.out_dir``; a
    checkpoint is saved every ``checkpoint_every`` steps and after the last.

    Raises:
        DataError: the dataset is missing or its extents differ from the config.
        ConfigurationError: the resume checkpoint does not match the config.
    """
    cfg = config.unet_config()
    if data is None:
        data = load_dataset(config.dataset_dir, cfg.video_shape)
    elif tuple(data.shape[1:]) != cfg.video_shape:
        raise DataError(f"training videos have extents {tuple(data.shape[1:])}, expected {cfg.video_shape}")

    sched = schedule_for(config)
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    loss_log = out_dir / LOSS_LOG
    checkpoint = out_dir / LATEST_CHECKPOINT
    rng = Rng(config.seed)

    if resume is not None:
        model, optimizer, ema = _resume(Path(resume), config)
        losses = _read_loss_log(loss_log, optimizer.step)
    else:
        model = build_unet(cfg, rng.child("init"))
        optimizer = OptimizerState(lr=config.lr)
        ema = EmaState.from_params(named_parameters_dict(model), decay=config.ema_decay, warmup=config.ema_warmup)
        losses = []

    breakdown = parameter_breakdown(model)
    start = optimizer.step
    logger.info(
        "training_started",
        temporal_kind=cfg.temporal_kind,
        start_step=start,
        steps=config.steps,
        videos=data.size(0),
        **{f"{k}_parameters": v for k, v in breakdown.items()},
    )

    model.train()
    with log_operation(logger, "train", start_step=start, steps=config.steps):
        for step in range(start, config.steps):
            loss = train_step(model, optimizer, ema, data, sched, config.batch, rng.child(f"train/step/{step}"))
            losses.append(loss)
            done = step + 1
            if done % config.log_every == 0 or done == config.steps:
                logger.info("train_step", step=step, loss=loss, smoothed_loss=smoothed(losses))
            if done % config.checkpoint_every == 0 or done == config.steps:
                _write_loss_log(loss_log, losses)
                save_checkpoint(checkpoint, model, ema, optimizer, _schedule_meta(config))

    if not losses:
        raise ConfigurationError(f"no training steps to run (start {start}, steps {config.steps})", parameter="steps")
    _write_loss_log(loss_log, losses)
    return TrainResult(losses=losses, checkpoint=checkpoint, loss_log=loss_log, parameters=breakdown)


def _sampling_schedule(ckpt: Checkpoint, fallback: Optional[RunConfig]) -> NoiseSchedule:
    meta = ckpt.training or {}
    if "timesteps" in meta:
        return make_noise_schedule(int(meta["timesteps"]), float(meta["beta_start"]), float(meta["beta_end"]))
    return schedule_for(fallback or RunConfig())


def sample_videos(
    checkpoint: Union[str, Path],
    count: int,
    seed: int,
    out_dir: Union[str, Path],
    config: Optional[RunConfig] = None,
) -> List[Path]:
    """Sample ``count`` videos with the EMA weights; writes ``.vvid`` files and PGM frames.

    The noise schedule comes from the checkpoint's training metadata, or from
    ``config`` when the checkpoint carries none.
    """
    if count < 1:
        raise ConfigurationError(f"need at least one sample, got {count}", parameter="count")
    ckpt = load_checkpoint(checkpoint)
    model = ckpt.build_model(use_ema=True)
    model.eval()
    sched = _sampling_schedule(ckpt, config)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    with log_operation(logger, "sample", count=count, seed=seed, timesteps=sched.T):
        videos = sample(model, sched, (count, *ckpt.config.video_shape), Rng(seed).child("sample"))

    paths = []
    for i in range(count):
        video = VideoFile(frames=videos[i].to(torch.float32))
        path = write_video(out_dir / f"sample_{i:03d}.vvid", video)
        export_frames_pgm(video, out_dir / "frames", prefix=f"sample_{i:03d}")
        paths.append(path)
    logger.info("samples_written", directory=str(out_dir), count=count)
    return paths


def run_ablation(
    config: RunConfig,
    kinds: Sequence[str] = ("ssm_bidirectional", "ssm_unidirectional"),
    seeds: Sequence[int] = (0, 1, 2),
    data: Optional[Tensor] = None,
) -> Dict[str, float]:
    """Final smoothed loss per temporal kind, averaged over ``seeds``.

    Every run trains on the same videos for the same number of steps; runs
    are written to ``<out_dir>/<kind>/seed<seed>``.
    """
    if data is None:
        data = load_dataset(config.dataset_dir, config.unet_config().video_shape)
    results: Dict[str, float] = {}
    for kind in kinds:
        finals = []
        for seed in seeds:
            run = config.with_overrides(
                temporal_kind=kind, seed=seed, out_dir=Path(config.out_dir) / kind / f"seed{seed}"
            )
            finals.append(train(run, data=data).smoothed_loss)
        results[kind] = statistics.fmean(finals)
        logger.info("ablation_kind_finished", temporal_kind=kind, seeds=list(seeds), mean_smoothed_loss=results[kind])
    return results
