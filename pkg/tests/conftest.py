"""Pytest configuration and shared fixtures for ssmvdm tests."""

from pathlib import Path

import pytest
import torch

from ssmvdm import RunConfig, Rng, UNetConfig
from ssmvdm.data import SynthSpec, write_dataset
from ssmvdm.logging import setup_logging


@pytest.fixture(scope="session", autouse=True)
def quiet_logging():
    """Route structlog through stdlib before any module logger is first used."""
    setup_logging("WARNING", json_format=False)


@pytest.fixture(autouse=True)
def float32_default():
    """Every test starts (and ends) in 32-bit default precision."""
    previous = torch.get_default_dtype()
    torch.set_default_dtype(torch.float32)
    yield
    torch.set_default_dtype(previous)


@pytest.fixture
def rng():
    """Seeded random stream."""
    return Rng(1234)


@pytest.fixture
def tiny_unet_config():
    """Two-stage U-Net small enough for per-test forward passes."""
    return UNetConfig(
        base_channels=8,
        multipliers=(1, 2),
        frames=4,
        resolution=8,
        time_dim=32,
        dim_head=16,
    )


@pytest.fixture
def tiny_run_config(tmp_path: Path):
    """Run config for a few training steps on a 2-video dataset."""
    return RunConfig(
        dataset_dir=tmp_path / "data",
        out_dir=tmp_path / "runs",
        frames=4,
        resolution=8,
        base_channels=8,
        multipliers=(1, 2),
        timesteps=8,
        batch=2,
        steps=4,
        checkpoint_every=2,
        log_every=1,
        num_videos=2,
        sample_count=1,
        lr=1e-3,
    )


@pytest.fixture
def tiny_dataset(tiny_run_config):
    """Dataset written to ``tiny_run_config.dataset_dir``."""
    cfg = tiny_run_config
    spec = SynthSpec(kind=cfg.synth_kind, frames=cfg.frames, resolution=cfg.resolution, channels=cfg.channels)
    write_dataset(cfg.dataset_dir, spec, cfg.num_videos, cfg.seed)
    return cfg.dataset_dir
