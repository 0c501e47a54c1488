"""ssmvdm: desk-scale video diffusion with selective state-space temporal layers.

A U-Net denoiser factorized into spatial and temporal layers, where the
temporal layer is a bidirectional (or unidirectional) selective-scan SSM,
softmax temporal attention, or absent; plus a scaling benchmark of those
layers over sequence length.

Example:
    >>> from ssmvdm import RunConfig, build_unet, Rng
    >>> cfg = RunConfig(resolution=16, frames=8).unet_config()
    >>> model = build_unet(cfg, Rng(0))
"""

__version__ = "0.1.0"

from ._errors import (
    CapacityError,
    CheckpointFormatError,
    ConfigurationError,
    DataError,
    FormatError,
    GradientCheckError,
    NonFiniteError,
    ShapeError,
    SsmVdmError,
    UnsupportedOperationError,
    ValidationError,
    VideoFormatError,
)
from .attention import SpatialLinearAttention, TemporalAttention
from .bench import ActivationArena, fit_scaling_exponent, measure_layer, read_bench_csv, write_bench_csv
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, load_config, parse_config
from .data import SynthSpec, VideoFile, decode_video, encode_video, generate_video, load_dataset, write_dataset
from .diffusion import NoiseSchedule, eps_loss, make_noise_schedule, p_step, q_sample, sample
from .logging import get_logger, setup_logging
from .numerics import EmaState, OptimizerState, Rng, adam_step, ema_update, gaussian_sample, grad
from .ssm import BidirectionalMamba, MambaBlock, selective_scan_par, selective_scan_seq, zoh_discretize
from .training import run_ablation, sample_videos, train
from .types import BenchRecord
from .unet import UNetConfig, VideoUNet, build_unet, count_parameters, parameter_breakdown, unet_forward

__all__ = [
    "__version__",
    # errors
    "SsmVdmError",
    "ValidationError",
    "ConfigurationError",
    "ShapeError",
    "NonFiniteError",
    "UnsupportedOperationError",
    "FormatError",
    "VideoFormatError",
    "CheckpointFormatError",
    "DataError",
    "CapacityError",
    "GradientCheckError",
    # config
    "RunConfig",
    "load_config",
    "parse_config",
    # numerics
    "Rng",
    "gaussian_sample",
    "grad",
    "OptimizerState",
    "adam_step",
    "EmaState",
    "ema_update",
    # diffusion
    "NoiseSchedule",
    "make_noise_schedule",
    "q_sample",
    "eps_loss",
    "p_step",
    "sample",
    # layers
    "zoh_discretize",
    "selective_scan_seq",
    "selective_scan_par",
    "MambaBlock",
    "BidirectionalMamba",
    "TemporalAttention",
    "SpatialLinearAttention",
    "UNetConfig",
    "VideoUNet",
    "build_unet",
    "unet_forward",
    "count_parameters",
    "parameter_breakdown",
    # data and files
    "SynthSpec",
    "VideoFile",
    "generate_video",
    "encode_video",
    "decode_video",
    "write_dataset",
    "load_dataset",
    "save_checkpoint",
    "load_checkpoint",
    # bench and training
    "ActivationArena",
    "BenchRecord",
    "measure_layer",
    "fit_scaling_exponent",
    "write_bench_csv",
    "read_bench_csv",
    "train",
    "sample_videos",
    "run_ablation",
    # logging
    "get_logger",
    "setup_logging",
]
