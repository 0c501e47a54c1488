"""Factorized video denoiser.

A 2D U-Net runs on every frame independently (frames folded into the batch
axis). After each spatial attention layer a temporal layer mixes information
along the frame axis, with every spatial position folded into the group axis:

    (B·L, C, H, W) → (B·H·W, L, C) → temporal layer → (B·L, C, H, W)

The temporal layer kind is the only thing that differs between variants.
"""

import math
from typing import Dict, List, Optional, Tuple, Union

import torch
import torch.nn.functional as F
from einops import rearrange, repeat
from pydantic import BaseModel, ConfigDict, model_validator
from torch import nn

from ._errors import ConfigurationError, ShapeError, ValidationError
from ._internal.init import initialize
from .attention import DIM_HEAD, SpatialLinearAttention, TemporalAttention, heads_for
from .logging import get_logger
from .numerics import Rng, check_finite
from .ssm import BidirectionalMamba, MambaBlock
from .types import TemporalKind

logger = get_logger(__name__)

Tensor = torch.Tensor


class UNetConfig(BaseModel):
    """Architecture of a :class:`VideoUNet`.

    Attention layers use ``base_channels // 8`` heads of width 64 at every
    stage, so the head count scales with the base width.
    """

    model_config = ConfigDict(extra="forbid", frozen=True)

    base_channels: int = 32
    multipliers: Tuple[int, ...] = (1, 2, 4, 8)
    temporal_kind: TemporalKind = "ssm_bidirectional"
    frames: int = 16
    image_channels: int = 1
    resolution: int = 32
    time_dim: int = 1024
    dim_head: int = DIM_HEAD
    exact_zoh: bool = False
    temporal_pos_bias: bool = False

    @model_validator(mode="after")
    def validate_extents(self) -> "UNetConfig":
        if self.base_channels < 4:
            raise ConfigurationError("base_channels must be at least 4", parameter="base_channels")
        if not self.multipliers or any(m < 1 for m in self.multipliers):
            raise ConfigurationError("multipliers must be positive", parameter="multipliers")
        if self.frames < 1 or self.image_channels < 1 or self.time_dim < 1:
            raise ConfigurationError("frames, image_channels and time_dim must be positive", parameter="frames")
        factor = 2 ** (len(self.multipliers) - 1)
        if self.resolution < 1 or self.resolution % factor:
            raise ConfigurationError(
                f"resolution {self.resolution} is not divisible by {factor}",
                parameter="resolution",
                suggestion=f"use a multiple of {factor} or fewer multipliers",
            )
        return self

    @classmethod
    def scaled(cls, base_channels: int, temporal_kind: TemporalKind = "ssm_bidirectional", **overrides) -> "UNetConfig":
        """Member of the scaling family where the head count tracks base width."""
        return cls(base_channels=base_channels, temporal_kind=temporal_kind, **overrides)

    @property
    def heads(self) -> int:
        return heads_for(self.base_channels)

    @property
    def stage_channels(self) -> List[int]:
        return [self.base_channels * m for m in self.multipliers]

    @property
    def stage_resolutions(self) -> List[int]:
        return [self.resolution // 2**i for i in range(len(self.multipliers))]

    @property
    def video_shape(self) -> Tuple[int, int, int, int]:
        """(L, C_img, H, W)."""
        return (self.frames, self.image_channels, self.resolution, self.resolution)


class SinusoidalPosEmb(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim

    def forward(self, x: Tensor) -> Tensor:
        half_dim = self.dim // 2
        emb = math.log(10000) / max(half_dim - 1, 1)
        emb = torch.exp(torch.arange(half_dim, dtype=torch.get_default_dtype()) * -emb)
        emb = rearrange(x, "i -> i 1") * rearrange(emb, "j -> 1 j")
        return torch.cat((emb.sin(), emb.cos()), dim=-1)


class TimeEmbedding(nn.Module):
    """Sinusoidal features of the diffusion step followed by a two-layer MLP."""

    def __init__(self, dim: int, time_dim: int = 1024):
        super().__init__()
        self.sinusoid = SinusoidalPosEmb(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, time_dim),
            nn.SiLU(),
            nn.Linear(time_dim, time_dim),
        )

    def forward(self, t: Tensor) -> Tensor:
        return self.mlp(self.sinusoid(t.to(torch.get_default_dtype())))


class ResnetBlock(nn.Module):
    """Two 3×3 convolutions with GroupNorm; the time embedding scales and shifts the first."""

    def __init__(self, dim: int, dim_out: int, time_dim: Optional[int] = None):
        super().__init__()
        self.mlp = nn.Sequential(nn.SiLU(), nn.Linear(time_dim, dim_out * 2)) if time_dim else None
        self.conv1 = nn.Conv2d(dim, dim_out, 3, padding=1)
        self.norm1 = nn.GroupNorm(math.gcd(8, dim_out), dim_out)
        self.conv2 = nn.Conv2d(dim_out, dim_out, 3, padding=1)
        self.norm2 = nn.GroupNorm(math.gcd(8, dim_out), dim_out)
        self.res_conv = nn.Conv2d(dim, dim_out, 1) if dim != dim_out else nn.Identity()

    def forward(self, x: Tensor, time_emb: Optional[Tensor] = None) -> Tensor:
        h = self.norm1(self.conv1(x))
        if self.mlp is not None and time_emb is not None:
            scale, shift = rearrange(self.mlp(time_emb), "b c -> b c 1 1").chunk(2, dim=1)
            h = h * (scale + 1) + shift
        h = F.silu(h)
        h = F.silu(self.norm2(self.conv2(h)))
        return h + self.res_conv(x)


class TemporalLayer(nn.Module):
    """Apply a sequence layer along the frame axis of (B·L, C, H, W) features."""

    def __init__(self, inner: Optional[nn.Module]):
        super().__init__()
        self.inner = inner

    def forward(self, x: Tensor, frames: int) -> Tensor:
        if self.inner is None:
            return x
        height, width = x.shape[-2:]
        seq = rearrange(x, "(b l) c h w -> (b h w) l c", l=frames)
        seq = self.inner(seq)
        return rearrange(seq, "(b h w) l c -> (b l) c h w", h=height, w=width)


def make_temporal_layer(cfg: UNetConfig, channels: int) -> TemporalLayer:
    kind = cfg.temporal_kind
    if kind == "ssm_bidirectional":
        inner: Optional[nn.Module] = BidirectionalMamba(channels, exact_zoh=cfg.exact_zoh)
    elif kind == "ssm_unidirectional":
        inner = MambaBlock(channels, direction="forward", exact_zoh=cfg.exact_zoh)
    elif kind == "attention":
        inner = TemporalAttention(channels, heads=cfg.heads, dim_head=cfg.dim_head, pos_bias=cfg.temporal_pos_bias)
    elif kind == "none":
        inner = None
    else:
        raise ConfigurationError(f"unknown temporal layer kind {kind!r}", parameter="temporal_kind")
    return TemporalLayer(inner)


class VideoUNet(nn.Module):
    """ε-prediction network over videos (B, L, C_img, H, W)."""

    def __init__(self, cfg: UNetConfig):
        super().__init__()
        self.cfg = cfg
        base = cfg.base_channels
        dims = cfg.stage_channels
        in_out = list(zip([base, *dims[:-1]], dims))
        num_resolutions = len(in_out)
        heads, dim_head = cfg.heads, cfg.dim_head

        self.init_conv = nn.Conv2d(cfg.image_channels, base, 3, padding=1)
        self.time_mlp = TimeEmbedding(base, cfg.time_dim)

        self.downs = nn.ModuleList([])
        for ind, (dim_in, dim_out) in enumerate(in_out):
            is_last = ind >= num_resolutions - 1
            self.downs.append(
                nn.ModuleList(
                    [
                        ResnetBlock(dim_in, dim_out, cfg.time_dim),
                        ResnetBlock(dim_out, dim_out, cfg.time_dim),
                        SpatialLinearAttention(dim_out, heads=heads, dim_head=dim_head),
                        make_temporal_layer(cfg, dim_out),
                        nn.Conv2d(dim_out, dim_out, 4, 2, 1) if not is_last else nn.Identity(),
                    ]
                )
            )

        mid_dim = dims[-1]
        self.mid_block1 = ResnetBlock(mid_dim, mid_dim, cfg.time_dim)
        self.mid_spatial_attn = SpatialLinearAttention(mid_dim, heads=heads, dim_head=dim_head)
        self.mid_temporal = make_temporal_layer(cfg, mid_dim)
        self.mid_block2 = ResnetBlock(mid_dim, mid_dim, cfg.time_dim)

        self.ups = nn.ModuleList([])
        for ind, (dim_in, dim_out) in enumerate(reversed(in_out)):
            is_last = ind >= num_resolutions - 1
            self.ups.append(
                nn.ModuleList(
                    [
                        ResnetBlock(dim_out * 2, dim_in, cfg.time_dim),
                        ResnetBlock(dim_in, dim_in, cfg.time_dim),
                        SpatialLinearAttention(dim_in, heads=heads, dim_head=dim_head),
                        make_temporal_layer(cfg, dim_in),
                        nn.ConvTranspose2d(dim_in, dim_in, 4, 2, 1) if not is_last else nn.Identity(),
                    ]
                )
            )

        self.final_res_block = ResnetBlock(base * 2, base, cfg.time_dim)
        self.final_conv = nn.Conv2d(base, cfg.image_channels, 1)

    @torch.no_grad()
    def init_from(self, rng: Rng) -> None:
        # a fresh denoiser predicts ε̂ = 0
        self.final_conv.weight.zero_()
        self.final_conv.bias.zero_()

    def _check_input(self, x: Tensor, t: Union[int, Tensor]) -> Tensor:
        if x.dim() != 5 or tuple(x.shape[1:]) != self.cfg.video_shape:
            raise ShapeError(
                "video extents do not match the model",
                expected=(-1, *self.cfg.video_shape),
                received=x.shape,
            )
        check_finite(x, "x_t")
        steps = torch.as_tensor(t, dtype=torch.long)
        if steps.dim() == 0:
            steps = steps.expand(x.size(0))
        if steps.shape != (x.size(0),):
            raise ShapeError("one diffusion step per batch element", expected=(x.size(0),), received=steps.shape)
        if bool((steps < 0).any()):
            raise ValidationError("diffusion steps must be non-negative", field="t", value=steps.tolist())
        return steps

    def forward(self, x: Tensor, t: Union[int, Tensor]) -> Tensor:
        steps = self._check_input(x, t)
        batch, frames = x.shape[:2]

        x = rearrange(x, "b l c h w -> (b l) c h w")
        t_emb = repeat(self.time_mlp(steps), "b d -> (b l) d", l=frames)

        x = self.init_conv(x)
        r = x.clone()
        h = []

        for block1, block2, spatial_attn, temporal, downsample in self.downs:
            x = block1(x, t_emb)
            x = block2(x, t_emb)
            x = spatial_attn(x)
            x = temporal(x, frames)
            h.append(x)
            x = downsample(x)

        x = self.mid_block1(x, t_emb)
        x = self.mid_spatial_attn(x)
        x = self.mid_temporal(x, frames)
        x = self.mid_block2(x, t_emb)

        for block1, block2, spatial_attn, temporal, upsample in self.ups:
            x = torch.cat((x, h.pop()), dim=1)
            x = block1(x, t_emb)
            x = block2(x, t_emb)
            x = spatial_attn(x)
            x = temporal(x, frames)
            x = upsample(x)

        x = torch.cat((x, r), dim=1)
        x = self.final_res_block(x, t_emb)
        x = self.final_conv(x)
        return rearrange(x, "(b l) c h w -> b l c h w", b=batch)

    def temporal_layers(self) -> List[TemporalLayer]:
        return [m for m in self.modules() if isinstance(m, TemporalLayer)]


def build_unet(cfg: UNetConfig, rng: Rng) -> VideoUNet:
    """Assemble and deterministically initialize a denoiser."""
    model = VideoUNet(cfg)
    initialize(model, rng)
    logger.debug(
        "unet_built",
        temporal_kind=cfg.temporal_kind,
        base_channels=cfg.base_channels,
        parameters=count_parameters(model),
    )
    return model


def unet_forward(model: VideoUNet, x_t: Tensor, t: Union[int, Tensor]) -> Tensor:
    """Predicted noise ε̂, same shape as ``x_t``."""
    return model(x_t, t)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def parameter_breakdown(model: VideoUNet) -> Dict[str, int]:
    """Parameter counts split into temporal layers and everything else."""
    temporal = sum(count_parameters(m) for m in model.temporal_layers())
    total = count_parameters(model)
    return {"temporal": temporal, "spatial": total - temporal, "total": total}


def named_parameters_dict(model: nn.Module) -> Dict[str, Tensor]:
    """Parameters by qualified name, in declaration order."""
    return dict(model.named_parameters())