"""Attention layers: softmax attention along frames, linear attention over space.

Both use ``heads`` heads of width ``dim_head`` (64 by default), so the inner
width is ``heads * dim_head`` independently of the channel count.
"""

import math
from typing import Optional

import torch
from einops import rearrange
from torch import nn

from ._errors import ConfigurationError, ShapeError
from ._internal.init import initialize
from .logging import get_logger
from .numerics import Rng, check_finite

logger = get_logger(__name__)

Tensor = torch.Tensor

DIM_HEAD = 64


def heads_for(channels: int) -> int:
    """Head count paired with a base channel width: one head per 8 channels."""
    return max(1, channels // 8)


def _check_heads(heads: int, dim_head: int) -> None:
    if heads < 1 or dim_head < 1:
        raise ConfigurationError(
            f"attention needs at least one head of positive width, got heads={heads}, dim_head={dim_head}",
            parameter="heads",
        )


class RelativePositionBias(nn.Module):
    """Learned per-head bias on bucketed frame offsets (T5 style)."""

    def __init__(self, heads: int = 8, num_buckets: int = 32, max_distance: int = 128):
        super().__init__()
        self.num_buckets = num_buckets
        self.max_distance = max_distance
        self.relative_attention_bias = nn.Embedding(num_buckets, heads)

    @staticmethod
    def _relative_position_bucket(relative_position: Tensor, num_buckets: int, max_distance: int) -> Tensor:
        ret = torch.zeros_like(relative_position)
        n = -relative_position

        num_buckets //= 2
        ret += (n < 0).long() * num_buckets
        n = torch.abs(n)

        max_exact = num_buckets // 2
        is_small = n < max_exact

        val_if_large = max_exact + (
            torch.log(n.float().clamp(min=1) / max_exact)
            / math.log(max_distance / max_exact)
            * (num_buckets - max_exact)
        ).long()
        val_if_large = torch.min(val_if_large, torch.full_like(val_if_large, num_buckets - 1))

        ret += torch.where(is_small, n, val_if_large)
        return ret

    def forward(self, n: int) -> Tensor:
        """Bias of shape (heads, n, n)."""
        q_pos = torch.arange(n, dtype=torch.long)
        k_pos = torch.arange(n, dtype=torch.long)
        rel_pos = rearrange(k_pos, "j -> 1 j") - rearrange(q_pos, "i -> i 1")
        rp_bucket = self._relative_position_bucket(rel_pos, self.num_buckets, self.max_distance)
        values = self.relative_attention_bias(rp_bucket)
        return rearrange(values, "i j h -> h i j")


class TemporalAttention(nn.Module):
    """Pre-norm multi-head softmax self-attention over the L axis of (G, L, C), with residual.

    No mask: every frame attends to every other frame. Without ``pos_bias``
    the layer is equivariant to permutations of L.
    """

    def __init__(
        self,
        channels: int,
        heads: Optional[int] = None,
        dim_head: int = DIM_HEAD,
        pos_bias: bool = False,
        rng: Optional[Rng] = None,
    ):
        super().__init__()
        heads = heads_for(channels) if heads is None else heads
        _check_heads(heads, dim_head)
        self.channels = channels
        self.heads = heads
        self.dim_head = dim_head
        self.scale = dim_head**-0.5
        inner_dim = heads * dim_head

        self.norm = nn.LayerNorm(channels)
        self.to_qkv = nn.Linear(channels, inner_dim * 3, bias=False)
        self.to_out = nn.Linear(inner_dim, channels, bias=False)
        self.pos_bias = RelativePositionBias(heads=heads) if pos_bias else None

        if rng is not None:
            initialize(self, rng)

    def attention_weights(self, X: Tensor) -> Tensor:
        """Softmax weights (G, heads, L, L)."""
        q, k, _ = self._qkv(X)
        return self._weights(q, k)

    def _qkv(self, X: Tensor):
        qkv = self.to_qkv(self.norm(X)).chunk(3, dim=-1)
        return tuple(rearrange(t, "g l (h d) -> g h l d", h=self.heads) for t in qkv)

    def _weights(self, q: Tensor, k: Tensor) -> Tensor:
        sim = torch.einsum("g h i d, g h j d -> g h i j", q * self.scale, k)
        if self.pos_bias is not None:
            sim = sim + self.pos_bias(sim.size(-1)).to(sim.dtype)
        sim = sim - sim.amax(dim=-1, keepdim=True).detach()
        return sim.softmax(dim=-1)

    def forward(self, X: Tensor) -> Tensor:
        if X.dim() != 3 or X.size(2) != self.channels:
            raise ShapeError("temporal input must be (G, L, C)", expected=(-1, -1, self.channels), received=X.shape)
        check_finite(X, "X")
        q, k, v = self._qkv(X)
        attn = self._weights(q, k)
        out = torch.einsum("g h i j, g h j d -> g h i d", attn, v)
        out = rearrange(out, "g h l d -> g l (h d)")
        return X + self.to_out(out)


class ChanLayerNorm(nn.Module):
    """LayerNorm across the channel axis of (N, C, H, W)."""

    def __init__(self, channels: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.g = nn.Parameter(torch.ones(1, channels, 1, 1))
        self.b = nn.Parameter(torch.zeros(1, channels, 1, 1))

    @torch.no_grad()
    def init_from(self, rng: Rng) -> None:
        self.g.fill_(1.0)
        self.b.zero_()

    def forward(self, x: Tensor) -> Tensor:
        var = torch.var(x, dim=1, unbiased=False, keepdim=True)
        mean = torch.mean(x, dim=1, keepdim=True)
        return (x - mean) / (var + self.eps).sqrt() * self.g + self.b


class SpatialLinearAttention(nn.Module):
    """Kernelized attention over the H·W positions of each frame, with residual.

    Keys are softmax-normalized over positions and queries over channels, so
    the aggregated context is (dim_head × dim_head) per head and memory grows
    linearly in H·W.
    """

    def __init__(
        self,
        channels: int,
        heads: Optional[int] = None,
        dim_head: int = DIM_HEAD,
        rng: Optional[Rng] = None,
    ):
        super().__init__()
        heads = heads_for(channels) if heads is None else heads
        _check_heads(heads, dim_head)
        self.channels = channels
        self.heads = heads
        self.dim_head = dim_head
        self.scale = dim_head**-0.5
        inner_dim = heads * dim_head

        self.norm = ChanLayerNorm(channels)
        self.to_qkv = nn.Conv2d(channels, inner_dim * 3, 1, bias=False)
        self.to_out = nn.Conv2d(inner_dim, channels, 1)

        if rng is not None:
            initialize(self, rng)

    def forward(self, X: Tensor) -> Tensor:
        if X.dim() != 4 or X.size(1) != self.channels:
            raise ShapeError("spatial input must be (N, C, H, W)", expected=(-1, self.channels, -1, -1), received=X.shape)
        check_finite(X, "X")
        _, _, height, width = X.shape
        qkv = self.to_qkv(self.norm(X)).chunk(3, dim=1)
        q, k, v = (rearrange(t, "b (h c) x y -> b h c (x y)", h=self.heads) for t in qkv)

        q = q.softmax(dim=-2) * self.scale
        k = k.softmax(dim=-1)

        context = torch.einsum("b h d n, b h e n -> b h d e", k, v)
        out = torch.einsum("b h d e, b h d n -> b h e n", context, q)
        out = rearrange(out, "b h c (x y) -> b (h c) x y", x=height, y=width)
        return X + self.to_out(out)


def temporal_attention_forward(layer: TemporalAttention, X: Tensor) -> Tensor:
    return layer(X)


def spatial_linear_attention_forward(layer: SpatialLinearAttention, X: Tensor) -> Tensor:
    return layer(X)


__all__ = [
    "DIM_HEAD",
    "ChanLayerNorm",
    "RelativePositionBias",
    "SpatialLinearAttention",
    "TemporalAttention",
    "heads_for",
    "spatial_linear_attention_forward",
    "temporal_attention_forward",
]