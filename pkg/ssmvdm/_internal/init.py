"""Deterministic parameter initialization from named random streams."""

import math

import torch
from torch import nn

from ..numerics import Rng

_AFFINE = (nn.Linear, nn.Conv1d, nn.Conv2d, nn.ConvTranspose2d)
_NORMS = (nn.LayerNorm, nn.GroupNorm)


def fan_in(weight: torch.Tensor) -> int:
    return int(weight.shape[1] * math.prod(weight.shape[2:]))


@torch.no_grad()
def uniform_(tensor: torch.Tensor, bound: float, rng: Rng) -> torch.Tensor:
    return tensor.copy_(rng.uniform(tuple(tensor.shape), -bound, bound, dtype=tensor.dtype))


@torch.no_grad()
def initialize(module: nn.Module, rng: Rng) -> nn.Module:
    """Initialize every parameter of ``module`` from ``rng``.

    Each submodule draws from ``rng.child(<qualified name>)``, so a parameter's
    initial value depends only on the seed and where it sits in the tree.
    Affine layers get ``U(±1/√fan_in)`` for weight and bias, norms get (1, 0),
    embeddings N(0, 1). Modules with an ``init_from`` method then apply their
    own scheme on top.
    """
    for name, sub in module.named_modules():
        sub_rng = rng.child(name or "root")
        if isinstance(sub, _AFFINE):
            bound = 1.0 / math.sqrt(fan_in(sub.weight))
            uniform_(sub.weight, bound, sub_rng.child("weight"))
            if sub.bias is not None:
                uniform_(sub.bias, bound, sub_rng.child("bias"))
        elif isinstance(sub, _NORMS):
            if sub.weight is not None:
                sub.weight.fill_(1.0)
            if sub.bias is not None:
                sub.bias.zero_()
        elif isinstance(sub, nn.Embedding):
            sub.weight.copy_(sub_rng.child("weight").gaussian(tuple(sub.weight.shape), dtype=sub.weight.dtype))

    for name, sub in module.named_modules():
        custom = getattr(sub, "init_from", None)
        if callable(custom):
            custom(rng.child(name or "root").child("custom"))
    return module
