"""Core numerics: shape-checked tensors, counter-based RNG, gradients, Adam, EMA.

``torch.Tensor`` is the value carrier for every other module. This module adds
the contracts the rest of the package relies on: finiteness checks on public
inputs, a reproducible random stream that can be split by name, a reverse-mode
``grad`` wrapper with an explicit unsupported-op error, and the optimizer and
EMA update rules used by the training loop.
"""

import hashlib
import os
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterator, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import psutil
import torch

from ._errors import (
    ConfigurationError,
    NonFiniteError,
    ShapeError,
    UnsupportedOperationError,
    ValidationError,
)
from .logging import get_logger

logger = get_logger(__name__)

Tensor = torch.Tensor
ParamDict = Dict[str, Tensor]
Extents = Union[int, Sequence[int]]

_MASK64 = (1 << 64) - 1

_DTYPES: Dict[str, torch.dtype] = {
    "float32": torch.float32,
    "float64": torch.float64,
}

THREADS_ENV = "SSMVDM_THREADS"


# ---------------------------------------------------------------------------
# Tensor contracts
# ---------------------------------------------------------------------------


def validate_extents(shape: Extents, name: str = "shape") -> Tuple[int, ...]:
    """Normalize and check a shape: non-empty, every extent a positive integer."""
    extents = (shape,) if isinstance(shape, int) else tuple(shape)
    if len(extents) == 0:
        raise ValidationError(f"{name} must have at least one extent", field=name, value=extents)
    for extent in extents:
        if not isinstance(extent, (int, np.integer)) or int(extent) < 1:
            raise ValidationError(
                f"{name} extents must be positive integers", field=name, value=extents
            )
    return tuple(int(e) for e in extents)


def check_finite(tensor: Tensor, name: str = "tensor") -> Tensor:
    """Raise ``NonFiniteError`` if ``tensor`` holds a NaN or Inf."""
    if tensor.is_floating_point() and tensor.device.type != "meta":
        if not bool(torch.isfinite(tensor).all()):
            raise NonFiniteError(f"{name} contains NaN or Inf values", name=name)
    return tensor


def expect_shape(tensor: Tensor, expected: Sequence[Optional[int]], name: str = "tensor") -> None:
    """Check extents; ``None`` entries match any size."""
    received = tuple(tensor.shape)
    if len(received) != len(expected) or any(
        e is not None and e != r for e, r in zip(expected, received)
    ):
        raise ShapeError(f"{name} has wrong extents", expected=[e or -1 for e in expected], received=received)


def resolve_dtype(mode: Union[str, torch.dtype, None]) -> torch.dtype:
    """Map "float32"/"float64" (or a dtype) to a torch dtype; None means the default."""
    if mode is None:
        return torch.get_default_dtype()
    if isinstance(mode, torch.dtype):
        return mode
    try:
        return _DTYPES[mode]
    except KeyError as e:
        raise ConfigurationError(
            f"unknown precision {mode!r}", parameter="precision", suggestion="use float32 or float64"
        ) from e


@contextmanager
def precision(mode: Union[str, torch.dtype]) -> Iterator[torch.dtype]:
    """Temporarily switch the default floating dtype (32-bit default, 64-bit for checks)."""
    dtype = resolve_dtype(mode)
    previous = torch.get_default_dtype()
    torch.set_default_dtype(dtype)
    try:
        yield dtype
    finally:
        torch.set_default_dtype(previous)


# ---------------------------------------------------------------------------
# Random streams
# ---------------------------------------------------------------------------


def derive_seed(seed: int, name: str) -> int:
    """Deterministically derive a 64-bit seed for the named sub-stream."""
    digest = hashlib.blake2b(f"{seed & _MASK64}:{name}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


class Rng:
    """Counter-based deterministic random stream.

    Backed by the Philox generator, whose 128-bit key is derived from
    ``(seed, stream name)``. ``child(name)`` returns an independent stream, so
    workers, layers and training steps each draw from their own reproducible
    sequence regardless of the order in which other streams are consumed.
    """

    def __init__(self, seed: int, stream: str = ""):
        self.seed = int(seed) & _MASK64
        self.stream = stream
        digest = hashlib.blake2b(f"{self.seed}:{stream}".encode(), digest_size=16).digest()
        self._generator = np.random.Generator(np.random.Philox(key=int.from_bytes(digest, "little")))

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, stream={self.stream!r})"

    def child(self, name: str) -> "Rng":
        """Independent sub-stream named ``name`` under this stream."""
        return Rng(self.seed, f"{self.stream}/{name}" if self.stream else name)

    def spawn(self, count: int) -> list["Rng"]:
        """``count`` independent worker streams."""
        return [self.child(f"worker{i}") for i in range(count)]

    def gaussian(self, shape: Extents, dtype: Union[str, torch.dtype, None] = None) -> Tensor:
        extents = validate_extents(shape)
        values = self._generator.standard_normal(size=extents)
        return torch.from_numpy(values).to(resolve_dtype(dtype))

    def uniform(
        self,
        shape: Extents,
        low: float = 0.0,
        high: float = 1.0,
        dtype: Union[str, torch.dtype, None] = None,
    ) -> Tensor:
        extents = validate_extents(shape)
        values = self._generator.uniform(low, high, size=extents)
        return torch.from_numpy(values).to(resolve_dtype(dtype))

    def integers(self, low: int, high: int, size: int) -> Tensor:
        """``size`` integers drawn uniformly from ``[low, high]`` inclusive."""
        values = self._generator.integers(low, high, size=size, endpoint=True)
        return torch.from_numpy(values.astype(np.int64))

    def uniform_scalar(self, low: float, high: float) -> float:
        return float(self._generator.uniform(low, high))


def gaussian_sample(rng: Rng, shape: Extents, dtype: Union[str, torch.dtype, None] = None) -> Tensor:
    """I.i.d. standard normal tensor of the given extents, drawn from ``rng``."""
    return rng.gaussian(shape, dtype=dtype)


# ---------------------------------------------------------------------------
# Differentiation
# ---------------------------------------------------------------------------


def grad(
    loss_fn: Callable[[Mapping[str, Tensor]], Tensor],
    params: Mapping[str, Tensor],
    allow_unused: bool = False,
) -> ParamDict:
    """Gradient of a scalar loss with respect to each named parameter.

    Leaves that already require grad (module parameters) are used directly;
    anything else is detached into a fresh leaf first.

    Raises:
        UnsupportedOperationError: the loss is not connected to the parameters
            through differentiable primitives.
    """
    leaves: Dict[str, Tensor] = {}
    for name, value in params.items():
        check_finite(value, name)
        if value.requires_grad and value.is_leaf:
            leaves[name] = value
        else:
            leaves[name] = value.detach().requires_grad_(True)

    with torch.enable_grad():
        loss = loss_fn(leaves)
    if not isinstance(loss, torch.Tensor) or loss.numel() != 1:
        raise ValidationError("loss_fn must return a scalar tensor", field="loss")
    check_finite(loss, "loss")
    if loss.grad_fn is None:
        raise UnsupportedOperationError(
            "loss has no gradient path to the parameters", op="non-differentiable graph"
        )

    try:
        grads = torch.autograd.grad(loss.reshape(()), list(leaves.values()), allow_unused=True)
    except RuntimeError as e:
        raise UnsupportedOperationError(f"backward failed: {e}", op="backward") from e

    result: ParamDict = {}
    for (name, leaf), g in zip(leaves.items(), grads):
        if g is None:
            if not allow_unused:
                raise UnsupportedOperationError(
                    f"parameter {name!r} is not reached by a differentiable path", op=name
                )
            g = torch.zeros_like(leaf)
        result[name] = check_finite(g, f"grad[{name}]")
    return result


# ---------------------------------------------------------------------------
# Optimizer and EMA
# ---------------------------------------------------------------------------


@dataclass
class OptimizerState:
    """Adam state; defaults follow the training hyperparameters (lr 1e-5, β 0.9/0.999)."""

    lr: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    exp_avg: ParamDict = field(default_factory=dict)
    exp_avg_sq: ParamDict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.lr <= 0:
            raise ConfigurationError("learning rate must be positive", parameter="lr")
        for name in ("beta1", "beta2"):
            value = getattr(self, name)
            if not 0.0 <= value < 1.0:
                raise ConfigurationError(f"{name} must lie in [0, 1)", parameter=name)
        if self.step < 0:
            raise ConfigurationError("step must be non-negative", parameter="step")


def _check_congruent(params: Mapping[str, Tensor], other: Mapping[str, Tensor], what: str) -> None:
    if set(params) != set(other):
        missing = sorted(set(params) ^ set(other))
        raise ShapeError(f"{what} names differ from parameters: {missing[:5]}")
    for name, p in params.items():
        if tuple(p.shape) != tuple(other[name].shape):
            raise ShapeError(f"{what}[{name}] is not congruent", expected=p.shape, received=other[name].shape)


def adam_step(
    params: Mapping[str, Tensor], grads: Mapping[str, Tensor], state: OptimizerState
) -> Tuple[Mapping[str, Tensor], OptimizerState]:
    """Apply one bias-corrected Adam update in place; increments ``state.step``."""
    _check_congruent(params, grads, "grads")
    for name, p in params.items():
        check_finite(p, f"param[{name}]")
    state.step += 1
    bias1 = 1.0 - state.beta1**state.step
    bias2 = 1.0 - state.beta2**state.step

    with torch.no_grad():
        for name, p in params.items():
            g = check_finite(grads[name], f"grad[{name}]")
            m = state.exp_avg.get(name)
            v = state.exp_avg_sq.get(name)
            if m is None or v is None:
                m = torch.zeros_like(p)
                v = torch.zeros_like(p)
                state.exp_avg[name] = m
                state.exp_avg_sq[name] = v
            m.mul_(state.beta1).add_(g, alpha=1.0 - state.beta1)
            v.mul_(state.beta2).addcmul_(g, g, value=1.0 - state.beta2)
            denom = (v / bias2).sqrt_().add_(state.eps)
            p.addcdiv_(m, denom, value=-state.lr / bias1)
    return params, state


@dataclass
class EmaState:
    """Shadow copy of the parameters, averaged with ``decay`` per update.

    With ``warmup`` the effective decay is ``min(decay, (1+n)/(10+n))`` after
    ``n`` updates, so short runs average over recent weights instead of the
    initialization.
    """

    shadow: ParamDict
    decay: float = 0.9999
    warmup: bool = False
    updates: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.decay < 1.0:
            raise ConfigurationError(
                f"EMA decay must lie in [0, 1), got {self.decay}", parameter="ema_decay"
            )

    @classmethod
    def from_params(cls, params: Mapping[str, Tensor], decay: float = 0.9999, warmup: bool = False) -> "EmaState":
        return cls({name: p.detach().clone() for name, p in params.items()}, decay=decay, warmup=warmup)

    def effective_decay(self) -> float:
        if not self.warmup:
            return self.decay
        return min(self.decay, (1.0 + self.updates) / (10.0 + self.updates))


def ema_update(ema: EmaState, params: Mapping[str, Tensor]) -> EmaState:
    """shadow ← d·shadow + (1−d)·params, elementwise."""
    _check_congruent(ema.shadow, params, "params")
    for name, p in params.items():
        check_finite(p, f"param[{name}]")
        check_finite(ema.shadow[name], f"shadow[{name}]")
    d = ema.effective_decay()
    with torch.no_grad():
        for name, shadow in ema.shadow.items():
            shadow.mul_(d).add_(params[name].detach().to(shadow.dtype), alpha=1.0 - d)
    ema.updates += 1
    return ema


# ---------------------------------------------------------------------------
# Worker threads
# ---------------------------------------------------------------------------


def configure_threads(environ: Optional[Mapping[str, str]] = None) -> int:
    """Cap intra-op threads at ``SSMVDM_THREADS`` (clamped to the CPU count)."""
    environ = os.environ if environ is None else environ
    available = psutil.cpu_count(logical=True) or 1
    raw = environ.get(THREADS_ENV)
    if raw is None:
        return torch.get_num_threads()
    try:
        requested = int(raw)
    except ValueError as e:
        raise ConfigurationError(f"{THREADS_ENV} must be an integer, got {raw!r}", parameter=THREADS_ENV) from e
    if requested < 1:
        raise ConfigurationError(f"{THREADS_ENV} must be at least 1", parameter=THREADS_ENV)
    threads = min(requested, available)
    torch.set_num_threads(threads)
    logger.debug("threads_configured", threads=threads, available=available)
    return threads


@contextmanager
def single_threaded() -> Iterator[None]:
    """Run the enclosed block on one intra-op thread (timing sections)."""
    previous = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        yield
    finally:
        torch.set_num_threads(previous)
