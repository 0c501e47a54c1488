"""DDPM noise schedule, forward corruption, ε-prediction loss and ancestral sampling.

Steps are 1-based: ``t ∈ 1..T`` indexes the schedule, and ``q_sample``
additionally accepts ``t = 0`` as the identity (``ᾱ_0 = 1``).
"""

import operator
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Union

import torch
import torch.nn.functional as F

from ._errors import ConfigurationError, ShapeError, ValidationError
from .logging import get_logger
from .numerics import Rng, check_finite, validate_extents

logger = get_logger(__name__)

Tensor = torch.Tensor
Steps = Union[int, Tensor]
Denoiser = Callable[[Tensor, Tensor], Tensor]


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step tables of length T, kept in 64-bit; entry ``i`` is step ``i + 1``."""

    betas: Tensor
    alphas: Tensor
    alpha_bars: Tensor

    @property
    def T(self) -> int:
        return int(self.betas.numel())

    def alpha_bar_prev(self) -> Tensor:
        """ᾱ_{t−1} for t ∈ 1..T, with ᾱ_0 = 1."""
        return torch.cat([self.alpha_bars.new_ones(1), self.alpha_bars[:-1]])


@dataclass
class DiffusionBatch:
    """Clean videos (B, L, C, H, W), their steps (B,) and the injected noise."""

    x0: Tensor
    t: Tensor
    eps: Tensor

    def __post_init__(self) -> None:
        if self.x0.dim() != 5:
            raise ShapeError("x0 must be (batch, frames, channels, height, width)", received=self.x0.shape)
        validate_extents(tuple(self.x0.shape), "x0")
        if self.eps.shape != self.x0.shape:
            raise ShapeError("eps must match x0", expected=self.x0.shape, received=self.eps.shape)
        if self.t.shape != (self.x0.size(0),):
            raise ShapeError("t must hold one step per batch element", expected=(self.x0.size(0),), received=self.t.shape)
        if bool((self.t < 1).any()):
            raise ValidationError("diffusion steps start at 1", field="t", value=self.t.tolist())


def make_noise_schedule(T: int = 256, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Linear β schedule, inclusive of both endpoints.

    Raises:
        ConfigurationError: unless ``T >= 1`` and ``0 < beta_start <= beta_end < 1``.
    """
    if T < 1:
        raise ConfigurationError(f"T must be at least 1, got {T}", parameter="T")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ConfigurationError(
            f"invalid beta bounds ({beta_start}, {beta_end})",
            parameter="beta_start",
            suggestion="require 0 < beta_start <= beta_end < 1",
        )
    betas = torch.linspace(beta_start, beta_end, T, dtype=torch.float64)
    alphas = 1.0 - betas
    alpha_bars = torch.cumprod(alphas, dim=0)
    return NoiseSchedule(betas=betas, alphas=alphas, alpha_bars=alpha_bars)


def _as_steps(t: Steps, batch: int, T: int, lowest: int) -> Tensor:
    steps = torch.as_tensor(t, dtype=torch.long)
    if steps.dim() == 0:
        steps = steps.expand(batch)
    if steps.shape != (batch,):
        raise ShapeError("steps must be a scalar or one per batch element", expected=(batch,), received=steps.shape)
    if bool((steps < lowest).any()) or bool((steps > T).any()):
        raise ValidationError(
            f"diffusion step outside {lowest}..{T}", field="t", value=steps.tolist()
        )
    return steps


def _extract(table: Tensor, t: Tensor, like: Tensor) -> Tensor:
    """Gather ``table[t]`` per batch element, shaped to broadcast against ``like``."""
    values = table[t].to(like.dtype)
    return values.reshape(-1, *([1] * (like.dim() - 1)))


def q_sample(x0: Tensor, t: Steps, eps: Tensor, sched: NoiseSchedule) -> Tensor:
    """x_t = √ᾱ_t·x0 + √(1−ᾱ_t)·ε, per batch element (t = 0 returns x0)."""
    if eps.shape != x0.shape:
        raise ShapeError("eps must match x0", expected=x0.shape, received=eps.shape)
    check_finite(x0, "x0")
    check_finite(eps, "eps")
    steps = _as_steps(t, x0.size(0), sched.T, lowest=0)
    alpha_bars = torch.cat([sched.alpha_bars.new_ones(1), sched.alpha_bars])
    a = _extract(alpha_bars, steps, x0)
    return a.sqrt() * x0 + (1.0 - a).sqrt() * eps


def eps_loss(model: Denoiser, batch: DiffusionBatch, sched: NoiseSchedule) -> Tensor:
    """Mean squared error between the injected noise and the model's prediction."""
    _as_steps(batch.t, batch.x0.size(0), sched.T, lowest=1)
    x_t = q_sample(batch.x0, batch.t, batch.eps, sched)
    eps_hat = model(x_t, batch.t)
    if eps_hat.shape != batch.eps.shape:
        raise ShapeError("model output must match the video extents", expected=batch.eps.shape, received=eps_hat.shape)
    check_finite(eps_hat, "eps_hat")
    return F.mse_loss(eps_hat, batch.eps)


def make_batch(x0: Tensor, sched: NoiseSchedule, rng: Rng) -> DiffusionBatch:
    """Draw t uniform in 1..T and ε ~ N(0, I) for a batch of clean videos."""
    t = rng.child("t").integers(1, sched.T, size=x0.size(0))
    eps = rng.child("eps").gaussian(tuple(x0.shape), dtype=x0.dtype)
    return DiffusionBatch(x0=x0, t=t, eps=eps)


def posterior_mean(x0: Tensor, x_t: Tensor, t: Steps, sched: NoiseSchedule) -> Tensor:
    """Mean of q(x_{t−1} | x_t, x0)."""
    steps = _as_steps(t, x0.size(0), sched.T, lowest=1) - 1
    beta = _extract(sched.betas, steps, x0)
    alpha = _extract(sched.alphas, steps, x0)
    a_bar = _extract(sched.alpha_bars, steps, x0)
    a_bar_prev = _extract(sched.alpha_bar_prev(), steps, x0)
    coef_x0 = a_bar_prev.sqrt() * beta / (1.0 - a_bar)
    coef_xt = alpha.sqrt() * (1.0 - a_bar_prev) / (1.0 - a_bar)
    return coef_x0 * x0 + coef_xt * x_t


def _step_index(t: object) -> Optional[int]:
    """``t`` as a Python int when it is an integer scalar (numpy and 0-d tensors included)."""
    if isinstance(t, bool):
        return None
    try:
        return operator.index(t)
    except TypeError:
        return None


def p_step(x_t: Tensor, t: int, eps_hat: Tensor, sched: NoiseSchedule, rng: Rng) -> Tensor:
    """One ancestral step x_t → x_{t−1}; no noise is added at t = 1."""
    step = _step_index(t)
    if step is None or not 1 <= step <= sched.T:
        raise ValidationError(f"diffusion step outside 1..{sched.T}", field="t", value=t)
    t = step
    if eps_hat.shape != x_t.shape:
        raise ShapeError("eps_hat must match x_t", expected=x_t.shape, received=eps_hat.shape)
    check_finite(x_t, "x_t")
    check_finite(eps_hat, "eps_hat")

    i = t - 1
    beta = float(sched.betas[i])
    alpha = float(sched.alphas[i])
    a_bar = float(sched.alpha_bars[i])
    mean = (x_t - (beta / (1.0 - a_bar) ** 0.5) * eps_hat) / alpha**0.5
    if t == 1:
        return mean
    z = rng.gaussian(tuple(x_t.shape), dtype=x_t.dtype)
    return mean + beta**0.5 * z


@torch.no_grad()
def sample(model: Denoiser, sched: NoiseSchedule, shape: Sequence[int], rng: Rng) -> Tensor:
    """Ancestral sampling from x_T ~ N(0, I); the result is clamped to [−1, 1] once at the end."""
    extents = validate_extents(tuple(shape), "shape")
    x = rng.child("x_T").gaussian(extents)
    for t in range(sched.T, 0, -1):
        steps = torch.full((extents[0],), t, dtype=torch.long)
        eps_hat = model(x, steps)
        x = p_step(x, t, eps_hat, sched, rng.child(f"step/{t}"))
    logger.debug("sampling_finished", steps=sched.T, shape=list(extents))
    return x.clamp(-1.0, 1.0)
