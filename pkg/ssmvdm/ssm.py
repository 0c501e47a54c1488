"""Selective state-space temporal layer.

Sequences arrive as ``(G, L, C)`` with every spatial position of every video
folded into the group axis G. A block projects to an expanded width
``D = E·C``, runs a depthwise causal convolution and the input-dependent
(selective) scan along L, gates with a SiLU branch and projects back.

The bidirectional block runs one convolution + scan branch over the sequence
and another over its reversal, sharing the norm, input projection, gate and
output projection.
"""

import math
from dataclasses import dataclass
from typing import Optional, Tuple

import torch
import torch.nn.functional as F
from einops import rearrange
from torch import nn

from ._errors import ShapeError, ValidationError
from ._internal.init import initialize, uniform_
from ._internal.scan import parallel_linear_scan
from .logging import get_logger
from .numerics import Rng, check_finite
from .types import Direction

logger = get_logger(__name__)

Tensor = torch.Tensor

DEFAULT_EXPAND = 2
DEFAULT_D_STATE = 16
DEFAULT_D_CONV = 4


@dataclass
class SsmCoreParams:
    """Input-independent part of one scan: A (D, N) < 0, skip D (D,), Δ bias (D,)."""

    A: Tensor
    D_skip: Tensor
    delta_bias: Tensor

    def __post_init__(self) -> None:
        if self.A.dim() != 2:
            raise ShapeError("A must be (D_inner, N)", received=self.A.shape)
        d_inner = self.A.size(0)
        for name in ("D_skip", "delta_bias"):
            value = getattr(self, name)
            if value.shape != (d_inner,):
                raise ShapeError(f"{name} must be (D_inner,)", expected=(d_inner,), received=value.shape)
        for name in ("A", "D_skip", "delta_bias"):
            check_finite(getattr(self, name), name)
        if not bool((self.A < 0).all()):
            raise ValidationError("state matrix entries must be strictly negative", field="A")

    @property
    def d_inner(self) -> int:
        return int(self.A.size(0))

    @property
    def d_state(self) -> int:
        return int(self.A.size(1))


@dataclass
class SelectiveInputs:
    """Per-step scan inputs: u and Δ are (G, L, D), B and C are (G, L, N)."""

    u: Tensor
    B_sel: Tensor
    C_sel: Tensor
    delta: Tensor

    def __post_init__(self) -> None:
        if self.u.dim() != 3:
            raise ShapeError("u must be (G, L, D_inner)", received=self.u.shape)
        G, L, D = self.u.shape
        if self.delta.shape != (G, L, D):
            raise ShapeError("delta must match u", expected=(G, L, D), received=self.delta.shape)
        for name in ("B_sel", "C_sel"):
            value = getattr(self, name)
            if value.dim() != 3 or value.shape[:2] != (G, L):
                raise ShapeError(f"{name} must be (G, L, N)", expected=(G, L, -1), received=value.shape)
        if self.B_sel.shape != self.C_sel.shape:
            raise ShapeError("B_sel and C_sel differ", expected=self.B_sel.shape, received=self.C_sel.shape)
        for name in ("u", "B_sel", "C_sel", "delta"):
            check_finite(getattr(self, name), name)
        if not bool((self.delta > 0).all()):
            raise ValidationError("step sizes must be strictly positive", field="delta")

    def check_against(self, params: SsmCoreParams) -> None:
        if self.u.size(2) != params.d_inner or self.B_sel.size(2) != params.d_state:
            raise ShapeError(
                "scan inputs do not match the state matrix",
                expected=(params.d_inner, params.d_state),
                received=(self.u.size(2), self.B_sel.size(2)),
            )


def zoh_discretize(A: Tensor, B_sel: Tensor, delta: Tensor, exact: bool = False) -> Tuple[Tensor, Tensor]:
    """Discretize the diagonal system with step Δ.

    Args:
        A: (D, N), strictly negative
        B_sel: (G, L, N)
        delta: (G, L, D), strictly positive
        exact: use the exact hold ``(exp(ΔA) − 1)/A · B``; otherwise ``Δ·B``

    Returns:
        ``(A_bar, B_bar)``, each (G, L, D, N)
    """
    for name, value in (("A", A), ("B_sel", B_sel), ("delta", delta)):
        check_finite(value, name)
    if not bool((delta > 0).all()):
        raise ValidationError("step sizes must be strictly positive", field="delta")
    if not bool((A < 0).all()):
        raise ValidationError("state matrix entries must be strictly negative", field="A")
    dA = delta.unsqueeze(-1) * A
    A_bar = torch.exp(dA)
    if exact:
        B_bar = (torch.expm1(dA) / A) * B_sel.unsqueeze(2)
    else:
        B_bar = delta.unsqueeze(-1) * B_sel.unsqueeze(2)
    return A_bar, B_bar


def _discretized_terms(params: SsmCoreParams, inputs: SelectiveInputs, exact: bool) -> Tuple[Tensor, Tensor]:
    inputs.check_against(params)
    A_bar, B_bar = zoh_discretize(params.A, inputs.B_sel, inputs.delta, exact=exact)
    return A_bar, B_bar * inputs.u.unsqueeze(-1)


def selective_scan_seq(params: SsmCoreParams, inputs: SelectiveInputs, exact: bool = False) -> Tensor:
    """Reference recurrence, strictly left to right. Returns y (G, L, D)."""
    A_bar, Bu = _discretized_terms(params, inputs, exact)
    G, L, D, N = A_bar.shape
    s = A_bar.new_zeros(G, D, N)
    ys = []
    for k in range(L):
        s = A_bar[:, k] * s + Bu[:, k]
        ys.append((s * inputs.C_sel[:, k].unsqueeze(1)).sum(dim=-1))
    y = torch.stack(ys, dim=1)
    return y + inputs.u * params.D_skip


def selective_scan_par(
    params: SsmCoreParams,
    inputs: SelectiveInputs,
    exact: bool = False,
    return_states: bool = False,
):
    """Same contract as :func:`selective_scan_seq`, via the work-efficient prefix scan.

    With ``return_states`` the (G, L, D, N) hidden states are returned as well.
    """
    A_bar, Bu = _discretized_terms(params, inputs, exact)
    states = parallel_linear_scan(A_bar, Bu)
    y = torch.einsum("gldn,gln->gld", states, inputs.C_sel) + inputs.u * params.D_skip
    if return_states:
        return y, states
    return y


def _inverse_softplus(x: Tensor) -> Tensor:
    return x + torch.log(-torch.expm1(-x))


class MambaBranch(nn.Module):
    """Convolution + selective scan over one direction of the sequence."""

    def __init__(
        self,
        d_inner: int,
        dt_rank: int,
        d_state: int = DEFAULT_D_STATE,
        d_conv: int = DEFAULT_D_CONV,
        exact_zoh: bool = False,
        dt_min: float = 0.001,
        dt_max: float = 0.1,
        dt_init_floor: float = 1e-4,
    ):
        super().__init__()
        self.d_inner = d_inner
        self.d_state = d_state
        self.dt_rank = dt_rank
        self.exact_zoh = exact_zoh
        self.dt_min = dt_min
        self.dt_max = dt_max
        self.dt_init_floor = dt_init_floor

        self.conv1d = nn.Conv1d(
            in_channels=d_inner,
            out_channels=d_inner,
            kernel_size=d_conv,
            bias=True,
            groups=d_inner,
            padding=d_conv - 1,
        )
        self.x_proj = nn.Linear(d_inner, dt_rank + 2 * d_state, bias=False)
        self.dt_proj = nn.Linear(dt_rank, d_inner, bias=True)

        # S4D real initialization
        A = torch.arange(1, d_state + 1, dtype=torch.get_default_dtype()).repeat(d_inner, 1)
        self.A_log = nn.Parameter(torch.log(A))
        self.D = nn.Parameter(torch.ones(d_inner))

    @torch.no_grad()
    def init_from(self, rng: Rng) -> None:
        A = torch.arange(1, self.d_state + 1, dtype=self.A_log.dtype).repeat(self.d_inner, 1)
        self.A_log.copy_(torch.log(A))
        self.D.fill_(1.0)
        uniform_(self.dt_proj.weight, self.dt_rank**-0.5, rng.child("dt_weight"))
        u = rng.child("dt_bias").uniform((self.d_inner,), dtype=torch.float64)
        dt = torch.exp(u * (math.log(self.dt_max) - math.log(self.dt_min)) + math.log(self.dt_min))
        dt = dt.clamp(min=self.dt_init_floor)
        self.dt_proj.bias.copy_(_inverse_softplus(dt).to(self.dt_proj.bias.dtype))

    def core_params(self) -> SsmCoreParams:
        return SsmCoreParams(A=-torch.exp(self.A_log), D_skip=self.D, delta_bias=self.dt_proj.bias)

    def selective_inputs(self, u: Tensor) -> SelectiveInputs:
        x_dbl = self.x_proj(u)
        dt, B_sel, C_sel = x_dbl.split([self.dt_rank, self.d_state, self.d_state], dim=-1)
        delta = F.softplus(self.dt_proj(dt))
        return SelectiveInputs(u=u, B_sel=B_sel, C_sel=C_sel, delta=delta)

    def forward(self, x: Tensor, direction: Direction = "forward") -> Tensor:
        L = x.size(1)
        if direction == "backward":
            x = x.flip(1)
        x = rearrange(x, "g l d -> g d l")
        x = self.conv1d(x)[:, :, :L]
        x = F.silu(rearrange(x, "g d l -> g l d"))
        y = selective_scan_par(self.core_params(), self.selective_inputs(x), exact=self.exact_zoh)
        if direction == "backward":
            y = y.flip(1)
        return y


def _check_sequence(X: Tensor, channels: int) -> None:
    if X.dim() != 3 or X.size(2) != channels:
        raise ShapeError("temporal input must be (G, L, C)", expected=(-1, -1, channels), received=X.shape)
    check_finite(X, "X")


class MambaBlock(nn.Module):
    """Pre-norm gated Mamba block with a residual connection.

    The output projection starts at zero, so a fresh block is the identity.
    """

    def __init__(
        self,
        channels: int,
        direction: Direction = "forward",
        expand: int = DEFAULT_EXPAND,
        d_state: int = DEFAULT_D_STATE,
        d_conv: int = DEFAULT_D_CONV,
        exact_zoh: bool = False,
        rng: Optional[Rng] = None,
    ):
        super().__init__()
        self.channels = channels
        self.direction = direction
        self.d_inner = expand * channels
        self.dt_rank = math.ceil(channels / 16)

        self.norm = nn.LayerNorm(channels)
        self.in_proj = nn.Linear(channels, 2 * self.d_inner, bias=False)
        self.branch = MambaBranch(self.d_inner, self.dt_rank, d_state, d_conv, exact_zoh)
        self.out_proj = nn.Linear(self.d_inner, channels, bias=False)

        if rng is not None:
            initialize(self, rng)

    @torch.no_grad()
    def init_from(self, rng: Rng) -> None:
        self.out_proj.weight.zero_()

    def forward(self, X: Tensor, direction: Optional[Direction] = None) -> Tensor:
        _check_sequence(X, self.channels)
        x, z = self.in_proj(self.norm(X)).chunk(2, dim=-1)
        y = self.branch(x, direction or self.direction)
        return X + self.out_proj(y * F.silu(z))


class BidirectionalMamba(nn.Module):
    """Forward and backward selective-scan branches, summed before the shared gate."""

    def __init__(
        self,
        channels: int,
        expand: int = DEFAULT_EXPAND,
        d_state: int = DEFAULT_D_STATE,
        d_conv: int = DEFAULT_D_CONV,
        exact_zoh: bool = False,
        rng: Optional[Rng] = None,
    ):
        super().__init__()
        self.channels = channels
        self.d_inner = expand * channels
        self.dt_rank = math.ceil(channels / 16)

        self.norm = nn.LayerNorm(channels)
        self.in_proj = nn.Linear(channels, 2 * self.d_inner, bias=False)
        self.forward_branch = MambaBranch(self.d_inner, self.dt_rank, d_state, d_conv, exact_zoh)
        self.backward_branch = MambaBranch(self.d_inner, self.dt_rank, d_state, d_conv, exact_zoh)
        self.out_proj = nn.Linear(self.d_inner, channels, bias=False)

        if rng is not None:
            initialize(self, rng)

    @torch.no_grad()
    def init_from(self, rng: Rng) -> None:
        self.out_proj.weight.zero_()

    @torch.no_grad()
    def tie_directions_(self) -> "BidirectionalMamba":
        """Copy the forward branch's parameters into the backward branch."""
        self.backward_branch.load_state_dict(self.forward_branch.state_dict())
        return self

    def forward(self, X: Tensor) -> Tensor:
        _check_sequence(X, self.channels)
        x, z = self.in_proj(self.norm(X)).chunk(2, dim=-1)
        y = self.forward_branch(x, "forward") + self.backward_branch(x, "backward")
        return X + self.out_proj(y * F.silu(z))


def mamba_block_forward(block: MambaBlock, X: Tensor, direction: Optional[Direction] = None) -> Tensor:
    """Apply one gated block over (G, L, C); ``direction`` overrides the block's own."""
    return block(X, direction)


def bidirectional_mamba_forward(block: BidirectionalMamba, X: Tensor) -> Tensor:
    return block(X)
