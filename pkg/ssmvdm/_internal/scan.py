"""Work-efficient prefix scan for the first-order linear recurrence.

Computes ``H[t] = A[t] * H[t-1] + X[t]`` with ``H[-1] = 0`` over the length
axis in ``2·log2(L)`` sweeps, the associative operator being
``(a2, b2) ∘ (a1, b1) = (a2·a1, a2·b1 + b2)``. The backward pass is the same
scan run right-to-left on the incoming gradient.
"""

import math
from typing import Any, Tuple

import torch
import torch.nn.functional as F

from .._errors import ShapeError

Tensor = torch.Tensor


def _sweep(A: Tensor, X: Tensor) -> None:
    """In-place up-sweep / down-sweep over axis 2 of (G, D, L, N); L a power of two."""
    G, D, L, _ = A.shape
    num_steps = int(math.log2(L))

    Aa, Xa = A, X
    for _ in range(num_steps):
        T = 2 * (Xa.size(2) // 2)
        Aa = Aa[:, :, :T].view(G, D, T // 2, 2, -1)
        Xa = Xa[:, :, :T].view(G, D, T // 2, 2, -1)
        Xa[:, :, :, 1].add_(Aa[:, :, :, 1].mul(Xa[:, :, :, 0]))
        Aa[:, :, :, 1].mul_(Aa[:, :, :, 0])
        Aa = Aa[:, :, :, 1]
        Xa = Xa[:, :, :, 1]

    for k in range(num_steps - 1, -1, -1):
        Aa = A[:, :, 2**k - 1 : L : 2**k]
        Xa = X[:, :, 2**k - 1 : L : 2**k]
        T = 2 * (Xa.size(2) // 2)
        if T < Xa.size(2):
            Xa[:, :, -1].add_(Aa[:, :, -1].mul(Xa[:, :, -2]))
            Aa[:, :, -1].mul_(Aa[:, :, -2])
        Aa = Aa[:, :, :T].view(G, D, T // 2, 2, -1)
        Xa = Xa[:, :, :T].view(G, D, T // 2, 2, -1)
        Xa[:, :, 1:, 0].add_(Aa[:, :, 1:, 0].mul(Xa[:, :, :-1, 1]))
        Aa[:, :, 1:, 0].mul_(Aa[:, :, :-1, 1])


class PrefixScan(torch.autograd.Function):
    """Autograd wrapper around :func:`_sweep`. Inputs are (G, L, D, N), L a power of two."""

    @staticmethod
    def forward(ctx: Any, A_in: Tensor, X_in: Tensor) -> Tensor:
        A = A_in.transpose(2, 1).clone(memory_format=torch.contiguous_format)
        X = X_in.transpose(2, 1).clone(memory_format=torch.contiguous_format)
        _sweep(A, X)
        ctx.save_for_backward(A_in, X)
        return X.transpose(2, 1)

    @staticmethod
    def backward(ctx: Any, grad_output: Tensor) -> Tuple[Tensor, Tensor]:
        A_in, H = ctx.saved_tensors

        # dX[t] = g[t] + A[t+1]·dX[t+1]: the same recurrence on the reversed axis
        A = A_in.transpose(2, 1)
        A = torch.cat((A[:, :, :1], A[:, :, 1:].flip(2)), dim=2).contiguous()
        grad_x = grad_output.transpose(2, 1).flip(2).contiguous()
        _sweep(A, grad_x)
        grad_x = grad_x.flip(2)

        grad_a = torch.zeros_like(H)
        grad_a[:, :, 1:].add_(H[:, :, :-1] * grad_x[:, :, 1:])
        return grad_a.transpose(2, 1), grad_x.transpose(2, 1)


def parallel_linear_scan(A: Tensor, X: Tensor) -> Tensor:
    """All prefix states of ``H[t] = A[t]·H[t-1] + X[t]`` for (G, L, D, N) inputs.

    L is padded to the next power of two with identity pairs ``(1, 0)``,
    which leave the real prefix untouched.
    """
    if A.shape != X.shape:
        raise ShapeError("scan operands differ in shape", expected=A.shape, received=X.shape)
    L = A.size(1)
    padded = 1 << max(0, (L - 1).bit_length())
    if padded != L:
        # pad the length axis (dim 1): F.pad orders pairs from the last axis
        A = F.pad(A, (0, 0, 0, 0, 0, padded - L), value=1.0)
        X = F.pad(X, (0, 0, 0, 0, 0, padded - L), value=0.0)
    H = PrefixScan.apply(A, X)
    return H[:, :L]


def sequential_linear_scan(A: Tensor, X: Tensor) -> Tensor:
    """Reference left-to-right evaluation of the same recurrence."""
    states = []
    h = torch.zeros_like(X[:, 0])
    for t in range(X.size(1)):
        h = A[:, t] * h + X[:, t]
        states.append(h)
    return torch.stack(states, dim=1)
