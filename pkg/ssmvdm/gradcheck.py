"""64-bit central-difference checks of every differentiable layer.

Each check compares the autograd gradient of a random linear functional of a
layer's output against central differences taken element by element, with
every parameter (including zero-initialized output projections) redrawn at
random so no gradient path is trivially zero.
"""

from contextlib import contextmanager, nullcontext
from dataclasses import dataclass, field
from typing import Callable, ContextManager, Dict, Iterator, List, Mapping, Optional, Sequence

import torch
from torch import nn
from torch.func import functional_call

from ._errors import GradientCheckError, ValidationError
from ._internal.scan import PrefixScan, parallel_linear_scan
from .attention import SpatialLinearAttention, TemporalAttention
from .logging import get_logger
from .numerics import Rng, grad, precision
from .ssm import BidirectionalMamba, MambaBlock, SelectiveInputs, SsmCoreParams, selective_scan_par
from .unet import ResnetBlock, TimeEmbedding

logger = get_logger(__name__)

Tensor = torch.Tensor
LossFn = Callable[[Mapping[str, Tensor]], Tensor]

STEP = 1e-5
TOLERANCE = 1e-4
# Gradients below this magnitude are compared absolutely; central differences
# at STEP carry roughly 1e-11 of rounding noise.
ABS_FLOOR = 1e-6


@dataclass(frozen=True)
class CheckResult:
    name: str
    max_rel_error: float
    worst_param: str
    evaluated: int
    tolerance: float = TOLERANCE

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


@dataclass
class GradCheckReport:
    results: List[CheckResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    @property
    def failures(self) -> List[str]:
        return [r.name for r in self.results if not r.passed]

    def raise_for_failures(self) -> None:
        if not self.passed:
            raise GradientCheckError(
                f"gradient check failed for {', '.join(self.failures)}", failures=self.failures
            )

    def lines(self) -> List[str]:
        return [
            f"{'PASS' if r.passed else 'FAIL'} {r.name} max_rel_err={r.max_rel_error:.3e} ({r.evaluated} entries)"
            for r in self.results
        ]


def _relative_error(analytic: Tensor, numeric: Tensor) -> float:
    """Normwise relative error; below ``ABS_FLOOR`` the difference is taken absolutely."""
    scale = max(analytic.abs().max().item(), numeric.abs().max().item(), ABS_FLOOR)
    return (analytic - numeric).abs().max().item() / scale


@torch.no_grad()
def _central_difference(loss_fn: LossFn, values: Dict[str, Tensor], name: str, h: float) -> Tensor:
    target = values[name]
    flat = target.view(-1)
    out = torch.empty_like(flat)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + h
        plus = loss_fn(values).item()
        flat[i] = orig - h
        minus = loss_fn(values).item()
        flat[i] = orig
        out[i] = (plus - minus) / (2 * h)
    return out.view_as(target)


def check_gradients(
    name: str, loss_fn: LossFn, params: Mapping[str, Tensor], h: float = STEP, tolerance: float = TOLERANCE
) -> CheckResult:
    """Compare autograd against central differences for every entry of ``params``.

    Raises:
        ValidationError: a parameter is not float64.
    """
    for key, value in params.items():
        if value.dtype != torch.float64:
            raise ValidationError(f"gradient checks run in float64; {key} is {value.dtype}", field=key)
    values = {k: v.detach().clone() for k, v in params.items()}
    analytic = grad(loss_fn, values)

    worst, worst_param, evaluated = 0.0, "", 0
    for key in values:
        numeric = _central_difference(loss_fn, values, key, h)
        err = _relative_error(analytic[key], numeric)
        evaluated += numeric.numel()
        if err >= worst:
            worst, worst_param = err, key
    result = CheckResult(name=name, max_rel_error=worst, worst_param=worst_param, evaluated=evaluated, tolerance=tolerance)
    logger.debug("gradient_checked", check=name, max_rel_error=worst, worst_param=worst_param, passed=result.passed)
    return result


def _randomized(module: nn.Module, rng: Rng, scale: float = 0.5) -> Dict[str, Tensor]:
    return {
        name: rng.child(name).gaussian(tuple(p.shape), dtype=torch.float64) * scale
        for name, p in module.named_parameters()
    }


def _module_check(
    name: str, module: nn.Module, inputs: Dict[str, Tensor], call: Callable[..., Tensor], rng: Rng
) -> CheckResult:
    """Check a module's parameters and its floating inputs together."""
    params = _randomized(module, rng.child("params"))
    projection: Optional[Tensor] = None

    def loss_fn(values: Mapping[str, Tensor]) -> Tensor:
        nonlocal projection
        weights = {k: values[k] for k in params}
        args = {k: values[k] if k in values else v for k, v in inputs.items()}
        out = call(lambda *a: functional_call(module, weights, a), **args)
        if projection is None:
            projection = rng.child("projection").gaussian(tuple(out.shape), dtype=torch.float64)
        return (out * projection).sum()

    checked = dict(params)
    checked.update({k: v for k, v in inputs.items() if v.is_floating_point()})
    return check_gradients(name, loss_fn, checked)


def _check_prefix_scan(rng: Rng) -> CheckResult:
    A = rng.child("A").uniform((2, 5, 3, 2), low=0.2, high=0.9, dtype=torch.float64)
    X = rng.child("X").gaussian((2, 5, 3, 2), dtype=torch.float64)
    projection = rng.child("projection").gaussian((2, 5, 3, 2), dtype=torch.float64)
    return check_gradients(
        "prefix_scan", lambda v: (parallel_linear_scan(v["A"], v["X"]) * projection).sum(), {"A": A, "X": X}
    )


def _check_selective_scan(rng: Rng, exact: bool) -> CheckResult:
    G, L, D, N = 2, 6, 3, 4
    values = {
        "A_log": rng.child("A_log").uniform((D, N), low=-1.0, high=1.0, dtype=torch.float64),
        "D_skip": rng.child("D").gaussian((D,), dtype=torch.float64),
        "u": rng.child("u").gaussian((G, L, D), dtype=torch.float64),
        "B_sel": rng.child("B").gaussian((G, L, N), dtype=torch.float64),
        "C_sel": rng.child("C").gaussian((G, L, N), dtype=torch.float64),
        "delta": rng.child("delta").uniform((G, L, D), low=0.2, high=1.0, dtype=torch.float64),
    }
    projection = rng.child("projection").gaussian((G, L, D), dtype=torch.float64)

    def loss_fn(v: Mapping[str, Tensor]) -> Tensor:
        core = SsmCoreParams(A=-torch.exp(v["A_log"]), D_skip=v["D_skip"], delta_bias=torch.zeros(D, dtype=torch.float64))
        inputs = SelectiveInputs(u=v["u"], B_sel=v["B_sel"], C_sel=v["C_sel"], delta=v["delta"])
        return (selective_scan_par(core, inputs, exact=exact) * projection).sum()

    return check_gradients("selective_scan_exact" if exact else "selective_scan", loss_fn, values)


def _layer_checks(rng: Rng) -> Dict[str, Callable[[], CheckResult]]:
    C = 4

    def seq(name: str, L: int = 5) -> Tensor:
        return rng.child(name).gaussian((2, L, C), dtype=torch.float64)

    def mamba() -> CheckResult:
        block = MambaBlock(C, d_state=4, rng=rng.child("mamba/init"))
        return _module_check("mamba_block", block, {"X": seq("mamba/X")}, lambda f, X: f(X), rng.child("mamba"))

    def mamba_backward() -> CheckResult:
        block = MambaBlock(C, direction="backward", d_state=4, rng=rng.child("mamba_bwd/init"))
        return _module_check(
            "mamba_block_backward", block, {"X": seq("mamba_bwd/X")}, lambda f, X: f(X), rng.child("mamba_bwd")
        )

    def bidirectional() -> CheckResult:
        block = BidirectionalMamba(C, d_state=4, rng=rng.child("bimamba/init"))
        return _module_check(
            "bidirectional_mamba", block, {"X": seq("bimamba/X")}, lambda f, X: f(X), rng.child("bimamba")
        )

    def temporal_attention() -> CheckResult:
        layer = TemporalAttention(C, heads=2, dim_head=4, pos_bias=True, rng=rng.child("tattn/init"))
        return _module_check(
            "temporal_attention", layer, {"X": seq("tattn/X")}, lambda f, X: f(X), rng.child("tattn")
        )

    def spatial_attention() -> CheckResult:
        layer = SpatialLinearAttention(C, heads=2, dim_head=4, rng=rng.child("sattn/init"))
        X = rng.child("sattn/X").gaussian((2, C, 3, 3), dtype=torch.float64)
        return _module_check("spatial_linear_attention", layer, {"X": X}, lambda f, X: f(X), rng.child("sattn"))

    def resnet() -> CheckResult:
        # 16 channels in 8 groups: two channels per group keep the conv biases live
        block = ResnetBlock(C, 16, time_dim=6)
        x = rng.child("resnet/x").gaussian((2, C, 3, 3), dtype=torch.float64)
        emb = rng.child("resnet/emb").gaussian((2, 6), dtype=torch.float64)
        return _module_check(
            "resnet_block", block, {"x": x, "emb": emb}, lambda f, x, emb: f(x, emb), rng.child("resnet")
        )

    def time_embedding() -> CheckResult:
        mlp = TimeEmbedding(8, time_dim=12)
        steps = torch.tensor([1, 17, 250])
        return _module_check("time_embedding", mlp, {"t": steps}, lambda f, t: f(t), rng.child("temb"))

    return {
        "prefix_scan": lambda: _check_prefix_scan(rng.child("pscan")),
        "selective_scan": lambda: _check_selective_scan(rng.child("sscan"), exact=False),
        "selective_scan_exact": lambda: _check_selective_scan(rng.child("sscan_exact"), exact=True),
        "mamba_block": mamba,
        "mamba_block_backward": mamba_backward,
        "bidirectional_mamba": bidirectional,
        "temporal_attention": temporal_attention,
        "spatial_linear_attention": spatial_attention,
        "resnet_block": resnet,
        "time_embedding": time_embedding,
    }


CHECK_NAMES = tuple(_layer_checks(Rng(0)))


@contextmanager
def corrupted_scan_backward(scale: float = 1.01) -> Iterator[None]:
    """Scale the prefix scan's gradients by ``scale`` inside the block."""
    original = PrefixScan.backward

    def backward(ctx, grad_output):
        grad_a, grad_x = original(ctx, grad_output)
        return grad_a * scale, grad_x * scale

    PrefixScan.backward = staticmethod(backward)  # type: ignore[method-assign]
    try:
        yield
    finally:
        PrefixScan.backward = staticmethod(original)  # type: ignore[method-assign]


CORRUPTIONS: Dict[str, Callable[[], ContextManager[None]]] = {"pscan": corrupted_scan_backward}


def run_gradcheck(seed: int = 0, only: Optional[Sequence[str]] = None, corrupt: Optional[str] = None) -> GradCheckReport:
    """Run the suite (or the named subset) and return the report; never raises on failure."""
    if corrupt is not None and corrupt not in CORRUPTIONS:
        raise ValidationError(f"unknown corruption {corrupt!r}; expected one of {sorted(CORRUPTIONS)}", field="corrupt")
    names = list(only) if only else list(CHECK_NAMES)
    unknown = [n for n in names if n not in CHECK_NAMES]
    if unknown:
        raise ValidationError(f"unknown gradient checks {unknown}", field="only", value=unknown)

    report = GradCheckReport()
    with precision("float64"):
        checks = _layer_checks(Rng(seed).child("gradcheck"))
        hook = CORRUPTIONS[corrupt]() if corrupt else nullcontext()
        with hook:
            for name in names:
                report.results.append(checks[name]())
    logger.info("gradcheck_finished", checks=len(report.results), failures=report.failures, corrupt=corrupt)
    return report
