"""Sequence-length scaling study for the temporal layers.

Peak activation memory is counted by :class:`ActivationArena`, which
intercepts every tensor-producing operation and accounts for the storage
each result keeps alive. The count depends only on the operations executed,
so repeated runs at the same configuration report identical bytes.
"""

import csv
import statistics
import time
import weakref
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Union

import numpy as np
import psutil
import torch
from torch import nn
from torch.utils._python_dispatch import TorchDispatchMode
from torch.utils._pytree import tree_flatten

from ._errors import CapacityError, FormatError, ValidationError
from .attention import TemporalAttention
from .logging import get_logger
from .numerics import Rng, single_threaded
from .ssm import BidirectionalMamba, MambaBlock
from .types import BENCH_KINDS, BenchRecord

logger = get_logger(__name__)

Tensor = torch.Tensor

CSV_HEADER = ["layer", "L", "groups", "channels", "peak_bytes", "wall_ns"]
FAILURE_MARK = "FAIL"


def _storage_key(t: Tensor) -> int:
    return t.untyped_storage()._cdata


class ActivationArena(TorchDispatchMode):
    """Tracks live bytes of tensors produced inside the ``with`` block.

    Storages registered as external (inputs, parameters) are never counted,
    and views share the bytes of the storage they alias.

    Example:
        >>> with ActivationArena() as arena:
        ...     arena.register_external(x, *layer.parameters())
        ...     layer(x)
        >>> arena.peak_bytes
    """

    def __init__(self, limit_bytes: Optional[int] = None, seq_len: Optional[int] = None):
        super().__init__()
        self.limit_bytes = limit_bytes
        self.seq_len = seq_len
        self.live_bytes = 0
        self.peak_bytes = 0
        self.allocations = 0
        self._external: set = set()
        self._storages: Dict[int, List[int]] = {}

    def register_external(self, *tensors: Tensor) -> None:
        for t in tensors:
            self._external.add(_storage_key(t))

    def _release(self, key: int) -> None:
        entry = self._storages.get(key)
        if entry is None:
            return
        entry[1] -= 1
        if entry[1] == 0:
            self.live_bytes -= entry[0]
            del self._storages[key]

    def _track(self, t: Tensor) -> None:
        if t.device.type == "meta":
            return
        key = _storage_key(t)
        if key in self._external:
            return
        entry = self._storages.get(key)
        if entry is None:
            nbytes = t.untyped_storage().nbytes()
            entry = [nbytes, 0]
            self._storages[key] = entry
            self.live_bytes += nbytes
            self.allocations += 1
            self.peak_bytes = max(self.peak_bytes, self.live_bytes)
            if self.limit_bytes is not None and self.live_bytes > self.limit_bytes:
                raise CapacityError(
                    f"activation budget exceeded: {self.live_bytes} > {self.limit_bytes} bytes",
                    seq_len=self.seq_len,
                    requested_bytes=self.live_bytes,
                    limit_bytes=self.limit_bytes,
                )
        entry[1] += 1
        weakref.finalize(t, self._release, key)

    def __torch_dispatch__(self, func: Any, types: Any, args: Any = (), kwargs: Any = None) -> Any:
        out = func(*args, **(kwargs or {}))
        for value in tree_flatten(out)[0]:
            if isinstance(value, torch.Tensor):
                self._track(value)
        return out


def make_bench_layer(kind: str, channels: int, rng: Rng) -> nn.Module:
    """The temporal layer measured for ``kind``, as used inside the U-Net."""
    if kind == "attention":
        return TemporalAttention(channels, rng=rng)
    if kind == "ssm_bidirectional":
        return BidirectionalMamba(channels, rng=rng)
    if kind == "ssm_unidirectional":
        return MambaBlock(channels, direction="forward", rng=rng)
    raise ValidationError(f"unknown layer kind {kind!r}; expected one of {BENCH_KINDS}", field="kind", value=kind)


def _count_peak(
    layer: nn.Module, X: Tensor, L: int, limit_bytes: Optional[int], training: bool
) -> int:
    grad_mode = torch.enable_grad() if training else torch.no_grad()
    with grad_mode:
        arena = ActivationArena(limit_bytes=limit_bytes, seq_len=L)
        with arena:
            arena.register_external(X, *layer.parameters())
            out = layer(X)
            del out
        return arena.peak_bytes


def measure_layer(
    kind: str,
    L: int,
    G: int,
    C: int,
    reps: int = 3,
    limit_bytes: Optional[int] = None,
    training: bool = False,
    seed: int = 0,
) -> BenchRecord:
    """Peak activation bytes and median wall time of one forward pass.

    With ``training`` the autograd tape is kept while counting, so saved
    activations stay live. Timing always runs under ``no_grad`` on one thread
    after a warmup pass.

    Raises:
        CapacityError: the activation budget or the allocator gave out at this L.
    """
    if min(L, G, C, reps) < 1:
        raise ValidationError("L, G, C and reps must be positive", field="extents", value=(L, G, C, reps))
    rng = Rng(seed).child(f"bench/{kind}")
    layer = make_bench_layer(kind, C, rng.child("layer"))
    X = rng.child("input").gaussian((G, L, C))

    try:
        with torch.no_grad():
            layer(X)
        peak = _count_peak(layer, X, L, limit_bytes, training)
        timings = []
        with single_threaded(), torch.no_grad():
            for _ in range(reps):
                start = time.perf_counter_ns()
                layer(X)
                timings.append(time.perf_counter_ns() - start)
    except CapacityError:
        raise
    except (MemoryError, RuntimeError) as e:
        if isinstance(e, RuntimeError) and "memory" not in str(e).lower():
            raise
        raise CapacityError(f"allocation failed: {e}", seq_len=L, limit_bytes=limit_bytes) from e

    wall = max(1, int(statistics.median(timings)))
    rss = psutil.Process().memory_info().rss
    logger.info(
        "layer_measured",
        layer=kind,
        L=L,
        groups=G,
        channels=C,
        peak_bytes=peak,
        wall_ns=wall,
        rss_bytes=rss,
        training=training,
    )
    return BenchRecord(layer=kind, seq_len=L, groups=G, channels=C, peak_bytes=peak, wall_ns=wall)


def run_bench(
    kinds: Sequence[str],
    lengths: Sequence[int],
    G: int,
    C: int,
    reps: int = 3,
    limit_bytes: Optional[int] = None,
    training: bool = False,
) -> List[BenchRecord]:
    """Measure every kind over the L grid; capacity failures become marked rows."""
    records = []
    for kind in kinds:
        for L in lengths:
            try:
                records.append(measure_layer(kind, L, G, C, reps, limit_bytes, training))
            except CapacityError as e:
                logger.warning("capacity_exceeded", layer=kind, L=L, error=str(e))
                records.append(
                    BenchRecord(
                        layer=kind, seq_len=L, groups=G, channels=C, peak_bytes=None, wall_ns=None, failure="capacity"
                    )
                )
    return records


def fit_scaling_exponent(records: Iterable[BenchRecord]) -> float:
    """Least-squares slope of log(peak bytes) against log(L).

    Failure rows are skipped.

    Raises:
        ValidationError: mixed layer kinds, or fewer than 4 distinct L values.
    """
    usable = [r for r in records if r.ok and r.peak_bytes]
    kinds = {r.layer for r in usable}
    if len(kinds) > 1:
        raise ValidationError(f"records mix layer kinds {sorted(kinds)}", field="records")
    lengths = {r.seq_len for r in usable}
    if len(lengths) < 4:
        raise ValidationError(
            f"scaling fit needs at least 4 distinct L values, got {len(lengths)}",
            field="records",
            value=sorted(lengths),
        )
    x = np.log([r.seq_len for r in usable])
    y = np.log([float(r.peak_bytes) for r in usable])  # type: ignore[arg-type]
    slope, _ = np.polyfit(x, y, 1)
    return float(slope)


def summarize(records: Sequence[BenchRecord]) -> Dict[str, float]:
    """Fitted exponent per layer kind, in first-seen order."""
    kinds = list(dict.fromkeys(r.layer for r in records))
    return {kind: fit_scaling_exponent([r for r in records if r.layer == kind]) for kind in kinds}


def write_bench_csv(records: Iterable[BenchRecord], path: Union[str, Path]) -> Path:
    """One row per record; failure rows carry ``FAIL`` and the failure reason."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for r in records:
            if r.ok:
                writer.writerow([r.layer, r.seq_len, r.groups, r.channels, r.peak_bytes, r.wall_ns])
            else:
                writer.writerow([r.layer, r.seq_len, r.groups, r.channels, FAILURE_MARK, r.failure])
    return path


def read_bench_csv(path: Union[str, Path]) -> List[BenchRecord]:
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as f:
        rows = list(csv.reader(f))
    if not rows or rows[0] != CSV_HEADER:
        raise FormatError(
            f"{path} is not a bench CSV", expected=",".join(CSV_HEADER), received=",".join(rows[0]) if rows else ""
        )
    records = []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(CSV_HEADER):
            raise FormatError(f"{path}:{lineno}: expected {len(CSV_HEADER)} columns", received=str(len(row)))
        layer, L, groups, channels, peak, wall = row
        if peak == FAILURE_MARK:
            records.append(BenchRecord(layer, int(L), int(groups), int(channels), None, None, failure=wall))
        else:
            records.append(BenchRecord(layer, int(L), int(groups), int(channels), int(peak), int(wall)))
    return records


def plot_bench(records: Sequence[BenchRecord], path: Union[str, Path], dpi: int = 150) -> Path:
    """Log-log peak bytes and wall time against L, one line per layer kind.

    Failed rows are left out; the format follows the file suffix.
    """
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    ok = [r for r in records if r.ok]
    if not ok:
        raise ValidationError("no successful bench rows to plot", field="records")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    fig, (mem_ax, time_ax) = plt.subplots(1, 2, figsize=(10, 4))
    try:
        for kind in dict.fromkeys(r.layer for r in ok):
            rows = sorted((r for r in ok if r.layer == kind), key=lambda r: r.seq_len)
            lengths = [r.seq_len for r in rows]
            label = kind
            if len(set(lengths)) >= 4:
                label = f"{kind} (slope {fit_scaling_exponent(rows):.2f})"
            mem_ax.plot(lengths, [r.peak_bytes for r in rows], marker="o", label=label)
            time_ax.plot(lengths, [r.wall_ns / 1e6 for r in rows], marker="o", label=kind)
        for ax, ylabel in ((mem_ax, "peak activation bytes"), (time_ax, "median wall time (ms)")):
            ax.set_xscale("log", base=2)
            ax.set_yscale("log")
            ax.set_xlabel("sequence length L")
            ax.set_ylabel(ylabel)
            ax.grid(True, which="both", alpha=0.3)
            ax.legend(fontsize=8)
        fig.tight_layout()
        fig.savefig(path, dpi=dpi, format=path.suffix.lstrip(".").lower() or "png")
    finally:
        plt.close(fig)
    logger.info("bench_plotted", path=str(path), kinds=len({r.layer for r in ok}))
    return path
