"""Type definitions for ssmvdm."""

from dataclasses import dataclass
from typing import Literal, Optional

# Temporal feature extractor placed after every spatial attention layer.
# "none" drops temporal layers entirely (frame-factorized model).
TemporalKind = Literal["ssm_bidirectional", "ssm_unidirectional", "attention", "none"]

# Layer kinds the bench harness knows how to measure.
BenchKind = Literal["attention", "ssm_bidirectional", "ssm_unidirectional"]

Direction = Literal["forward", "backward"]

SynthKind = Literal["bouncing_shape", "mirrored_sequence"]

TEMPORAL_KINDS: tuple[str, ...] = ("ssm_bidirectional", "ssm_unidirectional", "attention", "none")
BENCH_KINDS: tuple[str, ...] = ("attention", "ssm_bidirectional", "ssm_unidirectional")


@dataclass(frozen=True)
class BenchRecord:
    """One measurement row of the sequence-length scaling study.

    ``failure`` is set (and the two measurements are ``None``) when the
    measurement ran out of capacity at this L.
    """

    layer: str
    seq_len: int
    groups: int
    channels: int
    peak_bytes: Optional[int]
    wall_ns: Optional[int]
    failure: Optional[str] = None

    @property
    def ok(self) -> bool:
        return self.failure is None
