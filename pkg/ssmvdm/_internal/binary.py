"""Little-endian binary helpers shared by the video and checkpoint codecs."""

import struct
from typing import Sequence, Tuple, Type

import numpy as np

from .._errors import FormatError


class Reader:
    """Cursor over a byte buffer; short reads raise ``error_cls`` naming both byte counts."""

    def __init__(self, data: bytes, error_cls: Type[FormatError]):
        self.data = data
        self.offset = 0
        self.error_cls = error_cls

    @property
    def remaining(self) -> int:
        return len(self.data) - self.offset

    def take(self, n: int, what: str) -> bytes:
        if self.remaining < n:
            raise self.error_cls(
                f"truncated {what}: expected {n} bytes, got {self.remaining}",
                expected=f"{n} bytes",
                received=f"{self.remaining} bytes",
            )
        chunk = self.data[self.offset : self.offset + n]
        self.offset += n
        return chunk

    def unpack(self, fmt: str, what: str) -> Tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def f32(self, count: int, what: str) -> np.ndarray:
        return np.frombuffer(self.take(4 * count, what), dtype="<f4", count=count)

    def expect_end(self) -> None:
        if self.remaining:
            raise self.error_cls(
                f"{self.remaining} trailing bytes after the last section",
                expected="end of file",
                received=f"{self.remaining} extra bytes",
            )


def f32_bytes(values: np.ndarray) -> bytes:
    return np.ascontiguousarray(values, dtype="<f4").tobytes()


def shape_prefix(shape: Sequence[int]) -> bytes:
    return struct.pack("<B", len(shape)) + struct.pack(f"<{len(shape)}I", *shape)
