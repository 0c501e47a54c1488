"""Synthetic videos and the binary video container.

``.vvid`` layout (little-endian)::

    "VVID" | u16 version | u32 frames | u32 channels | u32 height | u32 width
    frames·channels·height·width f32 values in [−1, 1], frame-major

A dataset directory is a flat folder of ``.vvid`` files plus ``manifest.txt``
with one ``<filename> <seed>`` line per video.
"""

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np
import torch
from einops import rearrange

from ._errors import ConfigurationError, DataError, VideoFormatError
from ._internal.binary import Reader, f32_bytes
from .logging import get_logger
from .numerics import Rng, derive_seed
from .types import SynthKind

logger = get_logger(__name__)

Tensor = torch.Tensor

MAGIC = b"VVID"
VERSION = 1
HEADER = struct.Struct("<4sHIIII")
MANIFEST = "manifest.txt"
SUFFIX = ".vvid"


@dataclass
class VideoFile:
    """One video, ``frames`` of shape (L, C, H, W) in [−1, 1]."""

    frames: Tensor
    version: int = VERSION

    def __post_init__(self) -> None:
        if self.frames.dim() != 4:
            raise VideoFormatError(
                "video frames must be (frames, channels, height, width)",
                expected="4 extents",
                received=str(tuple(self.frames.shape)),
            )

    @property
    def shape(self) -> Tuple[int, int, int, int]:
        return tuple(self.frames.shape)  # type: ignore[return-value]

    def validate(self) -> None:
        if any(n < 1 for n in self.shape):
            raise VideoFormatError("video extents must be positive", received=str(self.shape))
        values = self.frames
        if not bool(torch.isfinite(values).all()):
            raise VideoFormatError("video holds NaN or Inf values", expected="finite values")
        lo, hi = float(values.min()), float(values.max())
        if lo < -1.0 or hi > 1.0:
            raise VideoFormatError(
                f"video values must lie in [-1, 1], found [{lo}, {hi}]",
                expected="[-1, 1]",
                received=f"[{lo}, {hi}]",
            )


@dataclass(frozen=True)
class SynthSpec:
    """Parameters of a synthetic video.

    ``size``, ``position`` and ``velocity`` fix the shape's side (pixels),
    top-left corner (x, y) and per-frame displacement (x right, y down);
    unset ones are drawn from the ranges.
    """

    kind: SynthKind = "bouncing_shape"
    frames: int = 16
    resolution: int = 32
    channels: int = 1
    size_range: Tuple[int, int] = (4, 8)
    speed_range: Tuple[float, float] = (0.5, 2.0)
    size: Optional[int] = None
    position: Optional[Tuple[float, float]] = None
    velocity: Optional[Tuple[float, float]] = None

    def __post_init__(self) -> None:
        if self.frames < 2:
            raise ConfigurationError("synthetic videos need at least 2 frames", parameter="frames")
        if self.resolution < 8:
            raise ConfigurationError("resolution must be at least 8", parameter="resolution")
        if self.channels not in (1, 3):
            raise ConfigurationError("channels must be 1 or 3", parameter="channels")
        if self.kind == "mirrored_sequence" and self.frames % 2:
            raise ConfigurationError(
                f"mirrored_sequence needs an even frame count, got {self.frames}", parameter="frames"
            )
        largest = self.size if self.size is not None else self.size_range[1]
        smallest = self.size if self.size is not None else self.size_range[0]
        if smallest < 1 or smallest > largest:
            raise ConfigurationError("invalid shape size range", parameter="size_range")
        if largest > self.resolution:
            raise ConfigurationError(
                f"shape of side {largest} does not fit a {self.resolution}px frame", parameter="size"
            )


def _coverage(start: Tensor, side: int, n: int) -> Tensor:
    """Fraction of each unit pixel [j, j+1) covered by [start, start+side), per frame."""
    j = torch.arange(n, dtype=torch.float64)
    lo = torch.maximum(j, start[:, None])
    hi = torch.minimum(j + 1.0, start[:, None] + side)
    return (hi - lo).clamp(0.0, 1.0)


def _bounce(x0: float, v: float, span: float, frames: int) -> Tensor:
    """Positions of an elastic bounce inside [0, span], one per frame."""
    k = torch.arange(frames, dtype=torch.float64)
    if span <= 0:
        return torch.zeros(frames, dtype=torch.float64)
    p = torch.remainder(x0 + v * k, 2 * span)
    return torch.where(p <= span, p, 2 * span - p)


def _draw_motion(spec: SynthSpec, rng: Rng) -> Tuple[int, Tuple[float, float], Tuple[float, float]]:
    side = spec.size if spec.size is not None else int(rng.child("size").integers(*spec.size_range, size=1)[0])
    span = float(spec.resolution - side)
    if spec.position is not None:
        position = spec.position
    else:
        position = (rng.child("x").uniform_scalar(0.0, span), rng.child("y").uniform_scalar(0.0, span))
    if spec.velocity is not None:
        velocity = spec.velocity
    else:
        speed = rng.child("speed").uniform_scalar(*spec.speed_range)
        angle = rng.child("angle").uniform_scalar(0.0, 2 * math.pi)
        velocity = (speed * math.cos(angle), speed * math.sin(angle))
    return side, position, velocity


def _render(spec: SynthSpec, frames: int, rng: Rng) -> Tensor:
    side, (x0, y0), (vx, vy) = _draw_motion(spec, rng)
    span = float(spec.resolution - side)
    xs = _bounce(x0, vx, span, frames)
    ys = _bounce(y0, vy, span, frames)
    cov = _coverage(ys, side, spec.resolution)[:, :, None] * _coverage(xs, side, spec.resolution)[:, None, :]
    video = (2.0 * cov - 1.0).to(torch.float32)
    return video[:, None].expand(-1, spec.channels, -1, -1).contiguous()


def gen_bouncing_shape(spec: SynthSpec, rng: Rng) -> VideoFile:
    """A square translating with elastic wall bounces, antialiased to [−1, 1]."""
    return VideoFile(_render(spec, spec.frames, rng))


def gen_mirrored_sequence(spec: SynthSpec, rng: Rng) -> VideoFile:
    """Bouncing-shape first half; frame L−1−k is frame k flipped left-right."""
    half = _render(spec, spec.frames // 2, rng)
    mirrored = half.flip(0).flip(-1)
    return VideoFile(torch.cat([half, mirrored], dim=0))


def generate_video(spec: SynthSpec, rng: Rng) -> VideoFile:
    if spec.kind == "bouncing_shape":
        return gen_bouncing_shape(spec, rng)
    if spec.kind == "mirrored_sequence":
        return gen_mirrored_sequence(spec, rng)
    raise ConfigurationError(f"unknown synthetic kind {spec.kind!r}", parameter="synth_kind")


def encode_video(video: VideoFile) -> bytes:
    video.validate()
    L, C, H, W = video.shape
    return HEADER.pack(MAGIC, video.version, L, C, H, W) + f32_bytes(video.frames.detach().cpu().numpy())


def decode_video(data: bytes) -> VideoFile:
    """Parse ``.vvid`` bytes.

    Raises:
        VideoFormatError: bad magic or version, truncated or oversized
            payload, or values outside [−1, 1].
    """
    reader = Reader(data, VideoFormatError)
    magic, version, L, C, H, W = HEADER.unpack(reader.take(HEADER.size, "header"))
    if magic != MAGIC:
        raise VideoFormatError(f"not a video file: magic {magic!r}", expected=MAGIC.decode(), received=repr(magic))
    if version != VERSION:
        raise VideoFormatError(f"unsupported video version {version}", expected=str(VERSION), received=str(version))
    count = L * C * H * W
    values = reader.f32(count, "payload")
    reader.expect_end()
    video = VideoFile(torch.from_numpy(values.reshape(L, C, H, W).copy()), version=version)
    video.validate()
    return video


def write_video(path: Union[str, Path], video: VideoFile) -> Path:
    path = Path(path)
    path.write_bytes(encode_video(video))
    return path


def read_video(path: Union[str, Path]) -> VideoFile:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise DataError(f"cannot read video {path}: {e}", path=str(path)) from e
    return decode_video(data)


def to_bytes_u8(values: Tensor) -> np.ndarray:
    """Linear map [−1, 1] → 0..255, rounding half up."""
    scaled = torch.floor((values.to(torch.float64) + 1.0) / 2.0 * 255.0 + 0.5)
    return scaled.clamp(0, 255).to(torch.uint8).numpy()


def export_frames_pgm(video: VideoFile, directory: Union[str, Path], prefix: str = "frame") -> List[Path]:
    """Write one binary PGM (1 channel) or PPM (3 channels) per frame."""
    L, C, H, W = video.shape
    if C not in (1, 3):
        raise VideoFormatError(f"cannot export {C}-channel frames", expected="1 or 3 channels", received=str(C))
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)

    paths = []
    for k in range(L):
        pixels = to_bytes_u8(video.frames[k])
        if C == 1:
            header, body, suffix = b"P5", pixels[0], ".pgm"
        else:
            header, body, suffix = b"P6", rearrange(pixels, "c h w -> h w c"), ".ppm"
        path = directory / f"{prefix}_{k:04d}{suffix}"
        path.write_bytes(header + f"\n{W} {H}\n255\n".encode() + np.ascontiguousarray(body).tobytes())
        paths.append(path)
    return paths


def _ensure_empty(directory: Path, force: bool) -> None:
    if directory.exists() and any(directory.iterdir()):
        if not force:
            raise DataError(
                f"output directory {directory} is not empty (pass --force to overwrite)", path=str(directory)
            )
        for stale in list(directory.glob(f"*{SUFFIX}")) + [directory / MANIFEST]:
            if stale.exists():
                stale.unlink()
    directory.mkdir(parents=True, exist_ok=True)


def write_dataset(
    directory: Union[str, Path], spec: SynthSpec, count: int, seed: int, force: bool = False
) -> List[Path]:
    """Generate ``count`` videos and their manifest; each video has its own derived seed."""
    if count < 1:
        raise ConfigurationError(f"need at least one video, got {count}", parameter="num_videos")
    directory = Path(directory)
    _ensure_empty(directory, force)

    paths, lines = [], []
    for i in range(count):
        video_seed = derive_seed(seed, f"video/{i}")
        video = generate_video(spec, Rng(video_seed))
        path = write_video(directory / f"video_{i:05d}{SUFFIX}", video)
        paths.append(path)
        lines.append(f"{path.name} {video_seed}")
    (directory / MANIFEST).write_text("\n".join(lines) + "\n", encoding="utf-8")
    logger.info("dataset_written", directory=str(directory), videos=count, kind=spec.kind)
    return paths


def read_manifest(directory: Union[str, Path]) -> List[Tuple[str, int]]:
    directory = Path(directory)
    manifest = directory / MANIFEST
    if not manifest.is_file():
        raise DataError(f"no {MANIFEST} in {directory}", path=str(directory))
    entries = []
    for lineno, line in enumerate(manifest.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 2 or not parts[1].isdigit():
            raise DataError(f"{manifest}:{lineno}: expected '<file> <seed>'", path=str(manifest))
        entries.append((parts[0], int(parts[1])))
    return entries


def load_dataset(
    directory: Union[str, Path], expected_shape: Optional[Tuple[int, int, int, int]] = None
) -> Tensor:
    """All videos of a dataset directory as one (N, L, C, H, W) tensor.

    Raises:
        DataError: missing or empty dataset, or videos whose extents differ
            from each other or from ``expected_shape``.
    """
    directory = Path(directory)
    entries = read_manifest(directory)
    if not entries:
        raise DataError(f"dataset {directory} is empty", path=str(directory))
    videos = []
    for name, _ in entries:
        video = read_video(directory / name)
        reference = expected_shape or (videos[0].shape if videos else video.shape)
        if video.shape != tuple(reference):
            raise DataError(
                f"{name} has extents {video.shape}, expected {tuple(reference)}", path=str(directory / name)
            )
        videos.append(video)
    return torch.stack([v.frames for v in videos])
