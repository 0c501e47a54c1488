"""Run configuration.

A run is described by a flat ``key=value`` text file::

    # memorization run
    temporal_kind=ssm_bidirectional
    L=8
    resolution=16
    steps=2000

Blank lines and ``#`` comments are ignored. Every key is optional and
defaults to the hyperparameters below; unknown or repeated keys are errors.
"""

from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from pydantic import ValidationError as PydanticValidationError

from ._errors import ConfigurationError
from .types import SynthKind, TemporalKind

# File keys that name the same field.
KEY_ALIASES: Dict[str, str] = {
    "L": "frames",
    "T": "timesteps",
}

_LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL")


def _split_ints(value: Any) -> Any:
    if isinstance(value, str):
        parts = [p.strip() for p in value.split(",") if p.strip()]
        return tuple(int(p) for p in parts)
    return value


class RunConfig(BaseModel):
    """Validated configuration shared by every command."""

    model_config = ConfigDict(extra="forbid", frozen=True, populate_by_name=True)

    # data
    dataset_dir: Path = Path("data")
    synth_kind: SynthKind = "bouncing_shape"
    frames: int = Field(16, alias="L", ge=1)
    resolution: int = Field(32, ge=8)
    channels: int = 1
    num_videos: int = Field(8, ge=1)

    # model
    temporal_kind: TemporalKind = "ssm_bidirectional"
    base_channels: int = Field(32, ge=4)
    multipliers: Tuple[int, ...] = (1, 2, 4, 8)
    exact_zoh: bool = False
    temporal_pos_bias: bool = False

    # diffusion
    timesteps: int = Field(256, alias="T", ge=1)
    beta_start: float = 1e-4
    beta_end: float = 0.02

    # optimization
    lr: float = Field(1e-5, gt=0)
    batch: int = Field(8, ge=1)
    steps: int = Field(2000, ge=0)
    ema_decay: float = 0.9999
    ema_warmup: bool = True
    checkpoint_every: int = Field(500, ge=1)
    log_every: int = Field(50, ge=1)

    # sampling
    sample_count: int = Field(2, ge=1)

    # benchmark
    bench_lengths: Tuple[int, ...] = (64, 128, 256, 512)
    bench_groups: int = Field(64, ge=1)
    bench_channels: int = Field(64, ge=1)
    bench_reps: int = Field(3, ge=1)
    bench_limit_bytes: Optional[int] = Field(None, ge=1)

    # run
    seed: int = Field(0, ge=0, lt=2**64)
    out_dir: Path = Path("runs")
    log_level: str = "INFO"

    @field_validator("multipliers", "bench_lengths", mode="before")
    @classmethod
    def parse_int_list(cls, v: Any) -> Any:
        return _split_ints(v)

    @field_validator("bench_limit_bytes", mode="before")
    @classmethod
    def empty_is_unlimited(cls, v: Any) -> Any:
        if isinstance(v, str) and v.strip().lower() in ("", "none"):
            return None
        return v

    @field_validator("channels")
    @classmethod
    def validate_channels(cls, v: int) -> int:
        if v not in (1, 3):
            raise ValueError("channels must be 1 (grayscale) or 3 (RGB)")
        return v

    @field_validator("multipliers")
    @classmethod
    def validate_multipliers(cls, v: Tuple[int, ...]) -> Tuple[int, ...]:
        if not v or any(m < 1 for m in v):
            raise ValueError("multipliers must be a non-empty list of positive integers")
        return v

    @field_validator("bench_lengths")
    @classmethod
    def validate_bench_lengths(cls, v: Tuple[int, ...]) -> Tuple[int, ...]:
        if not v or any(n < 1 for n in v):
            raise ValueError("bench_lengths must be a non-empty list of positive integers")
        return v

    @field_validator("ema_decay")
    @classmethod
    def validate_ema_decay(cls, v: float) -> float:
        if not 0.0 <= v < 1.0:
            raise ValueError("ema_decay must lie in [0, 1)")
        return v

    @field_validator("log_level")
    @classmethod
    def validate_log_level(cls, v: str) -> str:
        v = v.upper()
        if v not in _LOG_LEVELS:
            raise ValueError(f"log_level must be one of {', '.join(_LOG_LEVELS)}")
        return v

    @model_validator(mode="after")
    def validate_consistency(self) -> "RunConfig":
        if not 0.0 < self.beta_start <= self.beta_end < 1.0:
            raise ValueError("beta bounds must satisfy 0 < beta_start <= beta_end < 1")
        factor = 2 ** (len(self.multipliers) - 1)
        if self.resolution % factor:
            raise ValueError(
                f"resolution {self.resolution} is not divisible by {factor} "
                f"({len(self.multipliers)} stages)"
            )
        if self.synth_kind == "mirrored_sequence" and self.frames % 2:
            raise ValueError("mirrored_sequence needs an even frame count L")
        if self.synth_kind == "bouncing_shape" and self.frames < 2:
            raise ValueError("synthetic videos need L >= 2")
        return self

    def with_overrides(self, **overrides: Any) -> "RunConfig":
        """Copy with some fields replaced, re-validated."""
        values = self.model_dump()
        values.update({k: v for k, v in overrides.items() if v is not None})
        return _validate(values)

    def unet_config(self) -> Any:
        """Architecture implied by this run."""
        from .unet import UNetConfig

        return UNetConfig(
            base_channels=self.base_channels,
            multipliers=self.multipliers,
            temporal_kind=self.temporal_kind,
            frames=self.frames,
            image_channels=self.channels,
            resolution=self.resolution,
            exact_zoh=self.exact_zoh,
            temporal_pos_bias=self.temporal_pos_bias,
        )

    def to_text(self) -> str:
        """Render as a config file that parses back to an equal config."""
        lines = []
        for name, value in self.model_dump().items():
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            elif isinstance(value, bool):
                value = "true" if value else "false"
            elif value is None:
                value = ""
            lines.append(f"{name}={value}")
        return "\n".join(lines) + "\n"


def _validate(values: Mapping[str, Any]) -> RunConfig:
    try:
        return RunConfig.model_validate(dict(values))
    except PydanticValidationError as e:
        first = e.errors()[0]
        loc = first.get("loc") or ("config",)
        parameter = str(loc[0]) if loc else None
        raise ConfigurationError(
            f"invalid configuration: {first.get('msg')}", parameter=parameter
        ) from e


def parse_config(text: str) -> RunConfig:
    """Parse ``key=value`` lines into a validated :class:`RunConfig`.

    Raises:
        ConfigurationError: malformed line, unknown or duplicated key, or a
            value that fails validation.
    """
    known = set(RunConfig.model_fields)
    values: Dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(
                f"line {lineno}: expected key=value, got {raw.strip()!r}", parameter=None
            )
        key, value = (part.strip() for part in line.split("=", 1))
        name = KEY_ALIASES.get(key, key)
        if name not in known:
            raise ConfigurationError(
                f"line {lineno}: unknown key {key!r}",
                parameter=key,
                suggestion="remove the key or check its spelling",
            )
        if name in values:
            raise ConfigurationError(f"line {lineno}: duplicate key {key!r}", parameter=key)
        values[name] = value
    return _validate(values)


def load_config(path: Optional[Union[str, Path]] = None) -> RunConfig:
    """Load a config file; ``None`` yields the defaults."""
    if path is None:
        return RunConfig()
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigurationError(f"cannot read config file {path}: {e}", parameter="config") from e
    return parse_config(text)
