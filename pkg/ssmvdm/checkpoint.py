"""Model checkpoint file.

Layout (all integers little-endian)::

    "VDMC" | u16 version | u32 n | n bytes UNetConfig JSON
    u32 P  | P tensors                       parameters, declaration order
    u8 has_ema   [| P tensors]               EMA shadow
    u8 has_train [| u32 m | m bytes JSON | P tensors | P tensors]
                                             optimizer state: meta, m, v

    tensor := u8 ndim | ndim × u32 extent | f32 values, row-major
"""

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Union

import numpy as np
import torch
from pydantic import ValidationError as PydanticValidationError

from ._errors import CheckpointFormatError, ConfigurationError, ShapeError
from ._internal.binary import Reader, f32_bytes, shape_prefix
from .logging import get_logger
from .numerics import EmaState, OptimizerState, Rng
from .unet import UNetConfig, VideoUNet, build_unet

logger = get_logger(__name__)

Tensor = torch.Tensor

MAGIC = b"VDMC"
VERSION = 1


@dataclass
class Checkpoint:
    """Decoded checkpoint contents."""

    config: UNetConfig
    params: List[np.ndarray]
    ema: Optional[List[np.ndarray]] = None
    training: Optional[Dict[str, Any]] = None
    exp_avg: Optional[List[np.ndarray]] = None
    exp_avg_sq: Optional[List[np.ndarray]] = None

    def build_model(self, use_ema: bool = False) -> VideoUNet:
        """Instantiate the network and load parameters (or the EMA shadow)."""
        model = build_unet(self.config, Rng(0))
        values = self.ema if use_ema and self.ema is not None else self.params
        load_into(model, values)
        return model

    def ema_state(self, model: VideoUNet) -> Optional[EmaState]:
        if self.ema is None:
            return None
        meta = self.training or {}
        shadow = _as_dict(model, self.ema)
        return EmaState(
            shadow=shadow,
            decay=float(meta.get("ema_decay", 0.9999)),
            warmup=bool(meta.get("ema_warmup", False)),
            updates=int(meta.get("ema_updates", 0)),
        )

    def optimizer_state(self, model: VideoUNet) -> Optional[OptimizerState]:
        if self.training is None or self.exp_avg is None or self.exp_avg_sq is None:
            return None
        meta = self.training
        return OptimizerState(
            lr=float(meta["lr"]),
            beta1=float(meta["beta1"]),
            beta2=float(meta["beta2"]),
            eps=float(meta["eps"]),
            step=int(meta["step"]),
            exp_avg=_as_dict(model, self.exp_avg),
            exp_avg_sq=_as_dict(model, self.exp_avg_sq),
        )


def _as_dict(model: VideoUNet, values: List[np.ndarray]) -> Dict[str, Tensor]:
    dtype = torch.get_default_dtype()
    return {
        name: torch.from_numpy(v.copy()).to(dtype)
        for (name, _), v in zip(model.named_parameters(), values)
    }


@torch.no_grad()
def load_into(model: VideoUNet, values: List[np.ndarray]) -> None:
    params = list(model.named_parameters())
    if len(params) != len(values):
        raise CheckpointFormatError(
            f"checkpoint holds {len(values)} tensors, model declares {len(params)}",
            expected=str(len(params)),
            received=str(len(values)),
        )
    for (name, p), v in zip(params, values):
        if tuple(p.shape) != v.shape:
            raise ShapeError(f"checkpoint tensor {name} has wrong extents", expected=p.shape, received=v.shape)
        p.copy_(torch.from_numpy(v.copy()).to(p.dtype))


def _tensor_block(values: List[Tensor]) -> bytes:
    parts = []
    for t in values:
        arr = t.detach().cpu().to(torch.float32).numpy()
        parts.append(shape_prefix(arr.shape))
        parts.append(f32_bytes(arr))
    return b"".join(parts)


def _read_tensors(reader: Reader, count: int, section: str) -> List[np.ndarray]:
    out = []
    for i in range(count):
        (ndim,) = reader.unpack("<B", f"{section}[{i}] rank")
        shape = reader.unpack(f"<{ndim}I", f"{section}[{i}] extents") if ndim else ()
        n = int(np.prod(shape)) if shape else 1
        out.append(reader.f32(n, f"{section}[{i}] values").reshape(shape))
    return out


def encode_checkpoint(
    model: VideoUNet,
    ema: Optional[EmaState] = None,
    optimizer: Optional[OptimizerState] = None,
    meta: Optional[Mapping[str, Any]] = None,
) -> bytes:
    params = dict(model.named_parameters())
    names = list(params)
    config_json = json.dumps(model.cfg.model_dump(mode="json"), sort_keys=True).encode()

    parts = [MAGIC, struct.pack("<HI", VERSION, len(config_json)), config_json]
    parts.append(struct.pack("<I", len(names)))
    parts.append(_tensor_block([params[n] for n in names]))

    if ema is not None:
        parts.append(struct.pack("<B", 1))
        parts.append(_tensor_block([ema.shadow[n] for n in names]))
    else:
        parts.append(struct.pack("<B", 0))

    if optimizer is not None:
        training = {
            "step": optimizer.step,
            "lr": optimizer.lr,
            "beta1": optimizer.beta1,
            "beta2": optimizer.beta2,
            "eps": optimizer.eps,
        }
        if ema is not None:
            training.update(ema_decay=ema.decay, ema_warmup=ema.warmup, ema_updates=ema.updates)
        training.update(meta or {})
        blob = json.dumps(training, sort_keys=True).encode()
        zeros = {n: torch.zeros_like(params[n]) for n in names}
        parts.append(struct.pack("<BI", 1, len(blob)))
        parts.append(blob)
        parts.append(_tensor_block([optimizer.exp_avg.get(n, zeros[n]) for n in names]))
        parts.append(_tensor_block([optimizer.exp_avg_sq.get(n, zeros[n]) for n in names]))
    else:
        parts.append(struct.pack("<B", 0))
    return b"".join(parts)


def decode_checkpoint(data: bytes) -> Checkpoint:
    """Parse checkpoint bytes.

    Raises:
        CheckpointFormatError: bad magic, unsupported version, truncation,
            trailing bytes or an unreadable config.
    """
    reader = Reader(data, CheckpointFormatError)
    magic = reader.take(4, "magic")
    if magic != MAGIC:
        raise CheckpointFormatError(
            f"not a checkpoint: magic {magic!r}", expected=MAGIC.decode(), received=repr(magic)
        )
    version, config_len = reader.unpack("<HI", "header")
    if version != VERSION:
        raise CheckpointFormatError(
            f"unsupported checkpoint version {version}", expected=str(VERSION), received=str(version)
        )
    try:
        config = UNetConfig.model_validate(json.loads(reader.take(config_len, "config")))
    except (ValueError, PydanticValidationError, ConfigurationError) as e:
        raise CheckpointFormatError(f"unreadable model config: {e}", expected="UNetConfig JSON") from e

    (count,) = reader.unpack("<I", "parameter count")
    params = _read_tensors(reader, count, "params")

    ckpt = Checkpoint(config=config, params=params)
    (has_ema,) = reader.unpack("<B", "ema flag")
    if has_ema:
        ckpt.ema = _read_tensors(reader, count, "ema")
    (has_train,) = reader.unpack("<B", "training flag")
    if has_train:
        (meta_len,) = reader.unpack("<I", "training header")
        try:
            ckpt.training = json.loads(reader.take(meta_len, "training meta"))
        except ValueError as e:
            raise CheckpointFormatError(f"unreadable training state: {e}", expected="JSON") from e
        ckpt.exp_avg = _read_tensors(reader, count, "exp_avg")
        ckpt.exp_avg_sq = _read_tensors(reader, count, "exp_avg_sq")
    reader.expect_end()
    return ckpt


def save_checkpoint(
    path: Union[str, Path],
    model: VideoUNet,
    ema: Optional[EmaState] = None,
    optimizer: Optional[OptimizerState] = None,
    meta: Optional[Mapping[str, Any]] = None,
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = encode_checkpoint(model, ema, optimizer, meta)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)
    logger.info("checkpoint_saved", path=str(path), bytes=len(data), step=optimizer.step if optimizer else None)
    return path


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise CheckpointFormatError(f"cannot read checkpoint {path}: {e}") from e
    return decode_checkpoint(data)
