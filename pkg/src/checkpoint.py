"""
Versioned binary checkpoints.

Layout (little-endian):
    magic "SCSN", version u16
    header length u32, UTF-8 JSON header (configs, epoch, Adam step, RNG states)
    T u16, then T f64 lambda values
    tensor count u32, then per tensor: name length u16, name, dtype code u8,
    ndim u8, ndim x u32 dims, raw row-major data
"""

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Union

import numpy as np

try:
    from .codec import SpikingCSINet
    from .csif import ByteReader
    from .errors import CheckpointError, DataFormatError
    from .models import LambdaSchedule, ModelConfig, SystemConfig, TrainConfig
    from .trainer import CHECKPOINTED_STREAMS, AdamState, Trainer
except ImportError:
    from codec import SpikingCSINet
    from csif import ByteReader
    from errors import CheckpointError, DataFormatError
    from models import LambdaSchedule, ModelConfig, SystemConfig, TrainConfig
    from trainer import CHECKPOINTED_STREAMS, AdamState, Trainer

logger = logging.getLogger(__name__)

MAGIC = b"SCSN"
VERSION = 1

DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
CODE_FOR_DTYPE = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}

PARAM_PREFIX = "param/"
BUFFER_PREFIX = "buffer/"
ADAM_M_PREFIX = "adam.m/"
ADAM_V_PREFIX = "adam.v/"


@dataclass
class Checkpoint:
    system: SystemConfig
    model_config: ModelConfig
    lambdas: LambdaSchedule
    tensors: Dict[str, np.ndarray]
    dtype: str = "float32"
    train_config: Optional[TrainConfig] = None
    epoch: int = 0
    adam_step: int = 0
    rng_states: Dict[str, Any] = field(default_factory=dict)
    best_epoch: Optional[int] = None
    best_val_db: Optional[float] = None

    def header(self) -> Dict[str, Any]:
        return {
            "system": self.system.model_dump(),
            "model": self.model_config.model_dump(),
            "train": self.train_config.model_dump() if self.train_config else None,
            "dtype": self.dtype,
            "epoch": self.epoch,
            "adam_step": self.adam_step,
            "rng_states": self.rng_states,
            "lambda_subset_size": self.lambdas.subset_size,
            "best_epoch": self.best_epoch,
            "best_val_db": self.best_val_db,
        }


def checkpoint_from_model(model: SpikingCSINet, lambdas: LambdaSchedule) -> Checkpoint:
    tensors = {PARAM_PREFIX + k: p.data.copy() for k, p in model.parameters().items()}
    tensors.update({BUFFER_PREFIX + k: b.copy() for k, b in model.buffers().items()})
    return Checkpoint(
        system=model.system,
        model_config=model.model_cfg,
        lambdas=lambdas,
        tensors=tensors,
        dtype=model.dtype.name,
    )


def checkpoint_from_trainer(trainer: Trainer) -> Checkpoint:
    ckpt = checkpoint_from_model(trainer.model, trainer.lambdas)
    ckpt.tensors.update({ADAM_M_PREFIX + k: v.copy() for k, v in trainer.optimizer.m.items()})
    ckpt.tensors.update({ADAM_V_PREFIX + k: v.copy() for k, v in trainer.optimizer.v.items()})
    ckpt.train_config = trainer.cfg
    ckpt.epoch = trainer.epoch
    ckpt.adam_step = trainer.optimizer.step
    ckpt.rng_states = {name: trainer.rngs[name].bit_generator.state for name in CHECKPOINTED_STREAMS}
    ckpt.best_epoch = trainer.best_epoch
    ckpt.best_val_db = trainer.best_val_db
    return ckpt


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    header = json.dumps(ckpt.header(), sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<HI", VERSION, len(header)), header]
    parts.append(struct.pack("<H", len(ckpt.lambdas)))
    parts.append(np.asarray(ckpt.lambdas.values, dtype="<f8").tobytes())
    parts.append(struct.pack("<I", len(ckpt.tensors)))
    for name, arr in ckpt.tensors.items():
        arr = np.asarray(arr)
        code = CODE_FOR_DTYPE.get(arr.dtype)
        if code is None:
            raise CheckpointError(f"Cannot store tensor {name} of dtype {arr.dtype}")
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<HBB", len(encoded), code, arr.ndim))
        parts.append(encoded)
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=DTYPE_CODES[code]).tobytes())
    return b"".join(parts)


def decode_checkpoint(buf: bytes, expected_system: Optional[SystemConfig] = None) -> Checkpoint:
    reader = ByteReader(buf, "checkpoint")
    magic = reader.take(4)
    if magic != MAGIC:
        raise DataFormatError(f"Bad magic {magic!r}, expected {MAGIC!r}", offset=0)
    version, header_len = reader.unpack("<HI")
    if version != VERSION:
        raise CheckpointError(f"Unsupported checkpoint version {version}", offset=4)
    header_offset = reader.offset
    try:
        header = json.loads(reader.take(header_len).decode("utf-8"))
        system = SystemConfig(**header["system"])
        model_config = ModelConfig(**header["model"])
        train_config = TrainConfig(**header["train"]) if header.get("train") else None
    except (ValueError, KeyError, TypeError) as e:
        raise DataFormatError(f"Malformed checkpoint header: {e}", offset=header_offset) from e

    if expected_system is not None and system != expected_system:
        raise CheckpointError(
            f"Checkpoint was trained for {system.model_dump()}, expected {expected_system.model_dump()}"
        )

    (t_steps,) = reader.unpack("<H")
    lam_offset = reader.offset
    values = np.frombuffer(reader.take(8 * t_steps), dtype="<f8").tolist()
    try:
        lambdas = LambdaSchedule(values=values, subset_size=header.get("lambda_subset_size", 0))
    except ValueError as e:
        raise DataFormatError(f"Invalid lambda schedule: {e}", offset=lam_offset) from e

    (count,) = reader.unpack("<I")
    tensors: Dict[str, np.ndarray] = {}
    for _ in range(count):
        entry_offset = reader.offset
        name_len, code, ndim = reader.unpack("<HBB")
        name = reader.take(name_len).decode("utf-8", errors="replace")
        if code not in DTYPE_CODES:
            raise DataFormatError(f"Unknown dtype code {code} for tensor {name}", offset=entry_offset)
        dims = reader.unpack(f"<{ndim}I") if ndim else ()
        dtype = DTYPE_CODES[code]
        size = int(np.prod(dims, dtype=np.int64)) if dims else 1
        raw = reader.take(size * dtype.itemsize)
        tensors[name] = np.frombuffer(raw, dtype=dtype).reshape(dims).astype(dtype.newbyteorder("="))
    if reader.remaining:
        raise DataFormatError(f"{reader.remaining} trailing bytes", offset=reader.offset)

    return Checkpoint(
        system=system,
        model_config=model_config,
        lambdas=lambdas,
        tensors=tensors,
        dtype=header.get("dtype", "float32"),
        train_config=train_config,
        epoch=int(header.get("epoch", 0)),
        adam_step=int(header.get("adam_step", 0)),
        rng_states=header.get("rng_states") or {},
        best_epoch=header.get("best_epoch"),
        best_val_db=header.get("best_val_db"),
    )


def save_checkpoint(ckpt: Checkpoint, path: Union[str, Path]) -> None:
    path = Path(path)
    path.write_bytes(encode_checkpoint(ckpt))
    logger.info(f"Wrote checkpoint (epoch {ckpt.epoch}) to {path}")


def load_checkpoint(path: Union[str, Path], expected_system: Optional[SystemConfig] = None) -> Checkpoint:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as e:
        raise DataFormatError(f"Cannot read checkpoint {path}: {e}") from e
    return decode_checkpoint(buf, expected_system)


def restore_model(ckpt: Checkpoint) -> SpikingCSINet:
    """Rebuild the codec in eval mode with the stored parameters and statistics."""
    model = SpikingCSINet(ckpt.system, ckpt.model_config, dtype=np.dtype(ckpt.dtype))
    for name, param in model.parameters().items():
        param.data[...] = _stored(ckpt, PARAM_PREFIX + name, param.data.shape)
    for name, buffer in model.buffers().items():
        buffer[...] = _stored(ckpt, BUFFER_PREFIX + name, buffer.shape)
    return model.eval()


def restore_trainer(ckpt: Checkpoint, model: SpikingCSINet, cfg: Optional[TrainConfig] = None) -> Trainer:
    """Trainer positioned exactly where the checkpoint left off."""
    cfg = cfg or ckpt.train_config
    if cfg is None:
        raise CheckpointError("Checkpoint carries no training state")
    trainer = Trainer(model, cfg)
    optimizer = AdamState(step=ckpt.adam_step)
    for name, param in model.parameters().items():
        optimizer.m[name] = _stored(ckpt, ADAM_M_PREFIX + name, param.data.shape).copy()
        optimizer.v[name] = _stored(ckpt, ADAM_V_PREFIX + name, param.data.shape).copy()
    trainer.optimizer = optimizer
    trainer.lambdas = ckpt.lambdas
    trainer.epoch = ckpt.epoch
    trainer.best_epoch = ckpt.best_epoch
    trainer.best_val_db = ckpt.best_val_db
    for name, state in ckpt.rng_states.items():
        trainer.rngs[name].bit_generator.state = state
    return trainer


def _stored(ckpt: Checkpoint, key: str, shape) -> np.ndarray:
    arr = ckpt.tensors.get(key)
    if arr is None:
        raise CheckpointError(f"Checkpoint is missing tensor {key}")
    if arr.shape != tuple(shape):
        raise CheckpointError(f"Tensor {key} has shape {arr.shape}, model expects {tuple(shape)}")
    return arr
