"""Binary checkpoint container.

Layout (all integers little-endian)::

    b"VMNF"  u32 version
    u64 n    config echo, UTF-8 JSON
    u64 n    metadata, UTF-8 JSON (dim, epoch, rng state, ...)
    u32 count
    count x { u32 n  name UTF-8 | u32 ndim | ndim x u64 shape | f64 data }
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ExperimentConfig
from .errors import ContractError, FormatError
from .mixture import MixtureModel
from .nn import Adam

MAGIC = b"VMNF"
VERSION = 1


@dataclass
class Checkpoint:
    config: ExperimentConfig
    tensors: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)
    version: int = VERSION

    @property
    def dim(self) -> int:
        return int(self.meta["dim"])


def write_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    out = bytearray(MAGIC)
    out += struct.pack("<I", ckpt.version)
    for block in (ckpt.config.model_dump_json(), json.dumps(ckpt.meta, sort_keys=True)):
        raw = block.encode("utf-8")
        out += struct.pack("<Q", len(raw)) + raw
    out += struct.pack("<I", len(ckpt.tensors))
    for name, arr in ckpt.tensors.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        out += struct.pack("<I", len(raw)) + raw
        out += struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
        out += np.ascontiguousarray(arr).tobytes()
    Path(path).write_bytes(bytes(out))


class _Reader:
    def __init__(self, data: bytes, path):
        self.data, self.pos, self.path = data, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"{self.path}: truncated checkpoint")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_checkpoint(path: str | Path) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as err:
        raise FormatError(f"cannot read checkpoint {path}: {err.strerror}") from None
    r = _Reader(data, path)
    if r.take(4) != MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    try:
        (n,) = r.unpack("<Q")
        config = ExperimentConfig.model_validate_json(r.take(n).decode("utf-8"))
        (n,) = r.unpack("<Q")
        meta = json.loads(r.take(n).decode("utf-8"))
    except (ValueError, UnicodeDecodeError) as err:
        raise FormatError(f"{path}: corrupt header block ({err})") from None
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        (n,) = r.unpack("<I")
        name = r.take(n).decode("utf-8")
        (ndim,) = r.unpack("<I")
        shape = r.unpack(f"<{ndim}Q")
        size = int(np.prod(shape, dtype=np.int64))
        tensors[name] = np.frombuffer(r.take(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
    if r.pos != len(data):
        raise FormatError(f"{path}: trailing bytes after tensors")
    return Checkpoint(config, tensors, meta, version)


def model_tensors(model: MixtureModel) -> dict[str, np.ndarray]:
    out = {p.name: p.value for p in model.params}
    out.update({f"buffer.{k}": v for k, v in model.buffers.items()})
    return out


def save(path: str | Path, config: ExperimentConfig, model: MixtureModel,
         optimizer: Adam | None = None, epoch: int = 0,
         rng: np.random.Generator | None = None) -> None:
    tensors = model_tensors(model)
    if optimizer is not None:
        tensors.update(optimizer.state_arrays())
    meta = {"dim": model.dim, "epoch": int(epoch), "n_components": model.n_components,
            "rng_state": None if rng is None else rng.bit_generator.state}
    write_checkpoint(path, Checkpoint(config, tensors, meta))


def restore_model(ckpt: Checkpoint) -> MixtureModel:
    """Rebuild the architecture from the config echo and load every tensor into it."""
    from .experiment import build_model

    model = build_model(ckpt.config, ckpt.dim, np.random.default_rng(0))
    expected = model_tensors(model)
    missing = sorted(set(expected) - set(ckpt.tensors))
    if missing:
        raise ContractError(f"checkpoint lacks tensors {missing[:3]}")
    for p in model.params:
        src = ckpt.tensors[p.name]
        if src.shape != p.value.shape:
            raise ContractError(f"tensor {p.name} has shape {src.shape}, expected {p.value.shape}")
        p.value = src.copy()
    model.load_buffers({k[len("buffer."):]: v.copy() for k, v in ckpt.tensors.items()
                        if k.startswith("buffer.")})
    model.eval()
    return model


def restore_rng(ckpt: Checkpoint) -> np.random.Generator:
    rng = np.random.default_rng()
    if ckpt.meta.get("rng_state") is not None:
        rng.bit_generator.state = ckpt.meta["rng_state"]
    return rng


def load(path: str | Path) -> tuple[MixtureModel, Checkpoint]:
    ckpt = read_checkpoint(path)
    return restore_model(ckpt), ckpt
