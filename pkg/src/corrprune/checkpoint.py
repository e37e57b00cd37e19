"""Versioned binary checkpoints.

Layout (little-endian)::

    b"CMCK1"
    u32 length, UTF-8 config text (flat key = value lines)
    u64 iteration counter
    u32 block count
    per block: u16 name length, UTF-8 name, u8 dtype code, u8 ndim,
               ndim x u64 dims, raw array bytes

Block names carry a kind prefix: ``param:``, ``bn:`` (normalization
statistics), ``adam.m:`` and ``adam.v:`` (optimizer moments).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kvtext
from .exceptions import CheckpointVersionError
from .model import ModelConfig, TrainConfig

MAGIC = b"CMCK1"
FORMAT_VERSION = 1
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4")}
_CODES = {np.dtype(np.float64): 0, np.dtype(np.float32): 1}
_KINDS = ("param", "bn", "adam.m", "adam.v")


@dataclass
class ModelCheckpoint:
    """Everything needed to resume training or run inference."""

    model_config: ModelConfig
    params: dict
    state: dict
    train_config: TrainConfig = field(default_factory=TrainConfig)
    moments: dict = field(default_factory=lambda: {"m": {}, "v": {}})
    iteration: int = 0
    version: int = FORMAT_VERSION

    def config_text(self):
        return kvtext.dump(self.model_config, self.train_config)


def _blocks(ckpt):
    yield from (("param:" + k, v) for k, v in ckpt.params.items())
    yield from (("bn:" + k, v) for k, v in ckpt.state.items())
    for kind in ("m", "v"):
        yield from ((f"adam.{kind}:" + k, v) for k, v in ckpt.moments.get(kind, {}).items())


def to_bytes(ckpt: ModelCheckpoint) -> bytes:
    text = ckpt.config_text().encode("utf-8")
    blocks = list(_blocks(ckpt))
    parts = [MAGIC, struct.pack("<I", len(text)), text,
             struct.pack("<QI", ckpt.iteration, len(blocks))]
    for name, arr in blocks:
        arr = np.asarray(arr)
        if arr.dtype not in _CODES:
            raise TypeError(f"block {name}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<BB", _CODES[arr.dtype], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[_CODES[arr.dtype]]).tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, data, source):
        self.data = data
        self.pos = 0
        self.source = source

    def take(self, n):
        if self.pos + n > len(self.data):
            raise CheckpointVersionError(f"{self.source}: truncated checkpoint")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def from_bytes(data: bytes, source="<bytes>") -> ModelCheckpoint:
    head = data[:len(MAGIC)]
    if head != MAGIC:
        if head[:4] == MAGIC[:4]:
            raise CheckpointVersionError(
                f"{source}: checkpoint version {head[4:].decode('ascii', 'replace')!r} "
                f"is not supported (expected {FORMAT_VERSION})")
        raise CheckpointVersionError(f"{source}: not a checkpoint file")
    r = _Reader(data, source)
    r.take(len(MAGIC))
    (n,) = r.unpack("<I")
    raw = kvtext.parse_lines(r.take(n).decode("utf-8"), source)
    model_config = kvtext.load_into(ModelConfig, raw)
    train_config = kvtext.load_into(TrainConfig, raw)
    iteration, count = r.unpack("<QI")
    out = {kind: {} for kind in _KINDS}
    for _ in range(count):
        (ln,) = r.unpack("<H")
        name = r.take(ln).decode("utf-8")
        code, ndim = r.unpack("<BB")
        if code not in _DTYPES:
            raise CheckpointVersionError(f"{source}: unknown dtype code {code} in {name}")
        shape = r.unpack(f"<{ndim}Q") if ndim else ()
        dtype = _DTYPES[code]
        size = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        arr = np.frombuffer(r.take(size), dtype=dtype).reshape(shape)
        kind, _, key = name.partition(":")
        if kind not in out:
            raise CheckpointVersionError(f"{source}: unknown block kind {kind!r}")
        out[kind][key] = arr.astype(dtype.newbyteorder("="), copy=True)
    return ModelCheckpoint(model_config, out["param"], out["bn"], train_config,
                           {"m": out["adam.m"], "v": out["adam.v"]}, int(iteration))


def save(path, ckpt: ModelCheckpoint):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(to_bytes(ckpt))
    tmp.replace(path)
    return path


def load(path) -> ModelCheckpoint:
    path = Path(path)
    return from_bytes(path.read_bytes(), str(path))
