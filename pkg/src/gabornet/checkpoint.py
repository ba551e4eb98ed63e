"""Versioned little-endian binary checkpoints.

Layout::

    b"GBNC" | u32 version | str arch | str reg_mode | f64 beta | f64 mu
    | u64 seed | u32 n_params | n_params x (str name | u32 ndim | u32 dims... | f64 data...)

``str`` is a u32 byte length followed by UTF-8 bytes.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .config import RegConfig
from .data import DataError
from .models import ARCHITECTURES, Model, build_model

MAGIC = b"GBNC"
VERSION = 1


class CheckpointError(DataError):
    pass


def _str(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<I", len(b)) + b


def encode(model: Model, reg: RegConfig | None = None, seed: int = 0) -> bytes:
    if model.arch not in ARCHITECTURES:
        raise CheckpointError(f"cannot save unknown architecture {model.arch!r}")
    reg = reg or RegConfig()
    parts = [MAGIC, struct.pack("<I", VERSION), _str(model.arch), _str(reg.mode),
             struct.pack("<ddQ", reg.beta, reg.mu, seed)]
    params = model.params()
    parts.append(struct.pack("<I", len(params)))
    for name, t in params.items():
        parts.append(_str(name))
        parts.append(struct.pack(f"<I{t.data.ndim}I", t.data.ndim, *t.shape))
        parts.append(t.data.astype("<f8").tobytes())
    return b"".join(parts)


def save_checkpoint(model: Model, path, reg: RegConfig | None = None, seed: int = 0) -> None:
    Path(path).write_bytes(encode(model, reg, seed))


class _Reader:
    def __init__(self, buf: bytes, source: str):
        self.buf, self.pos, self.source = buf, 0, source

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(
                f"{self.source}: truncated at offset {self.pos} (need {n} bytes, {len(self.buf) - self.pos} left)")
        b = self.buf[self.pos:self.pos + n]
        self.pos += n
        return b

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self) -> str:
        (n,) = self.unpack("<I")
        return self.take(n).decode("utf-8")


def decode(buf: bytes, source: str = "<bytes>") -> tuple[Model, RegConfig, int]:
    r = _Reader(buf, source)
    magic = r.take(4)
    if magic != MAGIC:
        raise CheckpointError(f"{source}: bad magic {magic!r}, expected {MAGIC!r}")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"{source}: format version {version}, this build reads {VERSION}")
    arch = r.string()
    if arch not in ARCHITECTURES:
        raise CheckpointError(f"{source}: unknown architecture tag {arch!r}")
    mode = r.string()
    beta, mu, seed = r.unpack("<ddQ")
    reg = RegConfig(mode, beta, mu)
    model = build_model(arch, 0)
    params = model.params()
    (count,) = r.unpack("<I")
    if count != len(params):
        raise CheckpointError(f"{source}: {count} parameters stored, {arch} has {len(params)}")
    for _ in range(count):
        name = r.string()
        (ndim,) = r.unpack("<I")
        shape = r.unpack(f"<{ndim}I")
        if name not in params or params[name].shape != tuple(shape):
            raise CheckpointError(f"{source}: unexpected parameter {name} with shape {shape}")
        n = int(np.prod(shape))
        params[name].data[...] = np.frombuffer(r.take(8 * n), dtype="<f8").reshape(shape)
    if r.pos != len(buf):
        raise CheckpointError(f"{source}: {len(buf) - r.pos} trailing bytes at offset {r.pos}")
    return model, reg, seed


def load_checkpoint(path) -> tuple[Model, RegConfig, int]:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    return decode(buf, str(path))
