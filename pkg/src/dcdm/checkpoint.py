"""Binary checkpoints: parameters, optimizer moments, bias state, and config.

Layout (little endian)::

    b"DCDM" | u32 version | u32 n | config text (n bytes, UTF-8) | u32 records
    record: u16 name length | name | u8 ndim | u32 dims... | float64 data

Every array is stored as float64, so a save/load round trip is bitwise.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .chunking import BiasState
from .config import ModelConfig

MAGIC = b"DCDM"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict[str, np.ndarray]
    step: int = 0
    moments: tuple[dict[str, np.ndarray], dict[str, np.ndarray]] | None = None
    bias: BiasState | None = None


def _records(ckpt: Checkpoint):
    for name, a in ckpt.params.items():
        yield "param/" + name, a
    if ckpt.moments is not None:
        m, v = ckpt.moments
        for name in ckpt.params:
            yield "adam.m/" + name, m[name]
            yield "adam.v/" + name, v[name]
    if ckpt.bias is not None:
        b = ckpt.bias
        yield "bias/b", b.b
        yield "bias/counts", b.counts
        yield "bias/steps", np.array(b.steps)
        yield "bias/updates", np.array(b.updates)
    yield "state/step", np.array(ckpt.step)


def save(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    text = ckpt.config.to_text().encode("utf-8")
    records = list(_records(ckpt))
    parts = [MAGIC, struct.pack("<II", VERSION, len(text)), text, struct.pack("<I", len(records))]
    for name, a in records:
        raw = name.encode("utf-8")
        a = np.asarray(a)
        parts.append(struct.pack(f"<H{len(raw)}sB", len(raw), raw, a.ndim))
        parts.append(struct.pack(f"<{a.ndim}I", *a.shape))
        parts.append(np.ascontiguousarray(a, dtype="<f8").tobytes())
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)
    return path


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("truncated checkpoint")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load(path) -> Checkpoint:
    r = _Reader(Path(path).read_bytes())
    if r.take(4) != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, n = r.unpack("<II")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    config = ModelConfig.from_text(r.take(n).decode("utf-8"))
    (count,) = r.unpack("<I")
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (size,) = r.unpack("<H")
        name = r.take(size).decode("utf-8")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        n_items = int(np.prod(shape, dtype=np.int64))
        data = np.frombuffer(r.take(8 * n_items), dtype="<f8").astype(np.float64)
        arrays[name] = data.reshape(shape)
    if r.pos != len(r.buf):
        raise CheckpointError(f"{path}: trailing bytes after last record")

    def group(prefix):
        return {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}

    params = group("param/")
    m, v = group("adam.m/"), group("adam.v/")
    moments = (m, v) if m else None
    bias = None
    if "bias/b" in arrays:
        bias = BiasState(arrays["bias/b"], arrays["bias/counts"].astype(np.int64),
                         config.eta_b, config.bias_interval,
                         int(arrays["bias/steps"]), int(arrays["bias/updates"]))
    return Checkpoint(config, params, int(arrays["state/step"]), moments, bias)
