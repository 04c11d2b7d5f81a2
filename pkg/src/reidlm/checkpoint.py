"""Binary checkpoint format.

All integers little-endian::

    magic        4 bytes  b"MLRD"
    version      u16
    header_len   u32
    header       header_len bytes, UTF-8 JSON (sorted keys): stage tag,
                 encoder/LM configs, head shapes, vocabulary, pooling
    n_tensors    u32
    n_tensors records:
        name_len u16, name (UTF-8)
        ndim     u8, dims u32 * ndim
        data     f64 * prod(dims), row-major
"""

from __future__ import annotations

import hashlib
import io
import json
import os
import struct
from pathlib import Path

import numpy as np

from .models import CausalLMConfig, ModelSet, VisualEncoderConfig, build_models

MAGIC = b"MLRD"
VERSION = 1


class CheckpointError(ValueError):
    pass


def to_bytes(models: ModelSet) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<H", VERSION))
    header = json.dumps(models.header(), sort_keys=True, separators=(",", ":")).encode("utf-8")
    buf.write(struct.pack("<I", len(header)))
    buf.write(header)
    params = models.named_parameters()
    buf.write(struct.pack("<I", len(params)))
    for name, p in params:
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", p.ndim))
        buf.write(struct.pack(f"<{p.ndim}I", *p.shape))
        buf.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    return buf.getvalue()


def save_checkpoint(models: ModelSet, path: str | os.PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(to_bytes(models))
    os.replace(tmp, path)
    return path


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"truncated checkpoint: wanted {n} bytes at offset {self.pos}, "
                                  f"file has {len(self.data)}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def from_bytes(data: bytes) -> ModelSet:
    r = _Reader(data)
    magic = r.take(4)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}, expected {MAGIC!r}")
    (version,) = r.unpack("<H")
    if version != VERSION:
        raise CheckpointError(f"checkpoint version {version} not supported (expected {VERSION})")
    (hlen,) = r.unpack("<I")
    try:
        header = json.loads(r.take(hlen).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from exc

    enc_cfg = VisualEncoderConfig(**header["encoder"])
    lm_cfg = CausalLMConfig(**header["lm"]) if header["lm"] else None
    n_classes = header["id_head"][1] if header["id_head"] else None
    models = build_models(header["stage"], enc_cfg, lm_cfg, n_classes, seed=0,
                          vocab=header["vocab"], pooling=header.get("pooling", "mean"))
    if lm_cfg is None and header.get("projection"):
        raise CheckpointError("projection present without a language model")
    expected = dict(models.named_parameters())

    (count,) = r.unpack("<I")
    seen = set()
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        n = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(r.take(8 * n), dtype="<f8").reshape(shape).astype(np.float64)
        if name not in expected:
            raise CheckpointError(f"unexpected tensor {name!r}")
        if tuple(shape) != expected[name].shape:
            raise CheckpointError(f"tensor {name!r} has shape {tuple(shape)}, config implies "
                                  f"{expected[name].shape}")
        expected[name].data = arr
        seen.add(name)
    missing = set(expected) - seen
    if missing:
        raise CheckpointError(f"checkpoint missing tensors: {sorted(missing)[:3]}")
    if r.pos != len(data):
        raise CheckpointError(f"{len(data) - r.pos} trailing bytes after last tensor")
    return models


def load_checkpoint(path: str | os.PathLike) -> ModelSet:
    return from_bytes(Path(path).read_bytes())


def checkpoint_id(path: str | os.PathLike) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]
