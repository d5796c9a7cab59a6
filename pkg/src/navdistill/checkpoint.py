"""Binary checkpoints: named float64 tensor tables with integrity guards.

Layout (all integers little-endian):

    b"MVLN" | u32 version | 32-byte config digest | u32 tensor count
    per tensor: u16 name length | name utf-8 | u8 rank | u32 per dim | f64 payload
    | sha256 of everything above

The digest pins the model configuration a parameter table belongs to, so a
teacher checkpoint cannot be loaded into a student-shaped model.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import struct

import numpy as np

from .model import DuetModel, ModelConfig
from .tensor import Tensor

MAGIC = b"MVLN"
VERSION = 1


class ChecksumError(ValueError):
    pass


class ConfigDigestMismatch(ValueError):
    pass


def config_digest(cfg: ModelConfig) -> bytes:
    doc = json.dumps(dataclasses.asdict(cfg), sort_keys=True)
    return hashlib.sha256(doc.encode()).digest()


def save_tensors(path, cfg: ModelConfig, tensors: dict[str, np.ndarray]):
    parts = [MAGIC, struct.pack("<I", VERSION), config_digest(cfg),
             struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode()
        # ascontiguousarray would promote 0-d arrays to 1-d; asarray keeps rank
        a = np.asarray(arr, dtype="<f8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", a.ndim))
        parts.append(struct.pack(f"<{a.ndim}I", *a.shape))
        parts.append(a.tobytes())
    body = b"".join(parts)
    with open(path, "wb") as fh:
        fh.write(body)
        fh.write(hashlib.sha256(body).digest())


def load_tensors(path, cfg: ModelConfig | None = None) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 32 + len(MAGIC) + 4 + 32 + 4:
        raise ChecksumError(f"{path}: file too short ({len(blob)} bytes)")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise ChecksumError(f"{path}: checksum mismatch")
    if body[:4] != MAGIC:
        raise ValueError(f"{path}: bad magic {body[:4]!r}")
    off = 4
    (version,) = struct.unpack_from("<I", body, off)
    off += 4
    if version != VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    stored = body[off:off + 32]
    off += 32
    if cfg is not None and stored != config_digest(cfg):
        raise ConfigDigestMismatch(
            f"{path}: checkpoint was written for a different model config")
    (count,) = struct.unpack_from("<I", body, off)
    off += 4
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", body, off)
        off += 2
        name = body[off:off + nlen].decode()
        off += nlen
        (rank,) = struct.unpack_from("<B", body, off)
        off += 1
        dims = struct.unpack_from(f"<{rank}I", body, off)
        off += 4 * rank
        n = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(body, dtype="<f8", count=n, offset=off).reshape(dims)
        off += 8 * n
        out[name] = arr.astype(float)
    if off != len(body):
        raise ChecksumError(f"{path}: {len(body) - off} trailing bytes")
    return out


def save_model(model: DuetModel, path, extra: dict[str, Tensor] | None = None):
    tensors = {name: p.data for name, p in model.params.items()}
    if extra:
        for name, t in extra.items():
            tensors[f"extra.{name}"] = t.data
    save_tensors(path, model.cfg, tensors)


def load_model(path, cfg: ModelConfig, seed: int = 0) -> tuple[DuetModel, dict]:
    """Rebuild a model (and any extra tensors) from a checkpoint."""
    tensors = load_tensors(path, cfg)
    model = DuetModel(cfg, seed=seed)
    extra = {}
    for name, arr in tensors.items():
        if name.startswith("extra."):
            extra[name[len("extra."):]] = arr
            continue
        if name not in model.params:
            raise ValueError(f"{path}: unknown tensor {name!r}")
        if model.params[name].data.shape != arr.shape:
            raise ValueError(f"{path}: {name} has shape {arr.shape}, "
                             f"expected {model.params[name].data.shape}")
        model.params[name].data = arr.copy()
    missing = set(model.params) - {n for n in tensors if not n.startswith("extra.")}
    if missing:
        raise ValueError(f"{path}: missing tensors {sorted(missing)[:3]}...")
    return model, extra
