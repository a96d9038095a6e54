"""Binary checkpoints: parameters, momentum buffers, RNG state, config.

Layout: magic "AALCKPT\\0", little-endian u32 version, then named sections.
Each section is u32 name length, UTF-8 name, u64 payload length, payload,
and a CRC32 trailer over the payload. Tensors serialize as u8 ndim,
ndim x u32 dims, then raw little-endian float32 data. A load of a save
reproduces parameters and RNG state bit for bit.
"""
from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from aal.model import SmallCnn
from aal.tensor import Tensor
from aal.training import TrainConfig

__all__ = [
    "CheckpointError",
    "CheckpointMagicError",
    "CheckpointVersionError",
    "CheckpointChecksumError",
    "TrainingSnapshot",
    "save_checkpoint",
    "load_checkpoint",
]

MAGIC = b"AALCKPT\x00"
VERSION = 1


class CheckpointError(ValueError):
    pass


class CheckpointMagicError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointChecksumError(CheckpointError):
    pass


@dataclass
class TrainingSnapshot:
    """Everything besides the weights needed to resume a run exactly."""

    config: TrainConfig
    epoch: int
    velocities: dict
    rng: np.random.Generator
    extra: dict | None = None


def _tensor_payload(arr):
    arr = np.asarray(arr)
    if arr.dtype != np.float32:
        raise CheckpointError(f"checkpoints store float32 tensors, got {arr.dtype}")
    head = struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.astype("<f4", copy=False).tobytes()


def _tensor_from_payload(payload, name):
    (ndim,) = struct.unpack_from("<B", payload, 0)
    dims = struct.unpack_from(f"<{ndim}I", payload, 1)
    data = np.frombuffer(payload, dtype="<f4", offset=1 + 4 * ndim)
    if data.size != int(np.prod(dims)):
        raise CheckpointError(f"section {name}: payload size does not match dims {dims}")
    return data.reshape(dims).copy()


def _rng_state_jsonable(rng):
    def clean(v):
        if isinstance(v, dict):
            return {k: clean(x) for k, x in v.items()}
        if isinstance(v, np.ndarray):
            return v.tolist()
        if isinstance(v, (np.integer,)):
            return int(v)
        return v

    return clean(rng.bit_generator.state)


def _rng_from_state(state):
    bg = np.random.Philox()
    bg.state = state
    return np.random.Generator(bg)


def _write_section(f, name, payload):
    raw = name.encode("utf-8")
    f.write(struct.pack("<I", len(raw)))
    f.write(raw)
    f.write(struct.pack("<Q", len(payload)))
    f.write(payload)
    f.write(struct.pack("<I", zlib.crc32(payload)))


def save_checkpoint(model, snapshot, path):
    """Write model weights plus the training snapshot to path."""
    meta = {
        "epoch": int(snapshot.epoch),
        "model": model.config_dict(),
        "train": snapshot.config.to_dict(),
        "rng": _rng_state_jsonable(snapshot.rng),
        "extra": snapshot.extra or {},
    }
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        _write_section(f, "meta", json.dumps(meta, sort_keys=True).encode("utf-8"))
        for name, p in model.parameters().items():
            _write_section(f, f"param/{name}", _tensor_payload(p.data))
        for name, v in snapshot.velocities.items():
            _write_section(f, f"velocity/{name}", _tensor_payload(v))


def _read_exact(f, count, what):
    data = f.read(count)
    if len(data) != count:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return data


def load_checkpoint(path):
    """Read a checkpoint; returns (model, TrainingSnapshot)."""
    sections = {}
    with open(path, "rb") as f:
        magic = _read_exact(f, len(MAGIC), "magic")
        if magic != MAGIC:
            raise CheckpointMagicError(f"{path}: bad magic {magic!r}")
        (version,) = struct.unpack("<I", _read_exact(f, 4, "version"))
        if version != VERSION:
            raise CheckpointVersionError(f"{path}: version {version}, expected {VERSION}")
        while True:
            head = f.read(4)
            if not head:
                break
            (name_len,) = struct.unpack("<I", head)
            name = _read_exact(f, name_len, "section name").decode("utf-8")
            (payload_len,) = struct.unpack("<Q", _read_exact(f, 8, f"{name} length"))
            payload = _read_exact(f, payload_len, f"{name} payload")
            (crc,) = struct.unpack("<I", _read_exact(f, 4, f"{name} checksum"))
            if zlib.crc32(payload) != crc:
                raise CheckpointChecksumError(f"{path}: checksum failure in section {name}")
            sections[name] = payload

    if "meta" not in sections:
        raise CheckpointError(f"{path}: missing meta section")
    meta = json.loads(sections["meta"].decode("utf-8"))
    model = SmallCnn.from_config(meta["model"])
    for name, p in model.parameters().items():
        key = f"param/{name}"
        if key not in sections:
            raise CheckpointError(f"{path}: missing section {key}")
        arr = _tensor_from_payload(sections[key], key)
        if arr.shape != p.shape:
            raise CheckpointError(f"{path}: {key} shape {arr.shape} != model shape {p.shape}")
        p.data = arr
    velocities = {}
    for name in model.parameters():
        key = f"velocity/{name}"
        if key not in sections:
            raise CheckpointError(f"{path}: missing section {key}")
        velocities[name] = _tensor_from_payload(sections[key], key)
    snapshot = TrainingSnapshot(
        config=TrainConfig.from_dict(meta["train"]),
        epoch=meta["epoch"],
        velocities=velocities,
        rng=_rng_from_state(meta["rng"]),
        extra=meta.get("extra") or {},
    )
    return model, snapshot
