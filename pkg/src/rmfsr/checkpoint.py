"""Versioned binary checkpoint container.

Layout (little-endian)::

    b"RMFS" | u32 version | u32 header length | header JSON (UTF-8) | blobs

The header holds the configs, training counters and a manifest of
``{name, shape, dtype, offset}`` entries; offsets count from the first blob
byte. Blobs are raw ``<f4`` or ``<f8`` arrays.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"RMFS"
VERSION = 1
_DTYPES = {"f4": np.dtype("<f4"), "f8": np.dtype("<f8")}


class CheckpointError(Exception):
    """Base class for unreadable checkpoints."""


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    config: dict
    tensors: dict[str, np.ndarray]
    step: int = 0
    seed: int = 0
    extra: dict = field(default_factory=dict)


def _dtype_code(arr: np.ndarray) -> str:
    if arr.dtype == np.float32:
        return "f4"
    if arr.dtype == np.float64:
        return "f8"
    raise TypeError(f"unsupported blob dtype {arr.dtype}")


def to_bytes(ckpt: Checkpoint) -> bytes:
    manifest = []
    blobs = []
    offset = 0
    for name in sorted(ckpt.tensors):
        arr = np.asarray(ckpt.tensors[name])
        code = _dtype_code(arr)
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
        manifest.append({"name": name, "shape": list(arr.shape), "dtype": code, "offset": offset})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "config": ckpt.config,
        "step": int(ckpt.step),
        "seed": int(ckpt.seed),
        "extra": ckpt.extra,
        "manifest": manifest,
        "blob_bytes": offset,
    }
    text = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<II", VERSION, len(text)) + text + b"".join(blobs)


def from_bytes(data: bytes) -> Checkpoint:
    if len(data) < 12:
        raise TruncatedCheckpointError(f"{len(data)} bytes is shorter than the fixed header")
    if data[:4] != MAGIC:
        raise BadMagicError(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
    version, hlen = struct.unpack("<II", data[4:12])
    if version != VERSION:
        raise VersionMismatchError(f"checkpoint version {version}, this build reads {VERSION}")
    if len(data) < 12 + hlen:
        raise TruncatedCheckpointError("header cut short")
    try:
        header = json.loads(data[12:12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable header: {exc}") from exc
    body = memoryview(data)[12 + hlen:]
    if len(body) != header["blob_bytes"]:
        raise TruncatedCheckpointError(
            f"blob section has {len(body)} bytes, manifest expects {header['blob_bytes']}"
        )
    tensors = {}
    for entry in header["manifest"]:
        dt = _DTYPES[entry["dtype"]]
        count = int(np.prod(entry["shape"], dtype=np.int64))
        start = entry["offset"]
        stop = start + count * dt.itemsize
        if stop > len(body):
            raise TruncatedCheckpointError(f"blob {entry['name']} runs past end of file")
        arr = np.frombuffer(body[start:stop], dtype=dt).reshape(entry["shape"])
        tensors[entry["name"]] = arr.astype(dt.newbyteorder("="))
    return Checkpoint(config=header["config"], tensors=tensors, step=header["step"],
                      seed=header["seed"], extra=header.get("extra", {}))


def save(path, ckpt: Checkpoint) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(to_bytes(ckpt))
    tmp.replace(path)


def load(path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())
