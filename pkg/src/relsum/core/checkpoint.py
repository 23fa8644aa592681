"""Binary checkpoint container for named float64 arrays.

Layout (all integers little-endian)::

    b"RELSUMCK"                 magic
    u32 format version
    u32 header length, header   UTF-8 JSON object (sorted keys)
    u32 entry count
    per entry: u16 name length, name, u8 ndim, u32 * ndim dims, f8 * prod(dims)

Values are written as ``<f8`` bytes, so a save/load round trip is bit-exact.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, BinaryIO, Mapping

import numpy as np

from ..errors import CheckpointFormatError, MissingArtifactError
from .optim import ParameterStore
from .tensor import Tensor

__all__ = ["MAGIC", "FORMAT_VERSION", "Checkpoint", "save_checkpoint", "load_checkpoint"]

MAGIC = b"RELSUMCK"
FORMAT_VERSION = 1


@dataclass(slots=True)
class Checkpoint:
    """Arrays plus the JSON header they were saved with."""

    params: ParameterStore
    header: dict[str, Any] = field(default_factory=dict)

    @property
    def frozen(self) -> bool:
        return bool(self.header.get("frozen", False))


def save_checkpoint(path: str | Path, params: Mapping[str, Tensor | np.ndarray], header: Mapping[str, Any] | None = None) -> None:
    meta = dict(header or {})
    meta.setdefault("format_version", FORMAT_VERSION)
    header_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    with open(target, "wb") as handle:
        handle.write(MAGIC)
        handle.write(struct.pack("<II", FORMAT_VERSION, len(header_bytes)))
        handle.write(header_bytes)
        handle.write(struct.pack("<I", len(params)))
        for name, value in params.items():
            array = value.data if isinstance(value, Tensor) else np.asarray(value, dtype=np.float64)
            encoded = name.encode("utf-8")
            handle.write(struct.pack("<H", len(encoded)))
            handle.write(encoded)
            handle.write(struct.pack("<B", array.ndim))
            handle.write(struct.pack(f"<{array.ndim}I", *array.shape))
            handle.write(np.ascontiguousarray(array, dtype="<f8").tobytes())


def _read_exact(handle: BinaryIO, count: int, what: str) -> bytes:
    chunk = handle.read(count)
    if len(chunk) != count:
        raise CheckpointFormatError(f"Truncated checkpoint while reading {what}")
    return chunk


def load_checkpoint(path: str | Path, *, requires_grad: bool = False) -> Checkpoint:
    source = Path(path)
    if not source.exists():
        raise MissingArtifactError(f"Checkpoint not found: {source}")
    with open(source, "rb") as handle:
        if _read_exact(handle, len(MAGIC), "magic") != MAGIC:
            raise CheckpointFormatError(f"{source} is not a relsum checkpoint")
        version, header_len = struct.unpack("<II", _read_exact(handle, 8, "version"))
        if version != FORMAT_VERSION:
            raise CheckpointFormatError(f"Unsupported checkpoint version {version} (expected {FORMAT_VERSION})")
        header = json.loads(_read_exact(handle, header_len, "header").decode("utf-8"))
        (count,) = struct.unpack("<I", _read_exact(handle, 4, "entry count"))
        arrays: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read_exact(handle, 2, "name length"))
            name = _read_exact(handle, name_len, "name").decode("utf-8")
            (ndim,) = struct.unpack("<B", _read_exact(handle, 1, f"rank of '{name}'"))
            shape = struct.unpack(f"<{ndim}I", _read_exact(handle, 4 * ndim, f"shape of '{name}'"))
            size = int(np.prod(shape, dtype=np.int64))
            raw = _read_exact(handle, 8 * size, f"values of '{name}'")
            arrays[name] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)
        if handle.read(1):
            raise CheckpointFormatError(f"Trailing bytes after {count} entries in {source}")
    return Checkpoint(params=ParameterStore(arrays, requires_grad=requires_grad), header=header)
