"""HSCK checkpoint codec.

Layout, all integers little-endian: magic b"HSCK", u32 version (1),
u32 tensor count, then per tensor u32 name length, UTF-8 name, u8 dtype
code (1 = float32), u8 rank, rank u32 extents, raw little-endian float32
payload. Round trips are bitwise lossless.
"""

from __future__ import annotations

import logging
import struct
from pathlib import Path

import numpy as np

from .errors import (
    BadMagic,
    DataError,
    TruncatedFile,
    UnsupportedDatatype,
    VersionUnsupported,
)

__all__ = ["save_checkpoint", "load_checkpoint", "load_into"]

log = logging.getLogger("voxcam")

_MAGIC = b"HSCK"
_VERSION = 1
_DTYPE_F32 = 1


def save_checkpoint(state, path: str | Path) -> None:
    """Serialize a name -> float32 array mapping (or a model's state)."""
    if hasattr(state, "state_dict"):
        state = state.state_dict()
    parts = [_MAGIC, struct.pack("<II", _VERSION, len(state))]
    for name, arr in state.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<I", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<BB", _DTYPE_F32, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if len(raw) < 12:
        raise TruncatedFile(f"{path}: {len(raw)} bytes, need at least 12")
    if raw[:4] != _MAGIC:
        raise BadMagic(f"{path}: magic {raw[:4]!r}, expected {_MAGIC!r}")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != _VERSION:
        raise VersionUnsupported(f"{path}: version {version}, supported: {_VERSION}")
    pos = 12
    out: dict[str, np.ndarray] = {}

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(raw):
            raise TruncatedFile(f"{path}: ran out of bytes at offset {pos}")
        chunk = raw[pos:pos + n]
        pos += n
        return chunk

    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        dtype_code, rank = struct.unpack("<BB", take(2))
        if dtype_code != _DTYPE_F32:
            raise UnsupportedDatatype(f"{path}: tensor {name!r} dtype code {dtype_code}")
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        n = int(np.prod(shape, dtype=np.int64)) if rank else 1
        payload = take(4 * n)
        if name in out:
            raise DataError(f"{path}: duplicate tensor name {name!r}")
        out[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
    return out


def load_into(model, path: str | Path) -> list[str]:
    """Load a checkpoint into a model; extra entries (a donor's unrelated
    head, say) are skipped with a logged notice. Returns the skipped names."""
    ignored = model.load_state_dict(load_checkpoint(path))
    for name in ignored:
        log.info("checkpoint %s: ignoring extra tensor %r", path, name)
    return ignored
