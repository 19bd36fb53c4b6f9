"""Minimal NIfTI-1 single-file (.nii) reader and writer.

Covers exactly the subset the pipeline needs: 3-D (or 4-D with a
singleton fourth axis) scalar volumes, datatype codes 2/4/8/16/64,
slope/intercept scaling, both endiannesses on read. The writer always
emits little-endian float32 with vox_offset 352.

Axis convention: NIfTI dim[1] is the fastest-varying axis. Volumes are
held as (D, H, W) row-major arrays, so dim[1] = W, dim[2] = H,
dim[3] = D, and pixdim maps accordingly.
"""

from __future__ import annotations

import math
import struct
from pathlib import Path

import numpy as np

from .errors import (
    BadMagic,
    TruncatedFile,
    UnsupportedDatatype,
    UnsupportedDimensionality,
)
from .volume import Volume

__all__ = ["read_nifti", "write_nifti"]

_HEADER_BYTES = 348
_MAGIC = b"n+1\x00"
_DTYPES = {2: "u1", 4: "i2", 8: "i4", 16: "f4", 64: "f8"}


def read_nifti(path: str | Path) -> Volume:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER_BYTES:
        raise TruncatedFile(f"{path}: {len(raw)} bytes, header needs {_HEADER_BYTES}")
    if struct.unpack_from("<i", raw, 0)[0] == _HEADER_BYTES:
        bo = "<"
    elif struct.unpack_from(">i", raw, 0)[0] == _HEADER_BYTES:
        bo = ">"
    else:
        raise BadMagic(f"{path}: sizeof_hdr is not 348 in either byte order")
    if raw[344:348] != _MAGIC:
        raise BadMagic(f"{path}: magic {raw[344:348]!r}, expected {_MAGIC!r}")

    dim = struct.unpack_from(bo + "8h", raw, 40)
    if dim[0] == 4:
        if dim[4] != 1:
            raise UnsupportedDimensionality(
                f"{path}: 4-D file with dim[4] == {dim[4]}, only singleton supported"
            )
    elif dim[0] != 3:
        raise UnsupportedDimensionality(f"{path}: dim[0] == {dim[0]}, expected 3 or 4")
    w, h, d = dim[1], dim[2], dim[3]

    datatype = struct.unpack_from(bo + "h", raw, 70)[0]
    if datatype not in _DTYPES:
        raise UnsupportedDatatype(f"{path}: datatype code {datatype}")
    dt = np.dtype(bo + _DTYPES[datatype])

    pixdim = struct.unpack_from(bo + "8f", raw, 76)
    spacing = tuple(p if p > 0 else 1.0 for p in (pixdim[3], pixdim[2], pixdim[1]))
    vox_offset = int(struct.unpack_from(bo + "f", raw, 108)[0])
    slope, inter = struct.unpack_from(bo + "2f", raw, 112)

    n = w * h * d
    end = vox_offset + n * dt.itemsize
    if len(raw) < end:
        raise TruncatedFile(f"{path}: payload needs {end} bytes, file has {len(raw)}")
    data = np.frombuffer(raw, dtype=dt, count=n, offset=vox_offset).reshape(d, h, w)
    values = data.astype(np.float64)
    if slope != 0.0 and not math.isnan(slope):
        values = values * slope + inter
    return Volume(values.astype(np.float32), spacing)


def write_nifti(v: Volume, path: str | Path) -> None:
    header = bytearray(_HEADER_BYTES)
    struct.pack_into("<i", header, 0, _HEADER_BYTES)
    d, h, w = v.data.shape
    struct.pack_into("<8h", header, 40, 3, w, h, d, 1, 1, 1, 1)
    struct.pack_into("<2h", header, 70, 16, 32)
    struct.pack_into(
        "<8f", header, 76,
        1.0, v.spacing[2], v.spacing[1], v.spacing[0], 0.0, 0.0, 0.0, 0.0,
    )
    struct.pack_into("<f", header, 108, 352.0)
    struct.pack_into("<2f", header, 112, 1.0, 0.0)
    header[344:348] = _MAGIC
    payload = np.ascontiguousarray(v.data, dtype="<f4").tobytes()
    Path(path).write_bytes(bytes(header) + b"\x00" * 4 + payload)
