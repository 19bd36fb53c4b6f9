"""Dense 3D scalar grids and their geometric resampling."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidSpec, ShapeMismatch

_AXES = {"d": 0, "h": 1, "w": 2}


@dataclass
class Volume:
    """A (D, H, W) float32 grid with per-axis voxel spacing in mm.

    Axis order is (depth, height, width) throughout the package; files
    are read and written in stored voxel order without reorientation.
    """

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3:
            raise ShapeMismatch(f"volume must be rank 3, got rank {self.data.ndim}")
        if min(self.data.shape) < 1:
            raise ShapeMismatch(f"volume extents must be >= 1, got {self.data.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise InvalidSpec(f"spacing must be 3 positive floats, got {self.spacing}")

    @property
    def extents(self) -> tuple[int, int, int]:
        return self.data.shape


def _axis_coords(n_out: int, n_in: int) -> np.ndarray:
    # corner-aligned: first and last samples coincide with the source corners
    if n_out == 1:
        return np.zeros(1)
    return np.arange(n_out) * ((n_in - 1) / (n_out - 1))


def _sample_trilinear(data: np.ndarray, coords: np.ndarray) -> np.ndarray:
    """Sample `data` at fractional (d, h, w) positions, zero outside.

    coords has shape (3, n). Math in float64, result float32.
    """
    src = data.astype(np.float64)
    lo = np.floor(coords).astype(np.int64)
    frac = coords - lo
    out = np.zeros(coords.shape[1], dtype=np.float64)
    shape = np.asarray(data.shape)
    for corner in range(8):
        offs = np.array([(corner >> 2) & 1, (corner >> 1) & 1, corner & 1])
        idx = lo + offs[:, None]
        weight = np.ones(coords.shape[1], dtype=np.float64)
        for ax in range(3):
            f = frac[ax]
            weight *= f if offs[ax] else (1.0 - f)
        valid = np.all((idx >= 0) & (idx < shape[:, None]), axis=0)
        vals = np.zeros_like(out)
        vals[valid] = src[idx[0, valid], idx[1, valid], idx[2, valid]]
        out += weight * vals
    return out.astype(np.float32)


def trilinear_resample(v: Volume, extents: tuple[int, int, int]) -> Volume:
    """Resample to new extents with corner-aligned trilinear interpolation."""
    extents = tuple(int(e) for e in extents)
    if len(extents) != 3 or min(extents) < 1:
        raise ShapeMismatch(f"target extents must be 3 positive ints, got {extents}")
    axes = [_axis_coords(extents[ax], v.extents[ax]) for ax in range(3)]
    grid = np.meshgrid(*axes, indexing="ij")
    coords = np.stack([g.reshape(-1) for g in grid])
    out = _sample_trilinear(v.data, coords).reshape(extents)
    spacing = tuple(
        v.spacing[ax] * (v.extents[ax] - 1) / (extents[ax] - 1)
        if extents[ax] > 1 and v.extents[ax] > 1 else v.spacing[ax]
        for ax in range(3)
    )
    return Volume(out, spacing)


def _axis_rotation(axis: str, angle_deg: float) -> np.ndarray:
    t = np.deg2rad(angle_deg)
    c, s = np.cos(t), np.sin(t)
    i = _AXES[axis]
    j, k = [a for a in range(3) if a != i]
    r = np.eye(3)
    r[j, j] = c
    r[j, k] = -s
    r[k, j] = s
    r[k, k] = c
    return r


def rotate_volume(
    v: Volume,
    angles_deg: tuple[float, float, float],
    order: tuple[str, str, str] = ("d", "h", "w"),
) -> Volume:
    """Rotate about the grid center, trilinear sampling, zero fill outside.

    angles_deg[i] is the rotation about axis order[i]; rotations compose in
    the order given (first entry applied first). Rotation happens in grid
    index space.
    """
    if sorted(order) != ["d", "h", "w"]:
        raise InvalidSpec(f"order must be a permutation of d,h,w, got {order}")
    rot = np.eye(3)
    for axis, ang in zip(order, angles_deg):
        rot = _axis_rotation(axis, ang) @ rot
    center = (np.asarray(v.extents, dtype=np.float64) - 1.0) / 2.0
    idx = np.indices(v.extents).reshape(3, -1).astype(np.float64)
    src = rot.T @ (idx - center[:, None]) + center[:, None]
    out = _sample_trilinear(v.data, src).reshape(v.extents)
    return Volume(out, v.spacing)
