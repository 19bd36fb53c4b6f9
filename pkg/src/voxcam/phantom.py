"""Deterministic synthetic head volumes with optional lesions.

A phantom is an ellipsoidal head (half-axes 0.40/0.38/0.36 of the
extent) with interior intensity 0.6, a brighter cortical shell at 0.8
for normalized radii in (0.62, 1], a low-frequency cosine field of
amplitude 0.03 inside the head, and additive Gaussian noise. A lesion is
a spherical Gaussian blob whose half-peak surface sits at the drawn
radius, centered inside the shell; the mask is that half-peak region.

Everything derives from one seeded generator per (seed, lesion) pair, so
regeneration is bitwise identical.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InvalidSpec
from .explain import LesionMask
from .manifest import ManifestRow, write_manifest
from .nifti import write_nifti
from .volume import Volume

__all__ = ["PhantomSpec", "generate_phantom", "generate_cohort"]

_AXES_FRAC = (0.40, 0.38, 0.36)
_INTERIOR = 0.6
_SHELL = 0.8
_SHELL_RHO = 0.62
_LOWFREQ_AMP = 0.03
_CENTER_RHO_LO = 0.64
_CENTER_RHO_HI = 0.78
_EDGE_GAP = 0.02


@dataclass(frozen=True)
class PhantomSpec:
    extent: int = 64
    lesion_radius: tuple[float, float] | None = None
    lesion_contrast: float = 0.5
    noise_sigma: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.extent < 16:
            raise InvalidSpec(f"extent must be >= 16, got {self.extent}")
        if self.lesion_contrast < 0:
            raise InvalidSpec(f"lesion_contrast must be >= 0, got {self.lesion_contrast}")
        if self.noise_sigma < 0:
            raise InvalidSpec(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if self.seed < 0:
            raise InvalidSpec(f"seed must be >= 0, got {self.seed}")
        lo, hi = self.radius_range
        a_min = _AXES_FRAC[2] * self.extent
        # half-peak surface must fit between the center band and the head edge
        hi_max = (1.0 - _CENTER_RHO_LO - _EDGE_GAP) * a_min
        if not 0 < lo <= hi:
            raise InvalidSpec(f"bad lesion radius range ({lo}, {hi})")
        if hi >= hi_max:
            raise InvalidSpec(
                f"lesion radius {hi} cannot fit inside the head (max {hi_max:.2f})"
            )

    @property
    def radius_range(self) -> tuple[float, float]:
        if self.lesion_radius is not None:
            return self.lesion_radius
        lo = max(1.5, 3.0 * self.extent / 64.0)
        hi = max(lo, 6.0 * self.extent / 64.0)
        return lo, hi


def generate_phantom(spec: PhantomSpec, lesion: bool) -> tuple[Volume, LesionMask]:
    e = spec.extent
    rng = np.random.default_rng([spec.seed, int(lesion)])
    axes = np.array([f * e for f in _AXES_FRAC])
    c = (e - 1) / 2.0
    grid = np.indices((e, e, e), dtype=np.float64)
    norm = [(grid[i] - c) / axes[i] for i in range(3)]
    rho = np.sqrt(norm[0] ** 2 + norm[1] ** 2 + norm[2] ** 2)
    head = rho <= 1.0

    base = np.zeros((e, e, e), dtype=np.float64)
    base[head] = _INTERIOR
    base[head & (rho > _SHELL_RHO)] = _SHELL

    k = rng.integers(1, 4, size=3)
    phase = rng.uniform(0.0, 2.0 * np.pi, size=3)
    lowfreq = sum(
        np.cos(2.0 * np.pi * k[i] * grid[i] / e + phase[i]) for i in range(3)
    ) / 3.0
    base[head] += _LOWFREQ_AMP * lowfreq[head]

    mask = np.zeros((e, e, e), dtype=bool)
    if lesion:
        lo, hi = spec.radius_range
        r = rng.uniform(lo, hi)
        direction = rng.normal(size=3)
        n = np.linalg.norm(direction)
        direction = direction / n if n > 1e-12 else np.array([1.0, 0.0, 0.0])
        rho_hi = min(_CENTER_RHO_HI, 1.0 - r / axes.min() - _EDGE_GAP)
        rho_c = rng.uniform(_CENTER_RHO_LO, rho_hi)
        center = c + rho_c * direction * axes
        d2 = sum((grid[i] - center[i]) ** 2 for i in range(3))
        # sigma chosen so the blob crosses half its peak exactly at distance r
        sigma2 = r * r / (2.0 * np.log(2.0))
        base += spec.lesion_contrast * np.exp(-d2 / (2.0 * sigma2))
        mask = d2 <= r * r

    base += rng.normal(0.0, spec.noise_sigma, size=(e, e, e))
    vol = Volume(base.astype(np.float32), (1.0, 1.0, 1.0))
    return vol, LesionMask(Volume(mask.astype(np.float32), (1.0, 1.0, 1.0)))


def generate_cohort(spec: PhantomSpec, n_per_class: int, out_dir: str | Path) -> list[ManifestRow]:
    """Write n positives (with masks) and n controls plus manifest.csv;
    subject i uses seed spec.seed + i, positives first."""
    if n_per_class < 1:
        raise InvalidSpec(f"n_per_class must be >= 1, got {n_per_class}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows: list[ManifestRow] = []
    for i in range(n_per_class):
        sub = PhantomSpec(spec.extent, spec.lesion_radius, spec.lesion_contrast,
                          spec.noise_sigma, spec.seed + i)
        vol, mask = generate_phantom(sub, lesion=True)
        sid = f"p{i:03d}"
        write_nifti(vol, out / f"{sid}.nii")
        write_nifti(mask.values, out / f"{sid}_mask.nii")
        rows.append(ManifestRow(sid, f"{sid}.nii", 1, f"{sid}_mask.nii"))
    for i in range(n_per_class):
        sub = PhantomSpec(spec.extent, spec.lesion_radius, spec.lesion_contrast,
                          spec.noise_sigma, spec.seed + n_per_class + i)
        vol, _ = generate_phantom(sub, lesion=False)
        sid = f"c{i:03d}"
        write_nifti(vol, out / f"{sid}.nii")
        rows.append(ManifestRow(sid, f"{sid}.nii", 0, None))
    write_manifest(rows, out / "manifest.csv")
    return rows
