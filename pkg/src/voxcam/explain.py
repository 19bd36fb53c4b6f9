"""Layer attribution maps and the lesion attention score.

The map construction follows the classic recipe: pull the gradient of one
pre-softmax logit back to a chosen stage's activations, weight each channel
by the spatial mean of its gradient, combine with ReLU, upsample to scan
extents, min-max normalize. The score then contrasts map values inside a
lesion mask against the background, in contrast-to-noise style.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    BadClass,
    DegenerateBackground,
    EmptyInput,
    EmptyRegion,
    InvalidSpec,
    ShapeMismatch,
)
from .resnet import Model
from .tensor import Tensor, backward, pick
from .volume import Volume, trilinear_resample

__all__ = [
    "Heatmap",
    "LesionMask",
    "HeatScoreResult",
    "grad_cam",
    "grad_cam_components",
    "min_max_normalize",
    "heat_score",
    "heat_score_aggregate",
    "write_pgm_slice",
]


@dataclass
class Heatmap:
    """Attribution map aligned to the input scan extents."""

    values: Volume
    normalized: bool
    degenerate_constant: bool = False


@dataclass
class LesionMask:
    values: Volume

    def __post_init__(self):
        u = np.unique(self.values.data)
        if not np.isin(u, (0.0, 1.0)).all():
            raise InvalidSpec("lesion mask values must be 0 or 1")

    @property
    def bool_array(self) -> np.ndarray:
        return self.values.data > 0.5


@dataclass
class HeatScoreResult:
    hs: float
    mean_in: float
    mean_bkg: float
    std_bkg: float
    n_in: int
    n_bkg: int


def min_max_normalize(v: Volume) -> Heatmap:
    """(v - min)/(max - min); a constant input maps to all zeros and sets
    the degenerate flag instead of erroring."""
    lo = float(v.data.min())
    hi = float(v.data.max())
    if hi == lo:
        return Heatmap(Volume(np.zeros(v.data.shape, np.float32), v.spacing),
                       normalized=True, degenerate_constant=True)
    data = ((v.data.astype(np.float64) - lo) / (hi - lo)).astype(np.float32)
    return Heatmap(Volume(data, v.spacing), normalized=True, degenerate_constant=False)


def _as_input_tensor(x: Volume | Tensor) -> tuple[Tensor, tuple[float, float, float]]:
    if isinstance(x, Volume):
        return Tensor(x.data[None, None]), x.spacing
    if isinstance(x, Tensor):
        if x.data.ndim != 5 or x.data.shape[0] != 1:
            raise ShapeMismatch(
                f"expected a single (1, C, D, H, W) input, got shape {x.data.shape}"
            )
        return x, (1.0, 1.0, 1.0)
    raise InvalidSpec(f"unsupported input type {type(x).__name__}")


def grad_cam_components(
    m: Model, x: Volume | Tensor, target_class: int, layer: str = "stage4"
) -> tuple[np.ndarray, np.ndarray]:
    """One forward/backward pass; returns (alpha, activations).

    alpha[k] is the spatial mean of d(logit)/d(activation) for channel k;
    activations are the captured layer output, shape (K, d, h, w). The
    weighted ReLU combination of the two is the pre-normalization map.
    """
    if m.training:
        raise InvalidSpec("attribution requires an eval-mode model")
    xt, _ = _as_input_tensor(x)
    logits, captured = m.forward_capturing(xt, layer)
    n_classes = logits.data.shape[1]
    if not isinstance(target_class, (int, np.integer)) or not 0 <= target_class < n_classes:
        raise BadClass(f"class index {target_class!r} not in [0, {n_classes})")
    score = pick(logits, (0, int(target_class)))
    backward(score, targets=[captured])
    grads = captured.grad
    acts = captured.data[0]
    alpha = grads[0].astype(np.float64).mean(axis=(1, 2, 3))
    return alpha, acts


def grad_cam(
    m: Model, x: Volume | Tensor, target_class: int, layer: str = "stage4"
) -> Heatmap:
    """Normalized attribution heatmap at the input scan's extents."""
    xt, spacing = _as_input_tensor(x)
    alpha, acts = grad_cam_components(m, xt, target_class, layer)
    weighted = np.einsum("k,kdhw->dhw", alpha, acts.astype(np.float64))
    raw = np.maximum(weighted, 0.0).astype(np.float32)
    extents = xt.data.shape[2:]
    up = trilinear_resample(Volume(raw, (1.0, 1.0, 1.0)), extents)
    return min_max_normalize(Volume(up.data, spacing))


def _as_bool_mask(mask) -> np.ndarray:
    if isinstance(mask, LesionMask):
        return mask.bool_array
    if isinstance(mask, Volume):
        return mask.data > 0.5
    return np.asarray(mask) > 0.5


def heat_score(
    heat: Heatmap | Volume | np.ndarray,
    lesion: LesionMask | Volume | np.ndarray,
    domain: Volume | np.ndarray | None = None,
) -> HeatScoreResult:
    """HS = (V_S - V_Bkg) / sigma_Bkg with population sigma.

    Background is every non-lesion voxel, restricted to `domain` when one
    is given.
    """
    if isinstance(heat, Heatmap):
        values = heat.values.data
    elif isinstance(heat, Volume):
        values = heat.data
    else:
        values = np.asarray(heat)
    inside = _as_bool_mask(lesion)
    if values.shape != inside.shape:
        raise ShapeMismatch(f"heatmap {values.shape} vs lesion mask {inside.shape}")
    outside = ~inside
    if domain is not None:
        dom = _as_bool_mask(domain)
        if dom.shape != values.shape:
            raise ShapeMismatch(f"heatmap {values.shape} vs domain mask {dom.shape}")
        outside &= dom
    n_in = int(inside.sum())
    n_bkg = int(outside.sum())
    if n_in == 0:
        raise EmptyRegion("lesion mask selects no voxels")
    if n_bkg < 2:
        raise EmptyRegion(f"background has {n_bkg} voxels, need at least 2")
    v = values.astype(np.float64)
    mean_in = float(v[inside].mean())
    bkg = v[outside]
    mean_bkg = float(bkg.mean())
    std_bkg = float(bkg.std())
    if std_bkg == 0.0:
        raise DegenerateBackground("background intensity is constant")
    return HeatScoreResult(
        hs=(mean_in - mean_bkg) / std_bkg,
        mean_in=mean_in,
        mean_bkg=mean_bkg,
        std_bkg=std_bkg,
        n_in=n_in,
        n_bkg=n_bkg,
    )


def heat_score_aggregate(results: list) -> float:
    """Arithmetic mean of per-scan scores; accepts results or raw floats."""
    if not results:
        raise EmptyInput("no heat scores to aggregate")
    vals = [r.hs if isinstance(r, HeatScoreResult) else float(r) for r in results]
    return float(np.mean(vals))


def _contour2d(mask: np.ndarray) -> np.ndarray:
    """Mask pixels with at least one off-mask 4-neighbor (image edge counts)."""
    padded = np.pad(mask, 1, constant_values=False)
    interior = (
        padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    )
    return mask & ~interior


def write_pgm_slice(h: Heatmap, lesion=None, path: str | Path = "slice.pgm") -> None:
    """Export the mid-axial slice as binary 8-bit PGM, with the lesion
    contour (if a mask is given) burned in at intensity 0."""
    data = h.values.data
    sl = data[data.shape[0] // 2]
    img = np.clip(np.rint(sl.astype(np.float64) * 255.0), 0, 255).astype(np.uint8)
    if lesion is not None:
        mask = _as_bool_mask(lesion)
        if mask.shape != data.shape:
            raise ShapeMismatch(f"heatmap {data.shape} vs lesion mask {mask.shape}")
        img[_contour2d(mask[data.shape[0] // 2])] = 0
    header = f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii")
    Path(path).write_bytes(header + img.tobytes())
