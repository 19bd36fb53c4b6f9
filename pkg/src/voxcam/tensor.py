"""Reverse-mode autodiff over float32 numpy arrays, with the 3D nn ops.

Storage is float32 everywhere; every reduction (convolution taps, batch
statistics, means, log-sum-exp) accumulates in float64 before rounding
back, which keeps finite-difference gradient checks stable.

The graph is built by the ops: each output tensor keeps its parents and a
closure that maps the output gradient to parent gradient contributions.
`backward` propagates through a call-local gradient table and only then
flushes into the persistent `.grad` buffers, so calling it twice
accumulates exactly twice the gradient.
"""

from __future__ import annotations

import numpy as np

from . import kernels
from .errors import BadLabel, DegenerateBatch, ShapeMismatch

__all__ = [
    "Tensor",
    "conv3d",
    "maxpool3d",
    "batchnorm3d",
    "relu",
    "global_avg_pool",
    "linear",
    "cross_entropy",
    "pick",
    "backward",
    "no_grad",
]

_GRAD_ENABLED = [True]


class no_grad:
    """Context manager: ops inside build no graph (inference paths)."""

    def __enter__(self):
        _GRAD_ENABLED.append(False)
        return self

    def __exit__(self, *exc):
        _GRAD_ENABLED.pop()
        return False


class Tensor:
    """A float32 array plus the autograd bookkeeping."""

    __slots__ = ("data", "grad", "requires_grad", "_prev", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float32, order="C")
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._prev: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self):
        self.grad = None

    def reshape(self, *shape) -> Tensor:
        out = _node(self.data.reshape(shape), (self,))
        if out.requires_grad:
            src_shape = self.data.shape

            def bw(g, gmap):
                _contribute(gmap, self, g.reshape(src_shape))

            out._backward = bw
        return out

    def __add__(self, other: Tensor) -> Tensor:
        if self.data.shape != other.data.shape:
            raise ShapeMismatch(f"add: {self.data.shape} vs {other.data.shape}")
        out = _node(self.data + other.data, (self, other))
        if out.requires_grad:

            def bw(g, gmap):
                _contribute(gmap, self, g)
                _contribute(gmap, other, g)

            out._backward = bw
        return out

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _node(data, parents: tuple[Tensor, ...]) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED[-1] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._prev = parents
    return out


def _contribute(gmap: dict, t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    g = np.asarray(g, dtype=np.float32)
    k = id(t)
    if k in gmap:
        gmap[k] = gmap[k] + g
    else:
        gmap[k] = g.copy() if g.base is not None else g


def backward(root: Tensor, targets: list[Tensor] | None = None) -> list[Tensor]:
    """Accumulate d(root)/d(node) into .grad over the graph below root.

    root must hold a single element (a loss or one logit). When `targets`
    is given, every target is guaranteed a grad buffer afterwards; targets
    the graph never reached keep an all-zero buffer and are returned as
    the disconnected list.
    """
    if root.data.size != 1:
        raise ShapeMismatch(f"backward root must be scalar, has {root.data.size} elements")
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._prev:
            if id(p) not in seen:
                stack.append((p, False))

    gmap: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(topo):
        g = gmap.get(id(node))
        if g is None or node._backward is None:
            continue
        node._backward(g, gmap)

    for node in topo:
        if node.requires_grad and id(node) in gmap:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += gmap[id(node)]

    disconnected: list[Tensor] = []
    if targets is not None:
        for t in targets:
            if t.grad is None:
                t.grad = np.zeros_like(t.data)
            if id(t) not in gmap:
                disconnected.append(t)
    return disconnected


# -- convolution -------------------------------------------------------------

def _conv_out_extent(n: int, pad: int, k: int, s: int) -> int:
    return (n + 2 * pad - k) // s + 1


def _use_channel_last(cout: int, ho: int, wo: int) -> bool:
    # late ResNet stages have 2-4 wide rows; vectorize over channels there
    return cout >= 16 and ho * wo <= 64


def _phase_split(xp: np.ndarray, sw: int):
    if sw != 2:
        return xp, xp
    return np.ascontiguousarray(xp[..., 0::2]), np.ascontiguousarray(xp[..., 1::2])


def conv3d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: tuple[int, int, int] = (1, 1, 1),
    padding: tuple[int, int, int] = (0, 0, 0),
) -> Tensor:
    """Cross-correlation (no kernel flip), zero padding.

    x (N,Cin,D,H,W), weight (Cout,Cin,kD,kH,kW), optional bias (Cout,).
    Per-axis strides limited to {1, 2}. Every output element is a float64
    sum over taps in (ci, kd, kh, kw) order, rounded once to float32.
    """
    if x.data.ndim != 5 or weight.data.ndim != 5:
        raise ShapeMismatch("conv3d expects rank-5 input and weight")
    n, cin, d, h, w = x.data.shape
    cout, cin_w, kd, kh, kw = weight.data.shape
    if cin != cin_w:
        raise ShapeMismatch(f"conv3d: input has {cin} channels, weight expects {cin_w}")
    if bias is not None and bias.data.shape != (cout,):
        raise ShapeMismatch(f"conv3d: bias shape {bias.data.shape} != ({cout},)")
    stride = tuple(int(s) for s in stride)
    padding = tuple(int(p) for p in padding)
    if any(s not in (1, 2) for s in stride):
        raise ShapeMismatch(f"conv3d: strides must be 1 or 2, got {stride}")
    if any(p < 0 for p in padding):
        raise ShapeMismatch(f"conv3d: negative padding {padding}")
    sd, sh, sw = stride
    pd, ph, pw = padding
    do = _conv_out_extent(d, pd, kd, sd)
    ho = _conv_out_extent(h, ph, kh, sh)
    wo = _conv_out_extent(w, pw, kw, sw)
    if min(do, ho, wo) < 1:
        raise ShapeMismatch(
            f"conv3d: output extent ({do},{ho},{wo}) collapsed for input {(d, h, w)}"
        )

    xp = np.pad(x.data, ((0, 0), (0, 0), (pd, pd), (ph, ph), (pw, pw)))
    bias_arr = bias.data if bias is not None else np.zeros(cout, np.float32)
    channel_last = _use_channel_last(cout, ho, wo)
    if channel_last:
        xt = np.ascontiguousarray(xp.transpose(0, 2, 3, 4, 1))
        wt = np.ascontiguousarray(weight.data.transpose(1, 2, 3, 4, 0))
        outt = np.empty((n, do, ho, wo, cout), np.float32)
        kernels.conv_fwd_cl(xt, wt, bias_arr, sd, sh, sw, outt)
        out_data = np.ascontiguousarray(outt.transpose(0, 4, 1, 2, 3))
        xe = xo = None
    else:
        xe, xo = _phase_split(xp, sw)
        out_data = np.empty((n, cout, do, ho, wo), np.float32)
        cob = max(1, min(cout, 2048 // (ho * wo)))
        kernels.conv_fwd_rows(xp, xe, xo, weight.data, bias_arr, sd, sh, sw, out_data, cob)
        xt = None

    parents = (x, weight) if bias is None else (x, weight, bias)
    out = _node(out_data, parents)
    if out.requires_grad:
        w_data = weight.data

        def bw(g, gmap):
            g = np.ascontiguousarray(g)
            need_w = weight.requires_grad or (bias is not None and bias.requires_grad)
            if need_w:
                if channel_last:
                    gt = np.ascontiguousarray(g.transpose(0, 2, 3, 4, 1))
                    gwt = np.zeros((cin, kd, kh, kw, cout), np.float64)
                    gb64 = np.zeros(cout, np.float64)
                    kernels.conv_bwd_w_cl(xt, gt, sd, sh, sw, gwt, gb64)
                    gw = gwt.transpose(4, 0, 1, 2, 3).astype(np.float32)
                    gb = gb64.astype(np.float32)
                else:
                    gw = np.empty_like(w_data)
                    gb = np.empty(cout, np.float32)
                    kernels.conv_bwd_w_rows(xp, xe, xo, g, sd, sh, sw, gw, gb)
                _contribute(gmap, weight, gw)
                if bias is not None:
                    _contribute(gmap, bias, gb)
            if x.requires_grad:
                gt = np.ascontiguousarray(g.transpose(0, 2, 3, 4, 1))
                wt_b = np.ascontiguousarray(w_data.transpose(1, 2, 3, 4, 0))
                gx = np.empty((n, cin, d, h, w), np.float32)
                kernels.conv_bwd_x(gt, wt_b, sd, sh, sw, pd, ph, pw, gx)
                _contribute(gmap, x, gx)

        out._backward = bw
    return out


# -- pooling -----------------------------------------------------------------

def maxpool3d(
    x: Tensor,
    kernel: tuple[int, int, int] = (3, 3, 3),
    stride: tuple[int, int, int] = (2, 2, 2),
    padding: tuple[int, int, int] = (1, 1, 1),
) -> Tensor:
    """Max pooling with -inf padding; gradient routes to the argmax,
    first occurrence in window scan order on ties."""
    if x.data.ndim != 5:
        raise ShapeMismatch("maxpool3d expects rank-5 input")
    n, c, d, h, w = x.data.shape
    kd, kh, kw = kernel
    sd, sh, sw = stride
    pd, ph, pw = padding
    if any(p >= k for p, k in zip(padding, kernel)):
        raise ShapeMismatch(f"maxpool3d: padding {padding} must stay below kernel {kernel}")
    do = _conv_out_extent(d, pd, kd, sd)
    ho = _conv_out_extent(h, ph, kh, sh)
    wo = _conv_out_extent(w, pw, kw, sw)
    if min(do, ho, wo) < 1:
        raise ShapeMismatch(f"maxpool3d: output extent ({do},{ho},{wo}) collapsed")

    xp = np.pad(
        x.data,
        ((0, 0), (0, 0), (pd, pd), (ph, ph), (pw, pw)),
        constant_values=np.float32(-np.inf),
    )
    win = np.lib.stride_tricks.sliding_window_view(xp, (kd, kh, kw), axis=(2, 3, 4))
    win = win[:, :, ::sd, ::sh, ::sw]
    flat = win.reshape(n, c, do, ho, wo, kd * kh * kw)
    arg = flat.argmax(axis=-1)
    out_data = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    out = _node(out_data, (x,))
    if out.requires_grad:
        pad_shape = xp.shape

        def bw(g, gmap):
            kdi, rem = np.divmod(arg, kh * kw)
            khi, kwi = np.divmod(rem, kw)
            od, oh, ow = np.meshgrid(
                np.arange(do), np.arange(ho), np.arange(wo), indexing="ij"
            )
            di = od * sd + kdi
            hi = oh * sh + khi
            wi = ow * sw + kwi
            gxp = np.zeros(pad_shape, np.float32)
            ni = np.arange(n)[:, None, None, None, None]
            ci = np.arange(c)[None, :, None, None, None]
            np.add.at(gxp, (ni, ci, di, hi, wi), g)
            _contribute(gmap, x, gxp[:, :, pd:pd + d, ph:ph + h, pw:pw + w])

        out._backward = bw
    return out


def global_avg_pool(x: Tensor) -> Tensor:
    """Adaptive average pool to 1x1x1; gradient spreads 1/(D*H*W)."""
    if x.data.ndim != 5:
        raise ShapeMismatch("global_avg_pool expects rank-5 input")
    n, c, d, h, w = x.data.shape
    vol = d * h * w
    mean = x.data.astype(np.float64).sum(axis=(2, 3, 4), keepdims=True) / vol
    out = _node(mean.astype(np.float32), (x,))
    if out.requires_grad:

        def bw(g, gmap):
            _contribute(gmap, x, np.broadcast_to(g / vol, x.data.shape))

        out._backward = bw
    return out


# -- batch norm --------------------------------------------------------------

def batchnorm3d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    *,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
    update_running: bool = True,
) -> Tensor:
    """Per-channel batch norm over (N, D, H, W).

    Training mode normalizes by batch statistics (biased variance) and,
    when update_running is set, folds them into the running buffers in
    place. Eval mode (or a frozen layer, which passes training=False)
    normalizes by the running statistics.
    """
    if x.data.ndim != 5:
        raise ShapeMismatch("batchnorm3d expects rank-5 input")
    n, c, d, h, w = x.data.shape
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ShapeMismatch(f"batchnorm3d: affine shape must be ({c},)")
    axes = (0, 2, 3, 4)
    count = n * d * h * w
    x64 = x.data.astype(np.float64)
    if training:
        if count < 2:
            raise DegenerateBatch(
                f"batchnorm3d needs >= 2 elements per channel in train mode, got {count}"
            )
        mean = x64.mean(axis=axes)
        var = ((x64 - mean[None, :, None, None, None]) ** 2).mean(axis=axes)
        if update_running:
            running_mean[:] = ((1.0 - momentum) * running_mean + momentum * mean).astype(np.float32)
            running_var[:] = ((1.0 - momentum) * running_var + momentum * var).astype(np.float32)
    else:
        mean = running_mean.astype(np.float64)
        var = running_var.astype(np.float64)

    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x64 - mean[None, :, None, None, None]) * inv[None, :, None, None, None]
    out_data = (
        gamma.data.astype(np.float64)[None, :, None, None, None] * xhat
        + beta.data.astype(np.float64)[None, :, None, None, None]
    ).astype(np.float32)

    out = _node(out_data, (x, gamma, beta))
    if out.requires_grad:

        def bw(g, gmap):
            g64 = g.astype(np.float64)
            if gamma.requires_grad:
                _contribute(gmap, gamma, (g64 * xhat).sum(axis=axes).astype(np.float32))
            if beta.requires_grad:
                _contribute(gmap, beta, g64.sum(axis=axes).astype(np.float32))
            if x.requires_grad:
                gam = gamma.data.astype(np.float64)[None, :, None, None, None]
                inv_b = inv[None, :, None, None, None]
                if training:
                    gmean = g64.mean(axis=axes)[None, :, None, None, None]
                    gxhat = (g64 * xhat).mean(axis=axes)[None, :, None, None, None]
                    gx = gam * inv_b * (g64 - gmean - xhat * gxhat)
                else:
                    gx = gam * inv_b * g64
                _contribute(gmap, x, gx.astype(np.float32))

        out._backward = bw
    return out


# -- pointwise and head ops --------------------------------------------------

def relu(x: Tensor) -> Tensor:
    out = _node(np.maximum(x.data, 0), (x,))
    if out.requires_grad:
        mask = x.data > 0

        def bw(g, gmap):
            _contribute(gmap, x, g * mask)

        out._backward = bw
    return out


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """x (N,F) @ weight (C,F)^T + bias (C,)."""
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise ShapeMismatch("linear expects rank-2 input and weight")
    if x.data.shape[1] != weight.data.shape[1]:
        raise ShapeMismatch(
            f"linear: {x.data.shape[1]} features vs weight {weight.data.shape[1]}"
        )
    if bias.data.shape != (weight.data.shape[0],):
        raise ShapeMismatch("linear: bias shape mismatch")
    x64 = x.data.astype(np.float64)
    w64 = weight.data.astype(np.float64)
    out = _node((x64 @ w64.T + bias.data.astype(np.float64)).astype(np.float32), (x, weight, bias))
    if out.requires_grad:

        def bw(g, gmap):
            g64 = g.astype(np.float64)
            if x.requires_grad:
                _contribute(gmap, x, (g64 @ w64).astype(np.float32))
            if weight.requires_grad:
                _contribute(gmap, weight, (g64.T @ x64).astype(np.float32))
            if bias.requires_grad:
                _contribute(gmap, bias, g64.sum(axis=0).astype(np.float32))

        out._backward = bw
    return out


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-softmax of the labeled class, log-sum-exp safe."""
    if logits.data.ndim != 2:
        raise ShapeMismatch("cross_entropy expects (N, classes) logits")
    n, c = logits.data.shape
    if n < 1:
        raise ShapeMismatch("cross_entropy needs at least one row")
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ShapeMismatch(f"cross_entropy: labels shape {labels.shape} != ({n},)")
    if labels.dtype.kind not in "iu" or labels.min() < 0 or labels.max() >= c:
        raise BadLabel(f"labels must be ints in [0, {c})")
    z = logits.data.astype(np.float64)
    m = z.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(z - m).sum(axis=1))
    loss = (lse - z[np.arange(n), labels]).mean()
    out = _node(np.float32(loss), (logits,))
    if out.requires_grad:
        soft = np.exp(z - lse[:, None])

        def bw(g, gmap):
            gl = soft.copy()
            gl[np.arange(n), labels] -= 1.0
            _contribute(gmap, logits, (gl * (float(g) / n)).astype(np.float32))

        out._backward = bw
    return out


def pick(x: Tensor, index: tuple) -> Tensor:
    """Select one element as a scalar node (e.g. one logit for Grad-CAM)."""
    val = x.data[index]
    if np.ndim(val) != 0:
        raise ShapeMismatch(f"pick: index {index} does not select a single element")
    out = _node(np.float32(val), (x,))
    if out.requires_grad:

        def bw(g, gmap):
            gx = np.zeros_like(x.data)
            gx[index] = g
            _contribute(gmap, x, gx)

        out._backward = bw
    return out
