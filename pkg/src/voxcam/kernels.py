"""Compiled inner loops for 3D convolution.

The forward kernels accumulate every output element in float64, visiting
kernel taps in (ci, kd, kh, kw) order. That order is part of the op's
contract: outputs must equal a brute-force nested-loop reference bitwise,
so no fastmath and no reassociation is allowed on the forward path.

Backward kernels only feed gradient checks with finite-difference
tolerances, so they may reassociate. fastmath buys SIMD reductions while
staying bitwise reproducible run to run on one machine (fixed code, single
thread).

Two forward loop orders exist for speed only. Wide spatial maps vectorize
over contiguous output rows; deep narrow maps (late ResNet stages) would
leave 2-4 lane rows, so they vectorize over the channel axis instead,
using channel-last copies. Both visit taps in the identical order per
output element, hence produce identical bits.
"""

import numpy as np
from numba import njit

__all__ = [
    "conv_fwd_rows",
    "conv_fwd_cl",
    "conv_bwd_w_rows",
    "conv_bwd_w_cl",
    "conv_bwd_x",
]


@njit(cache=True)
def conv_fwd_rows(xp, xe, xo, w, bias, sD, sH, sW, out, cob):
    """Row-vectorized path.

    xp is the zero-padded input (N, Cin, Dp, Hp, Wp). For sW == 2 the
    caller supplies even/odd W-phase copies xe, xo so inner rows stay
    contiguous; for sW == 1 they alias xp and are unused.
    """
    N, Cin, Dp, Hp, Wp = xp.shape
    Cout, _, kD, kH, kW = w.shape
    _, _, Do, Ho, Wo = out.shape
    acc = np.empty((cob, Ho, Wo), np.float64)
    for n in range(N):
        co0 = 0
        while co0 < Cout:
            cb = min(cob, Cout - co0)
            for od in range(Do):
                for c in range(cb):
                    for oh in range(Ho):
                        for ow in range(Wo):
                            acc[c, oh, ow] = 0.0
                for ci in range(Cin):
                    for kd in range(kD):
                        idp = od * sD + kd
                        for kh in range(kH):
                            for kw in range(kW):
                                for c in range(cb):
                                    wv = np.float64(w[co0 + c, ci, kd, kh, kw])
                                    arow2 = acc[c]
                                    for oh in range(Ho):
                                        ihp = oh * sH + kh
                                        arow = arow2[oh]
                                        if sW == 1:
                                            xrow = xp[n, ci, idp, ihp, kw:kw + Wo]
                                            for ow in range(Wo):
                                                arow[ow] += wv * np.float64(xrow[ow])
                                        elif sW == 2:
                                            off = kw >> 1
                                            if kw & 1 == 0:
                                                xrow = xe[n, ci, idp, ihp, off:off + Wo]
                                            else:
                                                xrow = xo[n, ci, idp, ihp, off:off + Wo]
                                            for ow in range(Wo):
                                                arow[ow] += wv * np.float64(xrow[ow])
                                            # strides are contract-limited to {1, 2}
                for c in range(cb):
                    b = np.float64(bias[co0 + c])
                    for oh in range(Ho):
                        for ow in range(Wo):
                            out[n, co0 + c, od, oh, ow] = np.float32(acc[c, oh, ow] + b)
            co0 += cb


@njit(cache=True)
def conv_fwd_cl(xT, wT, bias, sD, sH, sW, outT):
    """Channel-last path: xT (N,Dp,Hp,Wp,Cin), wT (Cin,kD,kH,kW,Cout),
    outT (N,Do,Ho,Wo,Cout)."""
    N, Dp, Hp, Wp, Cin = xT.shape
    _, kD, kH, kW, Cout = wT.shape
    _, Do, Ho, Wo, _ = outT.shape
    acc = np.empty(Cout, np.float64)
    for n in range(N):
        for od in range(Do):
            for oh in range(Ho):
                for ow in range(Wo):
                    for c in range(Cout):
                        acc[c] = 0.0
                    for ci in range(Cin):
                        for kd in range(kD):
                            idp = od * sD + kd
                            for kh in range(kH):
                                ihp = oh * sH + kh
                                for kw in range(kW):
                                    xv = np.float64(xT[n, idp, ihp, ow * sW + kw, ci])
                                    wrow = wT[ci, kd, kh, kw]
                                    for c in range(Cout):
                                        acc[c] += xv * np.float64(wrow[c])
                    for c in range(Cout):
                        outT[n, od, oh, ow, c] = np.float32(acc[c] + np.float64(bias[c]))


@njit(cache=True, fastmath=True)
def conv_bwd_w_rows(xp, xe, xo, gout, sD, sH, sW, gw, gb):
    N, Cin, Dp, Hp, Wp = xp.shape
    Cout, _, kD, kH, kW = gw.shape
    _, _, Do, Ho, Wo = gout.shape
    for co in range(Cout):
        bacc = 0.0
        for n in range(N):
            for od in range(Do):
                for oh in range(Ho):
                    grow = gout[n, co, od, oh]
                    for ow in range(Wo):
                        bacc += np.float64(grow[ow])
        gb[co] = np.float32(bacc)
        for ci in range(Cin):
            for kd in range(kD):
                for kh in range(kH):
                    for kw in range(kW):
                        acc = 0.0
                        for n in range(N):
                            for od in range(Do):
                                idp = od * sD + kd
                                for oh in range(Ho):
                                    ihp = oh * sH + kh
                                    grow = gout[n, co, od, oh]
                                    if sW == 1:
                                        xrow = xp[n, ci, idp, ihp, kw:kw + Wo]
                                        for ow in range(Wo):
                                            acc += np.float64(grow[ow]) * np.float64(xrow[ow])
                                    elif sW == 2:
                                        off = kw >> 1
                                        if kw & 1 == 0:
                                            xrow = xe[n, ci, idp, ihp, off:off + Wo]
                                        else:
                                            xrow = xo[n, ci, idp, ihp, off:off + Wo]
                                        for ow in range(Wo):
                                            acc += np.float64(grow[ow]) * np.float64(xrow[ow])
                        gw[co, ci, kd, kh, kw] = np.float32(acc)


@njit(cache=True, fastmath=True)
def conv_bwd_w_cl(xT, goutT, sD, sH, sW, gwT, gb64):
    """gwT (Cin,kD,kH,kW,Cout) float64, gb64 (Cout,) float64; caller casts."""
    N, Dp, Hp, Wp, Cin = xT.shape
    _, kD, kH, kW, Cout = gwT.shape
    _, Do, Ho, Wo, _ = goutT.shape
    for n in range(N):
        for od in range(Do):
            for oh in range(Ho):
                for ow in range(Wo):
                    grow = goutT[n, od, oh, ow]
                    for c in range(Cout):
                        gb64[c] += np.float64(grow[c])
                    for ci in range(Cin):
                        for kd in range(kD):
                            idp = od * sD + kd
                            for kh in range(kH):
                                ihp = oh * sH + kh
                                for kw in range(kW):
                                    xv = np.float64(xT[n, idp, ihp, ow * sW + kw, ci])
                                    row = gwT[ci, kd, kh, kw]
                                    for c in range(Cout):
                                        row[c] += xv * np.float64(grow[c])


@njit(cache=True, fastmath=True)
def conv_bwd_x(goutT, wT, sD, sH, sW, pD, pH, pW, gx):
    """Gradient w.r.t. the unpadded input, gather form.

    goutT (N,Do,Ho,Wo,Cout) and wT (Cin,kD,kH,kW,Cout) are channel-last
    copies so the inner dot runs over a contiguous axis.
    """
    N, Cin, D, H, W = gx.shape
    _, kD, kH, kW, Cout = wT.shape
    _, Do, Ho, Wo, _ = goutT.shape
    for n in range(N):
        for ci in range(Cin):
            for idx in range(D):
                for ih in range(H):
                    for iw in range(W):
                        acc = 0.0
                        for kd in range(kD):
                            odn = idx + pD - kd
                            if odn < 0 or odn % sD != 0:
                                continue
                            od = odn // sD
                            if od >= Do:
                                continue
                            for kh in range(kH):
                                ohn = ih + pH - kh
                                if ohn < 0 or ohn % sH != 0:
                                    continue
                                oh = ohn // sH
                                if oh >= Ho:
                                    continue
                                for kw in range(kW):
                                    own = iw + pW - kw
                                    if own < 0 or own % sW != 0:
                                        continue
                                    ow = own // sW
                                    if ow >= Wo:
                                        continue
                                    grow = goutT[n, od, oh, ow]
                                    wrow = wT[ci, kd, kh, kw]
                                    s = 0.0
                                    for c in range(Cout):
                                        s += np.float64(grow[c]) * np.float64(wrow[c])
                                    acc += s
                        gx[n, ci, idx, ih, iw] = np.float32(acc)
