"""Numba @njit kernels for conv2d and 2x2 max pooling.

The forward conv keeps the per-element accumulation order (in_ch, ky, kx) with
bias added last; without fastmath LLVM neither reassociates nor fuses f64
arithmetic, so the result is bit-identical to a naive quadruple loop (the inner
x loop only vectorizes across independent output elements). The weight-gradient
kernel does enable fastmath: it is a pure reduction with no ordering contract
and is checked against finite differences, not a reference loop.
"""

import numpy as np
from numba import njit


@njit(cache=True, nogil=True)
def conv2d_forward(xp, w, b):
    bsz, ci_n, hp, wp = xp.shape
    co_n, _, k, _ = w.shape
    h = hp - k + 1
    wd = wp - k + 1
    out = np.zeros((bsz, co_n, h, wd), dtype=np.float64)
    for n in range(bsz):
        for co in range(co_n):
            for ci in range(ci_n):
                for ky in range(k):
                    for kx in range(k):
                        wv = w[co, ci, ky, kx]
                        for y in range(h):
                            for x in range(wd):
                                out[n, co, y, x] += wv * xp[n, ci, y + ky, x + kx]
            for y in range(h):
                for x in range(wd):
                    out[n, co, y, x] += b[co]
    return out


@njit(cache=True, nogil=True)
def conv2d_backward_x(g, w, hp, wp):
    bsz, co_n, h, wd = g.shape
    ci_n = w.shape[1]
    k = w.shape[2]
    gxp = np.zeros((bsz, ci_n, hp, wp), dtype=np.float64)
    for n in range(bsz):
        for co in range(co_n):
            for ci in range(ci_n):
                for ky in range(k):
                    for kx in range(k):
                        wv = w[co, ci, ky, kx]
                        for y in range(h):
                            for x in range(wd):
                                gxp[n, ci, y + ky, x + kx] += wv * g[n, co, y, x]
    return gxp


@njit(cache=True, nogil=True, fastmath=True)
def conv2d_backward_w(g, xp, k):
    bsz, co_n, h, wd = g.shape
    ci_n = xp.shape[1]
    gw = np.zeros((co_n, ci_n, k, k), dtype=np.float64)
    for n in range(bsz):
        for co in range(co_n):
            for ci in range(ci_n):
                for ky in range(k):
                    for kx in range(k):
                        acc = 0.0
                        for y in range(h):
                            for x in range(wd):
                                acc += g[n, co, y, x] * xp[n, ci, y + ky, x + kx]
                        gw[co, ci, ky, kx] += acc
    return gw


@njit(cache=True, nogil=True)
def maxpool2x2_forward(x):
    bsz, c, h, wd = x.shape
    ho = h // 2
    wo = wd // 2
    out = np.empty((bsz, c, ho, wo), dtype=np.float64)
    idx = np.empty((bsz, c, ho, wo), dtype=np.uint8)
    for n in range(bsz):
        for ch in range(c):
            for y in range(ho):
                for xx in range(wo):
                    # scan order (0,0),(0,1),(1,0),(1,1); strict > keeps first max
                    best = x[n, ch, 2 * y, 2 * xx]
                    bi = 0
                    v = x[n, ch, 2 * y, 2 * xx + 1]
                    if v > best:
                        best = v
                        bi = 1
                    v = x[n, ch, 2 * y + 1, 2 * xx]
                    if v > best:
                        best = v
                        bi = 2
                    v = x[n, ch, 2 * y + 1, 2 * xx + 1]
                    if v > best:
                        best = v
                        bi = 3
                    out[n, ch, y, xx] = best
                    idx[n, ch, y, xx] = bi
    return out, idx


@njit(cache=True, nogil=True)
def maxpool2x2_backward(g, idx, h, wd):
    bsz, c, ho, wo = g.shape
    gx = np.zeros((bsz, c, h, wd), dtype=np.float64)
    for n in range(bsz):
        for ch in range(c):
            for y in range(ho):
                for xx in range(wo):
                    j = idx[n, ch, y, xx]
                    gx[n, ch, 2 * y + j // 2, 2 * xx + j % 2] += g[n, ch, y, xx]
    return gx
