"""Pure-numpy kernels for conv2d and 2x2 max pooling.

Forward conv accumulates shifted slices in (in_ch, ky, kx) order with the bias
added last, so every output element sees the exact same f64 addition sequence
as a naive quadruple loop. Backward kernels carry no such ordering contract
(they are validated against finite differences).
"""

import numpy as np


def conv2d_forward(xp, w, b):
    """xp is the zero-padded input (B, Ci, H+2, W+2); returns (B, Co, H, W)."""
    bsz, ci_n, hp, wp = xp.shape
    co_n, _, k, _ = w.shape
    h, wd = hp - k + 1, wp - k + 1
    out = np.zeros((bsz, co_n, h, wd), dtype=np.float64)
    for ci in range(ci_n):
        for ky in range(k):
            for kx in range(k):
                out += (
                    xp[:, None, ci, ky : ky + h, kx : kx + wd]
                    * w[None, :, ci, ky, kx, None, None]
                )
    out += b[None, :, None, None]
    return out


def conv2d_backward_x(g, w, hp, wp):
    """Gradient wrt the padded input buffer; caller crops the padding ring."""
    bsz = g.shape[0]
    co_n, ci_n, k, _ = w.shape
    h, wd = g.shape[2], g.shape[3]
    gxp = np.zeros((bsz, ci_n, hp, wp), dtype=np.float64)
    for ci in range(ci_n):
        for ky in range(k):
            for kx in range(k):
                gxp[:, ci, ky : ky + h, kx : kx + wd] += np.tensordot(
                    g, w[:, ci, ky, kx], axes=([1], [0])
                )
    return gxp


def conv2d_backward_w(g, xp, k):
    bsz, co_n, h, wd = g.shape
    ci_n = xp.shape[1]
    gw = np.empty((co_n, ci_n, k, k), dtype=np.float64)
    for ky in range(k):
        for kx in range(k):
            gw[:, :, ky, kx] = np.tensordot(
                g, xp[:, :, ky : ky + h, kx : kx + wd], axes=([0, 2, 3], [0, 2, 3])
            )
    return gw


def maxpool2x2_forward(x):
    """Returns (pooled, idx); idx in 0..3 encodes dy*2+dx of the first max."""
    bsz, c, h, wd = x.shape
    ho, wo = h // 2, wd // 2
    win = (
        x.reshape(bsz, c, ho, 2, wo, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(bsz, c, ho, wo, 4)
    )
    idx = win.argmax(axis=-1).astype(np.uint8)  # argmax keeps the first max
    out = np.take_along_axis(win, idx[..., None].astype(np.intp), axis=-1)[..., 0]
    return np.ascontiguousarray(out), idx


def maxpool2x2_backward(g, idx, h, wd):
    bsz, c, ho, wo = g.shape
    gwin = np.zeros((bsz, c, ho, wo, 4), dtype=np.float64)
    np.put_along_axis(gwin, idx[..., None].astype(np.intp), g[..., None], axis=-1)
    gx = (
        gwin.reshape(bsz, c, ho, wo, 2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(bsz, c, h, wd)
    )
    return np.ascontiguousarray(gx)
