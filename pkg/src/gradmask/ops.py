"""Primitive differentiable ops.

Each op validates shapes, computes its value with numpy (conv/pool via the
selected kernel backend), and, when a tape is active, records a backward
closure. Closures take (upstream_grad, needed_flags) and return one
contribution per input, or None where the flag says the partial is unused.
"""

import numpy as np

from . import kernels
from .errors import DomainError, ShapeError
from .tensor import Tensor, active_tape

_CONV_KERNEL = 3  # stride 1, padding 1, 3x3 only: exactly what the models need


def _tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def add(a, b):
    a, b = _tensor(a), _tensor(b)
    if a.shape != b.shape:
        raise ShapeError("add", a.shape, b.shape)
    out = Tensor(a.data + b.data)
    tape = active_tape()
    if tape is not None:
        def backward(g, needed):
            return (g if needed[0] else None, g if needed[1] else None)

        tape.record("add", (a, b), out, backward)
    return out


def subtract(a, b):
    a, b = _tensor(a), _tensor(b)
    if a.shape != b.shape:
        raise ShapeError("subtract", a.shape, b.shape)
    out = Tensor(a.data - b.data)
    tape = active_tape()
    if tape is not None:
        def backward(g, needed):
            return (g if needed[0] else None, -g if needed[1] else None)

        tape.record("subtract", (a, b), out, backward)
    return out


def multiply(a, b):
    a, b = _tensor(a), _tensor(b)
    if a.shape != b.shape:
        raise ShapeError("multiply", a.shape, b.shape)
    out = Tensor(a.data * b.data)
    tape = active_tape()
    if tape is not None:
        ad, bd = a.data, b.data

        def backward(g, needed):
            return (g * bd if needed[0] else None, g * ad if needed[1] else None)

        tape.record("multiply", (a, b), out, backward)
    return out


def scale(a, s):
    a = _tensor(a)
    s = float(s)
    out = Tensor(a.data * s)
    tape = active_tape()
    if tape is not None:
        def backward(g, needed):
            return (g * s if needed[0] else None,)

        tape.record("scale", (a,), out, backward)
    return out


def matmul(a, b):
    a, b = _tensor(a), _tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    out = Tensor(a.data @ b.data)
    tape = active_tape()
    if tape is not None:
        ad, bd = a.data, b.data

        def backward(g, needed):
            ga = g @ bd.T if needed[0] else None
            gb = ad.T @ g if needed[1] else None
            return (ga, gb)

        tape.record("matmul", (a, b), out, backward)
    return out


def bias_add(x, b):
    """(B, N) + (N,) row-vector bias; the one broadcast the models need."""
    x, b = _tensor(x), _tensor(b)
    if x.ndim != 2 or b.ndim != 1 or x.shape[1] != b.shape[0]:
        raise ShapeError("bias_add", x.shape, b.shape)
    out = Tensor(x.data + b.data[None, :])
    tape = active_tape()
    if tape is not None:
        def backward(g, needed):
            gx = g if needed[0] else None
            gb = g.sum(axis=0) if needed[1] else None
            return (gx, gb)

        tape.record("bias_add", (x, b), out, backward)
    return out


def conv2d(x, w, b):
    """3x3 convolution, stride 1, zero padding 1. x: (B,Ci,H,W), w: (Co,Ci,3,3)."""
    x, w, b = _tensor(x), _tensor(w), _tensor(b)
    if x.ndim != 4 or w.ndim != 4 or b.ndim != 1:
        raise ShapeError("conv2d", x.shape, w.shape, b.shape)
    bsz, ci, h, wid = x.shape
    co, ci_w, k, k2 = w.shape
    if k != _CONV_KERNEL or k2 != _CONV_KERNEL:
        raise ShapeError("conv2d", w.shape, detail="only 3x3 kernels supported")
    if ci_w != ci or b.shape[0] != co:
        raise ShapeError("conv2d", x.shape, w.shape, b.shape)
    xp = np.zeros((bsz, ci, h + 2, wid + 2), dtype=np.float64)
    xp[:, :, 1:-1, 1:-1] = x.data
    out = Tensor(kernels.conv2d_forward(xp, w.data, b.data))
    tape = active_tape()
    if tape is not None:
        w_arr = w.data

        def backward(g, needed):
            g = np.ascontiguousarray(g)
            gx = None
            if needed[0]:
                gxp = kernels.conv2d_backward_x(g, w_arr, h + 2, wid + 2)
                gx = np.ascontiguousarray(gxp[:, :, 1:-1, 1:-1])
            gw = kernels.conv2d_backward_w(g, xp, k) if needed[1] else None
            gb = g.sum(axis=(0, 2, 3)) if needed[2] else None
            return (gx, gw, gb)

        tape.record("conv2d", (x, w, b), out, backward)
    return out


def maxpool2x2(x):
    """2x2 max pooling, stride 2; gradients route to the first max per window."""
    x = _tensor(x)
    if x.ndim != 4 or x.shape[2] % 2 or x.shape[3] % 2:
        raise ShapeError("maxpool2x2", x.shape, detail="needs 4-D input, even H and W")
    h, wd = x.shape[2], x.shape[3]
    out_data, idx = kernels.maxpool2x2_forward(x.data)
    out = Tensor(out_data)
    tape = active_tape()
    if tape is not None:
        def backward(g, needed):
            if not needed[0]:
                return (None,)
            return (kernels.maxpool2x2_backward(np.ascontiguousarray(g), idx, h, wd),)

        tape.record("maxpool2x2", (x,), out, backward)
    return out


def relu(x):
    x = _tensor(x)
    out = Tensor(np.maximum(x.data, 0.0))
    tape = active_tape()
    if tape is not None:
        mask = x.data > 0.0

        def backward(g, needed):
            return (g * mask if needed[0] else None,)

        tape.record("relu", (x,), out, backward)
    return out


def _stable_sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(x):
    x = _tensor(x)
    out = Tensor(_stable_sigmoid(x.data))
    tape = active_tape()
    if tape is not None:
        od = out.data

        def backward(g, needed):
            return (g * od * (1.0 - od) if needed[0] else None,)

        tape.record("sigmoid", (x,), out, backward)
    return out


def tanh(x):
    x = _tensor(x)
    out = Tensor(np.tanh(x.data))
    tape = active_tape()
    if tape is not None:
        od = out.data

        def backward(g, needed):
            return (g * (1.0 - od * od) if needed[0] else None,)

        tape.record("tanh", (x,), out, backward)
    return out


def log(x):
    x = _tensor(x)
    lo = x.data.min() if x.size else 1.0
    if not lo > 0.0:
        raise DomainError("log", f"non-positive input (min={lo!r}); pre-stabilize")
    out = Tensor(np.log(x.data))
    tape = active_tape()
    if tape is not None:
        xd = x.data

        def backward(g, needed):
            return (g / xd if needed[0] else None,)

        tape.record("log", (x,), out, backward)
    return out


def exp(x):
    x = _tensor(x)
    out = Tensor(np.exp(x.data))
    tape = active_tape()
    if tape is not None:
        od = out.data

        def backward(g, needed):
            return (g * od if needed[0] else None,)

        tape.record("exp", (x,), out, backward)
    return out


def sum_(x, axis=None):
    x = _tensor(x)
    out = Tensor(x.data.sum(axis=axis))
    tape = active_tape()
    if tape is not None:
        shape = x.shape

        def backward(g, needed):
            if not needed[0]:
                return (None,)
            if axis is None:
                return (np.full(shape, float(g), dtype=np.float64),)
            return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

        tape.record("sum", (x,), out, backward)
    return out


def softmax(x):
    """Softmax along the last axis, stabilized by max subtraction."""
    x = _tensor(x)
    if x.ndim < 1:
        raise ShapeError("softmax", x.shape)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = Tensor(e / e.sum(axis=-1, keepdims=True))
    tape = active_tape()
    if tape is not None:
        od = out.data

        def backward(g, needed):
            if not needed[0]:
                return (None,)
            dot = (g * od).sum(axis=-1, keepdims=True)
            return ((g - dot) * od,)

        tape.record("softmax", (x,), out, backward)
    return out


def log_softmax(x):
    """log(softmax(x)) along the last axis, fused for stability.

    Unlike log(softmax(x)) this never produces -inf from underflowed
    probabilities: the result is z - logsumexp(z), finite for finite input.
    """
    x = _tensor(x)
    if x.ndim < 1:
        raise ShapeError("log_softmax", x.shape)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = Tensor(z - lse)
    tape = active_tape()
    if tape is not None:
        p = np.exp(out.data)

        def backward(g, needed):
            if not needed[0]:
                return (None,)
            return (g - p * g.sum(axis=-1, keepdims=True),)

        tape.record("log_softmax", (x,), out, backward)
    return out


def dropout_apply(x, mask):
    """Multiply by a precomputed inverted-scaling mask (plain ndarray)."""
    x = _tensor(x)
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != x.shape:
        raise ShapeError("dropout_apply", x.shape, mask.shape)
    out = Tensor(x.data * mask)
    tape = active_tape()
    if tape is not None:
        def backward(g, needed):
            return (g * mask if needed[0] else None,)

        tape.record("dropout_apply", (x,), out, backward)
    return out


def clip(x, lo, hi):
    """Elementwise clamp; gradient passes only where the value was unchanged."""
    x = _tensor(x)
    lo, hi = float(lo), float(hi)
    if not lo < hi:
        raise DomainError("clip", f"empty interval [{lo}, {hi}]")
    out = Tensor(np.clip(x.data, lo, hi))
    tape = active_tape()
    if tape is not None:
        mask = (x.data >= lo) & (x.data <= hi)

        def backward(g, needed):
            return (g * mask if needed[0] else None,)

        tape.record("clip", (x,), out, backward)
    return out


def reshape(x, shape):
    x = _tensor(x)
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != x.size:
        raise ShapeError("reshape", x.shape, shape)
    out = Tensor(x.data.reshape(shape))
    tape = active_tape()
    if tape is not None:
        old = x.shape

        def backward(g, needed):
            return (g.reshape(old) if needed[0] else None,)

        tape.record("reshape", (x,), out, backward)
    return out


# operator sugar on Tensor delegates here
from .tensor import _OPS  # noqa: E402

_OPS.update(
    add=add, subtract=subtract, multiply=multiply, scale=scale, matmul=matmul
)
