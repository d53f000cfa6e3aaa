"""Hot-loop kernels with two interchangeable backends.

The numba backend JIT-compiles the conv/pool loops; the numpy backend is a
vectorized fallback with identical forward semantics (bit-identical f64
results). Selection order:

  1. env var GRADMASK_BACKEND=numba|numpy, if set;
  2. numba when importable, else numpy.

`set_backend()` switches at runtime (used by tests and the benchmark).
"""

import os

from . import numpy_backend

_KERNEL_NAMES = (
    "conv2d_forward",
    "conv2d_backward_x",
    "conv2d_backward_w",
    "maxpool2x2_forward",
    "maxpool2x2_backward",
)

try:
    from . import numba_backend

    _HAS_NUMBA = True
except ImportError:
    numba_backend = None
    _HAS_NUMBA = False

_BACKENDS = {"numpy": numpy_backend}
if _HAS_NUMBA:
    _BACKENDS["numba"] = numba_backend

_active_name = None
_active = None


def available_backends():
    return tuple(sorted(_BACKENDS))


def backend_name():
    return _active_name


def set_backend(name):
    """Select the kernel backend by name ('numba' or 'numpy')."""
    global _active_name, _active
    if name not in _BACKENDS:
        raise ValueError(
            f"unknown kernel backend {name!r}; available: {available_backends()}"
        )
    _active_name = name
    _active = _BACKENDS[name]
    return name


def _default_backend():
    env = os.environ.get("GRADMASK_BACKEND", "").strip().lower()
    if env:
        if env not in _BACKENDS:
            raise ValueError(
                f"GRADMASK_BACKEND={env!r} not available; choices: {available_backends()}"
            )
        return env
    return "numba" if _HAS_NUMBA else "numpy"


set_backend(_default_backend())


def conv2d_forward(xp, w, b):
    return _active.conv2d_forward(xp, w, b)


def conv2d_backward_x(g, w, hp, wp):
    return _active.conv2d_backward_x(g, w, hp, wp)


def conv2d_backward_w(g, xp, k):
    return _active.conv2d_backward_w(g, xp, k)


def maxpool2x2_forward(x):
    return _active.maxpool2x2_forward(x)


def maxpool2x2_backward(g, idx, h, wd):
    return _active.maxpool2x2_backward(g, idx, h, wd)
