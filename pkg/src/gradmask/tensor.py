"""Reverse-mode autodiff on f64 numpy buffers.

A Tape is rebuilt for every forward pass (define-by-run). Ops executed while a
tape is active append one record each, so the record list is already a
topological order and a single reversed sweep computes every gradient. All
values are float64; gradient masking analysis depends on tiny-but-real
gradients staying distinguishable from round-off.
"""

import threading

import numpy as np


class Tensor:
    """Immutable-by-convention wrapper around a C-contiguous f64 ndarray."""

    __slots__ = ("data",)

    def __init__(self, data):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return self.data.item()

    def __repr__(self):
        return f"Tensor(shape={self.shape})"

    # ops.py fills these in at import time to avoid a circular import
    def __add__(self, other):
        return _OPS["add"](self, other)

    def __sub__(self, other):
        return _OPS["subtract"](self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return _OPS["scale"](self, float(other))
        return _OPS["multiply"](self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return _OPS["scale"](self, -1.0)

    def __matmul__(self, other):
        return _OPS["matmul"](self, other)


_OPS = {}

_tls = threading.local()


def _stack():
    if not hasattr(_tls, "tapes"):
        _tls.tapes = []
    return _tls.tapes


def active_tape():
    """The innermost tape on this thread, or None when nothing records."""
    st = _stack()
    return st[-1] if st else None


class _Record:
    __slots__ = ("op", "out", "inputs", "backward")

    def __init__(self, op, out, inputs, backward):
        self.op = op
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Append-only op record for one forward pass.

    Several tapes over a shared read-only parameter set may run concurrently
    (one per thread); node ids live in the tape, never on the tensors.
    """

    def __init__(self):
        self._node_of = {}  # id(tensor) -> node, with the tensor kept alive below
        self._tensors = []
        self._records = []

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _stack().pop()
        assert popped is self
        return False

    def watch(self, tensor):
        """Register a leaf so its gradient can be asked for later."""
        self._ensure_node(tensor)
        return tensor

    def _ensure_node(self, tensor):
        key = id(tensor)
        node = self._node_of.get(key)
        if node is None:
            node = len(self._tensors)
            self._node_of[key] = node
            self._tensors.append(tensor)
        return node

    def node_of(self, tensor):
        node = self._node_of.get(id(tensor))
        if node is None:
            raise KeyError("tensor was never recorded on this tape")
        return node

    def record(self, op, inputs, out, backward):
        in_nodes = tuple(self._ensure_node(t) for t in inputs)
        out_node = self._ensure_node(out)
        self._records.append(_Record(op, out_node, in_nodes, backward))

    def backward(self, loss, wrt=None):
        """One reverse sweep from a scalar loss; returns Gradients.

        With `wrt` (an iterable of tensors) only records on paths from those
        tensors to the loss are evaluated, and per-input need flags let heavy
        ops skip unneeded partials. Gradients for nodes the sweep never
        reaches read back as zeros.
        """
        if loss.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        loss_node = self.node_of(loss)
        n = len(self._tensors)

        if wrt is None:
            relevant = None
        else:
            relevant = np.zeros(n, dtype=bool)
            for t in wrt:
                relevant[self.node_of(t)] = True
            for rec in self._records:
                if any(relevant[i] for i in rec.inputs):
                    relevant[rec.out] = True

        grads = [None] * n
        grads[loss_node] = np.ones_like(loss.data)
        for rec in reversed(self._records):
            g = grads[rec.out]
            if g is None:
                continue
            if relevant is None:
                needed = (True,) * len(rec.inputs)
            else:
                needed = tuple(bool(relevant[i]) for i in rec.inputs)
                if not any(needed):
                    continue
            contribs = rec.backward(g, needed)
            for node, contrib in zip(rec.inputs, contribs):
                if contrib is None:
                    continue
                if grads[node] is None:
                    grads[node] = contrib
                else:
                    # out-of-place: contribs may alias upstream buffers
                    grads[node] = grads[node] + contrib
        return Gradients(self, grads)


class Gradients:
    """Per-node gradients from one backward sweep, indexed by tensor."""

    def __init__(self, tape, grads):
        self._tape = tape
        self._grads = grads

    def __getitem__(self, tensor):
        node = self._tape.node_of(tensor)
        g = self._grads[node]
        if g is None:
            return np.zeros_like(tensor.data)
        return g


def finite_difference_grad(f, x, h=1e-6):
    """Central-difference gradient of a scalar function of one ndarray.

    The independent oracle for every backward rule: O(2 * x.size) evaluations
    of f, no autodiff involved.
    """
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = g.ravel()
    for i in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp.flat[i] += h
        xm.flat[i] -= h
        flat[i] = (f(xp) - f(xm)) / (2.0 * h)
    return g
