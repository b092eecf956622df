"""Reverse-mode automatic differentiation on a flat operation tape.

Values hold a data array and a gradient array of identical shape.  Ops
append backward closures to a Tape during the forward pass; Tape.backward
seeds the root gradient and replays the closures in reverse, accumulating
into Value.grad.  Gradients are accumulated with +=, so a Value used by
several ops collects contributions from all of them; call zero_grad (or a
net's zero_grad) between steps.

All ops accept plain ndarrays in place of Values for inputs that need no
gradient; such inputs get no backward record.
"""

from __future__ import annotations

import itertools

import numpy as np

__all__ = [
    "Value",
    "Tape",
    "BatchNormState",
    "backward",
    "dense",
    "leaky_relu",
    "batchnorm",
    "dropout",
    "mean_pool_rows",
    "compensated_colmean",
    "reshape",
    "stack_columns",
    "abs_diff",
    "mean_all",
    "add",
    "mul",
    "affine_const",
    "softplus",
    "outer_sub",
    "gather",
]

_node_counter = itertools.count()


class Value:
    """A tape node: data plus a same-shape gradient buffer.

    The gradient buffer materializes (as zeros) on first access, so forward
    passes whose tape is never replayed allocate no gradient storage.  For
    network parameters an explicit grad view into the owner's flat buffer is
    passed in, so vectorized optimizer updates see accumulation directly.
    """

    __slots__ = ("data", "_grad", "node_id")

    def __init__(self, data, grad=None, node_id=None):
        self.data = np.asarray(data)
        if grad is not None and grad.shape != self.data.shape:
            raise ValueError(
                f"grad shape {grad.shape} does not match data shape {self.data.shape}"
            )
        self._grad = grad
        self.node_id = next(_node_counter) if node_id is None else node_id

    @property
    def grad(self):
        g = self._grad
        if g is None:
            g = self._grad = np.zeros_like(self.data)
        return g

    @grad.setter
    def grad(self, g):
        self._grad = g

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self):
        if self._grad is not None:
            self._grad[...] = 0.0

    def __repr__(self):
        return f"Value(shape={self.data.shape}, node_id={self.node_id})"


class Tape:
    """Ordered record of forward ops, replayed in reverse for gradients."""

    def __init__(self):
        self._records = []

    def __len__(self):
        return len(self._records)

    def record(self, out, backfn):
        self._records.append((out, backfn))

    def backward(self, root):
        """Seed root.grad with 1 and replay all records in reverse."""
        if root.data.size != 1:
            raise ValueError(f"backward root must be scalar, got shape {root.data.shape}")
        root.grad[...] = 1.0
        for _, backfn in reversed(self._records):
            backfn()

    def clear(self):
        self._records.clear()


def backward(tape, root):
    """Run reverse-mode accumulation for the graph recorded on tape."""
    tape.backward(root)


# -- helpers ---------------------------------------------------------------


def _data(x):
    return x.data if isinstance(x, Value) else np.asarray(x)


def _unbroadcast(g, shape):
    # Reduce a broadcast gradient back to the operand's shape.
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def compensated_colmean(a):
    """Column means of a (N, Q) array via blocked compensated summation.

    Rows are pre-reduced in blocks of 16 with numpy's pairwise summation,
    then the block sums are combined with Kahan compensation.  Error stays
    O(machine eps) independent of N.
    """
    a = np.asarray(a)
    n = a.shape[0]
    block = 16
    total = np.zeros(a.shape[1:], dtype=a.dtype)
    comp = np.zeros_like(total)
    for start in range(0, n, block):
        part = np.add.reduce(a[start : start + block], axis=0)
        y = part - comp
        t = total + y
        comp = (t - total) - y
        total = t
    return total / n


# -- ops -------------------------------------------------------------------


def dense(tape, x, w, b):
    """Affine layer: out = x @ w + b for x (N, D), w (D, H), b (H,)."""
    xd, wd, bd = _data(x), w.data, b.data
    if xd.ndim != 2 or wd.ndim != 2 or xd.shape[1] != wd.shape[0]:
        raise ValueError(f"dense shape mismatch: x {xd.shape} vs w {wd.shape}")
    if bd.shape != (wd.shape[1],):
        raise ValueError(f"dense bias shape {bd.shape} does not match w {wd.shape}")
    out_data = xd @ wd
    out_data += bd
    out = Value(out_data)

    def backfn():
        g = out.grad
        w.grad += xd.T @ g
        b.grad += g.sum(axis=0)
        if isinstance(x, Value):
            x.grad += g @ wd.T

    tape.record(out, backfn)
    return out


def leaky_relu(tape, x, slope=0.01):
    """Elementwise max(x, slope * x); slope=0 gives a plain rectifier."""
    xd = _data(x)
    out = Value(np.where(xd >= 0, xd, slope * xd))

    def backfn():
        if isinstance(x, Value):
            x.grad += out.grad * np.where(xd >= 0, 1.0, slope)

    tape.record(out, backfn)
    return out


class BatchNormState:
    """Running statistics for one batchnorm layer."""

    def __init__(self, width, eps=1e-5, momentum=0.9, dtype=np.float64):
        self.running_mean = np.zeros(width, dtype=dtype)
        self.running_var = np.ones(width, dtype=dtype)
        self.eps = eps
        self.momentum = momentum


def batchnorm(tape, x, scale, shift, state, mode):
    """Batch normalization over the batch axis of x (N, H).

    Train mode normalizes with biased batch statistics, differentiates
    through them, and decays the running averages by state.momentum.  Eval
    mode applies the stored running statistics.  Train requires N >= 2.
    """
    xd = _data(x)
    if xd.ndim != 2:
        raise ValueError(f"batchnorm expects (N, H) input, got shape {xd.shape}")
    if mode == "train":
        n = xd.shape[0]
        if n < 2:
            raise ValueError(f"batchnorm train mode requires N >= 2, got N={n}")
        mean = xd.mean(axis=0)
        centered = xd - mean
        var = np.mean(centered * centered, axis=0)
        inv = 1.0 / np.sqrt(var + state.eps)
        xhat = centered * inv
        m = state.momentum
        state.running_mean = m * state.running_mean + (1.0 - m) * mean
        state.running_var = m * state.running_var + (1.0 - m) * var
        out = Value(xhat * scale.data + shift.data)

        def backfn():
            g = out.grad
            shift.grad += g.sum(axis=0)
            scale.grad += (g * xhat).sum(axis=0)
            if isinstance(x, Value):
                dxhat = g * scale.data
                x.grad += (inv / n) * (
                    n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0)
                )

    elif mode == "eval":
        inv = 1.0 / np.sqrt(state.running_var + state.eps)
        xhat = (xd - state.running_mean) * inv
        out = Value(xhat * scale.data + shift.data)

        def backfn():
            g = out.grad
            shift.grad += g.sum(axis=0)
            scale.grad += (g * xhat).sum(axis=0)
            if isinstance(x, Value):
                x.grad += g * (scale.data * inv)

    else:
        raise ValueError(f"batchnorm mode must be 'train' or 'eval', got {mode!r}")
    tape.record(out, backfn)
    return out


def dropout(tape, x, rate, mode, rng=None):
    """Zero entries with probability rate and rescale by 1/(1-rate).

    Eval mode (or rate 0) is the identity and records nothing.  Requires
    0 <= rate < 1; train mode needs an rng for the mask.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must satisfy 0 <= rate < 1, got {rate}")
    if mode == "eval" or rate == 0.0:
        return x
    if mode != "train":
        raise ValueError(f"dropout mode must be 'train' or 'eval', got {mode!r}")
    if rng is None:
        raise ValueError("dropout train mode requires an rng")
    xd = _data(x)
    keep = rng.random(xd.shape) >= rate
    factor = keep / (1.0 - rate)
    out = Value(xd * factor)

    def backfn():
        if isinstance(x, Value):
            x.grad += out.grad * factor

    tape.record(out, backfn)
    return out


def mean_pool_rows(tape, x):
    """Set-mean pooling: column means of x (N, Q) -> (Q,), order-robust.

    Uses compensated summation so the result is insensitive to row order
    up to machine rounding.
    """
    xd = _data(x)
    if xd.ndim != 2:
        raise ValueError(f"mean_pool_rows expects (N, Q) input, got shape {xd.shape}")
    n = xd.shape[0]
    out = Value(compensated_colmean(xd))

    def backfn():
        if isinstance(x, Value):
            x.grad += out.grad[None, :] / n

    tape.record(out, backfn)
    return out


def reshape(tape, x, shape):
    xd = _data(x)
    out = Value(xd.reshape(shape))

    def backfn():
        if isinstance(x, Value):
            x.grad += out.grad.reshape(xd.shape)

    tape.record(out, backfn)
    return out


def stack_columns(tape, cols):
    """Stack length-N vectors into an (N, K) matrix, one per column.

    Columns given as plain arrays are constants; Value columns receive
    their slice of the output gradient.
    """
    datas = [_data(c) for c in cols]
    out = Value(np.column_stack(datas))

    def backfn():
        for j, c in enumerate(cols):
            if isinstance(c, Value):
                c.grad += out.grad[:, j]

    tape.record(out, backfn)
    return out


def abs_diff(tape, a, b):
    """Elementwise |a - b| with subgradient 0 at equality."""
    ad, bd = _data(a), _data(b)
    diff = ad - bd
    out = Value(np.abs(diff))

    def backfn():
        s = out.grad * np.sign(diff)
        if isinstance(a, Value):
            a.grad += _unbroadcast(s, a.data.shape)
        if isinstance(b, Value):
            b.grad -= _unbroadcast(s, b.data.shape)

    tape.record(out, backfn)
    return out


def mean_all(tape, x):
    """Mean over all elements, as a scalar node."""
    xd = _data(x)
    out = Value(np.asarray(xd.mean()))

    def backfn():
        if isinstance(x, Value):
            x.grad += out.grad / xd.size

    tape.record(out, backfn)
    return out


def add(tape, a, b):
    ad, bd = _data(a), _data(b)
    out = Value(ad + bd)

    def backfn():
        if isinstance(a, Value):
            a.grad += _unbroadcast(out.grad, a.data.shape)
        if isinstance(b, Value):
            b.grad += _unbroadcast(out.grad, b.data.shape)

    tape.record(out, backfn)
    return out


def mul(tape, a, b):
    ad, bd = _data(a), _data(b)
    out = Value(ad * bd)

    def backfn():
        if isinstance(a, Value):
            a.grad += _unbroadcast(out.grad * bd, a.data.shape)
        if isinstance(b, Value):
            b.grad += _unbroadcast(out.grad * ad, b.data.shape)

    tape.record(out, backfn)
    return out


def affine_const(tape, x, scale=1.0, offset=0.0):
    """out = x * scale + offset with constant scale and offset."""
    xd = _data(x)
    scale = np.asarray(scale)
    out = Value(xd * scale + offset)

    def backfn():
        if isinstance(x, Value):
            x.grad += _unbroadcast(out.grad * scale, x.data.shape)

    tape.record(out, backfn)
    return out


def softplus(tape, x):
    """Numerically stable log(1 + exp(x))."""
    xd = _data(x)
    out = Value(np.logaddexp(0.0, xd))

    def backfn():
        if isinstance(x, Value):
            # sigmoid(xd) without overflow for large |xd|
            e = np.exp(-np.abs(xd))
            sig = np.where(xd >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
            x.grad += out.grad * sig

    tape.record(out, backfn)
    return out


def outer_sub(tape, a, b):
    """Pairwise differences: out[i, j] = a[i] - b[j] for vectors a, b."""
    ad, bd = _data(a), _data(b)
    if ad.ndim != 1 or bd.ndim != 1:
        raise ValueError(f"outer_sub expects vectors, got {ad.shape} and {bd.shape}")
    out = Value(ad[:, None] - bd[None, :])

    def backfn():
        if isinstance(a, Value):
            a.grad += out.grad.sum(axis=1)
        if isinstance(b, Value):
            b.grad -= out.grad.sum(axis=0)

    tape.record(out, backfn)
    return out


def gather(tape, x, idx):
    """Select rows of a vector: out = x[idx]."""
    xd = _data(x)
    idx = np.asarray(idx)
    out = Value(xd[idx])

    def backfn():
        if isinstance(x, Value):
            np.add.at(x.grad, idx, out.grad)

    tape.record(out, backfn)
    return out
