"""Differentiable operations on :class:`Tensor`.

All ops are float64 and carry exact analytic backward rules.  Batched
variants work on leading batch axes; the single-instance signatures used in
the docs (``conv1d_narrow(E, H)``, ``kmax_pool(m, k)``) are thin wrappers.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import DimensionError, NumericalError, Tensor, ensure, make

BCE_EPS = 1e-7
# pads k-max output when the feature map is shorter than k; finite so the
# tensor invariant holds, and never receives gradient
KMAX_SENTINEL = -1e30


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------- arithmetic

def add(a, b) -> Tensor:
    a, b = ensure(a), ensure(b)
    out = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return make(out, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    def backward(g):
        a._accumulate(-g)

    return make(-a.data, (a,), backward)


def mul(a, b) -> Tensor:
    a, b = ensure(a), ensure(b)
    out = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return make(out, (a, b), backward)


def matmul(a, b) -> Tensor:
    """``a @ b`` for ``a`` of shape (..., m, k) and a 2-d ``b`` of shape (k, n)."""
    a, b = ensure(a), ensure(b)
    if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            a2 = a.data.reshape(-1, a.shape[-1])
            b._accumulate(a2.T @ g.reshape(-1, b.shape[1]))

    return make(out, (a, b), backward)


def sum(a: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy
    out = a.data.sum(axis=axis)

    def backward(g):
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.shape))
        else:
            a._accumulate(np.broadcast_to(np.expand_dims(g, axis), a.shape))

    return make(out, (a,), backward)


def reshape(a: Tensor, shape) -> Tensor:
    def backward(g):
        a._accumulate(g.reshape(a.shape))

    return make(a.data.reshape(shape), (a,), backward)


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [ensure(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        for t, part in zip(tensors, np.split(g, sizes, axis=axis)):
            if t.requires_grad:
                t._accumulate(part)

    return make(out, tuple(tensors), backward)


def take_rows(table: Tensor, idx) -> Tensor:
    """Row gather ``table[idx]``; backward scatter-adds into the table."""
    idx = np.asarray(idx, dtype=np.int64)
    out = table.data[idx]

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, idx, g)
        table._accumulate(full)

    return make(out, (table,), backward)


def pick(a: Tensor, cols) -> Tensor:
    """``a[i, cols[i]]`` for a 2-d tensor."""
    cols = np.asarray(cols, dtype=np.int64)
    rows = np.arange(a.shape[0])
    out = a.data[rows, cols]

    def backward(g):
        full = np.zeros_like(a.data)
        full[rows, cols] = g
        a._accumulate(full)

    return make(out, (a,), backward)


# --------------------------------------------------------------- activations

def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def backward(g):
        a._accumulate(g * mask)

    return make(a.data * mask, (a,), backward)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def backward(g):
        a._accumulate(g * (1.0 - out * out))

    return make(out, (a,), backward)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)

    def backward(g):
        a._accumulate(g * out * (1.0 - out))

    return make(out, (a,), backward)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        a._accumulate(out * (g - (g * out).sum(axis=axis, keepdims=True)))

    return make(out, (a,), backward)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def backward(g):
        a._accumulate(g - np.exp(out) * g.sum(axis=axis, keepdims=True))

    return make(out, (a,), backward)


# -------------------------------------------------------------------- losses

def bce(y, y_hat: Tensor) -> Tensor:
    """Summed binary cross entropy ``-(y log p + (1-y) log(1-p))``.

    ``p`` is clamped to ``[BCE_EPS, 1 - BCE_EPS]``; clamped entries pass no
    gradient.
    """
    y_hat = ensure(y_hat)
    y = np.asarray(y, dtype=np.float64)
    if not np.isin(y, (0.0, 1.0)).all():
        raise ValueError("bce labels must be 0 or 1")
    if y.shape != y_hat.shape:
        y = np.broadcast_to(y, y_hat.shape)
    p = np.clip(y_hat.data, BCE_EPS, 1.0 - BCE_EPS)
    loss = -(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))
    inside = (y_hat.data >= BCE_EPS) & (y_hat.data <= 1.0 - BCE_EPS)

    def backward(g):
        y_hat._accumulate(g * inside * (-y / p + (1.0 - y) / (1.0 - p)))

    return make(loss.sum(), (y_hat,), backward)


# --------------------------------------------------------- convolution, pool

def conv1d(x: Tensor, filters: Tensor) -> Tensor:
    """Narrow convolution over the token axis.

    ``x`` is (B, s, d), ``filters`` is (n, w, d).  Output (B, s-w+1, n) where
    ``out[b, i, f]`` is the Frobenius product of filter ``f`` with tokens
    ``i .. i+w-1`` of batch item ``b``.
    """
    B, s, d = x.shape
    n, w, d2 = filters.shape
    if d != d2:
        raise DimensionError(f"embedding dim {d} does not match filter dim {d2}")
    if w > s:
        raise DimensionError(f"filter width {w} exceeds context length {s}")
    L = s - w + 1
    # (B, L, d, w) -> (B, L, w, d) -> (B, L, w*d)
    win = sliding_window_view(x.data, w, axis=1).transpose(0, 1, 3, 2).reshape(B, L, w * d)
    fmat = filters.data.reshape(n, w * d)
    out = win @ fmat.T

    def backward(g):
        if filters.requires_grad:
            gf = g.reshape(-1, n).T @ win.reshape(-1, w * d)
            filters._accumulate(gf.reshape(n, w, d))
        if x.requires_grad:
            gwin = (g @ fmat).reshape(B, L, w, d)
            gx = np.zeros_like(x.data)
            for j in range(w):
                gx[:, j:j + L] += gwin[:, :, j]
            x._accumulate(gx)

    return make(out, (x, filters), backward)


def conv1d_narrow(E: Tensor, H: Tensor) -> Tensor:
    """Single feature map of filter ``H`` (d x w) over context ``E`` (d x s)."""
    E, H = ensure(E), ensure(H)
    if H.shape[1] > E.shape[1]:
        raise DimensionError(f"degenerate context: filter width {H.shape[1]} > length {E.shape[1]}")
    x = transpose(E)
    x = reshape(x, (1,) + x.shape)
    h = reshape(transpose(H), (1, H.shape[1], H.shape[0]))
    return reshape(conv1d(x, h), (E.shape[1] - H.shape[1] + 1,))


def transpose(a: Tensor) -> Tensor:
    def backward(g):
        a._accumulate(g.T)

    return make(a.data.T, (a,), backward)


def _topk_indices(x: np.ndarray, k: int, axis: int) -> np.ndarray:
    # stable sort on -x: the leftmost of equal values ranks first
    order = np.argsort(-x, axis=axis, kind="stable")
    top = np.take(order, np.arange(min(k, x.shape[axis])), axis=axis)
    return np.sort(top, axis=axis)


def kmax(x: Tensor, k: int, axis: int = 1) -> Tensor:
    """k largest entries along ``axis`` kept in their original order."""
    if k <= 0:
        raise ValueError(f"k must be positive, got {k}")
    axis = axis % x.ndim
    L = x.shape[axis]
    idx = _topk_indices(x.data, k, axis)
    vals = np.take_along_axis(x.data, idx, axis=axis)
    if L < k:
        pad_shape = list(x.shape)
        pad_shape[axis] = k - L
        vals = np.concatenate([vals, np.full(pad_shape, KMAX_SENTINEL)], axis=axis)

    def backward(g):
        gsel = np.take(g, np.arange(min(k, L)), axis=axis)
        full = np.zeros_like(x.data)
        np.put_along_axis(full, idx, gsel, axis=axis)
        x._accumulate(full)

    return make(vals, (x,), backward)


def kmax_pool(m: Tensor, k: int) -> Tensor:
    """k-max pooling of a 1-d feature map."""
    m = ensure(m)
    if m.ndim != 1:
        raise DimensionError("kmax_pool expects a 1-d feature map")
    return kmax(m, k, axis=0)


def max_along(x: Tensor, axis: int = 1) -> Tensor:
    """Max over one axis with leftmost tie-break; gradient goes to the winner only."""
    out = kmax(x, 1, axis=axis)
    return reshape(out, tuple(n for i, n in enumerate(out.shape) if i != axis % x.ndim))


def masked_max(x: Tensor, mask: np.ndarray, axis: int = 1) -> Tensor:
    """Max over ``axis`` restricted to ``mask``; needs ``x >= 0`` (post-relu).

    Masked-out entries are lowered to -1 so they can never win.
    """
    shifted = x.data * mask + (mask - 1.0)
    idx = np.argmax(shifted, axis=axis)  # argmax returns the first maximum
    idx_e = np.expand_dims(idx, axis)
    out = np.take_along_axis(x.data, idx_e, axis=axis).squeeze(axis)

    def backward(g):
        full = np.zeros_like(x.data)
        np.put_along_axis(full, idx_e, np.expand_dims(g, axis), axis=axis)
        x._accumulate(full)

    return make(out, (x,), backward)


# ------------------------------------------------------------ segment (bags)

class Segments:
    """Contiguous groups of rows, e.g. the contexts of each bag in a batch."""

    def __init__(self, sizes):
        sizes = np.asarray(sizes, dtype=np.int64)
        if sizes.ndim != 1 or len(sizes) == 0 or (sizes <= 0).any():
            raise ValueError("segments must be a non-empty list of positive sizes")
        self.sizes = sizes
        self.starts = np.concatenate([[0], np.cumsum(sizes)[:-1]])
        self.ids = np.repeat(np.arange(len(sizes)), sizes)
        self.total = int(sizes.sum())

    def __len__(self):
        return len(self.sizes)


def _check_rows(x: Tensor, seg: Segments):
    if x.shape[0] != seg.total:
        raise DimensionError(f"{x.shape[0]} rows but segments cover {seg.total}")


def segment_sum(x: Tensor, seg: Segments) -> Tensor:
    _check_rows(x, seg)
    out = np.add.reduceat(x.data, seg.starts, axis=0)

    def backward(g):
        x._accumulate(g[seg.ids])

    return make(out, (x,), backward)


def segment_mean(x: Tensor, seg: Segments) -> Tensor:
    _check_rows(x, seg)
    shape = (-1,) + (1,) * (x.ndim - 1)
    cnt = seg.sizes.reshape(shape).astype(np.float64)
    out = np.add.reduceat(x.data, seg.starts, axis=0) / cnt

    def backward(g):
        x._accumulate((g / cnt)[seg.ids])

    return make(out, (x,), backward)


def segment_argmax(x: np.ndarray, seg: Segments) -> np.ndarray:
    """Row index of the (leftmost) maximum per segment and column."""
    mx = np.maximum.reduceat(x, seg.starts, axis=0)
    pos = np.arange(x.shape[0]).reshape((-1,) + (1,) * (x.ndim - 1))
    cand = np.where(x == mx[seg.ids], pos, x.shape[0])
    return np.minimum.reduceat(cand, seg.starts, axis=0)


def segment_max(x: Tensor, seg: Segments) -> Tensor:
    """Per-segment max; gradient flows only to the leftmost argmax row."""
    _check_rows(x, seg)
    arg = segment_argmax(x.data, seg)
    out = np.take_along_axis(x.data, arg, axis=0) if x.ndim > 1 else x.data[arg]

    def backward(g):
        full = np.zeros_like(x.data)
        if x.ndim > 1:
            np.put_along_axis(full, arg, g, axis=0)
        else:
            full[arg] = g
        x._accumulate(full)

    return make(out, (x,), backward)


def segment_softmax(x: Tensor, seg: Segments) -> Tensor:
    """Softmax over the rows of each segment, independently per column."""
    _check_rows(x, seg)
    mx = np.maximum.reduceat(x.data, seg.starts, axis=0)
    e = np.exp(x.data - mx[seg.ids])
    out = e / np.add.reduceat(e, seg.starts, axis=0)[seg.ids]

    def backward(g):
        s = np.add.reduceat(g * out, seg.starts, axis=0)
        x._accumulate(out * (g - s[seg.ids]))

    return make(out, (x,), backward)


def check_finite(name: str, arr: np.ndarray) -> None:
    if not np.isfinite(arr).all():
        raise NumericalError(f"non-finite values in {name}")
