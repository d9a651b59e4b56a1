"""Differentiable operations.

The op set is deliberately closed: it covers exactly what the message-passing
models, losses and physics penalties need.  Every backward rule is checked
against central finite differences in the test suite.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .. import _kernels
from .tensor import Tensor, as_tensor, record

SEGMENT_MODES = ("sum", "mean", "max", "min", "std")


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data + b.data)
    return record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data - b.data)
    return record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data * b.data)
    return record(
        out, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data)
    return record(out, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def linear(x, W, b=None) -> Tensor:
    """``x @ W + b`` for x [n, d_in], W [d_in, d_out], b [d_out]."""
    x, W = as_tensor(x), as_tensor(W)
    if x.ndim != 2 or W.ndim != 2 or x.shape[1] != W.shape[0]:
        raise ValueError(f"linear shape mismatch: x {x.shape}, W {W.shape}")
    if b is None:
        return matmul(x, W)
    b = as_tensor(b)
    if b.shape != (W.shape[1],):
        raise ValueError(f"bias shape {b.shape} does not match W {W.shape}")
    out = Tensor(x.data @ W.data + b.data)

    def backward(g):
        return g @ W.data.T, x.data.T @ g, g.sum(axis=0)

    return record(out, (x, W, b), backward)


def concat(xs: Sequence, axis: int = 1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    out = Tensor(np.concatenate([x.data for x in xs], axis=axis))
    bounds = np.cumsum([0] + [x.shape[axis] for x in xs])

    def backward(g):
        return [np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(xs))]

    return record(out, tuple(xs), backward)


def columns(x, start: int, stop: int) -> Tensor:
    """Column slice ``x[:, start:stop]``."""
    x = as_tensor(x)
    out = Tensor(x.data[:, start:stop])

    def backward(g):
        full = np.zeros_like(x.data)
        full[:, start:stop] = g
        return (full,)

    return record(out, (x,), backward)


def gather(x, index) -> Tensor:
    """Row gather ``x[index]``; backward scatter-adds into rows."""
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.int64)
    out = Tensor(x.data[index])

    def backward(g):
        g2 = g.reshape(g.shape[0], -1)
        return (_kernels.segment_sum(g2, index, x.shape[0]).reshape(x.shape),)

    return record(out, (x,), backward)


def _unary(x, fwd, dfdx) -> Tensor:
    x = as_tensor(x)
    y = fwd(x.data)
    out = Tensor(y)
    return record(out, (x,), lambda g: (g * dfdx(x.data, y),))


def relu(x) -> Tensor:
    return _unary(x, lambda a: np.maximum(a, 0.0), lambda a, y: (a > 0).astype(np.float64))


def leaky_relu(x, slope: float = 0.2) -> Tensor:
    return _unary(
        x,
        lambda a: np.where(a > 0, a, slope * a),
        lambda a, y: np.where(a > 0, 1.0, slope),
    )


def sigmoid(x) -> Tensor:
    def fwd(a):
        out = np.empty_like(a)
        pos = a >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
        e = np.exp(a[~pos])
        out[~pos] = e / (1.0 + e)
        return out

    return _unary(x, fwd, lambda a, y: y * (1.0 - y))


def tanh(x) -> Tensor:
    return _unary(x, np.tanh, lambda a, y: 1.0 - y * y)


def sin(x) -> Tensor:
    return _unary(x, np.sin, lambda a, y: np.cos(a))


def cos(x) -> Tensor:
    return _unary(x, np.cos, lambda a, y: -np.sin(a))


def square(x) -> Tensor:
    return _unary(x, np.square, lambda a, y: 2.0 * a)


def sqrt(x, eps: float = 0.0) -> Tensor:
    """``sqrt(x + eps)``."""
    return _unary(x, lambda a: np.sqrt(a + eps), lambda a, y: 0.5 / y)


def reduce_sum(x, axis: int | None = None) -> Tensor:
    x = as_tensor(x)
    out = Tensor(x.data.sum(axis=axis))

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return record(out, (x,), backward)


def reduce_mean(x, axis: int | None = None) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else x.shape[axis]
    if n == 0:
        raise ValueError("mean over an empty axis")
    return mul(reduce_sum(x, axis), 1.0 / n)


def mse(pred, target) -> Tensor:
    """Mean over rows of the squared L2 row error: (1/n) sum_i ||p_i - t_i||^2."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    n = pred.shape[0]
    diff = pred.data - target.data
    out = Tensor(np.sum(diff * diff) / n)
    return record(out, (pred, target), lambda g: (g * 2.0 * diff / n, -g * 2.0 * diff / n))


def bce_with_logits(logits, labels) -> Tensor:
    """Mean binary cross-entropy with logits, computed stably."""
    logits, labels = as_tensor(logits), as_tensor(labels)
    z, y = logits.data, labels.data
    if z.shape != y.shape:
        raise ValueError(f"shape mismatch {z.shape} vs {y.shape}")
    n = z.size
    loss = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    out = Tensor(loss.sum() / n)
    e = np.exp(-np.abs(z))
    p = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return record(out, (logits, labels), lambda g: (g * (p - y) / n, -g * z / n))


def _check_ids(ids: np.ndarray, num_segments: int) -> np.ndarray:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= num_segments):
        raise IndexError(f"segment id out of range [0, {num_segments})")
    return ids


def segment_reduce(values, segment_ids, num_segments: int, mode: str = "sum") -> Tensor:
    """Reduce rows of ``values`` [m, d] into ``num_segments`` rows.

    Empty segments yield 0 for every mode.  max/min route the gradient to
    the first extreme row of the segment.  std is the population standard
    deviation; its gradient is taken as 0 where the deviation is 0.
    """
    values = as_tensor(values)
    if mode not in SEGMENT_MODES:
        raise ValueError(f"unknown segment mode {mode!r}")
    ids = _check_ids(segment_ids, num_segments)
    v = values.data
    if mode == "sum":
        out = Tensor(_kernels.segment_sum(v, ids, num_segments))
        return record(out, (values,), lambda g: (g[ids],))

    counts = np.bincount(ids, minlength=num_segments).astype(np.float64)
    safe = np.maximum(counts, 1.0)[:, None]
    if mode == "mean":
        out = Tensor(_kernels.segment_sum(v, ids, num_segments) / safe)
        return record(out, (values,), lambda g: ((g / safe)[ids],))

    if mode in ("max", "min"):
        ext, arg = _kernels.segment_argext(v, ids, num_segments, mode == "max")
        out = Tensor(ext)

        def backward(g):
            full = np.zeros_like(v)
            seg, col = np.nonzero(arg >= 0)
            full[arg[seg, col], col] = g[seg, col]
            return (full,)

        return record(out, (values,), backward)

    mean = _kernels.segment_sum(v, ids, num_segments) / safe
    dev = v - mean[ids]
    var = _kernels.segment_sum(dev * dev, ids, num_segments) / safe
    std = np.sqrt(var)
    out = Tensor(std)

    def backward(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            coef = np.where(std > 0, g / (safe * std), 0.0)
        return (dev * coef[ids],)

    return record(out, (values,), backward)


def segment_softmax(scores, segment_ids, num_segments: int) -> Tensor:
    """Softmax of ``scores`` within each segment (per column for 2-D input)."""
    scores = as_tensor(scores)
    ids = _check_ids(segment_ids, num_segments)
    s = scores.data
    flat = s.ndim == 1
    s2 = s[:, None] if flat else s
    peak, _ = _kernels.segment_argext(s2, ids, num_segments, True)
    e = np.exp(s2 - peak[ids])
    z = _kernels.segment_sum(e, ids, num_segments)
    alpha = e / z[ids]
    out = Tensor(alpha[:, 0] if flat else alpha)

    def backward(g):
        g2 = g[:, None] if flat else g
        inner = _kernels.segment_sum(alpha * g2, ids, num_segments)
        ds = alpha * (g2 - inner[ids])
        return (ds[:, 0] if flat else ds,)

    return record(out, (scores,), backward)
