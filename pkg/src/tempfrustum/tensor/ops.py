"""Differentiable operations used by the detector."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .core import ShapeError, Tensor, as_tensor, make_node, unbroadcast

NORM_EPS = 1e-12


# -- elementwise arithmetic -------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return make_node(a.data + b.data, (a, b),
                     lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return make_node(a.data - b.data, (a, b),
                     lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return make_node(ad * bd, (a, b),
                     lambda g: (unbroadcast(g * bd, ad.shape), unbroadcast(g * ad, bd.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        return unbroadcast(g / bd, ad.shape), unbroadcast(-g * out / bd, bd.shape)

    return make_node(out, (a, b), backward, "div")


def neg(a: Tensor) -> Tensor:
    return make_node(-a.data, (a,), lambda g: (-g,), "neg")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return make_node(out, (a,), lambda g: (0.5 * g / out,), "sqrt")


def cos(a: Tensor) -> Tensor:
    x = a.data
    return make_node(np.cos(x), (a,), lambda g: (-g * np.sin(x),), "cos")


def sin(a: Tensor) -> Tensor:
    x = a.data
    return make_node(np.sin(x), (a,), lambda g: (g * np.cos(x),), "sin")


def minimum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise minimum; ties send the gradient to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    pick_a = a.data <= b.data
    out = np.where(pick_a, a.data, b.data)

    def backward(g):
        return (unbroadcast(np.where(pick_a, g, 0.0), a.shape),
                unbroadcast(np.where(pick_a, 0.0, g), b.shape))

    return make_node(out, (a, b), backward, "minimum")


# -- linear algebra and shape manipulation ---------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two 2-d tensors."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return make_node(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"transpose expects a 2-d tensor, got {a.shape}")
    return make_node(a.data.T, (a,), lambda g: (g.T,), "transpose")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    return make_node(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),), "reshape")


def broadcast_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    return make_node(np.broadcast_to(a.data, tuple(shape)), (a,),
                     lambda g: (unbroadcast(g, src),), "broadcast_to")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return make_node(out, tensors, backward, "concat")


def getitem(a: Tensor, key) -> Tensor:
    src = a.shape

    def backward(g):
        full = np.zeros(src)
        np.add.at(full, key, g)
        return (full,)

    return make_node(a.data[key], (a,), backward, "getitem")


def take(a: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather slices of ``a`` along ``axis``; repeated indices accumulate."""
    idx = np.asarray(indices, dtype=np.intp)
    src = a.shape

    def backward(g):
        full = np.zeros(src)
        moved = np.moveaxis(full, axis, 0)
        np.add.at(moved, idx, np.moveaxis(g, axis, 0))
        return (full,)

    return make_node(np.take(a.data, idx, axis=axis), (a,), backward, "take")


def take_along_last(a: Tensor, indices) -> Tensor:
    """``out[i] = a[i, indices[i]]`` for 2-d ``a``; ``a[i, indices[i], :]`` for 3-d."""
    idx = np.asarray(indices, dtype=np.intp)
    rows = np.arange(a.shape[0])
    return getitem(a, (rows, idx))


# -- reductions ------------------------------------------------------------

def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    src = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src),)

    return make_node(out, (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / float(count))


def reduce_max_over_points(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Max over the point axis (second to last) of ``(..., N, C)``.

    The whole output gradient goes to one row per column, the first argmax
    on ties.  Rows where ``mask`` (shape ``(..., N)``) is false are skipped.
    """
    if x.ndim < 2:
        raise ShapeError(f"reduce_max_over_points expects (..., N, C), got {x.shape}")
    if x.shape[-2] == 0:
        raise ValueError("reduce_max_over_points: empty point set (N = 0)")
    vals = x.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if not mask.any(axis=-1).all():
            raise ValueError("reduce_max_over_points: a masked point set is empty")
        vals = np.where(mask[..., None], vals, -np.inf)
    arg = np.argmax(vals, axis=-2)
    out = np.take_along_axis(x.data, arg[..., None, :], axis=-2)[..., 0, :]
    src = x.shape

    def backward(g):
        full = np.zeros(src)
        np.put_along_axis(full, arg[..., None, :], g[..., None, :], axis=-2)
        return (full,)

    return make_node(out, (x,), backward, "reduce_max")


# -- activations -----------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return make_node(np.where(pos, x.data, 0.0), (x,), lambda g: (g * pos,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    # split on sign so exp never overflows
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return make_node(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return make_node(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


_ACTIVATIONS = {"relu": relu, "sigmoid": sigmoid, "tanh": tanh}


def activation(x: Tensor, kind: str) -> Tensor:
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}; expected one of {sorted(_ACTIVATIONS)}") from None
    return fn(x)


# -- losses ----------------------------------------------------------------

def _reduce_loss(elem: np.ndarray, weights):
    if weights is None:
        w = np.full(elem.shape, 1.0 / elem.size)
    else:
        w = np.broadcast_to(np.asarray(weights, dtype=np.float64), elem.shape)
    return float(np.sum(elem * w)), w


def huber_loss(pred: Tensor, target, delta: float = 1.0, weights=None) -> Tensor:
    """Mean (or ``weights``-weighted sum) of the elementwise Huber penalty."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"huber_loss shape mismatch: {pred.shape} vs {target.shape}")
    if delta <= 0:
        raise ValueError(f"huber_loss needs delta > 0, got {delta}")
    r = pred.data - target.data
    a = np.abs(r)
    quad = a <= delta
    elem = np.where(quad, 0.5 * r * r, delta * (a - 0.5 * delta))
    total, w = _reduce_loss(elem, weights)
    dr = np.where(quad, r, delta * np.sign(r)) * w

    return make_node(np.array(total), (pred, target), lambda g: (g * dr, -g * dr), "huber")


def softmax_cross_entropy(logits: Tensor, labels, weights=None) -> Tensor:
    """Cross-entropy of softmax over the last axis against integer labels.

    A 1-d ``logits`` with a scalar label gives the single-example loss;
    batched inputs are averaged, or combined with per-row ``weights``.
    """
    logits = as_tensor(logits)
    z = logits.data
    k = z.shape[-1]
    lab = np.asarray(labels, dtype=np.intp)
    if lab.shape != z.shape[:-1]:
        raise ShapeError(f"labels shape {lab.shape} does not match logits {z.shape}")
    if np.any(lab < 0) or np.any(lab >= k):
        raise ValueError(f"label out of range [0, {k})")
    shifted = z - z.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1))
    picked = np.take_along_axis(shifted, lab[..., None], axis=-1)[..., 0]
    elem = lse - picked
    total, w = _reduce_loss(elem, weights)
    probs = np.exp(shifted - lse[..., None])
    onehot = np.zeros_like(z)
    np.put_along_axis(onehot, lab[..., None], 1.0, axis=-1)
    dz = (probs - onehot) * w[..., None]

    return make_node(np.array(total), (logits,), lambda g: (g * dz,), "softmax_ce")


def cosine_distance(u: Tensor, w: Tensor) -> Tensor:
    """``1 - <u, w> / (|u| |w|)`` along the last axis.

    Raises ``ValueError`` if any vector has norm below ``NORM_EPS``.
    """
    u, w = as_tensor(u), as_tensor(w)
    if u.shape != w.shape:
        raise ShapeError(f"cosine_distance shape mismatch: {u.shape} vs {w.shape}")
    a, b = u.data, w.data
    sa = (a * a).sum(axis=-1, keepdims=True)
    sb = (b * b).sum(axis=-1, keepdims=True)
    na, nb = np.sqrt(sa), np.sqrt(sb)
    if np.any(na < NORM_EPS) or np.any(nb < NORM_EPS):
        raise ValueError("cosine_distance: degenerate (all-zero) input vector")
    dot = (a * b).sum(axis=-1, keepdims=True)
    # sqrt(sa * sa) == sa exactly, so identical / opposite inputs give 0 / 2 exactly
    cos_sim = dot / np.sqrt(sa * sb)
    out = 1.0 - cos_sim[..., 0]

    def backward(g):
        g = np.asarray(g)[..., None]
        ga = -g * (b / (na * nb) - cos_sim * a / sa)
        gb = -g * (a / (na * nb) - cos_sim * b / sb)
        return ga, gb

    return make_node(out, (u, w), backward, "cosine_distance")
