"""Differentiable operations.

Every function takes :class:`Tensor` (or array-like constants) and returns a
new :class:`Tensor`; gradients are registered on the active tape. Binary
elementwise ops broadcast with NumPy rules.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .tensor import ContractError, ShapeError, Tensor, as_tensor, make_result

LAYER_NORM_EPS = 1e-5
DIV_EPS = 1e-8


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return make_result(
        a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb))
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return make_result(
        a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb))
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return make_result(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd

    def vjp(g):
        ga = g / bd
        return _unbroadcast(ga, ad.shape), _unbroadcast(-ga * out, bd.shape)

    return make_result(out, (a, b), vjp)


def neg(x) -> Tensor:
    x = as_tensor(x)
    return make_result(-x.data, (x,), lambda g: (-g,))


def power(x, exponent: float) -> Tensor:
    """``x ** exponent`` for a constant exponent."""
    x = as_tensor(x)
    xd = x.data
    c = float(exponent)
    return make_result(xd**c, (x,), lambda g: (g * c * xd ** (c - 1.0),))


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return make_result(out, (x,), lambda g: (g * out,))


def log(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return make_result(np.log(xd), (x,), lambda g: (g / xd,))


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    out = np.sqrt(x.data)
    return make_result(out, (x,), lambda g: (g * 0.5 / out,))


def absolute(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return make_result(np.abs(xd), (x,), lambda g: (g * np.sign(xd),))


def relu(x) -> Tensor:
    """``max(x, 0)``."""
    x = as_tensor(x)
    keep = x.data > 0
    return make_result(np.where(keep, x.data, 0.0), (x,), lambda g: (g * keep,))


def clamp_min(x, floor: float) -> Tensor:
    """``max(x, floor)`` for a constant floor."""
    x = as_tensor(x)
    keep = x.data > floor
    return make_result(np.where(keep, x.data, floor), (x,), lambda g: (g * keep,))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    return make_result(out, (x,), lambda g: (g * (1.0 - out * out),))


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return make_result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(a % x.ndim for a in axes)
    inverse = tuple(np.argsort(axes))
    return make_result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),))


def swapaxes(x, a: int, b: int) -> Tensor:
    x = as_tensor(x)
    return make_result(np.swapaxes(x.data, a, b), (x,), lambda g: (np.swapaxes(g, a, b),))


def getitem(x, index) -> Tensor:
    x = as_tensor(x)
    shape = x.shape

    def vjp(g):
        z = np.zeros(shape)
        np.add.at(z, index, g)
        return (z,)

    return make_result(x.data[index], (x,), vjp)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    if not tensors:
        raise ContractError("concat needs at least one tensor")
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
            s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != ax
        ):
            raise ShapeError(f"cannot concat shapes {ref} and {t.shape} along axis {axis}")
    sizes = [t.shape[ax] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    return make_result(
        np.concatenate([t.data for t in tensors], axis=ax),
        tensors,
        lambda g: tuple(np.split(g, cuts, axis=ax)),
    )


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    out = np.stack([t.data for t in tensors], axis=axis)
    ax = axis % out.ndim
    return make_result(
        out, tensors, lambda g: tuple(np.take(g, i, axis=ax) for i in range(len(tensors)))
    )


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------


def _expand_reduced(g: np.ndarray, shape, axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(np.reshape(g, (1,) * len(shape)), shape)
    if not keepdims:
        axes = (axis,) if np.isscalar(axis) else tuple(axis)
        axes = sorted(a % len(shape) for a in axes)
        for a in axes:
            g = np.expand_dims(g, a)
    return np.broadcast_to(g, shape)


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    shape = x.shape
    return make_result(
        np.sum(x.data, axis=axis, keepdims=keepdims),
        (x,),
        lambda g: (_expand_reduced(g, shape, axis, keepdims).copy(),),
    )


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    out = np.mean(x.data, axis=axis, keepdims=keepdims)
    count = x.size / max(np.size(out), 1)
    return make_result(
        out, (x,), lambda g: (_expand_reduced(g, shape, axis, keepdims) / count,)
    )


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product with leading batch dimensions broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def vjp(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return make_result(ad @ bd, (a, b), vjp)


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight + bias`` applied over the last axis of ``x``."""
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear shape mismatch: {x.shape} and {weight.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd
    inputs: tuple = (x, weight)
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data
        inputs = (x, weight, bias)

    def vjp(g):
        gx = g @ wd.T
        gw = xd.reshape(-1, wd.shape[0]).T @ g.reshape(-1, wd.shape[1])
        if bias is None:
            return gx, gw
        return gx, gw, g.reshape(-1, wd.shape[1]).sum(axis=0)

    return make_result(out, inputs, vjp)


# ---------------------------------------------------------------------------
# gathers
# ---------------------------------------------------------------------------


def embedding(table, ids) -> Tensor:
    """Row lookup ``table[ids]``; the gradient scatter-adds into the table."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ContractError(
            f"embedding index out of range [0, {table.shape[0]}): min={ids.min()} max={ids.max()}"
        )
    shape = table.shape

    def vjp(g):
        z = np.zeros(shape)
        np.add.at(z, ids.reshape(-1), g.reshape(-1, shape[-1]))
        return (z,)

    return make_result(table.data[ids], (table,), vjp)


def take_last(x, idx) -> Tensor:
    """``np.take_along_axis(x, idx, axis=-1)`` with a scatter-add gradient."""
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)
    shape = x.shape

    def vjp(g):
        z = np.zeros(shape)
        lead = np.indices(idx.shape[:-1], sparse=True)
        lead = tuple(ix[..., None] for ix in lead)
        np.add.at(z, (*lead, idx), g)
        return (z,)

    return make_result(np.take_along_axis(x.data, idx, axis=-1), (x,), vjp)


# ---------------------------------------------------------------------------
# normalisation / probability
# ---------------------------------------------------------------------------


def _softmax_vjp(y: np.ndarray, axis: int):
    return lambda g: (y * (g - np.sum(g * y, axis=axis, keepdims=True)),)


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / np.sum(e, axis=axis, keepdims=True)
    return make_result(y, (x,), _softmax_vjp(y, axis))


def masked_softmax(x, keep, axis: int = -1) -> Tensor:
    """Softmax restricted to entries where ``keep`` is true; others are exactly 0.

    Rows with no kept entry produce all zeros.
    """
    x = as_tensor(x)
    keep = np.broadcast_to(np.asarray(keep, dtype=bool), x.shape)
    masked = np.where(keep, x.data, -np.inf)
    m = np.max(masked, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.where(keep, np.exp(np.where(keep, x.data - m, 0.0)), 0.0)
    s = np.sum(e, axis=axis, keepdims=True)
    y = e / np.where(s > 0, s, 1.0)
    return make_result(y, (x,), _softmax_vjp(y, axis))


def layer_norm(x, gain, bias, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalise the last axis to zero mean / unit variance, then scale and shift."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    if x.shape[-1] < 2:
        raise ContractError("layer_norm needs a last axis of length >= 2")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data
    out = xhat * gd + bias.data
    n = gd.shape[-1]

    def vjp(g):
        gx_hat = g * gd
        gx = inv * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        ggain = (g * xhat).reshape(-1, n).sum(axis=0)
        gbias = g.reshape(-1, n).sum(axis=0)
        return gx, ggain, gbias

    return make_result(out, (x, gain, bias), vjp)


def l2_normalize(x, axis: int = -1, eps: float = DIV_EPS) -> Tensor:
    """``x / max(||x||, eps)`` along ``axis``."""
    x = as_tensor(x)
    xd = x.data
    norm = np.sqrt(np.sum(xd * xd, axis=axis, keepdims=True))
    big = norm > eps
    denom = np.where(big, norm, eps)
    y = xd / denom

    def vjp(g):
        proj = np.sum(g * y, axis=axis, keepdims=True)
        return (np.where(big, (g - y * proj) / denom, g / eps),)

    return make_result(y, (x,), vjp)


def cosine_similarity(a, b, axis: int = -1) -> Tensor:
    return sum(mul(l2_normalize(a, axis), l2_normalize(b, axis)), axis=axis)


# ---------------------------------------------------------------------------
# composite layers
# ---------------------------------------------------------------------------


def dropout(x, rate: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when ``rate`` is 0 or no generator is given."""
    if rate <= 0.0 or rng is None:
        return as_tensor(x)
    x = as_tensor(x)
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return mul(x, keep)


def attention(q, k, v, keep=None) -> Tensor:
    """Scaled dot-product attention over the last two axes.

    ``keep`` is a boolean mask broadcastable to ``[..., Tq, Tk]``; False
    entries are excluded from the softmax.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    scores = mul(matmul(q, swapaxes(k, -1, -2)), 1.0 / np.sqrt(q.shape[-1]))
    if keep is None:
        weights = softmax(scores, axis=-1)
    else:
        weights = masked_softmax(scores, keep, axis=-1)
    return matmul(weights, v)


def causal_mask(length: int) -> np.ndarray:
    return np.tril(np.ones((length, length), dtype=bool))


def scatter_last(values, idx, size: int) -> Tensor:
    """Place ``values[..., j]`` at position ``idx[..., j]`` of a zero ``[..., size]`` array.

    Indices must be unique within each row; entries with index -1 are dropped.
    """
    values = as_tensor(values)
    idx = np.asarray(idx, dtype=np.int64)
    slot = np.where(idx < 0, size, idx)
    out = np.zeros(values.shape[:-1] + (size + 1,))
    np.put_along_axis(out, slot, values.data, axis=-1)

    def vjp(g):
        padded = np.concatenate([g, np.zeros(g.shape[:-1] + (1,))], axis=-1)
        return (np.take_along_axis(padded, slot, axis=-1),)

    return make_result(out[..., :size], (values,), vjp)


def gather_last(x, idx) -> Tensor:
    """``x[..., idx]`` along the last axis for row-unique indices; index -1 reads 0.

    The inverse of :func:`scatter_last`; ``idx`` must share the leading
    dimensions of ``x``.
    """
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)
    if idx.shape[:-1] != x.shape[:-1]:
        raise ShapeError(f"gather_last index shape {idx.shape} does not match {x.shape}")
    size = x.shape[-1]
    slot = np.where(idx < 0, size, idx)
    padded = np.concatenate([x.data, np.zeros(x.shape[:-1] + (1,))], axis=-1)

    def vjp(g):
        z = np.zeros(x.shape[:-1] + (size + 1,))
        np.put_along_axis(z, slot, g, axis=-1)
        return (z[..., :size],)

    return make_result(np.take_along_axis(padded, slot, axis=-1), (x,), vjp)
