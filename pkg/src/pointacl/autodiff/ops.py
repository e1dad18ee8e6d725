"""Differentiable ops.

Shapes must match exactly except for (a) scalar operands and (b) ``matmul`` with a 2-D
right operand shared across leading dims. Any other broadcast goes through the
explicit ``broadcast_to`` so every backward rule stays a plain reduction.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np
from scipy.special import erf

from .tensor import Tensor, as_tensor, make_node

_SQRT_2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _shape_error(op: str, a, b) -> ValueError:
    return ValueError(f"{op}: incompatible shapes {tuple(a)} and {tuple(b)}")


def _is_scalar(x) -> bool:
    return not isinstance(x, Tensor) and np.ndim(x) == 0


def add(a, b) -> Tensor:
    if _is_scalar(b):
        a = as_tensor(a)
        return make_node(a.data + b, (a,), lambda g: (g,), "add_scalar")
    if _is_scalar(a):
        return add(b, a)
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise _shape_error("add", a.shape, b.shape)
    return make_node(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    if _is_scalar(b):
        return add(a, -b)
    if _is_scalar(a):
        return add(scale(b, -1.0), a)
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise _shape_error("sub", a.shape, b.shape)
    return make_node(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def scale(a, c: float) -> Tensor:
    """Multiply by a constant scalar."""
    a = as_tensor(a)
    c = float(c)
    return make_node(a.data * c, (a,), lambda g: (g * c,), "scale")


def mul(a, b) -> Tensor:
    """Elementwise product of equal-shape operands (either may be a constant array)."""
    if _is_scalar(b):
        return scale(a, b)
    if _is_scalar(a):
        return scale(b, a)
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise _shape_error("mul", a.shape, b.shape)
    ad, bd = a.data, b.data
    return make_node(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def matmul(a, b) -> Tensor:
    """``a @ b`` for equal leading dims, or a 2-D ``b`` shared over ``a``'s leading dims."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise _shape_error("matmul", a.shape, b.shape)
    shared = b.ndim == 2
    if a.shape[-1] != b.shape[-2] or (not shared and a.shape[:-2] != b.shape[:-2]):
        raise _shape_error("matmul", a.shape, b.shape)
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if shared:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return make_node(ad @ bd, (a, b), backward, "matmul")


def transpose(a, axes: Sequence[int] | None = None) -> Tensor:
    """Permute axes; the default swaps the last two."""
    a = as_tensor(a)
    if axes is None:
        axes = list(range(a.ndim))
        axes[-2], axes[-1] = axes[-1], axes[-2]
    axes = tuple(int(x) for x in axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ValueError(f"transpose: axes {axes} invalid for shape {a.shape}")
    inv = tuple(np.argsort(axes))
    return make_node(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        data = a.data.reshape(shape)
    except ValueError as exc:
        raise _shape_error("reshape", old, shape) from exc
    return make_node(data, (a,), lambda g: (g.reshape(old),), "reshape")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    ax = axis % ts[0].ndim
    for t in ts[1:]:
        if t.ndim != ts[0].ndim or t.shape[:ax] + t.shape[ax + 1:] != ts[0].shape[:ax] + ts[0].shape[ax + 1:]:
            raise _shape_error("concat", ts[0].shape, t.shape)
    bounds = np.cumsum([0] + [t.shape[ax] for t in ts])

    def backward(g):
        return tuple(np.take(g, np.arange(lo, hi), axis=ax) for lo, hi in zip(bounds[:-1], bounds[1:]))

    return make_node(np.concatenate([t.data for t in ts], axis=ax), ts, backward, "concat")


def index(a, key) -> Tensor:
    """NumPy-style indexing (slices or integer arrays); repeated picks accumulate."""
    a = as_tensor(a)
    shape = a.shape

    def backward(g):
        full = np.zeros(shape)
        np.add.at(full, key, g)
        return (full,)

    return make_node(np.array(a.data[key]), (a,), backward, "index")


def slice_(a, start: int, stop: int, axis: int = 0) -> Tensor:
    key = [slice(None)] * as_tensor(a).ndim
    key[axis] = slice(start, stop)
    return index(a, tuple(key))


def broadcast_to(a, shape: Sequence[int]) -> Tensor:
    """Explicit NumPy broadcast; backward sums over the broadcast axes."""
    a = as_tensor(a)
    shape = tuple(shape)
    try:
        data = np.broadcast_to(a.data, shape).copy()
    except ValueError as exc:
        raise _shape_error("broadcast_to", a.shape, shape) from exc
    src = a.shape
    lead = len(shape) - len(src)

    def backward(g):
        g = g.sum(axis=tuple(range(lead))) if lead else g
        axes = tuple(i for i, n in enumerate(src) if n == 1 and g.shape[i] != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True)
        return (g,)

    return make_node(data, (a,), backward, "broadcast_to")


def add_bias(x, b) -> Tensor:
    return add(x, broadcast_to(b, as_tensor(x).shape))


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return make_node(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), backward, "sum")


def mean_over_axis(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


def _extreme(a, axis: int, keepdims: bool, pick) -> Tensor:
    a = as_tensor(a)
    ax = axis % a.ndim
    # first extremal entry receives the whole gradient (lowest index on ties)
    arg = np.expand_dims(pick(a.data, axis=ax), ax)
    out = np.take_along_axis(a.data, arg, axis=ax)
    shape = a.shape

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, ax)
        full = np.zeros(shape)
        np.put_along_axis(full, arg, g, axis=ax)
        return (full,)

    return make_node(out if keepdims else np.squeeze(out, ax), (a,), backward, "extreme")


def max_over_axis(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    return _extreme(a, axis, keepdims, np.argmax)


def min_over_axis(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    return _extreme(a, axis, keepdims, np.argmin)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return make_node(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return make_node(np.log(ad), (a,), lambda g: (g / ad,), "log")


def square(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return make_node(ad * ad, (a,), lambda g: (2.0 * g * ad,), "square")


def relu(a) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    return make_node(np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,), "relu")


def gelu(a) -> Tensor:
    """Exact (erf) GELU."""
    a = as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / _SQRT_2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return make_node(x * cdf, (a,), lambda g: (g * (cdf + x * pdf),), "gelu")


def row_softmax(a) -> Tensor:
    """Softmax along the last axis (max-subtracted)."""
    a = as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (s * (g - np.sum(g * s, axis=-1, keepdims=True)),)

    return make_node(s, (a,), backward, "row_softmax")


def log_softmax(a) -> Tensor:
    """Log-softmax along the last axis via log-sum-exp."""
    a = as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    s = np.exp(out)

    def backward(g):
        return (g - s * g.sum(axis=-1, keepdims=True),)

    return make_node(out, (a,), backward, "log_softmax")


def layer_norm(x, gamma=None, beta=None, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis; optional per-feature affine ``gamma``/``beta``."""
    x = as_tensor(x)
    d = x.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    parents = [x]
    for p in (gamma, beta):
        if p is not None:
            if p.shape != (d,):
                raise _shape_error("layer_norm", x.shape, p.shape)
            parents.append(p)
    gd = gamma.data if gamma is not None else None
    out = xhat * gd if gd is not None else xhat.copy()
    if beta is not None:
        out = out + beta.data
    lead = tuple(range(x.ndim - 1))

    def backward(g):
        gx_hat = g * gd if gd is not None else g
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * np.mean(gx_hat * xhat, axis=-1, keepdims=True))
        grads = [gx]
        if gamma is not None:
            grads.append(np.sum(g * xhat, axis=lead))
        if beta is not None:
            grads.append(np.sum(g, axis=lead))
        return tuple(grads)

    return make_node(out, parents, backward, "layer_norm")


def row_norms(a, eps: float = 0.0) -> Tensor:
    """L2 norm of each row (last axis), keepdims. ``eps`` is added to the norm."""
    a = as_tensor(a)
    n = np.sqrt(np.sum(a.data * a.data, axis=-1, keepdims=True))
    ad = a.data

    def backward(g):
        safe = np.where(n > 0, n, 1.0)
        return (g * ad / safe,)

    return make_node(n + eps, (a,), backward, "row_norms")


def l2_norm_rows(a, eps: float = 1e-12) -> Tensor:
    """Scale each row to unit L2 norm; ``eps`` is added to the norm so zero rows stay finite."""
    a = as_tensor(a)
    n = np.sqrt(np.sum(a.data * a.data, axis=-1, keepdims=True))
    denom = n + eps
    y = a.data / denom
    safe = np.where(n > 0, n, 1.0)

    def backward(g):
        # d(x/(|x|+eps)) = g/denom - x (x.g) / (|x| denom^2)
        dot = np.sum(g * a.data, axis=-1, keepdims=True)
        return (g / denom - a.data * dot / (safe * denom * denom),)

    return make_node(y, (a,), backward, "l2_norm_rows")


def pairwise_sq_dist(a, b) -> Tensor:
    """Squared Euclidean distances between the rows of ``a`` (..., M, c) and ``b`` (..., L, c)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-1]:
        raise _shape_error("pairwise_sq_dist", a.shape, b.shape)
    diff = a.data[..., :, None, :] - b.data[..., None, :, :]
    out = np.sum(diff * diff, axis=-1)

    def backward(g):
        w = 2.0 * g[..., None] * diff
        return w.sum(axis=-2), -w.sum(axis=-3)

    return make_node(out, (a, b), backward, "pairwise_sq_dist")


def dot(a, b) -> Tensor:
    return sum_(mul(a, b))


def where_rows(x, select: np.ndarray, fill) -> Tensor:
    """Rows of ``x`` where ``select`` is True are replaced by ``fill`` (same shape as ``x``)."""
    x, fill = as_tensor(x), as_tensor(fill)
    if x.shape != fill.shape:
        raise _shape_error("where_rows", x.shape, fill.shape)
    m = np.broadcast_to(np.asarray(select, dtype=bool)[..., None], x.shape)
    return make_node(np.where(m, fill.data, x.data), (x, fill),
                     lambda g: (np.where(m, 0.0, g), np.where(m, g, 0.0)), "where_rows")


CORE_OPS = (
    "add", "sub", "scale", "mul", "matmul", "transpose", "reshape", "concat", "index",
    "broadcast_to", "sum_", "mean_over_axis", "max_over_axis", "min_over_axis", "exp", "log",
    "square", "relu", "gelu", "row_softmax", "log_softmax", "layer_norm", "row_norms",
    "l2_norm_rows", "pairwise_sq_dist", "where_rows",
)
