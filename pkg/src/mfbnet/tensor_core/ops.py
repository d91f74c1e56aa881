"""Differentiable operations on :class:`Tensor`.

Shapes must match exactly. The only implicit broadcast is a Python scalar (or
0-d tensor) against a tensor; bias rows and tiling have their own ops.
Every op checks its output for NaN/Inf before returning.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from ..errors import DimensionError, NumericError
from .gradcheck import note_kink_inputs
from .tensor import Tensor, record

_ELEMENTWISE = ("mul", "add", "sub")


def _finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{op} produced non-finite values")
    return arr


def emit(op, inputs, arr, rule):
    return record(op, inputs, Tensor._wrap(_finite(arr, op)), rule)


def _is_scalar(x) -> bool:
    return not isinstance(x, Tensor) or x.ndim == 0


def _val(x):
    return x.data if isinstance(x, Tensor) else np.float64(x)


def _tensors(*xs):
    return [x for x in xs if isinstance(x, Tensor)]


def _unscalar(g: np.ndarray, x) -> Optional[np.ndarray]:
    # gradient w.r.t. a scalar operand that was broadcast
    if not isinstance(x, Tensor):
        return None
    if x.ndim == 0 and g.ndim > 0:
        return np.asarray(g.sum())
    return g


def _pair_rule(inputs, ga, gb):
    # maps grads onto the tensor-only input list
    out = []
    a, b = inputs
    if isinstance(a, Tensor):
        out.append(ga)
    if isinstance(b, Tensor):
        out.append(gb)
    return out


def _axis(ndim: int, axis: int) -> int:
    if not -ndim <= axis < ndim:
        raise DimensionError(f"axis {axis} out of range for rank {ndim}")
    return axis % ndim


# --------------------------------------------------------------------- linear


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product. ``a`` may carry leading batch axes: (..., q) @ (q, r)."""
    if a.ndim < 1 or b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    av, bv = a.data, b.data
    out = av @ bv

    def rule(g):
        ga = g @ bv.T
        gb = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return emit("matmul", (a, b), out, rule)


def elementwise(op: str, a, b) -> Tensor:
    if op not in _ELEMENTWISE:
        raise ValueError(f"unknown elementwise op {op!r}; expected one of {_ELEMENTWISE}")
    if isinstance(a, Tensor) and isinstance(b, Tensor) and a.shape != b.shape:
        if not (_is_scalar(a) or _is_scalar(b)):
            raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        raise DimensionError(f"{op}: at least one operand must be a Tensor")
    av, bv = _val(a), _val(b)
    inputs = (a, b)
    if op == "add":
        out = av + bv

        def rule(g):
            return _pair_rule(inputs, _unscalar(g, a), _unscalar(g, b))

    elif op == "sub":
        out = av - bv

        def rule(g):
            return _pair_rule(inputs, _unscalar(g, a), _unscalar(-g, b))

    else:
        out = av * bv

        def rule(g):
            return _pair_rule(inputs, _unscalar(g * bv, a), _unscalar(g * av, b))

    return emit(op, _tensors(a, b), out, rule)


def add(a, b) -> Tensor:
    return elementwise("add", a, b)


def sub(a, b) -> Tensor:
    return elementwise("sub", a, b)


def mul(a, b) -> Tensor:
    return elementwise("mul", a, b)


def neg(a: Tensor) -> Tensor:
    return emit("neg", (a,), -a.data, lambda g: (-g,))


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """x (..., n) + bias (n,) applied to every row."""
    if bias.ndim != 1 or x.shape[-1:] != bias.shape:
        raise DimensionError(f"add_bias shape mismatch: {x.shape} + {bias.shape}")

    def rule(g):
        return g, g.reshape(-1, g.shape[-1]).sum(axis=0)

    return emit("add_bias", (x, bias), x.data + bias.data, rule)


# ----------------------------------------------------------------- reductions


def sum(x: Tensor, axis: Optional[int] = None) -> Tensor:  # noqa: A001
    if axis is None:
        shape = x.shape
        return emit("sum", (x,), np.asarray(x.data.sum()), lambda g: (np.full(shape, float(g)),))
    ax = _axis(x.ndim, axis)
    shape = x.shape

    def rule(g):
        return (np.broadcast_to(np.expand_dims(g, ax), shape).copy(),)

    return emit("sum", (x,), x.data.sum(axis=ax), rule)


def mean(x: Tensor, axis: Optional[int] = None) -> Tensor:
    n = x.size if axis is None else x.shape[_axis(x.ndim, axis)]
    return mul(sum(x, axis), 1.0 / n)


# -------------------------------------------------------------- shape moves


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {old} to {shape}") from exc
    return emit("reshape", (x,), out, lambda g: (g.reshape(old),))


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not xs:
        raise DimensionError("concat of an empty list")
    ax = _axis(xs[0].ndim, axis)
    for t in xs[1:]:
        if t.ndim != xs[0].ndim or t.shape[:ax] != xs[0].shape[:ax] or t.shape[ax + 1:] != xs[0].shape[ax + 1:]:
            raise DimensionError(f"concat shape mismatch: {[t.shape for t in xs]}")
    sizes = [t.shape[ax] for t in xs]
    bounds = np.cumsum([0] + sizes)

    def rule(g):
        return [np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(xs))]

    return emit("concat", tuple(xs), np.concatenate([t.data for t in xs], axis=ax), rule)


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not xs:
        raise DimensionError("stack of an empty list")
    if any(t.shape != xs[0].shape for t in xs):
        raise DimensionError(f"stack shape mismatch: {[t.shape for t in xs]}")
    ax = _axis(xs[0].ndim + 1, axis)

    def rule(g):
        return [np.take(g, i, axis=ax) for i in range(len(xs))]

    return emit("stack", tuple(xs), np.stack([t.data for t in xs], axis=ax), rule)


def slice_axis(x: Tensor, start: int, stop: int, axis: int = -1) -> Tensor:
    ax = _axis(x.ndim, axis)
    if not 0 <= start < stop <= x.shape[ax]:
        raise DimensionError(f"slice [{start}:{stop}] out of range for axis of size {x.shape[ax]}")
    idx = [slice(None)] * x.ndim
    idx[ax] = slice(start, stop)
    idx = tuple(idx)
    shape = x.shape

    def rule(g):
        full = np.zeros(shape)
        full[idx] = g
        return (full,)

    return emit("slice", (x,), x.data[idx], rule)


def take(x: Tensor, index: int, axis: int = 0) -> Tensor:
    """Select one position along ``axis``, dropping that axis."""
    ax = _axis(x.ndim, axis)
    return reshape(slice_axis(x, index, index + 1, ax), x.shape[:ax] + x.shape[ax + 1:])


def repeat(x: Tensor, n: int, axis: int) -> Tensor:
    """Insert a new axis of length ``n`` at ``axis`` and tile ``x`` along it."""
    ax = _axis(x.ndim + 1, axis)
    out = np.repeat(np.expand_dims(x.data, ax), n, axis=ax)
    return emit("repeat", (x,), out, lambda g: (g.sum(axis=ax),))


def einsum(spec: str, a: Tensor, b: Tensor) -> Tensor:
    """Two-operand einsum. Indices may not repeat within one operand."""
    lhs, out_sub = spec.replace(" ", "").split("->")
    sa, sb = lhs.split(",")
    for s, t in ((sa, a), (sb, b)):
        if len(s) != t.ndim or len(set(s)) != len(s):
            raise DimensionError(f"einsum operand {s!r} does not fit shape {t.shape}")
    dims = {}
    for s, t in ((sa, a), (sb, b)):
        for c, n in zip(s, t.shape):
            if dims.setdefault(c, n) != n:
                raise DimensionError(f"einsum {spec}: size mismatch on index {c!r}: {a.shape} vs {b.shape}")
    av, bv = a.data, b.data
    out = np.einsum(f"{sa},{sb}->{out_sub}", av, bv)

    def grad_for(g, target, other_sub, other_val):
        # indices of target absent from both the output and the other operand were summed out
        keep = "".join(c for c in target if c in out_sub or c in other_sub)
        gk = np.einsum(f"{out_sub},{other_sub}->{keep}", g, other_val)
        if keep == target:
            return gk
        expanded = gk.reshape([dims[c] if c in keep else 1 for c in target])
        return np.broadcast_to(expanded, [dims[c] for c in target]).copy()

    def rule(g):
        return grad_for(g, sa, sb, bv), grad_for(g, sb, sa, av)

    return emit("einsum", (a, b), out, rule)


# --------------------------------------------------------------- pointwise


def relu(x: Tensor) -> Tensor:
    note_kink_inputs(x.data, "relu")
    mask = x.data > 0
    return emit("relu", (x,), np.where(mask, x.data, 0.0), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    v = x.data
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return emit("sigmoid", (x,), out, lambda g: (g * out * (1.0 - out),))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return emit("tanh", (x,), out, lambda g: (g * (1.0 - out * out),))


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise NumericError("log of a non-positive value")
    v = x.data
    return emit("log", (x,), np.log(v), lambda g: (g / v,))


# ------------------------------------------------------------------ softmax


def _masked_logits(v: np.ndarray, mask, ax: int) -> np.ndarray:
    if mask is None:
        return v
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != v.shape:
        raise DimensionError(f"softmax mask shape {mask.shape} does not match {v.shape}")
    # a slice with every position masked falls back to attending everywhere
    mask = mask | ~mask.any(axis=ax, keepdims=True)
    return np.where(mask, v, -np.inf)


def softmax(v: Tensor, axis: int = -1, mask=None) -> Tensor:
    """Stable softmax. Entries where ``mask`` is False receive zero weight."""
    if v.ndim == 0:
        raise DimensionError("softmax needs at least one axis")
    ax = _axis(v.ndim, axis)
    if v.shape[ax] == 0:
        raise DimensionError("softmax over an empty axis")
    z = _masked_logits(v.data, mask, ax)
    z = z - z.max(axis=ax, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=ax, keepdims=True)

    def rule(g):
        return (s * (g - (g * s).sum(axis=ax, keepdims=True)),)

    return emit("softmax", (v,), s, rule)


def log_softmax(v: Tensor, axis: int = -1) -> Tensor:
    if v.ndim == 0:
        raise DimensionError("log_softmax needs at least one axis")
    ax = _axis(v.ndim, axis)
    if v.shape[ax] == 0:
        raise DimensionError("log_softmax over an empty axis")
    z = v.data - v.data.max(axis=ax, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=ax, keepdims=True))
    out = z - lse
    s = np.exp(out)

    def rule(g):
        return (g - s * g.sum(axis=ax, keepdims=True),)

    return emit("log_softmax", (v,), out, rule)


# ---------------------------------------------------------------- lookups


def embedding(table: Tensor, ids, padding_idx: Optional[int] = None) -> Tensor:
    """Row lookup ``table[ids]``. The padding row reads as zeros and gets no gradient."""
    ids = np.asarray(ids, dtype=np.int64)
    vocab = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise DimensionError(f"embedding ids outside [0, {vocab})")
    out = table.data[ids]
    keep = None
    if padding_idx is not None:
        keep = (ids != padding_idx)[..., None]
        out = out * keep
    shape = table.shape

    def rule(g):
        gt = np.zeros(shape)
        gg = g if keep is None else g * keep
        np.add.at(gt, ids.reshape(-1), gg.reshape(-1, shape[1]))
        return (gt,)

    return emit("embedding", (table,), out, rule)
