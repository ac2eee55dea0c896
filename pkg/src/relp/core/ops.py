"""Primitive operations.

Every primitive is a pair of pure numpy functions: ``forward`` returns the
output array plus whatever its backward formula needs, and ``vjp`` maps an
output cotangent to one cotangent per input (``None`` for inputs that are
not differentiable).  :func:`apply` runs the forward and, when a tape is
active, records a :class:`~relp.core.tape.Node`.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.special import erf

from .tape import LAYER_KINDS, Node, active_tape
from .tensor import NonFiniteError, ShapeError, Tensor

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

_debug = os.environ.get("RELP_DEBUG", "") not in ("", "0")


def set_debug(flag: bool) -> None:
    """Toggle finite-value checking after every primitive."""
    global _debug
    _debug = bool(flag)


@dataclass(frozen=True)
class Primitive:
    name: str
    forward: Callable
    vjp: Callable


PRIMITIVES: dict[str, Primitive] = {}


def _register(name):
    def deco(pair):
        fwd, vjp = pair()
        PRIMITIVES[name] = Primitive(name, fwd, vjp)
        return PRIMITIVES[name]

    return deco


def unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_check(op, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, [a.shape, b.shape], "not broadcast-compatible") from None


def evaluate(name: str, arrays, attrs) -> tuple[np.ndarray, dict]:
    """Run a primitive's forward on raw arrays."""
    out, saved = PRIMITIVES[name].forward(*arrays, **attrs)
    if _debug and not np.all(np.isfinite(out)):
        raise NonFiniteError(f"{name} produced non-finite values")
    return out, saved


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


def apply(name: str, tensors, *, kind: str | None = None, label: str | None = None, **attrs) -> Tensor:
    if kind is not None and kind not in LAYER_KINDS:
        raise ValueError(f"unknown layer kind {kind!r}; expected one of {LAYER_KINDS}")
    out, saved = evaluate(name, [t.data for t in tensors], attrs)
    result = Tensor._wrap(np.asarray(out))
    tape = active_tape()
    if tape is not None:
        node = Node(name, tuple(t.id for t in tensors), result.id, attrs, saved, kind, label)
        tape.record(node, tensors, result)
    return result


# ---------------------------------------------------------------------------
# elementwise arithmetic


@_register("add")
def _add():
    def fwd(a, b):
        return a + b, {}

    def vjp(g, a, b, out, saved):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return fwd, vjp


@_register("sub")
def _sub():
    def fwd(a, b):
        return a - b, {}

    def vjp(g, a, b, out, saved):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return fwd, vjp


@_register("mul")
def _mul():
    def fwd(a, b):
        return a * b, {}

    def vjp(g, a, b, out, saved):
        return unbroadcast(g * b, a.shape), unbroadcast(g * a, b.shape)

    return fwd, vjp


@_register("scale")
def _scale():
    def fwd(a, factor):
        return a * a.dtype.type(factor), {}

    def vjp(g, a, out, saved, factor):
        return (g * g.dtype.type(factor),)

    return fwd, vjp


@_register("log")
def _log():
    def fwd(a):
        return np.log(a), {}

    def vjp(g, a, out, saved):
        return (g / a,)

    return fwd, vjp


@_register("detach")
def _detach():
    def fwd(a):
        return a, {}

    def vjp(g, a, out, saved):
        return (None,)

    return fwd, vjp


# ---------------------------------------------------------------------------
# linear algebra


@_register("matmul")
def _matmul():
    def fwd(a, b):
        return np.matmul(a, b), {}

    def vjp(g, a, b, out, saved):
        a2 = a[None, :] if a.ndim == 1 else a
        b2 = b[:, None] if b.ndim == 1 else b
        # vector operands only drop size-1 axes, so a reshape restores them
        g2 = g.reshape(np.broadcast_shapes(a2.shape[:-2], b2.shape[:-2]) + (a2.shape[-2], b2.shape[-1]))
        ga = np.matmul(g2, np.swapaxes(b2, -1, -2))
        gb = np.matmul(np.swapaxes(a2, -1, -2), g2)
        return unbroadcast(ga, a2.shape).reshape(a.shape), unbroadcast(gb, b2.shape).reshape(b.shape)

    return fwd, vjp


@_register("transpose")
def _transpose():
    def fwd(a, axes):
        return np.transpose(a, axes), {}

    def vjp(g, a, out, saved, axes):
        return (np.transpose(g, np.argsort(axes)),)

    return fwd, vjp


@_register("reshape")
def _reshape():
    def fwd(a, shape):
        return np.reshape(a, shape), {}

    def vjp(g, a, out, saved, shape):
        return (np.reshape(g, a.shape),)

    return fwd, vjp


@_register("sum")
def _sum():
    def fwd(a, axis, keepdims):
        return np.sum(a, axis=axis, keepdims=keepdims), {}

    def vjp(g, a, out, saved, axis, keepdims):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return fwd, vjp


@_register("index")
def _index():
    def fwd(a, key):
        return np.array(a[key]), {}

    def vjp(g, a, out, saved, key):
        ga = np.zeros_like(a)
        np.add.at(ga, key, g)
        return (ga,)

    return fwd, vjp


@_register("concat")
def _concat():
    def fwd(*arrays, axis):
        return np.concatenate(arrays, axis=axis), {}

    def vjp(g, *rest, axis):
        arrays = rest[:-2]
        cuts = np.cumsum([x.shape[axis] for x in arrays])[:-1]
        return tuple(np.split(g, cuts, axis=axis))

    return fwd, vjp


@_register("embedding")
def _embedding():
    def fwd(table, ids):
        return table[ids], {}

    def vjp(g, table, out, saved, ids):
        gt = np.zeros_like(table)
        np.add.at(gt, ids, g)
        return (gt,)

    return fwd, vjp


# ---------------------------------------------------------------------------
# nonlinearities


def gaussian_cdf(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + erf(x / _SQRT2))


def sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so neither branch overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@_register("gelu")
def _gelu():
    def fwd(x):
        return x * gaussian_cdf(x), {}

    def vjp(g, x, out, saved):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        return (g * (gaussian_cdf(x) + x * pdf),)

    return fwd, vjp


@_register("silu")
def _silu():
    def fwd(x):
        return x * sigmoid(x), {}

    def vjp(g, x, out, saved):
        s = sigmoid(x)
        return (g * (s + x * s * (1.0 - s)),)

    return fwd, vjp


@_register("relu")
def _relu():
    def fwd(x):
        return np.maximum(x, 0.0).astype(x.dtype), {}

    def vjp(g, x, out, saved):
        return (g * (x > 0),)

    return fwd, vjp


@_register("softmax")
def _softmax():
    def fwd(x):
        z = x - np.max(x, axis=-1, keepdims=True)
        e = np.exp(z)
        out = e / np.sum(e, axis=-1, keepdims=True)
        return out, {}

    def vjp(g, x, out, saved):
        return (out * (g - np.sum(g * out, axis=-1, keepdims=True)),)

    return fwd, vjp


@_register("layernorm")
def _layernorm():
    def fwd(x, eps):
        mean = np.mean(x, axis=-1, keepdims=True)
        centered = x - mean
        var = np.mean(centered * centered, axis=-1, keepdims=True)
        rstd = 1.0 / np.sqrt(var + eps)
        return centered * rstd, {"mean": mean, "rstd": rstd}

    def vjp(g, x, out, saved, eps):
        rstd = saved["rstd"]
        g_mean = np.mean(g, axis=-1, keepdims=True)
        gx_mean = np.mean(g * out, axis=-1, keepdims=True)
        return (rstd * (g - g_mean - out * gx_mean),)

    return fwd, vjp


@_register("rmsnorm")
def _rmsnorm():
    def fwd(x, eps):
        rstd = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)
        return x * rstd, {"rstd": rstd}

    def vjp(g, x, out, saved, eps):
        rstd = saved["rstd"]
        return (rstd * (g - out * np.mean(g * out, axis=-1, keepdims=True)),)

    return fwd, vjp


# ---------------------------------------------------------------------------
# public wrappers


def add(a, b, **kw) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_check("add", a, b)
    return apply("add", (a, b), **kw)


def sub(a, b, **kw) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_check("sub", a, b)
    return apply("sub", (a, b), **kw)


def mul(a, b, **kw) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_check("mul", a, b)
    return apply("mul", (a, b), **kw)


def scale(a: Tensor, factor: float, **kw) -> Tensor:
    return apply("scale", (a,), factor=float(factor), **kw)


def log(a: Tensor, **kw) -> Tensor:
    return apply("log", (a,), **kw)


def detach(a: Tensor, **kw) -> Tensor:
    """Forward identity whose backward is zero."""
    return apply("detach", (a,), **kw)


def matmul(a, b, **kw) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim == 0 or b.ndim == 0:
        raise ShapeError("matmul", [a.shape, b.shape], "operands must be at least 1-D")
    inner_b = b.shape[0] if b.ndim == 1 else b.shape[-2]
    if a.shape[-1] != inner_b:
        raise ShapeError("matmul", [a.shape, b.shape], "inner dimensions differ")
    if a.ndim > 2 and b.ndim > 2:
        try:
            np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
        except ValueError:
            raise ShapeError("matmul", [a.shape, b.shape], "batch dimensions differ") from None
    return apply("matmul", (a, b), **kw)


def transpose(a: Tensor, axes=None, **kw) -> Tensor:
    if axes is None:
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2) if a.ndim >= 2 else (0,)
    axes = tuple(int(i) for i in axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError("transpose", [a.shape], f"bad permutation {axes}")
    return apply("transpose", (a,), axes=axes, **kw)


def reshape(a: Tensor, shape, **kw) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        np.empty(a.shape, dtype=np.bool_).reshape(shape)
    except ValueError:
        raise ShapeError("reshape", [a.shape, shape], "size mismatch") from None
    return apply("reshape", (a,), shape=shape, **kw)


def sum(a: Tensor, axis=None, keepdims: bool = False, **kw) -> Tensor:  # noqa: A001
    return apply("sum", (a,), axis=axis, keepdims=keepdims, **kw)


def mean(a: Tensor, axis=-1, keepdims: bool = False, **kw) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / n, **kw)


def index(a: Tensor, key, **kw) -> Tensor:
    try:
        np.empty(a.shape, dtype=np.bool_)[key]
    except (IndexError, TypeError) as exc:
        raise ShapeError("index", [a.shape], str(exc)) from None
    return apply("index", (a,), key=key, **kw)


def concat(tensors, axis: int = 0, **kw) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError("concat", [x.shape for x in tensors], f"mismatch off axis {axis}")
    return apply("concat", tuple(tensors), axis=axis, **kw)


def embedding(table: Tensor, ids, **kw) -> Tensor:
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise TypeError("embedding ids must be integers")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding id out of range [0, {table.shape[0]})")
    return apply("embedding", (table,), ids=ids, **kw)


def gelu(x: Tensor, **kw) -> Tensor:
    return apply("gelu", (x,), **kw)


def silu(x: Tensor, **kw) -> Tensor:
    return apply("silu", (x,), **kw)


def relu(x: Tensor, **kw) -> Tensor:
    return apply("relu", (x,), **kw)


def softmax(x: Tensor, **kw) -> Tensor:
    return apply("softmax", (x,), **kw)


def layernorm(x: Tensor, eps: float = 1e-5, **kw) -> Tensor:
    return apply("layernorm", (x,), eps=float(eps), **kw)


def rmsnorm(x: Tensor, eps: float = 1e-6, **kw) -> Tensor:
    return apply("rmsnorm", (x,), eps=float(eps), **kw)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    like = a if isinstance(a, Tensor) else b if isinstance(b, Tensor) else None
    return as_tensor(a, like), as_tensor(b, like)
