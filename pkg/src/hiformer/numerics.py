"""Dense tensor kernels with tape-based reverse-mode differentiation.

Every differentiable operation returns a new :class:`Tensor` that remembers
its parents and a closure mapping the output gradient to parent gradients.
:func:`backward` walks that graph in reverse topological order.

Shapes are never broadcast implicitly. The only mixed-shape operation is
:func:`add_bias` (a vector added over the last axis); anything else that
needs replication goes through :func:`expand`, whose gradient sums the
copies back.
"""

from __future__ import annotations

import contextlib
import itertools
import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

from .errors import DimensionError, NumericError, UsageError

_ids = itertools.count()
_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """A row-major array plus the bookkeeping needed for backprop.

    Parameters
    ----------
    data : array_like
        Values; converted to a C-contiguous float array.
    requires_grad : bool
        Mark as a trainable leaf. Gradients accumulate in ``grad``.
    name : str, optional
        Stable identifier used for checkpoints and diagnostics.
    dtype : numpy dtype, optional
        float32 (training) or float64 (gradient checks).
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "id", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = np.ascontiguousarray(arr)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self.id = next(_ids)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    # operator sugar for the handful of same-shape binary ops
    def __add__(self, other: Tensor) -> Tensor:
        return add(self, other)

    def __sub__(self, other: Tensor) -> Tensor:
        return sub(self, other)

    def __mul__(self, other: Tensor) -> Tensor:
        return mul(self, other)

    def __matmul__(self, other: Tensor) -> Tensor:
        return matmul(self, other)


@dataclass(frozen=True)
class Grad:
    """Gradient of the loss with respect to one named parameter."""

    name: str
    value: np.ndarray


def parameter(data, name: str, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name, dtype=dtype)


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericError(f"non-finite value produced by {op}")


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad or p._parents for p in parents):
        out._parents = parents
        out._backward = backward
    return out


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# kernels
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of ``(..., m, k)`` and ``(..., k, n)``.

    Leading (batch) extents must be identical; no broadcasting.
    """
    if a.ndim < 2 or b.ndim < 2 or a.ndim != b.ndim:
        raise DimensionError(f"matmul: incompatible ranks {a.shape} x {b.shape}")
    if a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shape mismatch {a.shape} x {b.shape}")
    av, bv = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(bv, -1, -2) if _needs(a) else None
        gb = np.swapaxes(av, -1, -2) @ g if _needs(b) else None
        return ga, gb

    return _result(av @ bv, (a, b), backward, "matmul")


def matmul_reference(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Naive triple loop, innermost index k summed left to right."""
    a = np.asarray(a)
    b = np.asarray(b)
    m, k = a.shape
    k2, n = b.shape
    if k != k2:
        raise DimensionError(f"matmul: shape mismatch {a.shape} x {b.shape}")
    out = np.zeros((m, n), dtype=np.result_type(a, b))
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for p in range(k):
                acc += a[i, p] * b[p, j]
            out[i, j] = acc
    return out


def _needs(t: Tensor) -> bool:
    return t.requires_grad or bool(t._parents)


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return _result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return _result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    av, bv = a.data, b.data
    return _result(av * bv, (a, b), lambda g: (g * bv, g * av), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result(a.data * a.data.dtype.type(c), (a,), lambda g: (g * g.dtype.type(c),), "scale")


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """``x[..., :] + b`` for a bias vector matching the last axis."""
    if b.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise DimensionError(f"add_bias: bias {b.shape} does not match rows of {x.shape}")
    axes = tuple(range(x.ndim - 1))
    return _result(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=axes)), "add_bias")


def expand(x: Tensor, axis: int, n: int) -> Tensor:
    """Insert a new axis at ``axis`` holding ``n`` copies of ``x``."""
    out = np.repeat(np.expand_dims(x.data, axis), n, axis=axis)
    return _result(out, (x,), lambda g: (g.sum(axis=axis),), "expand")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot view {src} as {tuple(shape)}") from exc
    return _result(out, (x,), lambda g: (g.reshape(src),), "reshape")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(x.data.transpose(axes))
    return _result(out, (x,), lambda g: (np.ascontiguousarray(g.transpose(inv)),), "transpose")


def swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = list(xs)
    if not xs:
        raise DimensionError("concat: empty input list")
    sizes = [x.shape[axis] for x in xs]
    try:
        out = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {[x.shape for x in xs]}") from exc
    cuts = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _result(out, tuple(xs), backward, "concat")


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous sub-range ``[start, stop)`` along ``axis``."""
    n = x.shape[axis]
    if not (0 <= start <= stop <= n):
        raise DimensionError(f"slice [{start}, {stop}) out of range for extent {n}")
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    src_shape = x.shape

    def backward(g):
        full = np.zeros(src_shape, dtype=g.dtype)
        full[index] = g
        return (full,)

    return _result(np.ascontiguousarray(x.data[index]), (x,), backward, "slice")


def take_rows(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``table[ids]``; gradient scatters back with accumulation."""
    ids = np.asarray(ids, dtype=np.int64)
    shape = table.shape

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, ids, g)
        return (full,)

    return _result(table.data[ids], (table,), backward, "take_rows")


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis, with the row max subtracted first."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _result(y, (x,), backward, "softmax")


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with the erf-based normal CDF."""
    xv = x.data
    cdf = 0.5 * (1.0 + erf(xv * _INV_SQRT2))
    out = (xv * cdf).astype(xv.dtype, copy=False)

    def backward(g):
        pdf = np.exp(-0.5 * xv * xv) * _INV_SQRT2PI
        return ((g * (cdf + xv * pdf)).astype(g.dtype, copy=False),)

    return _result(out, (x,), backward, "gelu")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm: params {gain.shape}/{bias.shape} vs last axis {d}")
    xv = x.data
    mu = xv.mean(axis=-1, keepdims=True)
    xc = xv - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data
    axes = tuple(range(x.ndim - 1))

    def backward(g):
        gx_hat = g * gain.data
        gx = inv * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return _result(out.astype(xv.dtype, copy=False), (x, gain, bias), backward, "layer_norm")


def sigmoid(x: Tensor) -> Tensor:
    y = _stable_sigmoid(x.data)
    return _result(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def _stable_sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def bce_with_logits(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean binary cross entropy computed from logits (no clamp needed)."""
    y = np.asarray(labels, dtype=logits.dtype)
    if y.shape != logits.shape:
        raise DimensionError(f"bce: labels {y.shape} vs logits {logits.shape}")
    z = logits.data
    # log(1 + e^{-|z|}) + max(z, 0) - y z
    per = np.logaddexp(0.0, -np.abs(z)) + np.maximum(z, 0.0) - y * z
    n = z.size
    loss = np.asarray(per.mean(), dtype=z.dtype)
    p = _stable_sigmoid(z)

    def backward(g):
        return ((g * (p - y) / n).astype(z.dtype, copy=False),)

    return _result(loss, (logits,), backward, "bce")


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _result(np.asarray(x.data.sum(), dtype=x.dtype), (x,),
                   lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    return scale(sum_all(x), 1.0 / n)


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------


def _topo(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if node.id in seen:
            continue
        seen.add(node.id)
        stack.append((node, True))
        for p in node._parents:
            if p.id not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> dict[str, Grad]:
    """Propagate d(loss) to every reachable parameter.

    Gradients are accumulated into each leaf's ``grad`` attribute and also
    returned keyed by parameter name (or ``"#<id>"`` for unnamed leaves).

    Raises
    ------
    UsageError
        If ``loss`` is not a scalar or was not produced by a recorded graph.
    """
    if loss.data.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._backward is None:
        raise UsageError("backward called on a tensor with no recorded graph")
    grads: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.data)}
    result: dict[str, Grad] = {}
    for node in reversed(_topo(loss)):
        g = grads.pop(node.id, None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                _check_finite(g, f"gradient of {node.name}")
                node.grad = g if node.grad is None else node.grad + g
                key = node.name or f"#{node.id}"
                result[key] = Grad(key, node.grad)
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not _needs(parent):
                continue
            if pg.shape != parent.shape:
                raise DimensionError(f"gradient shape {pg.shape} != {parent.shape}")
            prev = grads.get(parent.id)
            grads[parent.id] = pg if prev is None else prev + pg
    return result


def fd_gradient(f: Callable[[np.ndarray], float], p: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``p``.

    ``p`` is perturbed in place one coordinate at a time and restored, so
    ``f`` may close over the same array (e.g. a parameter's ``data``).
    """
    if eps <= 0:
        raise UsageError("eps must be positive")
    flat = p.reshape(-1)
    out = np.zeros(flat.shape, dtype=np.float64)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(p))
        flat[i] = orig - eps
        fm = float(f(p))
        flat[i] = orig
        out[i] = (fp - fm) / (2.0 * eps)
    return out.reshape(p.shape)


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """``max|a-b| / max(1, max|a|, max|b|)``; the metric used by grad checks."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(1.0, float(np.abs(a).max(initial=0.0)), float(np.abs(b).max(initial=0.0)))
    return float(np.abs(a - b).max(initial=0.0)) / denom


def check_gradients(loss_fn: Callable[[], Tensor], params: Iterable[Tensor], eps: float = 1e-5) -> dict[str, float]:
    """Compare :func:`backward` with :func:`fd_gradient` for each parameter.

    Returns the relative error per parameter name.
    """
    params = list(params)
    for p in params:
        p.zero_grad()
    analytic = backward(loss_fn())
    errors = {}
    for p in params:
        key = p.name or f"#{p.id}"
        with no_grad():
            numeric = fd_gradient(lambda _: loss_fn().item(), p.data, eps)
        got = analytic[key].value if key in analytic else np.zeros_like(p.data)
        errors[key] = relative_error(got, numeric)
    return errors
