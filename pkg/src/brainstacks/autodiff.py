"""Dense tensors with tape-based reverse-mode differentiation.

Every tensor produced by an op while recording is stamped with a
monotonically increasing tape position.  Because an op's output is always
created after its inputs, sorting reachable nodes by tape position in
descending order yields a valid reverse topological order for ``backward``.

Storage is 32-bit by default; reductions accumulate in 64-bit.  Passing
float64 arrays keeps everything in double precision, which the
finite-difference checks rely on.
"""

from __future__ import annotations

import itertools
import math
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numba
import numpy as np

from .errors import DimensionError, RoutingError

_tape = itertools.count()
_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


def _as_array(data, dtype=None) -> np.ndarray:
    if isinstance(data, Tensor):
        return data.data
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype == np.float64:
        return arr
    return arr.astype(np.float32, copy=False)


class Tensor:
    """A dense array that optionally tracks gradients.

    Attributes:
        data: Row-major numpy array holding the values.
        grad: Accumulated gradient (same shape as ``data``) or None.
        requires_grad: Whether gradients flow into this tensor.
        name: Optional label used in error messages.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_pos")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        self.data = _as_array(data, dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._pos = next(_tape)

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"

    # -- operators -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def backward(self) -> None:
        backward(self)


def tensor(data, requires_grad: bool = False, name: str | None = None, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name, dtype=dtype)


def _lift(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x))


def _lift_like(x, ref: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=ref.dtype))


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._pos = next(_tape)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    dtype = grad.dtype
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)), dtype=np.float64)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True, dtype=np.float64)
    return grad.reshape(shape).astype(dtype, copy=False)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every leaf reachable from a scalar ``loss``.

    Gradients accumulate additively into existing ``grad`` arrays.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    nodes: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        node = stack.pop()
        if id(node) in nodes:
            continue
        nodes[id(node)] = node
        stack.extend(p for p in node._parents if p.requires_grad)
    order = sorted(nodes.values(), key=lambda t: t._pos, reverse=True)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in order:
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            g = g.astype(node.dtype, copy=False)
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if not isinstance(a, Tensor):
        b = _lift(b)
        return _lift_like(a, b), b
    return a, _lift_like(b, a)


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    data = a.data + b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(data, (a, b), bw)



def add_n(tensors: Sequence[Tensor]) -> Tensor:
    """Sum of same-shaped tensors as a single graph node."""
    tensors = [_lift(t) for t in tensors]
    if not tensors:
        raise ValueError("add_n needs at least one tensor")
    shape = tensors[0].shape
    if any(t.shape != shape for t in tensors):
        raise DimensionError("add_n operands must share a shape")
    data = tensors[0].data.copy()
    for t in tensors[1:]:
        data = data + t.data

    def bw(g):
        return tuple(g for _ in tensors)

    return _result(data, tensors, bw)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    data = a.data - b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    data = a.data * b.data

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    data = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape) if b.requires_grad else None
        return ga, gb

    return _result(data, (a, b), bw)


def pow_(a: Tensor, exponent: float) -> Tensor:
    data = a.data ** exponent

    def bw(g):
        return (g * exponent * a.data ** (exponent - 1),)

    return _result(data, (a,), bw)


def exp(a: Tensor) -> Tensor:
    data = np.exp(a.data)

    def bw(g):
        return (g * data,)

    return _result(data, (a,), bw)


def log(a: Tensor) -> Tensor:
    data = np.log(a.data)

    def bw(g):
        return (g / a.data,)

    return _result(data, (a,), bw)


def abs_(a: Tensor) -> Tensor:
    data = np.abs(a.data)

    def bw(g):
        return (g * np.sign(a.data),)

    return _result(data, (a,), bw)


def relu(a: Tensor) -> Tensor:
    data = np.maximum(a.data, 0)

    def bw(g):
        return (g * (a.data > 0),)

    return _result(data, (a,), bw)


def tanh(a: Tensor) -> Tensor:
    data = np.tanh(a.data)

    def bw(g):
        return (g * (1 - data * data),)

    return _result(data, (a,), bw)


def softplus(a: Tensor) -> Tensor:
    x = a.data
    data = np.logaddexp(0, x).astype(x.dtype, copy=False)

    def bw(g):
        return (g * _sigmoid(x),)

    return _result(data, (a,), bw)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1 / (1 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    data = _sigmoid(a.data)

    def bw(g):
        return (g * data * (1 - data),)

    return _result(data, (a,), bw)


_INV_SQRT2 = 1 / math.sqrt(2)
_INV_SQRT2PI = 1 / math.sqrt(2 * math.pi)


@numba.vectorize(["float32(float32)", "float64(float64)"], cache=True)
def _gelu_cdf(x):
    return 0.5 * (1.0 + math.erf(x * _INV_SQRT2))


@numba.vectorize(["float32(float32, float32, float32)", "float64(float64, float64, float64)"], cache=True)
def _gelu_grad(x, cdf, g):
    return g * (cdf + x * math.exp(-0.5 * x * x) * _INV_SQRT2PI)


def gelu(a: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    x = a.data
    cdf = _gelu_cdf(x)
    data = x * cdf

    def bw(g):
        return (_gelu_grad(x, cdf, g.astype(x.dtype, copy=False)),)

    return _result(data, (a,), bw)


def dropout(a: Tensor, p: float, train: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity outside training."""
    if not train or p <= 0:
        return a
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    keep = (rng.random(a.shape) >= p).astype(a.dtype) / (1 - p)
    return mul(a, Tensor(keep))


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    data = a.data.reshape(shape)

    def bw(g):
        return (g.reshape(a.shape),)

    return _result(data, (a,), bw)


def transpose(a: Tensor, axes=None) -> Tensor:
    data = np.transpose(a.data, axes)

    def bw(g):
        if axes is None:
            return (np.transpose(g),)
        return (np.transpose(g, np.argsort(axes)),)

    return _result(data, (a,), bw)


def getitem(a: Tensor, index) -> Tensor:
    data = a.data[index]

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _result(data, (a,), bw)


def take_rows(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of a 2-D table (embedding lookup)."""
    ids = np.asarray(ids)
    data = table.data[ids]

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return _result(data, (table,), bw)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _result(data, tuple(tensors), bw)


def masked_fill(a: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where ``mask`` is true by a constant."""
    data = np.where(mask, np.asarray(value, dtype=a.dtype), a.data)

    def bw(g):
        return (np.where(mask, 0, g).astype(g.dtype, copy=False),)

    return _result(data, (a,), bw)


# ---------------------------------------------------------------------------
# reductions and products
# ---------------------------------------------------------------------------


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = np.sum(a.data, axis=axis, keepdims=keepdims, dtype=np.float64).astype(a.dtype)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).astype(a.dtype),)

    return _result(np.asarray(data), (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([a.shape[i] for i in axes]))
    return mul(sum_(a, axis, keepdims), 1.0 / count)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy broadcasting over leading dimensions."""
    a, b = _lift(a), _lift(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    data = np.matmul(a.data, b.data)

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            if b.ndim == 2:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _result(data, (a, b), bw)


def batched_contract(x: Tensor, A: Tensor, B: Tensor, scale: float) -> Tensor:
    """All-experts low-rank product.

    ``mid[t,e,r] = sum_f x[t,f] A[e,r,f]`` and
    ``out[t,e,o] = scale * sum_r mid[t,e,r] B[e,o,r]``.

    Args:
        x: Inputs of shape [t, f].
        A: Down projections of shape [e, r, f].
        B: Up projections of shape [e, o, r].
        scale: Constant multiplier applied to every expert output.

    Returns:
        Tensor of shape [t, e, o].
    """
    if A.ndim != 3 or B.ndim != 3 or x.ndim != 2:
        raise DimensionError(f"batched_contract expects x[t,f], A[e,r,f], B[e,o,r]; got {x.shape}, {A.shape}, {B.shape}")
    e, r, f = A.shape
    if B.shape[0] != e:
        raise DimensionError(f"expert count mismatch: A has {e}, B has {B.shape[0]}")
    if B.shape[2] != r or x.shape[1] != f:
        raise DimensionError(f"inconsistent dims: x {x.shape}, A {A.shape}, B {B.shape}")
    t = x.shape[0]
    o = B.shape[1]
    A2 = A.data.reshape(e * r, f)
    mid = (x.data @ A2.T).reshape(t, e, r)
    mid_e = mid.transpose(1, 0, 2)  # [e,t,r]
    out = np.matmul(mid_e, B.data.transpose(0, 2, 1))  # [e,t,o]
    out *= scale
    data = np.ascontiguousarray(out.transpose(1, 0, 2))

    def bw(g):
        g_e = g.transpose(1, 0, 2)  # [e,t,o]
        gB = gA = gx = None
        if B.requires_grad:
            gB = scale * np.matmul(g_e.transpose(0, 2, 1), mid_e)  # [e,o,r]
        if A.requires_grad or x.requires_grad:
            dmid = scale * np.matmul(g_e, B.data)  # [e,t,r]
            dmid2 = dmid.transpose(1, 0, 2).reshape(t, e * r)
            if A.requires_grad:
                gA = (dmid2.T @ x.data).reshape(e, r, f)
            if x.requires_grad:
                gx = dmid2 @ A2
        return gx, gA, gB

    return _result(data, (x, A, B), bw)


def gated_sum(gates: Tensor, experts: Tensor) -> Tensor:
    """``out[t,o] = sum_e gates[t,e] * experts[t,e,o]``."""
    data = np.einsum("te,teo->to", gates.data, experts.data)

    def bw(g):
        gg = np.einsum("to,teo->te", g, experts.data) if gates.requires_grad else None
        ge = gates.data[:, :, None] * g[:, None, :] if experts.requires_grad else None
        return gg, ge

    return _result(data, (gates, experts), bw)


def moe_mix(x: Tensor, gates: Tensor, A: Tensor, B: Tensor, scale: float) -> Tensor:
    """Fused ``gated_sum(gates, batched_contract(x, A, B, scale))``.

    Unselected experts (gate exactly 0) contribute exactly 0.  Shapes:
    x [t, f], gates [t, e], A [e, r, f], B [e, o, r]; returns [t, o].
    """
    if A.ndim != 3 or B.ndim != 3 or x.ndim != 2 or gates.ndim != 2:
        raise DimensionError(f"moe_mix shapes: x {x.shape}, gates {gates.shape}, A {A.shape}, B {B.shape}")
    e, r, f = A.shape
    if B.shape[0] != e or gates.shape[1] != e:
        raise DimensionError(f"expert count mismatch: A {e}, B {B.shape[0]}, gates {gates.shape[1]}")
    if B.shape[2] != r or x.shape[1] != f or gates.shape[0] != x.shape[0]:
        raise DimensionError(f"inconsistent dims: x {x.shape}, gates {gates.shape}, A {A.shape}, B {B.shape}")
    t, o = x.shape[0], B.shape[1]
    A2 = A.data.reshape(e * r, f)
    B2 = B.data.transpose(0, 2, 1).reshape(e * r, o)
    mid = (x.data @ A2.T).reshape(t, e, r)
    gd = gates.data[:, :, None]
    hg = (mid * gd).reshape(t, e * r)
    data = (hg @ B2) * np.asarray(scale, dtype=x.dtype)

    def bw(g):
        g = g * np.asarray(scale, dtype=g.dtype)
        gx = gg = gA = gB = None
        if B.requires_grad:
            gB = (hg.T @ g).reshape(e, r, o).transpose(0, 2, 1)
        dhg = (g @ B2.T).reshape(t, e, r)
        if gates.requires_grad:
            gg = np.einsum("ter,ter->te", dhg, mid)
        dmid = (dhg * gd).reshape(t, e * r)
        if A.requires_grad:
            gA = (dmid.T @ x.data).reshape(e, r, f)
        if x.requires_grad:
            gx = dmid @ A2
        return gx, gg, gA, gB

    return _result(data, (x, gates, A, B), bw)


# ---------------------------------------------------------------------------
# normalizations and losses
# ---------------------------------------------------------------------------


def softmax_np(x: np.ndarray, axis: int = -1) -> np.ndarray:
    m = np.max(x, axis=axis, keepdims=True)
    if np.any(np.isneginf(m)):
        raise RoutingError("softmax row is entirely -inf: no entry selectable")
    ex = np.exp(x - m)
    denom = np.sum(ex, axis=axis, keepdims=True, dtype=np.float64)
    return (ex / denom).astype(x.dtype)


def topk_keep(x: np.ndarray, k: int) -> np.ndarray:
    """Boolean mask of the k largest entries per row, ties to the lowest index."""
    order = np.argsort(-x, axis=-1, kind="stable")
    keep = np.zeros(x.shape, dtype=bool)
    np.put_along_axis(keep, order[..., :k], True, axis=-1)
    return keep


@numba.njit(cache=True)
def _topk_softmax_rows(x, k, out):
    t, n = x.shape
    chosen = np.zeros(n, dtype=np.bool_)
    for i in range(t):
        chosen[:] = False
        for _ in range(k):
            best = -1
            for j in range(n):
                if not chosen[j] and (best < 0 or x[i, j] > x[i, best]):
                    best = j
            chosen[best] = True
        m = -np.inf
        for j in range(n):
            if chosen[j] and x[i, j] > m:
                m = x[i, j]
        if m == -np.inf:
            return i
        denom = 0.0
        for j in range(n):
            if chosen[j]:
                denom += np.exp(np.float64(x[i, j]) - m)
        for j in range(n):
            out[i, j] = np.exp(np.float64(x[i, j]) - m) / denom if chosen[j] else 0.0
    return -1


def topk_softmax_np(logits: np.ndarray, k: int) -> np.ndarray:
    """Array version of ``softmax(topk_mask(logits, k))`` for 2-D logits."""
    n = logits.shape[-1]
    if k < 1 or k > n:
        raise ValueError(f"top-k needs 1 <= k <= {n}, got k={k}")
    if np.isnan(logits).any():
        raise RoutingError("NaN router logits")
    x = np.ascontiguousarray(logits.reshape(-1, n))
    out = np.empty(x.shape, dtype=np.float64)
    bad = _topk_softmax_rows(x, k, out)
    if bad >= 0:
        raise RoutingError("softmax row is entirely -inf: no entry selectable")
    return out.astype(logits.dtype).reshape(logits.shape)


def topk_softmax(a: Tensor, k: int) -> Tensor:
    """Fused ``softmax(topk_mask(a, k))`` along the last axis."""
    data = topk_softmax_np(a.data, k)

    def bw(g):
        dot = np.sum(g * data, axis=-1, keepdims=True, dtype=np.float64)
        return ((data * (g - dot)).astype(g.dtype),)

    return _result(data, (a,), bw)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Softmax along ``axis``; negative-infinity entries map to exactly 0."""
    x = a.data
    data = softmax_np(x, axis)

    def bw(g):
        dot = np.sum(g * data, axis=axis, keepdims=True, dtype=np.float64)
        return ((data * (g - dot)).astype(x.dtype),)

    return _result(data, (a,), bw)


def topk_mask(a: Tensor, k: int) -> Tensor:
    """Keep the k largest entries of each row (last axis); others become -inf.

    Ties are broken in favour of the lowest index.
    """
    n = a.shape[-1]
    if k < 1 or k > n:
        raise ValueError(f"topk_mask needs 1 <= k <= {n}, got k={k}")
    if k == n:
        return a
    keep = topk_keep(a.data, k)
    data = np.where(keep, a.data, np.asarray(-np.inf, dtype=a.dtype))

    def bw(g):
        return (np.where(keep, g, 0).astype(g.dtype, copy=False),)

    return _result(data, (a,), bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True, dtype=np.float64)
    var = ((xd - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = ((xd - mu) * inv).astype(xd.dtype)
    inv = inv.astype(xd.dtype)
    data = xhat * gamma.data + beta.data

    def bw(g):
        gx = ggamma = gbeta = None
        if gamma.requires_grad:
            ggamma = _unbroadcast(g * xhat, gamma.shape)
        if beta.requires_grad:
            gbeta = _unbroadcast(g, beta.shape)
        if x.requires_grad:
            dxhat = g * gamma.data
            n = xd.shape[-1]
            s1 = dxhat.sum(axis=-1, keepdims=True, dtype=np.float64)
            s2 = (dxhat * xhat).sum(axis=-1, keepdims=True, dtype=np.float64)
            gx = (inv / n * (n * dxhat - s1 - xhat * s2)).astype(xd.dtype)
        return gx, ggamma, gbeta

    return _result(data, (x, gamma, beta), bw)


def cross_entropy(logits: Tensor, targets, mask=None) -> Tensor:
    """Mean token cross-entropy.

    Args:
        logits: Scores of shape [..., V].
        targets: Integer ids with the leading shape of ``logits``.
        mask: Optional weights over target positions; the mean is taken over
            the mask's total weight.
    """
    targets = np.asarray(targets)
    V = logits.shape[-1]
    if targets.size and (targets.max() >= V or targets.min() < 0):
        raise IndexError(f"target id out of range for vocabulary of size {V}")
    x = logits.data.reshape(-1, V)
    t = targets.reshape(-1)
    w = np.ones(t.shape, dtype=np.float64) if mask is None else np.asarray(mask, dtype=np.float64).reshape(-1)
    total = w.sum()
    if total <= 0:
        raise ValueError("cross_entropy over an empty target set")
    m = x.max(axis=-1, keepdims=True)
    shifted = (x - m).astype(np.float64)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - lse
    nll = -logp[np.arange(t.size), t]
    loss = float((nll * w).sum() / total)
    data = np.asarray(loss, dtype=logits.dtype)

    def bw(g):
        p = np.exp(logp)
        p[np.arange(t.size), t] -= 1.0
        p *= (w / total)[:, None] * float(g)
        return (p.reshape(logits.shape).astype(logits.dtype),)

    return _result(data, (logits,), bw)


def binary_cross_entropy(probs: Tensor, targets: np.ndarray, eps: float = 1e-7) -> Tensor:
    """Mean BCE of probabilities against soft targets in [0, 1]."""
    t = np.asarray(targets, dtype=probs.dtype)
    p = probs.data
    pc = np.clip(p, eps, 1 - eps)
    val = -(t * np.log(pc) + (1 - t) * np.log(1 - pc))
    data = np.asarray(val.mean(dtype=np.float64), dtype=probs.dtype)
    n = p.size

    def bw(g):
        grad = (pc - t) / (pc * (1 - pc)) / n * float(g)
        grad = np.where((p > eps) & (p < 1 - eps), grad, 0)
        return (grad.astype(probs.dtype),)

    return _result(data, (probs,), bw)


def parameters_of(tensors: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in tensors if t.requires_grad]
