"""Define-by-run reverse-mode automatic differentiation over dense float64 arrays.

Every operation records its parents and a backward closure on the output
tensor.  ``Tensor.backward`` collects the reachable graph, orders it by
creation id and replays the closures in reverse recording order.

Shape rules are strict: binary elementwise operations require equal shapes,
except that either operand may be a Python number or a 0-d tensor.  Row-wise
bias addition is a separate, explicit operation (``add_bias``).
"""

from __future__ import annotations

import contextlib
import itertools
import math
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "ShapeError",
    "DomainError",
    "NonFiniteError",
    "ContractError",
    "no_grad",
    "is_grad_enabled",
    "count_macs",
    "matmul",
    "add",
    "sub",
    "mul",
    "div",
    "scale",
    "neg",
    "add_bias",
    "relu",
    "gelu",
    "exp",
    "log",
    "sigmoid",
    "tanh",
    "abs",
    "sqrt",
    "minimum",
    "maximum",
    "clip",
    "sum",
    "mean",
    "reshape",
    "transpose",
    "gather_rows",
    "tile_batch",
    "softmax",
    "layer_norm",
    "l2_normalize",
    "local_scores",
    "local_mix",
    "AdamW",
    "adamw_step",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class DomainError(ValueError):
    """Input lies outside the mathematical domain of the operation."""


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


class ContractError(ValueError):
    """A caller violated an operation's precondition."""


_ids = itertools.count()
_grad_enabled = True
_mac_counters: list["MacCounter"] = []


def is_grad_enabled() -> bool:
    return _grad_enabled


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class MacCounter:
    def __init__(self) -> None:
        self.macs = 0

    def add(self, n: int) -> None:
        self.macs += int(n)


@contextlib.contextmanager
def count_macs():
    """Tally multiply-accumulates of every matrix product executed in the block."""
    counter = MacCounter()
    _mac_counters.append(counter)
    try:
        yield counter
    finally:
        _mac_counters.remove(counter)


def _tally(n: int) -> None:
    for c in _mac_counters:
        c.add(n)


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    """A float64 array with an optional gradient buffer and graph linkage."""

    __slots__ = ("data", "grad", "requires_grad", "node_id", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.node_id = next(_ids)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self.name = name

    # -- construction helpers -------------------------------------------------

    @classmethod
    def _result(cls, data: np.ndarray, parents: tuple["Tensor", ...], backward: BackwardFn) -> "Tensor":
        # a finite sum implies finite entries; the full scan only runs otherwise
        if not np.isfinite(data.sum()) and not np.all(np.isfinite(data)):
            raise NonFiniteError("operation produced non-finite values")
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.node_id = next(_ids)
        out.name = None
        needs = _grad_enabled and any(p.requires_grad for p in parents)
        out.requires_grad = needs
        if needs:
            out._parents = parents
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # -- operators -------------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return _getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

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
        if self.ndim != 2:
            raise ShapeError(".T is defined for 2-d tensors only")
        return transpose(self, (1, 0))

    # -- backward ---------------------------------------------------------------

    def backward(self) -> None:
        """Accumulate d(self)/d(node) into ``.grad`` of every reachable tensor."""
        if self.data.size != 1 or self.data.ndim > 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise ContractError("loss does not depend on any tensor requiring grad")
        nodes: dict[int, Tensor] = {}
        stack = [self]
        while stack:
            t = stack.pop()
            if t.node_id in nodes:
                continue
            nodes[t.node_id] = t
            stack.extend(p for p in t._parents if p.requires_grad)
        pending: dict[int, np.ndarray] = {self.node_id: np.ones_like(self.data)}
        for nid in sorted(nodes, reverse=True):
            g = pending.pop(nid, None)
            if g is None:
                continue
            t = nodes[nid]
            if t._backward is None:
                t.grad = g.copy() if t.grad is None else t.grad + g
                continue
            t.grad = g if t.grad is None else t.grad + g
            for parent, pg in zip(t._parents, t._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent.node_id in pending:
                    pending[parent.node_id] = pending[parent.node_id] + pg
                else:
                    pending[parent.node_id] = pg


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _is_scalar(t: Tensor) -> bool:
    return t.data.ndim == 0


def _reduce_to(g: np.ndarray, t: Tensor) -> np.ndarray:
    """Sum a broadcast gradient back down to a 0-d operand."""
    if _is_scalar(t) and g.ndim > 0:
        return np.asarray(g.sum())
    return g


def _binary_shapes(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and not (_is_scalar(a) or _is_scalar(b)):
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "add")

    def backward(g):
        return _reduce_to(g, a), _reduce_to(g, b)

    return Tensor._result(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "sub")

    def backward(g):
        return _reduce_to(g, a), _reduce_to(-g, b)

    return Tensor._result(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "mul")

    def backward(g):
        return _reduce_to(g * b.data, a), _reduce_to(g * a.data, b)

    return Tensor._result(a.data * b.data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "div")
    if np.any(b.data == 0):
        raise DomainError("div: division by zero")
    out = a.data / b.data

    def backward(g):
        return _reduce_to(g / b.data, a), _reduce_to(-g * out / b.data, b)

    return Tensor._result(out, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def backward(g):
        return (g * c,)

    return Tensor._result(a.data * c, (a,), backward)


def neg(a: Tensor) -> Tensor:
    return scale(a, -1.0)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """x[..., j] + b[j]; ``b`` must be 1-d with length x.shape[-1]."""
    if b.ndim != 1 or x.shape[-1:] != b.shape:
        raise ShapeError(f"add_bias: bias {b.shape} does not match last axis of {x.shape}")
    lead = tuple(range(x.ndim - 1))

    def backward(g):
        return g, g.sum(axis=lead)

    return Tensor._result(x.data + b.data, (x, b), backward)


# ---------------------------------------------------------------------------
# unary nonlinearities
# ---------------------------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def backward(g):
        return (g * mask,)

    return Tensor._result(np.where(mask, x.data, 0.0), (x,), backward)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    v = x.data
    v2 = v * v
    th = np.tanh(_GELU_C * v * (1.0 + 0.044715 * v2))
    out = 0.5 * v * (1.0 + th)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * v2)
        return (g * (0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * dinner),)

    return Tensor._result(out, (x,), backward)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)

    def backward(g):
        return (g * out,)

    return Tensor._result(out, (x,), backward)


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise DomainError("log: non-positive input")

    def backward(g):
        return (g / x.data,)

    return Tensor._result(np.log(x.data), (x,), backward)


def _sigmoid_np(v: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(v))
    return np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(x: Tensor) -> Tensor:
    out = _sigmoid_np(x.data)

    def backward(g):
        return (g * out * (1.0 - out),)

    return Tensor._result(out, (x,), backward)


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)

    def backward(g):
        return (g * (1.0 - out**2),)

    return Tensor._result(out, (x,), backward)


def abs(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    sign = np.sign(x.data)

    def backward(g):
        return (g * sign,)

    return Tensor._result(np.abs(x.data), (x,), backward)


def sqrt(x: Tensor) -> Tensor:
    if np.any(x.data < 0):
        raise DomainError("sqrt: negative input")
    out = np.sqrt(x.data)

    def backward(g):
        return (g * 0.5 / out,)

    return Tensor._result(out, (x,), backward)


def minimum(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "minimum")
    pick_a = a.data <= b.data

    def backward(g):
        return _reduce_to(g * pick_a, a), _reduce_to(g * ~pick_a, b)

    return Tensor._result(np.where(pick_a, a.data, b.data), (a, b), backward)


def maximum(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "maximum")
    pick_a = a.data >= b.data

    def backward(g):
        return _reduce_to(g * pick_a, a), _reduce_to(g * ~pick_a, b)

    return Tensor._result(np.where(pick_a, a.data, b.data), (a, b), backward)


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient is zero where clamping is active."""
    inside = (x.data >= lo) & (x.data <= hi)

    def backward(g):
        return (g * inside,)

    return Tensor._result(np.clip(x.data, lo, hi), (x,), backward)


# ---------------------------------------------------------------------------
# reductions and shape manipulation
# ---------------------------------------------------------------------------


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return Tensor._result(np.asarray(out), (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape

    def backward(g):
        return (g.reshape(src),)

    return Tensor._result(x.data.reshape(shape), (x,), backward)


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))

    def backward(g):
        return (g.transpose(inv),)

    return Tensor._result(x.data.transpose(axes), (x,), backward)


def _getitem(x: Tensor, index) -> Tensor:
    out = x.data[index]

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return Tensor._result(np.array(out, dtype=np.float64), (x,), backward)


def gather_rows(x: Tensor, index: np.ndarray) -> Tensor:
    """out[b, q] = x[b, index[b, q]] for x of shape (B, N, ...) and index (B, Q)."""
    index = np.asarray(index, dtype=np.intp)
    if x.ndim < 2 or index.ndim != 2 or index.shape[0] != x.shape[0]:
        raise ShapeError(f"gather_rows: x {x.shape} vs index {index.shape}")
    rows = np.arange(x.shape[0])[:, None]
    out = x.data[rows, index]

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, (rows, index), g)
        return (full,)

    return Tensor._result(out, (x,), backward)


def tile_batch(x: Tensor, batch: int) -> Tensor:
    """Stack ``batch`` copies of ``x`` along a new leading axis."""
    out = np.repeat(x.data[None], batch, axis=0)

    def backward(g):
        return (g.sum(axis=0),)

    return Tensor._result(out, (x,), backward)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes must match exactly."""
    if a.ndim < 2 or b.ndim < 2 or a.ndim != b.ndim:
        raise ShapeError(f"matmul: need equal-rank operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    out = np.matmul(a.data, b.data)
    _tally(int(np.prod(out.shape)) * a.shape[-1])

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
        return ga, gb

    return Tensor._result(out, (a, b), backward)


def softmax(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Max-stabilised softmax.  ``mask`` (broadcastable, boolean) zeroes excluded entries."""
    v = x.data
    if mask is not None:
        v = np.where(mask, v, -np.inf)
    v = v - np.max(v, axis=axis, keepdims=True)
    e = np.exp(v)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def backward(g):
        dot = np.sum(g * out, axis=axis, keepdims=True)
        return (out * (g - dot),)

    return Tensor._result(out, (x,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply the affine map."""
    if gain.shape != x.shape[-1:] or bias.shape != x.shape[-1:]:
        raise ShapeError(f"layer_norm: affine params must have shape {x.shape[-1:]}")
    n = x.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc**2).mean(axis=-1, keepdims=True)
    denom = np.sqrt(var + eps)
    inv = np.divide(1.0, denom, out=np.zeros_like(denom), where=denom > 0)
    xhat = xc * inv
    lead = tuple(range(x.ndim - 1))

    def backward(g):
        gx_hat = g * gain.data
        gx = inv / n * (n * gx_hat - gx_hat.sum(-1, keepdims=True) - xhat * (gx_hat * xhat).sum(-1, keepdims=True))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return Tensor._result(xhat * gain.data + bias.data, (x, gain, bias), backward)


def l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale each row (last axis) to unit Euclidean norm."""
    norm = np.sqrt((x.data**2).sum(-1, keepdims=True))
    denom = np.maximum(norm, eps)
    out = x.data / denom

    def backward(g):
        dot = (g * out).sum(-1, keepdims=True)
        return ((g - out * dot) / denom,)

    return Tensor._result(out, (x,), backward)


# ---------------------------------------------------------------------------
# banded (local window) attention primitives
# ---------------------------------------------------------------------------


def _windows(x: np.ndarray, w: int) -> np.ndarray:
    """View of shape (..., T, D, 2W+1) with [..., t, :, s] = x[..., t + s - W, :] (zero outside)."""
    pad = [(0, 0)] * x.ndim
    pad[-2] = (w, w)
    return sliding_window_view(np.pad(x, pad), 2 * w + 1, axis=-2)


def _skew(a: np.ndarray, w: int) -> np.ndarray:
    """out[..., j, u] = a[..., j + u - W, 2W - u], zero where the row index leaves [0, T)."""
    t, span = a.shape[-2], a.shape[-1]
    pad = [(0, 0)] * a.ndim
    pad[-2] = (w, w)
    ap = np.pad(a, pad)
    u = np.arange(span)
    rows = np.arange(t)[:, None] + u[None, :]
    return ap[..., rows, (span - 1 - u)[None, :]]


def local_window_mask(t: int, w: int) -> np.ndarray:
    """(T, 2W+1) boolean mask of in-range neighbours; slot s holds frame t + s - W."""
    pos = np.arange(t)[:, None] + np.arange(-w, w + 1)[None, :]
    return (pos >= 0) & (pos < t)


def local_scores(q: Tensor, k: Tensor, window: int) -> Tensor:
    """out[..., t, s] = <q[..., t, :], k[..., t + s - W, :]> for s in [0, 2W].

    Keys outside [0, T) read as zero; callers mask them with
    ``local_window_mask`` before normalising.
    """
    if q.shape != k.shape or q.ndim < 2:
        raise ShapeError(f"local_scores: q {q.shape} and k {k.shape} must match")
    w = int(window)
    if w < 0:
        raise ContractError("window must be >= 0")
    span = 2 * w + 1
    out = np.matmul(q.data[..., None, :], _windows(k.data, w))[..., 0, :]
    _tally(int(np.prod(q.shape)) * span)

    def backward(g):
        gq = np.matmul(_windows(k.data, w), g[..., None])[..., 0] if q.requires_grad else None
        gk = np.matmul(_windows(q.data, w), _skew(g, w)[..., None])[..., 0] if k.requires_grad else None
        return gq, gk

    return Tensor._result(out, (q, k), backward)


def local_mix(p: Tensor, v: Tensor, window: int) -> Tensor:
    """out[..., t, :] = sum_s p[..., t, s] * v[..., t + s - W, :]."""
    w = int(window)
    span = 2 * w + 1
    if p.shape != v.shape[:-1] + (span,):
        raise ShapeError(f"local_mix: weights {p.shape} do not match values {v.shape} at window {w}")
    out = np.matmul(_windows(v.data, w), p.data[..., None])[..., 0]
    _tally(int(np.prod(v.shape)) * span)

    def backward(g):
        gp = np.matmul(g[..., None, :], _windows(v.data, w))[..., 0, :] if p.requires_grad else None
        gv = np.matmul(_windows(g, w), _skew(p.data, w)[..., None])[..., 0] if v.requires_grad else None
        return gp, gv

    return Tensor._result(out, (p, v), backward)


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------


def adamw_step(
    param: np.ndarray,
    grad: np.ndarray,
    m: np.ndarray,
    v: np.ndarray,
    lr: float,
    betas: tuple[float, float],
    weight_decay: float,
    step: int,
    eps: float = 1e-8,
) -> None:
    """One in-place AdamW update of ``param`` and its moment buffers (``step`` is 1-based)."""
    b1, b2 = betas
    param *= 1.0 - lr * weight_decay
    m *= b1
    m += (1.0 - b1) * grad
    v *= b2
    v += (1.0 - b2) * grad * grad
    mhat = m / (1.0 - b1**step)
    vhat = v / (1.0 - b2**step)
    param -= lr * mhat / (np.sqrt(vhat) + eps)


class AdamW:
    """AdamW over a fixed list of leaf tensors."""

    def __init__(
        self,
        params: Iterable[Tensor],
        lr: float = 1e-3,
        betas: tuple[float, float] = (0.9, 0.999),
        weight_decay: float = 1e-4,
        eps: float = 1e-8,
        grad_clip: float | None = None,
    ):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.weight_decay = weight_decay
        self.eps = eps
        self.grad_clip = grad_clip
        self.step_count = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def grad_norm(self) -> float:
        total = 0.0
        for p in self.params:
            if p.grad is not None:
                total += float(np.sum(p.grad * p.grad))
        return math.sqrt(total)

    def step(self) -> None:
        self.step_count += 1
        factor = 1.0
        if self.grad_clip is not None:
            norm = self.grad_norm()
            if norm > self.grad_clip:
                factor = self.grad_clip / (norm + 1e-12)
        for p, m, v in zip(self.params, self._m, self._v):
            g = np.zeros_like(p.data) if p.grad is None else p.grad * factor
            adamw_step(p.data, g, m, v, self.lr, self.betas, self.weight_decay, self.step_count, self.eps)
