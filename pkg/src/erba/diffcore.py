"""Dense rank-2 tensors with tape-ordered reverse-mode differentiation.

Every value is a float64 matrix. Operations record their parents and a
backward closure; :func:`backward` walks the recorded nodes in reverse
creation order. Creation order is tracked per :class:`Tape`, so forward
passes run on different threads can still be differentiated in a fixed,
reproducible order.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "DimensionError",
    "EmptyPoolError",
    "GradCheckReport",
    "ModelParams",
    "Tape",
    "Tensor",
    "backward",
    "clamp",
    "concat_cols",
    "concat_rows",
    "exp",
    "gelu",
    "grad_check",
    "layer_norm",
    "linear_map",
    "mean_pool_rows",
    "pairwise_sqdist",
    "recording",
    "scatter_cols",
    "scatter_add_rows",
    "softmax_rows",
    "sum_all",
    "take_cols",
    "take_rows",
]

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class DimensionError(ValueError):
    pass


class EmptyPoolError(ValueError):
    pass


class Tape:
    """Orders node creation. Keys are ``(rank, seq)`` and compare lexicographically."""

    def __init__(self, rank: int = 0):
        self.rank = rank
        self._counter = itertools.count()

    def next_key(self) -> tuple[int, int]:
        return (self.rank, next(self._counter))


_default_tape = Tape(0)
_local = threading.local()


def _current_tape() -> Tape:
    return getattr(_local, "tape", None) or _default_tape


@contextmanager
def recording(tape: Tape):
    """Record operations created on this thread onto ``tape``."""
    prev = getattr(_local, "tape", None)
    _local.tape = tape
    try:
        yield tape
    finally:
        _local.tape = prev


def _as_matrix(data) -> np.ndarray:
    arr = np.array(data, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim > 2:
        raise DimensionError(f"rank-{arr.ndim} data not supported (max rank 2)")
    return arr


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_key")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = _as_matrix(data)
        if not np.isfinite(arr).all():
            raise FloatingPointError(f"non-finite value in tensor {name or ''}".rstrip())
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(arr) if requires_grad else None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._key = _current_tape().next_key()

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
        if not np.isfinite(data).all():
            raise FloatingPointError("operation produced a non-finite value")
        out = cls.__new__(cls)
        out.data = data
        out.name = None
        out.grad = None
        out._key = _current_tape().next_key()
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward_fn
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() on tensor of shape {self.shape}")
        return float(self.data[0, 0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _wrap(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, _wrap(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / float(other))
        return div(self, _wrap(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return linear_map(self, other)

    @property
    def T(self) -> Tensor:
        return transpose(self)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    if shape[0] == 1 and grad.shape[0] != 1:
        grad = grad.sum(axis=0, keepdims=True)
    if shape[1] == 1 and grad.shape[1] != 1:
        grad = grad.sum(axis=1, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    for x, y in ((a.shape, b.shape), (b.shape, a.shape)):
        if all(dx == dy or dy == 1 for dx, dy in zip(x, y)):
            return
    raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


# --------------------------------------------------------------------------
# elementwise and structural ops
# --------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._from_op(a.data + b.data, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._from_op(a.data - b.data, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor._from_op(a.data * b.data, (a, b), bw)


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "div")
    out = a.data / b.data

    def bw(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return Tensor._from_op(out, (a, b), bw)


def scale(x: Tensor, c: float) -> Tensor:
    return Tensor._from_op(x.data * c, (x,), lambda g: (g * c,))


def mask_mul(x: Tensor, mask: np.ndarray) -> Tensor:
    """Multiply by a constant array (no gradient to the mask)."""
    mask = np.asarray(mask, dtype=np.float64)
    return Tensor._from_op(x.data * mask, (x,), lambda g: (g * mask,))


def transpose(x: Tensor) -> Tensor:
    return Tensor._from_op(x.data.T.copy(), (x,), lambda g: (g.T,))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return Tensor._from_op(out, (x,), lambda g: (g * out,))


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    inside = (x.data >= lo) & (x.data <= hi)
    return Tensor._from_op(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,))


def sum_all(x: Tensor) -> Tensor:
    return Tensor._from_op(
        np.array([[x.data.sum()]]), (x,), lambda g: (np.full(x.shape, g[0, 0]),)
    )


def linear_map(x: Tensor, w: Tensor) -> Tensor:
    """Matrix product ``x @ w``."""
    if x.shape[1] != w.shape[0]:
        raise DimensionError(f"linear_map: cannot multiply {x.shape} by {w.shape}")

    def bw(g):
        return g @ w.data.T, x.data.T @ g

    return Tensor._from_op(x.data @ w.data, (x, w), bw)


def take_rows(x: Tensor, idx: Sequence[int]) -> Tensor:
    idx = np.asarray(idx, dtype=np.intp)

    def bw(g):
        out = np.zeros_like(x.data)
        np.add.at(out, idx, g)
        return (out,)

    return Tensor._from_op(x.data[idx], (x,), bw)


def take_cols(x: Tensor, idx: Sequence[int]) -> Tensor:
    idx = np.asarray(idx, dtype=np.intp)

    def bw(g):
        out = np.zeros_like(x.data)
        np.add.at(out, (slice(None), idx), g)
        return (out,)

    return Tensor._from_op(x.data[:, idx], (x,), bw)


def scatter_cols(x: Tensor, idx: Sequence[int], width: int) -> Tensor:
    """Place the columns of ``x`` at positions ``idx`` of a zero matrix ``rows × width``."""
    idx = np.asarray(idx, dtype=np.intp)
    out = np.zeros((x.shape[0], width))
    out[:, idx] = x.data
    return Tensor._from_op(out, (x,), lambda g: (g[:, idx],))


def scatter_add_rows(x: Tensor, idx: Sequence[int], delta: Tensor) -> Tensor:
    """Copy of ``x`` with ``delta`` added to rows ``idx``; other rows pass through untouched."""
    idx = np.asarray(idx, dtype=np.intp)
    if delta.shape != (len(idx), x.shape[1]):
        raise DimensionError(
            f"scatter_add_rows: delta {delta.shape} does not fit {len(idx)} rows of {x.shape}"
        )
    out = x.data.copy()
    out[idx] = out[idx] + delta.data
    return Tensor._from_op(out, (x, delta), lambda g: (g, g[idx]))


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    rows = {p.shape[0] for p in parts}
    if len(rows) != 1:
        raise DimensionError(f"concat_cols: row extents differ {[p.shape for p in parts]}")
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])

    def bw(g):
        return tuple(g[:, bounds[i] : bounds[i + 1]] for i in range(len(parts)))

    return Tensor._from_op(np.concatenate([p.data for p in parts], axis=1), parts, bw)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    cols = {p.shape[1] for p in parts}
    if len(cols) != 1:
        raise DimensionError(f"concat_rows: column extents differ {[p.shape for p in parts]}")
    bounds = np.cumsum([0] + [p.shape[0] for p in parts])

    def bw(g):
        return tuple(g[bounds[i] : bounds[i + 1]] for i in range(len(parts)))

    return Tensor._from_op(np.concatenate([p.data for p in parts], axis=0), parts, bw)


# --------------------------------------------------------------------------
# network primitives
# --------------------------------------------------------------------------


def softmax_rows(x: Tensor) -> Tensor:
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=1, keepdims=True)),)

    return Tensor._from_op(out, (x,), bw)


def layer_norm(
    x: Tensor, gain: Tensor | None = None, bias: Tensor | None = None, eps: float = 1e-5
) -> Tensor:
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    mu = x.data.mean(axis=1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat
    if gain is not None:
        out = out * gain.data
    if bias is not None:
        out = out + bias.data

    parents = [x]
    if gain is not None:
        parents.append(gain)
    if bias is not None:
        parents.append(bias)

    def bw(g):
        gx = g * gain.data if gain is not None else g
        dx = inv * (gx - gx.mean(axis=1, keepdims=True)
                    - xhat * (gx * xhat).mean(axis=1, keepdims=True))
        grads = [dx]
        if gain is not None:
            grads.append((g * xhat).sum(axis=0, keepdims=True))
        if bias is not None:
            grads.append(g.sum(axis=0, keepdims=True))
        return tuple(grads)

    return Tensor._from_op(out, parents, bw)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU ``x * Phi(x)`` using the error function."""
    cdf = 0.5 * (1.0 + erf(x.data / _SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)

    def bw(g):
        return (g * (cdf + x.data * pdf),)

    return Tensor._from_op(x.data * cdf, (x,), bw)


def mean_pool_rows(x: Tensor) -> Tensor:
    n = x.shape[0]
    if n == 0:
        raise EmptyPoolError("mean_pool_rows over zero rows")
    return Tensor._from_op(
        x.data.mean(axis=0, keepdims=True),
        (x,),
        lambda g: (np.broadcast_to(g / n, x.shape).copy(),),
    )


def pairwise_sqdist(a: Tensor, b: Tensor) -> Tensor:
    """Squared Euclidean distances between every row of ``a`` and every row of ``b``."""
    if a.shape[1] != b.shape[1]:
        raise DimensionError(f"pairwise_sqdist: {a.shape} vs {b.shape}")
    diff = a.data[:, None, :] - b.data[None, :, :]
    out = (diff * diff).sum(axis=2)

    def bw(g):
        w = 2.0 * g[:, :, None] * diff
        return w.sum(axis=1), -w.sum(axis=0)

    return Tensor._from_op(out, (a, b), bw)


# --------------------------------------------------------------------------
# reverse pass
# --------------------------------------------------------------------------


def backward(root: Tensor, seed: np.ndarray | None = None) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
    if not root.requires_grad:
        return
    if seed is None:
        if root.data.size != 1:
            raise DimensionError("backward() without seed needs a scalar root")
        seed = np.ones_like(root.data)

    nodes: dict[int, Tensor] = {}
    stack = [root]
    while stack:
        node = stack.pop()
        if id(node) in nodes or node.is_leaf:
            continue
        nodes[id(node)] = node
        stack.extend(p for p in node._parents if p.requires_grad)

    order = sorted(nodes.values(), key=lambda t: t._key, reverse=True)
    grads: dict[int, np.ndarray] = {id(root): np.asarray(seed, dtype=np.float64)}
    leaves: dict[int, Tensor] = {}
    for node in order:
        g = grads.pop(id(node), None)
        if g is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            pid = id(parent)
            if pid in grads:
                grads[pid] = grads[pid] + pg
            else:
                grads[pid] = pg
            if parent.is_leaf:
                leaves[pid] = parent
    for pid, leaf in leaves.items():
        leaf.grad += grads[pid]


# --------------------------------------------------------------------------
# parameter registry and gradient checking
# --------------------------------------------------------------------------


class ModelParams:
    """Insertion-ordered registry of named parameter tensors with frozen flags."""

    def __init__(self):
        self._tensors: dict[str, Tensor] = {}
        self._frozen: dict[str, bool] = {}

    def add(self, name: str, data, frozen: bool = False) -> Tensor:
        if name in self._tensors:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(data, requires_grad=not frozen, name=name)
        self._tensors[name] = t
        self._frozen[name] = frozen
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __len__(self) -> int:
        return len(self._tensors)

    def names(self) -> list[str]:
        return list(self._tensors)

    def items(self) -> Iterable[tuple[str, Tensor]]:
        return self._tensors.items()

    def is_frozen(self, name: str) -> bool:
        return self._frozen[name]

    def trainable(self) -> list[tuple[str, Tensor]]:
        return [(k, t) for k, t in self._tensors.items() if not self._frozen[k]]

    def zero_grad(self) -> None:
        for t in self._tensors.values():
            t.zero_grad()

    def subset(self, prefix: str) -> dict[str, Tensor]:
        return {k: t for k, t in self._tensors.items() if k.startswith(prefix)}


@dataclass
class GradCheckReport:
    name: str
    max_rel_error: float
    worst_index: tuple[int, int]


def _rel_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)


def grad_check(
    loss_fn: Callable[[ModelParams], Tensor],
    params: ModelParams,
    h: float = 1e-5,
    names: Iterable[str] | None = None,
) -> list[GradCheckReport]:
    """Compare analytic gradients with central differences for every trainable scalar."""
    if h <= 0:
        raise ValueError("step h must be positive")
    params.zero_grad()
    loss = loss_fn(params)
    if not np.isfinite(loss.data).all():
        raise FloatingPointError("loss is not finite")
    backward(loss)

    selected = set(names) if names is not None else None
    reports = []
    for name, t in params.trainable():
        if selected is not None and name not in selected:
            continue
        analytic = t.grad.copy()
        worst, worst_idx = 0.0, (0, 0)
        for idx in np.ndindex(*t.shape):
            orig = t.data[idx]
            t.data[idx] = orig + h
            f_plus = loss_fn(params).item()
            t.data[idx] = orig - h
            f_minus = loss_fn(params).item()
            t.data[idx] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            err = _rel_error(analytic[idx], numeric)
            if err > worst:
                worst, worst_idx = err, (int(idx[0]), int(idx[1]))
        reports.append(GradCheckReport(name, worst, worst_idx))
    params.zero_grad()
    return reports
