"""Dense float64 tensors with reverse-mode automatic differentiation.

The graph is dynamic: every op records its parents and a closure mapping the
output gradient to parent gradients.  ``Tensor.backward`` walks the recorded
nodes in reverse topological order and sums gradients across consumers.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ArgumentError, DegenerateVectorError, EvaluationError

DTYPE = np.float64
NORM_EPS = 1e-12
_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
_GELU_C = 0.044715


class Tensor:
    """A node in the differentiation graph.

    Attributes:
        data: float64 array holding the value.
        requires_grad: whether gradients flow to (or through) this node.
        grad: accumulated gradient, set on leaves by ``backward``.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")
    __array_priority__ = 100.0

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        _parents: tuple[Tensor, ...] = (),
        _backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None,
        op: str = "leaf",
    ):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._backward = _backward
        self.op = op

    # -- introspection -----------------------------------------------------
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
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # -- operators ---------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> Tensor:
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self) -> Tensor:
        return transpose(self, None)

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        return mean(self, axis, keepdims)

    # -- differentiation ---------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every trainable leaf."""
        if grad is None:
            if self.data.size != 1:
                raise ArgumentError(f"backward needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=DTYPE)
            if grad.shape != self.shape:
                raise ArgumentError("seed gradient shape mismatch")
        if not self.requires_grad:
            return
        order = topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                prev = grads.get(key)
                grads[key] = pg if prev is None else prev + pg


def _raise_item(t: Tensor):
    raise ArgumentError(f"item() needs a single-element tensor, got shape {t.shape}")


def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` that require grad, parents before children."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward, op: str) -> Tensor:
    rg = any(p.requires_grad for p in parents)
    return Tensor(data, rg, parents if rg else (), backward if rg else None, op)


def _check_axis(axis: int, ndim: int) -> int:
    if not isinstance(axis, (int, np.integer)) or not -ndim <= axis < ndim:
        raise ArgumentError(f"invalid axis {axis} for rank-{ndim} tensor")
    return int(axis) % ndim


def unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise ----------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape

    def backward(g):
        return unbroadcast(g, sa), unbroadcast(g, sb)

    return _make(a.data + b.data, (a, b), backward, "add")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        return scale(a, float(b))
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape

    def backward(g):
        return (
            unbroadcast(g * b.data, sa) if a.requires_grad else None,
            unbroadcast(g * a.data, sb) if b.requires_grad else None,
        )

    return _make(a.data * b.data, (a, b), backward, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a Python scalar."""
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def reciprocal(a: Tensor) -> Tensor:
    out = 1.0 / a.data
    return _make(out, (a,), lambda g: (-g * out * out,), "reciprocal")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    x = a.data
    return _make(np.log(x), (a,), lambda g: (g / x,), "log")


def gelu(a: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    x = a.data
    # in-place chains: this op runs on the widest activations of the model
    x2 = x * x
    th = np.multiply(x2, _GELU_C * _SQRT_2_OVER_PI)
    th += _SQRT_2_OVER_PI
    th *= x
    np.tanh(th, out=th)
    out = th + 1.0
    out *= x
    out *= 0.5

    def backward(g):
        d = np.multiply(x2, 3 * _GELU_C * _SQRT_2_OVER_PI)
        d += _SQRT_2_OVER_PI
        t = np.multiply(th, th)
        np.subtract(1.0, t, out=t)
        t *= x
        t *= d
        t += th
        t += 1.0
        t *= 0.5
        t *= g
        return (t,)

    return _make(out, (a,), backward, "gelu")


def masked_fill(a: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where ``mask`` is true by a constant (no gradient there)."""
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
    out = np.where(mask, value, a.data)
    return _make(out, (a,), lambda g: (np.where(mask, 0.0, g),), "masked_fill")


# -- linear algebra and shape ---------------------------------------------
def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ArgumentError("matmul operands must have rank >= 2")
    sa, sb = a.shape, b.shape
    if b.ndim == 2 and a.ndim > 2:
        # fold leading dims so the weight gradient is one GEMM
        a2 = a.data.reshape(-1, sa[-1])
        out = (a2 @ b.data).reshape(sa[:-1] + (sb[-1],))

        def backward_folded(g):
            g2 = g.reshape(-1, sb[-1])
            ga = (g2 @ b.data.T).reshape(sa) if a.requires_grad else None
            gb = a2.T @ g2 if b.requires_grad else None
            return ga, gb

        return _make(out, (a, b), backward_folded, "matmul")

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = unbroadcast(g @ np.swapaxes(b.data, -1, -2), sa)
        if b.requires_grad:
            gb = unbroadcast(np.swapaxes(a.data, -1, -2) @ g, sb)
        return ga, gb

    return _make(a.data @ b.data, (a, b), backward, "matmul")


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(_check_axis(ax, a.ndim) for ax in axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ArgumentError(f"invalid permutation {axes}")
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),), "reshape")


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def getitem(a: Tensor, index) -> Tensor:
    """Basic (int/slice) indexing; use ``take_rows`` for gathers."""
    if not _is_basic_index(index):
        raise ArgumentError("getitem supports basic indexing only; use take_rows")
    src = a.shape

    def backward(g):
        full = np.zeros(src, dtype=DTYPE)
        full[index] = g
        return (full,)

    return _make(a.data[index], (a,), backward, "slice")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ArgumentError("concat of empty sequence")
    axis = _check_axis(axis, tensors[0].ndim)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward, "concat")


def take_rows(table: Tensor, index: np.ndarray) -> Tensor:
    """Gather rows of a 2-D ``table``; output shape is ``index.shape + (cols,)``."""
    index = np.asarray(index, dtype=np.intp)
    if table.ndim != 2:
        raise ArgumentError("take_rows expects a 2-D table")
    n_rows = table.shape[0]
    if index.size and (index.min() < 0 or index.max() >= n_rows):
        raise ArgumentError("row index out of range")
    flat = index.reshape(-1)

    def backward(g):
        full = np.zeros(table.shape, dtype=DTYPE)
        np.add.at(full, flat, g.reshape(flat.size, -1))
        return (full,)

    return _make(table.data[index], (table,), backward, "take_rows")


# -- reductions -----------------------------------------------------------
def _norm_axes(axis, ndim) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, (int, np.integer)):
        axis = (axis,)
    return tuple(_check_axis(ax, ndim) for ax in axis)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    src = a.shape
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, src).copy(),)

    return _make(out, (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return scale(sum_(a, axes, keepdims), 1.0 / count)


# -- normalizations -------------------------------------------------------
def softmax(a: Tensor, axis: int = -1) -> Tensor:
    axis = _check_axis(axis, a.ndim)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), backward, "softmax")


def _log_softmax_np(x: np.ndarray, axis: int) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    axis = _check_axis(axis, a.ndim)
    out = _log_softmax_np(a.data, axis)

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make(out, (a,), backward, "log_softmax")


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply elementwise gain and bias."""
    x = a.data
    d = x.shape[-1]
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        gx = ggain = gbias = None
        if gain.requires_grad:
            ggain = (g * xhat).reshape(-1, d).sum(axis=0)
        if bias.requires_grad:
            gbias = g.reshape(-1, d).sum(axis=0)
        if a.requires_grad:
            gh = g * gain.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, ggain, gbias

    return _make(out, (a, gain, bias), backward, "layer_norm")


def l2_normalize(a: Tensor, axis: int = -1) -> Tensor:
    """Scale slices along ``axis`` to unit Euclidean norm."""
    axis = _check_axis(axis, a.ndim)
    x = a.data
    norm = np.sqrt((x * x).sum(axis=axis, keepdims=True))
    if np.any(norm <= NORM_EPS):
        raise DegenerateVectorError(f"cannot normalize a vector with norm <= {NORM_EPS}")
    out = x / norm

    def backward(g):
        return ((g - out * (g * out).sum(axis=axis, keepdims=True)) / norm,)

    return _make(out, (a,), backward, "l2_normalize")


def cross_entropy(logits: Tensor, targets: np.ndarray, weights: np.ndarray | None = None) -> Tensor:
    """Fused log-softmax + gather: ``sum_i w_i * -log softmax(logits_i)[targets_i]``.

    ``logits`` has shape ``(..., V)``; ``targets`` and ``weights`` match the
    leading shape.  Weights default to 1; averaging is the caller's choice.
    """
    x = logits.data
    targets = np.asarray(targets, dtype=np.intp)
    if targets.shape != x.shape[:-1]:
        raise ArgumentError(f"targets shape {targets.shape} does not match logits {x.shape}")
    w = np.ones(targets.shape) if weights is None else np.asarray(weights, dtype=DTYPE)
    if w.shape != targets.shape:
        raise ArgumentError("weights shape mismatch")
    active = w != 0
    if np.any((targets[active] < 0) | (targets[active] >= x.shape[-1])):
        raise ArgumentError("target id out of range")
    safe_t = np.where(active, targets, 0)
    logp = _log_softmax_np(x, -1)
    picked = np.take_along_axis(logp, safe_t[..., None], axis=-1)[..., 0]
    out = -(w * np.where(active, picked, 0.0)).sum()

    def backward(g):
        grad = np.exp(logp)
        np.put_along_axis(grad, safe_t[..., None], np.take_along_axis(grad, safe_t[..., None], -1) - 1.0, -1)
        return (grad * (w * g)[..., None],)

    return _make(np.asarray(out), (logits,), backward, "cross_entropy")


# -- gradient checking ----------------------------------------------------
def grad_check(f: Callable[[], Tensor], params: Iterable[Tensor], eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` rebuilds the graph from the current values of ``params`` on each call.
    The relative error of one entry is ``|analytic - numeric| / max(1, |numeric|)``.
    """
    if not 1e-8 < eps < 1e-2:
        raise ArgumentError(f"eps must lie in (1e-8, 1e-2), got {eps}")
    params = list(params)
    for p in params:
        if not p.data.flags.c_contiguous:
            p.data = p.data.copy(order="C")
        p.grad = None
    loss = f()
    if not np.all(np.isfinite(loss.data)):
        raise EvaluationError("non-finite function value at the base point")
    loss.backward()
    worst = 0.0
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            with np.errstate(all="ignore"):
                flat[i] = orig + eps
                fp = float(f().data)
                flat[i] = orig - eps
                fm = float(f().data)
            flat[i] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise EvaluationError(f"non-finite function value probing entry {i}")
            numeric = (fp - fm) / (2 * eps)
            err = abs(analytic.reshape(-1)[i] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst
