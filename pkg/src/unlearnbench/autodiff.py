"""Small define-by-run reverse-mode autodiff over dense float64 arrays.

Only the operations needed by the encoder and the unlearning losses are
provided. Every op records a node on a per-graph tape; ``backward`` walks
the tape of the loss in reverse topological order exactly once per node.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

NORM_EPS = 1e-12


class ShapeError(ValueError):
    """Raised when operand dimensions do not agree."""


def _as_array(value) -> np.ndarray:
    return np.asarray(value, dtype=np.float64)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    # sum out the axes numpy broadcasting added or stretched
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """Dense array with an optional gradient buffer and a backward closure."""

    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, _parents: Sequence["Tensor"] = (),
                 _backward: Callable[[np.ndarray], None] | None = None, op: str = "leaf"):
        self.data = _as_array(data)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self._parents = tuple(_parents)
        self._backward = _backward
        self.op = op

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    # operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_lift(other)))

    def __rsub__(self, other):
        return add(_lift(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / _as_array(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _lift(other))

    @property
    def T(self):
        return transpose(self)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, backward, op) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=False, _parents=parents if needs else (), op=op)
    if needs:
        out.requires_grad = True
        out.grad = None  # allocated lazily during backward
        out._backward = backward
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True).reshape(t.shape)
    else:
        t.grad = t.grad + g


# elementwise ---------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    out_data = a.data + b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _node(out_data, (a, b), backward, "add")


def neg(a: Tensor) -> Tensor:
    def backward(g):
        _accumulate(a, -g)

    return _node(-a.data, (a,), backward, "neg")


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)

    def backward(g):
        _accumulate(a, _unbroadcast(g * b.data, a.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _node(a.data * b.data, (a, b), backward, "mul")


def reciprocal(a: Tensor) -> Tensor:
    out = 1.0 / a.data

    def backward(g):
        _accumulate(a, -g * out * out)

    return _node(out, (a,), backward, "reciprocal")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def backward(g):
        _accumulate(a, g * (1.0 - out * out))

    return _node(out, (a,), backward, "tanh")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def backward(g):
        _accumulate(a, g * out)

    return _node(out, (a,), backward, "exp")


def log(a: Tensor) -> Tensor:
    def backward(g):
        _accumulate(a, g / a.data)

    return _node(np.log(a.data), (a,), backward, "log")


def hinge(x: Tensor) -> Tensor:
    """Elementwise max(0, x). The subgradient at exactly 0 is taken as 0."""
    x = _lift(x)
    active = x.data > 0.0

    def backward(g):
        _accumulate(x, g * active)

    return _node(np.where(active, x.data, 0.0), (x,), backward, "hinge")


# shape / reduction ----------------------------------------------------

def transpose(a: Tensor) -> Tensor:
    def backward(g):
        _accumulate(a, g.T)

    return _node(a.data.T, (a,), backward, "transpose")


def reshape(a: Tensor, shape) -> Tensor:
    def backward(g):
        _accumulate(a, g.reshape(a.shape))

    return _node(a.data.reshape(shape), (a,), backward, "reshape")


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.shape))

    return _node(out, (a,), backward, "sum")


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.data.size if axis is None else a.data.shape[axis]
    return sum(a, axis=axis) * (1.0 / n)


def take(a: Tensor, rows, cols) -> Tensor:
    """Gather ``a[rows[k], cols[k]]`` into a 1-D tensor."""
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, (rows, cols), g)
        _accumulate(a, full)

    return _node(a.data[rows, cols], (a,), backward, "take")


def index_rows(a: Tensor, idx) -> Tensor:
    """Rows ``a[idx]`` (repeats allowed); gradients scatter-add back."""
    idx = np.asarray(idx, dtype=np.intp)

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        _accumulate(a, full)

    return _node(a.data[idx], (a,), backward, "index_rows")


def row_norm(a: Tensor) -> Tensor:
    """Euclidean norm of every row, shape (n,)."""
    norms = np.sqrt((a.data * a.data).sum(axis=1))

    def backward(g):
        safe = np.where(norms > 0.0, norms, 1.0)
        _accumulate(a, (g / safe)[:, None] * a.data * (norms > 0.0)[:, None])

    return _node(norms, (a,), backward, "row_norm")


# linear algebra -------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g @ b.data.T)
        if b.requires_grad:
            _accumulate(b, a.data.T @ g)

    return _node(a.data @ b.data, (a, b), backward, "matmul")


def l2_normalize(x: Tensor, eps: float = NORM_EPS) -> Tensor:
    """Divide each row by max(||row||, eps)."""
    x = _lift(x)
    if x.data.ndim != 2 or 0 in x.shape:
        raise ShapeError(f"l2_normalize expects a non-empty matrix, got {x.shape}")
    norms = np.sqrt((x.data * x.data).sum(axis=1, keepdims=True))
    denom = np.maximum(norms, eps)
    out = x.data / denom
    guarded = norms < eps

    def backward(g):
        # d(x/|x|) = (g - y (y.g)) / |x|; rows clipped at eps see a constant divisor
        proj = (g * out).sum(axis=1, keepdims=True)
        grad = np.where(guarded, g / denom, (g - out * proj) / denom)
        _accumulate(x, grad)

    return _node(out, (x,), backward, "l2_normalize")


def cosine_matrix(a: Tensor, b: Tensor) -> Tensor:
    """Pairwise dot products of unit rows; entry (i, j) = <a_i, b_j>."""
    a, b = _lift(a), _lift(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"cosine_matrix: row dims differ, {a.shape} vs {b.shape}")
    if a is b:
        out = a.data @ a.data.T

        def backward_self(g):
            _accumulate(a, (g + g.T) @ a.data)

        return _node(out, (a,), backward_self, "cosine_matrix")

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g @ b.data)
        if b.requires_grad:
            _accumulate(b, g.T @ a.data)

    return _node(a.data @ b.data.T, (a, b), backward, "cosine_matrix")


def masked_logsumexp(x: Tensor, mask: np.ndarray) -> Tensor:
    """Row-wise log(sum_j mask_ij * exp(x_ij)); rows need at least one True."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any(axis=1).all():
        raise ValueError("masked_logsumexp: every row needs at least one unmasked entry")
    masked = np.where(mask, x.data, -np.inf)
    shift = masked.max(axis=1, keepdims=True)
    e = np.where(mask, np.exp(masked - shift), 0.0)
    total = e.sum(axis=1, keepdims=True)
    out = (np.log(total) + shift)[:, 0]

    def backward(g):
        _accumulate(x, g[:, None] * e / total)

    return _node(out, (x,), backward, "masked_logsumexp")


def log_sum_exp_ce(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy, stabilized by subtracting the row max."""
    labels = np.asarray(labels, dtype=np.intp)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"expected {n} labels, got shape {labels.shape}")
    if n and (labels.min() < 0 or labels.max() >= k):
        raise IndexError(f"labels must lie in [0, {k})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    ez = np.exp(z)
    total = ez.sum(axis=1, keepdims=True)
    rows = np.arange(n)
    loss = float(np.mean(np.log(total[:, 0]) - z[rows, labels]))

    def backward(g):
        p = ez / total
        p[rows, labels] -= 1.0
        _accumulate(logits, g * p / n)

    return _node(np.array(loss), (logits,), backward, "log_sum_exp_ce")


# gradient machinery -----------------------------------------------------

def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every leaf that requires grad."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    if loss._backward is None:
        _accumulate(loss, np.ones_like(loss.data))
        return
    tape = _topological(loss)
    interior = [t for t in tape if t._backward is not None]
    for t in interior:
        t.grad = None
    loss.grad = np.ones_like(loss.data)
    for t in reversed(tape):
        if t._backward is None or t.grad is None:
            continue
        t._backward(t.grad)
    for t in interior:
        t.grad = None


def grad_check(f: Callable[[Tensor], Tensor], x, h: float = 1e-6) -> float:
    """Max relative error between the tape gradient and central differences."""
    x0 = _as_array(x).copy()
    probe = Tensor(x0.copy(), requires_grad=True)
    backward(f(probe))
    analytic = probe.grad
    numeric = np.zeros_like(x0)
    flat = x0.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f(Tensor(x0.copy())).item()
        flat[i] = orig - h
        down = f(Tensor(x0.copy())).item()
        flat[i] = orig
        numeric.reshape(-1)[i] = (up - down) / (2.0 * h)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / scale)) if x0.size else 0.0
