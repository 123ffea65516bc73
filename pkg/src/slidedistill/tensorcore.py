"""Dense 2-D tensors with reverse-mode differentiation.

A small define-by-run engine over float64 numpy matrices. Every operation
records its inputs, so one :func:`backward` call from a scalar loss fills the
``grad`` field of every reachable tensor that has ``requires_grad`` set.
Gradients of leaves accumulate across backward calls until explicitly zeroed,
which is what window-level gradient accumulation relies on.

The op set is deliberately minimal: matrix products, the pointwise functions
the gated-attention and distillation losses need, a few reductions, Kronecker
products of row vectors, transposition and concatenation. No broadcasting
beyond ``add_rowvec``, no views into shared storage, no higher-order grads.

Tensors and the graphs they form are confined to a single thread; independent
graphs may run in parallel threads.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DomainError, ShapeError

SELU_LAMBDA = 1.0507009873554805
SELU_ALPHA = 1.6732632423543772

# Guard for row_l2_normalize: rows with norm below this are divided by it
# instead, since similarity-matrix rows can vanish at initialization.
ROW_NORM_EPS = 1e-12

_seq_counter = itertools.count()

# Count of rows that hit the ROW_NORM_EPS guard since the last reset.
zero_row_guard_count = 0


def reset_zero_row_guard_count() -> None:
    global zero_row_guard_count
    zero_row_guard_count = 0


class Tensor:
    """A 2-D float64 matrix node in a define-by-run computation graph.

    ``data`` is row-major; ``grad`` is lazily allocated with the same shape
    and accumulates contributions from every path to the loss. Scalars are
    1x1, row vectors 1xn.
    """

    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward", "_seq")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise ShapeError(f"tensors are 2-D, got array of ndim {arr.ndim}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[], None] | None = None
        self._seq = next(_seq_counter)

    @classmethod
    def _op(cls, data: np.ndarray, parents: tuple["Tensor", ...], op: str) -> "Tensor":
        out = cls(data, requires_grad=any(p.requires_grad for p in parents))
        out.op = op
        out._parents = parents
        return out

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape  # type: ignore[return-value]

    def item(self) -> float:
        if self.data.shape != (1, 1):
            raise ShapeError(f"item() needs a 1x1 tensor, got {self.data.shape}")
        return float(self.data[0, 0])

    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        """Same values, cut off from the graph (no gradient flows through)."""
        return Tensor(self.data, requires_grad=False)

    def backward(self) -> None:
        backward(self)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    def __rmul__(self, other):
        return scale(self, float(other))

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, op={self.op!r}, requires_grad={self.requires_grad})"


@dataclass
class Graph:
    """The ancestors of a root tensor, in creation (insertion) order.

    Creation order is a topological order under define-by-run: every input
    of an op is created before the op's output. ``backward`` walks this list
    in reverse.
    """

    root: Tensor
    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def trace(cls, root: Tensor) -> "Graph":
        seen: set[int] = set()
        nodes: list[Tensor] = []
        stack = [root]
        while stack:
            t = stack.pop()
            if id(t) in seen:
                continue
            seen.add(id(t))
            nodes.append(t)
            stack.extend(t._parents)
        nodes.sort(key=lambda t: t._seq)
        return cls(root=root, nodes=nodes)


def backward(loss: Tensor) -> None:
    """Backpropagate from a scalar loss.

    Each op node is visited exactly once, in reverse insertion order. Leaf
    gradients accumulate across calls (windowed accumulation); op-node
    gradients are reset per call so the same graph can be replayed without
    double counting.
    """
    if loss.data.shape != (1, 1):
        raise ContractError(f"backward needs a scalar (1x1) loss, got shape {loss.data.shape}")
    graph = Graph.trace(loss)
    for node in graph.nodes:
        if node._parents:
            node.grad = None
    loss._accum(np.ones((1, 1)))
    for node in reversed(graph.nodes):
        if node._backward is not None and node.requires_grad and node.grad is not None:
            node._backward()


# ---------------------------------------------------------------------------
# matrix ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: inner dimensions disagree, {a.data.shape} @ {b.data.shape}")
    out = Tensor._op(a.data @ b.data, (a, b), "matmul")
    if out.requires_grad:
        def _bw():
            g = out.grad
            if a.requires_grad:
                a._accum(g @ b.data.T)
            if b.requires_grad:
                b._accum(a.data.T @ g)
        out._backward = _bw
    return out


def transpose(a: Tensor) -> Tensor:
    out = Tensor._op(a.data.T.copy(), (a,), "transpose")
    if out.requires_grad:
        def _bw():
            a._accum(out.grad.T)
        out._backward = _bw
    return out


def kron(a: Tensor, b: Tensor) -> Tensor:
    """Kronecker product of two row vectors: out[i*q + j] = a[i] * b[j]."""
    if a.data.shape[0] != 1 or b.data.shape[0] != 1:
        raise ShapeError(f"kron needs row vectors, got {a.data.shape} and {b.data.shape}")
    p, q = a.data.shape[1], b.data.shape[1]
    out = Tensor._op(np.kron(a.data, b.data), (a, b), "kron")
    if out.requires_grad:
        def _bw():
            g = out.grad.reshape(p, q)
            if a.requires_grad:
                a._accum((g @ b.data.T).reshape(1, p))
            if b.requires_grad:
                b._accum(a.data @ g)
        out._backward = _bw
    return out


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    """Stack tensors with equal column counts into one matrix, top to bottom."""
    if not parts:
        raise ShapeError("concat_rows of an empty sequence")
    cols = parts[0].data.shape[1]
    for t in parts:
        if t.data.shape[1] != cols:
            raise ShapeError(f"concat_rows: column counts differ, {t.data.shape[1]} vs {cols}")
    out = Tensor._op(np.vstack([t.data for t in parts]), tuple(parts), "concat_rows")
    if out.requires_grad:
        offsets = np.cumsum([0] + [t.data.shape[0] for t in parts])
        def _bw():
            g = out.grad
            for t, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
                if t.requires_grad:
                    t._accum(g[lo:hi])
        out._backward = _bw
    return out


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate tensors with equal row counts left to right."""
    if not parts:
        raise ShapeError("concat_cols of an empty sequence")
    rows = parts[0].data.shape[0]
    for t in parts:
        if t.data.shape[0] != rows:
            raise ShapeError(f"concat_cols: row counts differ, {t.data.shape[0]} vs {rows}")
    out = Tensor._op(np.hstack([t.data for t in parts]), tuple(parts), "concat_cols")
    if out.requires_grad:
        offsets = np.cumsum([0] + [t.data.shape[1] for t in parts])
        def _bw():
            g = out.grad
            for t, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
                if t.requires_grad:
                    t._accum(g[:, lo:hi])
        out._backward = _bw
    return out


# ---------------------------------------------------------------------------
# pointwise ops


def _binary(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: shapes differ, {a.data.shape} vs {b.data.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _binary(a, b, "add")
    out = Tensor._op(a.data + b.data, (a, b), "add")
    if out.requires_grad:
        def _bw():
            if a.requires_grad:
                a._accum(out.grad)
            if b.requires_grad:
                b._accum(out.grad)
        out._backward = _bw
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    _binary(a, b, "sub")
    out = Tensor._op(a.data - b.data, (a, b), "sub")
    if out.requires_grad:
        def _bw():
            if a.requires_grad:
                a._accum(out.grad)
            if b.requires_grad:
                b._accum(-out.grad)
        out._backward = _bw
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    _binary(a, b, "mul")
    out = Tensor._op(a.data * b.data, (a, b), "mul")
    if out.requires_grad:
        def _bw():
            g = out.grad
            if a.requires_grad:
                a._accum(g * b.data)
            if b.requires_grad:
                b._accum(g * a.data)
        out._backward = _bw
    return out


def scale(a: Tensor, c: float) -> Tensor:
    out = Tensor._op(a.data * c, (a,), "scale")
    if out.requires_grad:
        def _bw():
            a._accum(out.grad * c)
        out._backward = _bw
    return out


def add_rowvec(a: Tensor, v: Tensor) -> Tensor:
    """Add a 1xd row vector to every row of an nxd matrix (bias add)."""
    if v.data.shape != (1, a.data.shape[1]):
        raise ShapeError(f"add_rowvec: expected row vector (1, {a.data.shape[1]}), got {v.data.shape}")
    out = Tensor._op(a.data + v.data, (a, v), "add_rowvec")
    if out.requires_grad:
        def _bw():
            g = out.grad
            if a.requires_grad:
                a._accum(g)
            if v.requires_grad:
                v._accum(g.sum(axis=0, keepdims=True))
        out._backward = _bw
    return out


def _unary(a: Tensor, op: str, value: np.ndarray, deriv: np.ndarray) -> Tensor:
    out = Tensor._op(value, (a,), op)
    if out.requires_grad:
        def _bw():
            a._accum(out.grad * deriv)
        out._backward = _bw
    return out


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)
    return _unary(a, "tanh", t, 1.0 - t * t)


def sigmoid(a: Tensor) -> Tensor:
    s = 1.0 / (1.0 + np.exp(-a.data))
    return _unary(a, "sigmoid", s, s * (1.0 - s))


def exp(a: Tensor) -> Tensor:
    e = np.exp(a.data)
    return _unary(a, "exp", e, e)


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0.0):
        raise DomainError("log of a non-positive entry")
    return _unary(a, "log", np.log(a.data), 1.0 / a.data)


def absval(a: Tensor) -> Tensor:
    # subgradient 0 at 0 (np.sign(0) == 0)
    return _unary(a, "abs", np.abs(a.data), np.sign(a.data))


def relu(a: Tensor) -> Tensor:
    return _unary(a, "relu", np.maximum(a.data, 0.0), (a.data > 0.0).astype(np.float64))


def selu(a: Tensor) -> Tensor:
    pos = a.data > 0.0
    e = np.exp(np.minimum(a.data, 0.0))
    value = SELU_LAMBDA * np.where(pos, a.data, SELU_ALPHA * (e - 1.0))
    deriv = SELU_LAMBDA * np.where(pos, 1.0, SELU_ALPHA * e)
    return _unary(a, "selu", value, deriv)


def clamp_min(a: Tensor, floor: float) -> Tensor:
    return _unary(a, "clamp_min", np.maximum(a.data, floor), (a.data >= floor).astype(np.float64))


# ---------------------------------------------------------------------------
# reductions


def sum_all(a: Tensor) -> Tensor:
    out = Tensor._op(np.array([[a.data.sum()]]), (a,), "sum")
    if out.requires_grad:
        def _bw():
            a._accum(np.full_like(a.data, out.grad[0, 0]))
        out._backward = _bw
    return out


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    out = Tensor._op(np.array([[a.data.sum() / n]]), (a,), "mean")
    if out.requires_grad:
        def _bw():
            a._accum(np.full_like(a.data, out.grad[0, 0] / n))
        out._backward = _bw
    return out


def frobenius_sq(a: Tensor) -> Tensor:
    """Sum of squared entries (squared Frobenius norm)."""
    out = Tensor._op(np.array([[float(np.sum(a.data * a.data))]]), (a,), "frobenius_sq")
    if out.requires_grad:
        def _bw():
            a._accum(2.0 * a.data * out.grad[0, 0])
        out._backward = _bw
    return out


def row_l2_normalize(a: Tensor) -> Tensor:
    """Divide each row by its Euclidean norm, guarded below by ROW_NORM_EPS.

    Guarded rows bump the module-level ``zero_row_guard_count``.
    """
    global zero_row_guard_count
    norms = np.sqrt(np.sum(a.data * a.data, axis=1, keepdims=True))
    guarded = norms < ROW_NORM_EPS
    n_guarded = int(guarded.sum())
    if n_guarded:
        zero_row_guard_count += n_guarded
    denom = np.maximum(norms, ROW_NORM_EPS)
    y = a.data / denom
    out = Tensor._op(y, (a,), "row_l2_normalize")
    if out.requires_grad:
        def _bw():
            g = out.grad
            dot = np.sum(y * g, axis=1, keepdims=True)
            gx = (g - y * dot) / denom
            if n_guarded:
                # in the guard zone the map is x / eps, which is linear
                gx = np.where(guarded, g / ROW_NORM_EPS, gx)
            a._accum(gx)
        out._backward = _bw
    return out


def softmax_row(a: Tensor) -> Tensor:
    """Row-wise softmax, shift-stabilized by the row max."""
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)
    out = Tensor._op(y, (a,), "softmax_row")
    if out.requires_grad:
        def _bw():
            g = out.grad
            dot = np.sum(y * g, axis=1, keepdims=True)
            a._accum(y * (g - dot))
        out._backward = _bw
    return out


# ---------------------------------------------------------------------------
# finite-difference oracle


@dataclass
class GradCheckReport:
    """Result of comparing backward gradients to central finite differences."""

    h: float
    tol: float
    per_leaf: dict[str, float]

    @property
    def max_rel_error(self) -> float:
        return max(self.per_leaf.values()) if self.per_leaf else 0.0

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol

    def __str__(self) -> str:
        lines = [f"grad check (h={self.h:g}, tol={self.tol:g}):"]
        for name, err in self.per_leaf.items():
            mark = "ok" if err <= self.tol else "FAIL"
            lines.append(f"  {name}: max rel err {err:.3e} [{mark}]")
        return "\n".join(lines)


def _rel_err(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), 1e-8)


def grad_check(
    f: Callable[[], Tensor],
    leaves: Sequence[Tensor],
    h: float = 1e-5,
    tol: float = 1e-4,
    names: Sequence[str] | None = None,
) -> GradCheckReport:
    """Compare backward gradients of ``f()`` with central finite differences.

    ``f`` must rebuild its graph from the current leaf data on every call and
    be deterministic. Leaf data is perturbed in place coordinate by
    coordinate and restored afterwards.
    """
    if h <= 0:
        raise ContractError("finite-difference step must be positive")
    if names is None:
        names = [f"leaf{i}" for i in range(len(leaves))]
    for t in leaves:
        t.zero_grad()
    loss = f()
    backward(loss)
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in leaves]

    per_leaf: dict[str, float] = {}
    for leaf, ana, name in zip(leaves, analytic, names):
        worst = 0.0
        for i in range(leaf.data.size):
            ix = np.unravel_index(i, leaf.data.shape)
            orig = leaf.data[ix]
            leaf.data[ix] = orig + h
            fp = f().item()
            leaf.data[ix] = orig - h
            fm = f().item()
            leaf.data[ix] = orig
            numeric = (fp - fm) / (2.0 * h)
            worst = max(worst, _rel_err(float(ana[ix]), numeric))
        per_leaf[name] = worst
    return GradCheckReport(h=h, tol=tol, per_leaf=per_leaf)
