"""
Dense matrix core: seeded RNG and a small reverse-mode autodiff engine.

Every value is a 2-D float64 numpy array. A `Tensor` wraps one such array
together with the rules that route gradients back to its parents. The op set
is fixed: matmul, add (with row/scalar broadcast), mul, div, relu, exp, log,
sum/mean along an axis, clamped sqrt, pairwise distance, double centering,
softmax cross-entropy and sum of squares.

Gradients are accumulated in creation order (reverse of it, to be precise),
so two backward passes over the same graph produce identical bits.
"""

from __future__ import annotations

import itertools
import zlib
from collections.abc import Callable, Iterable
from typing import Union

import numpy as np

Matrix = np.ndarray  # 2-D float64, row-major


class DimensionError(ValueError):
    """Raised when operand shapes do not fit an operation."""

    def __init__(self, message: str, shapes: tuple = ()):
        super().__init__(message)
        self.shapes = shapes


class ContractError(ValueError):
    """Raised when a precondition of the engine is violated."""


def as_matrix(value, *, name: str = "value") -> Matrix:
    """Coerce to a 2-D float64 array (scalars become 1x1, vectors a single row)."""
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim == 0:
        return arr.reshape(1, 1)
    if arr.ndim == 1:
        return arr.reshape(1, -1)
    if arr.ndim != 2:
        raise DimensionError(f"{name}: expected a 2-D matrix, got ndim={arr.ndim}", (arr.shape,))
    return arr


# ---------------------------------------------------------------------------
# RNG
# ---------------------------------------------------------------------------


class Rng:
    """Seeded generator; identical seed and substream names give identical streams."""

    def __init__(self, seed: int, _key: tuple[int, ...] = ()):
        self.seed = int(seed)
        self._key = _key
        seq = np.random.SeedSequence(self.seed, spawn_key=_key)
        self._gen = np.random.Generator(np.random.PCG64DXSM(seq))

    def substream(self, name: str) -> Rng:
        """Independent child stream keyed by name (data, init, noise, attacker, ...)."""
        return Rng(self.seed, self._key + (zlib.crc32(name.encode("utf-8")),))

    def normal(self, rows: int, cols: int, mean: float = 0.0, std: float = 1.0) -> Matrix:
        return rng_normal(self, rows, cols, mean, std)

    def uniform(self, rows: int, cols: int, lo: float = 0.0, hi: float = 1.0) -> Matrix:
        return rng_uniform(self, rows, cols, lo, hi)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def integers(self, low: int, high: int, size: int) -> np.ndarray:
        return self._gen.integers(low, high, size=size)

    @property
    def generator(self) -> np.random.Generator:
        return self._gen


def rng_normal(rng: Rng, rows: int, cols: int, mean: float = 0.0, std: float = 1.0) -> Matrix:
    if std < 0:
        raise ContractError(f"std must be >= 0, got {std}")
    if std == 0:
        return np.full((rows, cols), float(mean))
    return rng.generator.normal(mean, std, size=(rows, cols))


def rng_uniform(rng: Rng, rows: int, cols: int, lo: float = 0.0, hi: float = 1.0) -> Matrix:
    if lo > hi:
        raise ContractError(f"lo must be <= hi, got lo={lo}, hi={hi}")
    return rng.generator.uniform(lo, hi, size=(rows, cols))


# ---------------------------------------------------------------------------
# Tensor / graph
# ---------------------------------------------------------------------------

GradRule = Callable[[Matrix], Matrix]
Operand = Union["Tensor", np.ndarray, float, int]

_ids = itertools.count()


class Tensor:
    """A node in the differentiation graph."""

    __slots__ = ("value", "grad", "requires_grad", "name", "_parents", "_id")

    def __init__(
        self,
        value,
        *,
        requires_grad: bool = False,
        name: str | None = None,
        _parents: tuple[tuple[Tensor, GradRule], ...] = (),
    ):
        self.value = as_matrix(value, name=name or "tensor")
        self.grad: Matrix | None = None
        self.requires_grad = requires_grad or bool(_parents)
        self.name = name
        self._parents = _parents
        self._id = next(_ids)

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def item(self) -> float:
        if self.value.shape != (1, 1):
            raise ContractError(f"item() needs a 1x1 tensor, got {self.value.shape}")
        return float(self.value[0, 0])

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other: Operand) -> Tensor:
        return add(self, other)

    def __radd__(self, other: Operand) -> Tensor:
        return add(other, self)

    def __sub__(self, other: Operand) -> Tensor:
        return add(self, mul(other, -1.0))

    def __rsub__(self, other: Operand) -> Tensor:
        return add(other, mul(self, -1.0))

    def __mul__(self, other: Operand) -> Tensor:
        return mul(self, other)

    def __rmul__(self, other: Operand) -> Tensor:
        return mul(other, self)

    def __truediv__(self, other: Operand) -> Tensor:
        return div(self, other)

    def __neg__(self) -> Tensor:
        return mul(self, -1.0)

    def __matmul__(self, other: Operand) -> Tensor:
        return matmul(self, other)


def parameter(value, name: str | None = None) -> Tensor:
    """Leaf tensor that collects a gradient."""
    return Tensor(value, requires_grad=True, name=name)


def _lift(x: Operand) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(value: Matrix, parents: Iterable[tuple[Tensor, GradRule]]) -> Tensor:
    live = tuple((p, rule) for p, rule in parents if p.requires_grad)
    return Tensor(value, _parents=live)


def _broadcast_shape(a: tuple[int, int], b: tuple[int, int], op: str) -> tuple[int, int]:
    out = []
    for da, db in zip(a, b, strict=True):
        if da != db and da != 1 and db != 1:
            raise DimensionError(f"{op}: cannot broadcast {a} with {b}", (a, b))
        out.append(max(da, db))
    return out[0], out[1]


def _unbroadcast(grad: Matrix, shape: tuple[int, int]) -> Matrix:
    if grad.shape == shape:
        return grad
    if shape[0] == 1 and grad.shape[0] != 1:
        grad = grad.sum(axis=0, keepdims=True)
    if shape[1] == 1 and grad.shape[1] != 1:
        grad = grad.sum(axis=1, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# Ops
# ---------------------------------------------------------------------------


def matmul(a: Operand, b: Operand) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: {a.shape} x {b.shape}", (a.shape, b.shape))
    av, bv = a.value, b.value
    return _node(av @ bv, ((a, lambda g: g @ bv.T), (b, lambda g: av.T @ g)))


def add(a: Operand, b: Operand) -> Tensor:
    a, b = _lift(a), _lift(b)
    _broadcast_shape(a.shape, b.shape, "add")
    sa, sb = a.shape, b.shape
    return _node(
        a.value + b.value,
        ((a, lambda g: _unbroadcast(g, sa)), (b, lambda g: _unbroadcast(g, sb))),
    )


def add_row(a: Operand, row: Operand) -> Tensor:
    """a + row, with row (1 x cols) broadcast down every row of a."""
    a, row = _lift(a), _lift(row)
    if row.shape != (1, a.shape[1]):
        raise DimensionError(
            f"add_row: row {row.shape} does not fit {a.shape}", (a.shape, row.shape)
        )
    return add(a, row)


def mul(a: Operand, b: Operand) -> Tensor:
    a, b = _lift(a), _lift(b)
    _broadcast_shape(a.shape, b.shape, "mul")
    av, bv = a.value, b.value
    return _node(
        av * bv,
        (
            (a, lambda g: _unbroadcast(g * bv, av.shape)),
            (b, lambda g: _unbroadcast(g * av, bv.shape)),
        ),
    )


def div(a: Operand, b: Operand) -> Tensor:
    a, b = _lift(a), _lift(b)
    _broadcast_shape(a.shape, b.shape, "div")
    av, bv = a.value, b.value
    out = av / bv
    return _node(
        out,
        (
            (a, lambda g: _unbroadcast(g / bv, av.shape)),
            (b, lambda g: _unbroadcast(-g * out / bv, bv.shape)),
        ),
    )


def relu(a: Operand) -> Tensor:
    a = _lift(a)
    mask = a.value > 0
    return _node(np.where(mask, a.value, 0.0), ((a, lambda g: g * mask),))


def exp(a: Operand) -> Tensor:
    a = _lift(a)
    out = np.exp(a.value)
    return _node(out, ((a, lambda g: g * out),))


def log(a: Operand) -> Tensor:
    """Natural log; domain is strictly positive input."""
    a = _lift(a)
    av = a.value
    return _node(np.log(av), ((a, lambda g: g / av),))


def sum(a: Operand, axis: int | None = None) -> Tensor:  # noqa: A001
    a = _lift(a)
    shape = a.shape
    if axis is None:
        out = np.array([[a.value.sum()]])
    else:
        out = a.value.sum(axis=axis, keepdims=True)
    return _node(out, ((a, lambda g: np.broadcast_to(g, shape).copy()),))


def mean(a: Operand, axis: int | None = None) -> Tensor:
    a = _lift(a)
    count = a.value.size if axis is None else a.shape[axis]
    return mul(sum(a, axis), 1.0 / count)


def sqrt(a: Operand, eps: float = 0.0) -> Tensor:
    """sqrt(max(a, eps)); the gradient is zero wherever the clamp is active."""
    a = _lift(a)
    active = a.value > eps
    out = np.sqrt(np.maximum(a.value, eps))
    safe = np.where(active, out, 1.0)
    return _node(out, ((a, lambda g: np.where(active, g * 0.5 / safe, 0.0)),))


def sum_squares(a: Operand, axis: int | None = None) -> Tensor:
    """Squared L2 norm, over everything or along one axis."""
    a = _lift(a)
    return sum(mul(a, a), axis)


def pairwise_dist(a: Operand, eps: float) -> Tensor:
    """
    Euclidean distances between rows, sqrt(max(||a_i - a_j||^2, eps)).

    The diagonal squared distance is pinned to zero before the clamp, so it
    always reads sqrt(eps).
    """
    a = _lift(a)
    av = a.value
    r = np.sum(av * av, axis=1, keepdims=True)
    sq = r - 2.0 * (av @ av.T) + r.T
    np.fill_diagonal(sq, 0.0)
    active = sq > eps
    out = np.sqrt(np.maximum(sq, eps))

    def rule(g: Matrix) -> Matrix:
        h = np.where(active, g / (2.0 * out), 0.0)
        hs = h + h.T
        return 2.0 * (hs.sum(axis=1, keepdims=True) * av - hs @ av)

    return _node(out, ((a, rule),))


def _center(m: Matrix) -> Matrix:
    return m - m.mean(axis=1, keepdims=True) - m.mean(axis=0, keepdims=True) + m.mean()


def double_center(d: Operand) -> Tensor:
    """D_ij - rowmean_i - colmean_j + grandmean. Linear and self-adjoint."""
    d = _lift(d)
    if d.shape[0] != d.shape[1]:
        raise DimensionError(f"double_center: matrix must be square, got {d.shape}", (d.shape,))
    return _node(_center(d.value), ((d, _center),))


def log_softmax(logits: Matrix) -> Matrix:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax_cross_entropy(logits: Operand, y_onehot: Matrix) -> Tensor:
    """Mean over rows of -sum(y * log softmax(logits))."""
    logits = _lift(logits)
    y = as_matrix(y_onehot, name="labels")
    if logits.shape != y.shape:
        raise DimensionError(
            f"softmax_cross_entropy: logits {logits.shape} vs labels {y.shape}",
            (logits.shape, y.shape),
        )
    n = logits.shape[0]
    logp = log_softmax(logits.value)
    out = np.array([[-(y * logp).sum() / n]])
    probs = np.exp(logp)
    return _node(out, ((logits, lambda g: g * (probs - y) / n),))


# ---------------------------------------------------------------------------
# Backward
# ---------------------------------------------------------------------------


def _reachable(root: Tensor) -> list[Tensor]:
    seen: dict[int, Tensor] = {}
    stack = [root]
    while stack:
        node = stack.pop()
        if node._id in seen:
            continue
        seen[node._id] = node
        stack.extend(p for p, _ in node._parents)
    # parents are always created before children, so descending ids is a
    # valid reverse topological order
    return [seen[k] for k in sorted(seen, reverse=True)]


def backward(loss: Tensor) -> dict[Tensor, Matrix]:
    """
    Reverse-mode sweep from a scalar loss.

    Every reachable node gets a fresh `.grad` (previous values are
    overwritten, not accumulated). Returns {leaf: grad} for leaves that
    require a gradient.
    """
    if loss.shape != (1, 1):
        raise ContractError(f"backward needs a scalar (1x1) loss, got {loss.shape}")
    order = _reachable(loss)
    for node in order:
        node.grad = None
    loss.grad = np.ones((1, 1))
    for node in order:
        g = node.grad
        if g is None:
            continue
        for parent, rule in node._parents:
            contrib = rule(g)
            parent.grad = contrib if parent.grad is None else parent.grad + contrib
    leaves = {}
    for node in order:
        if not node._parents and node.requires_grad:
            if node.grad is None:
                node.grad = np.zeros_like(node.value)
            leaves[node] = node.grad
    return leaves


def check_finite(t: Tensor | Matrix, what: str) -> None:
    """Raise ContractError if any entry is NaN or infinite."""
    value = t.value if isinstance(t, Tensor) else t
    if not np.all(np.isfinite(value)):
        raise ContractError(f"{what}: non-finite values")
