"""Minimal reverse-mode differentiation over dense 2-D float arrays.

Every primitive records its inputs and a backward rule on the output node.
Calling :meth:`Tensor.backward` linearises the graph into a tape (reverse
topological order) and replays it once, accumulating gradients into the
leaves that were created with ``requires_grad=True``.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

NORM_FLOOR = 1e-12


class NearZeroNorm(ValueError):
    pass


class NonFiniteLoss(FloatingPointError):
    pass


class ShapeMismatch(ValueError):
    pass


def _as2d(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 0:
        return a.reshape(1, 1)
    if a.ndim == 1:
        return a.reshape(1, -1)
    if a.ndim != 2:
        raise ShapeMismatch(f"expected at most 2 dims, got shape {a.shape}")
    return a


class Tensor:
    """A 2-D array node in the computation graph."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = _as2d(data)
        self.requires_grad = requires_grad
        self.name = name
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeMismatch(f"item() on tensor of shape {self.shape}")
        return float(self.data[0, 0])

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    def tape(self) -> list["Tensor"]:
        """Nodes reachable from ``self`` that need gradients, outputs first."""
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        order.reverse()
        return order

    def backward(self, seed: np.ndarray | None = None) -> None:
        if not self.requires_grad:
            return
        if seed is None:
            if self.data.size != 1:
                raise ShapeMismatch("backward() without seed needs a scalar output")
            seed = np.ones_like(self.data)
        tape = self.tape()
        # intermediate nodes start clean each pass; leaves keep accumulating
        for node in tape:
            if node._backward is not None:
                node.grad = np.zeros_like(node.data)
        self.grad = self.grad + _as2d(seed)
        for node in tape:
            if node._backward is not None:
                node._backward(node.grad)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, scale(_lift(other), -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, _lift(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, _lift(other))


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.grad = np.zeros_like(out.data)
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _acc(t: Tensor, g: np.ndarray) -> None:
    if t.requires_grad:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape[0] == 1 and g.shape[0] != 1:
        g = g.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        g = g.sum(axis=1, keepdims=True)
    return g


# ---------------------------------------------------------------- primitives


def add(a: Tensor, b) -> Tensor:
    """Elementwise sum; a row vector or scalar operand is broadcast."""
    b = _lift(b)

    def backward(g):
        _acc(a, _unbroadcast(g, a.shape))
        _acc(b, _unbroadcast(g, b.shape))

    return _node(a.data + b.data, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    def backward(g):
        _acc(a, c * g)

    return _node(c * a.data, (a,), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    def backward(g):
        _acc(a, _unbroadcast(g * b.data, a.shape))
        _acc(b, _unbroadcast(g * a.data, b.shape))

    return _node(a.data * b.data, (a, b), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul {a.shape} @ {b.shape}")

    def backward(g):
        _acc(a, g @ b.data.T)
        _acc(b, a.data.T @ g)

    return _node(a.data @ b.data, (a, b), backward)


def transpose(a: Tensor) -> Tensor:
    def backward(g):
        _acc(a, g.T)

    return _node(a.data.T.copy(), (a,), backward)


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)

    def backward(g):
        _acc(a, g * (1.0 - y * y))

    return _node(y, (a,), backward)


def rows(a: Tensor, idx) -> Tensor:
    """Select rows by integer index."""
    idx = np.asarray(idx, dtype=np.intp)

    def backward(g):
        if a.requires_grad:
            np.add.at(a.grad, idx, g)

    return _node(a.data[idx], (a,), backward)


def pick(a: Tensor, cols) -> Tensor:
    """Column ``cols[i]`` of row ``i``, as an (n, 1) tensor."""
    cols = np.asarray(cols, dtype=np.intp)
    r = np.arange(a.shape[0])

    def backward(g):
        if a.requires_grad:
            np.add.at(a.grad, (r, cols), g[:, 0])

    return _node(a.data[r, cols].reshape(-1, 1), (a,), backward)


def group_mean(a: Tensor, sizes: Sequence[int]) -> Tensor:
    """Average consecutive row blocks of the given sizes into one row each."""
    sizes = np.asarray(sizes, dtype=np.intp)
    if sizes.sum() != a.shape[0] or np.any(sizes < 1):
        raise ShapeMismatch(f"group sizes {sizes.tolist()} do not tile {a.shape[0]} rows")
    starts = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    out = np.add.reduceat(a.data, starts, axis=0) / sizes[:, None]
    owner = np.repeat(np.arange(len(sizes)), sizes)

    def backward(g):
        _acc(a, (g / sizes[:, None])[owner])

    return _node(out, (a,), backward)


def total(a: Tensor) -> Tensor:
    """Sum of all entries (numpy pairwise summation)."""

    def backward(g):
        _acc(a, np.full_like(a.data, g[0, 0]))

    return _node(np.array([[a.data.sum()]]), (a,), backward)


def mean(a: Tensor) -> Tensor:
    return scale(total(a), 1.0 / a.data.size)


def grl(a: Tensor, scale_: float = 1.0) -> Tensor:
    """Identity forward; the backward pass multiplies gradients by ``-scale_``."""

    def backward(g):
        _acc(a, -scale_ * g)

    return _node(a.data.copy(), (a,), backward)


def log_softmax_rows(a: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Row-wise log-softmax computed with a max shift.

    With ``mask`` (boolean, same shape), only entries where ``mask`` is True take
    part in the normaliser; masked-out outputs are 0 and receive no gradient.
    """
    x = a.data
    if mask is None:
        mx = x.max(axis=1, keepdims=True)
        z = x - mx
        lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
        y = z - lse
        p = np.exp(y)

        def backward(g):
            _acc(a, g - p * g.sum(axis=1, keepdims=True))

        return _node(y, (a,), backward)

    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.shape:
        raise ShapeMismatch(f"mask {mask.shape} vs logits {x.shape}")
    if not mask.any(axis=1).all():
        raise ValueError("every row needs at least one unmasked entry")
    xm = np.where(mask, x, -np.inf)
    mx = xm.max(axis=1, keepdims=True)
    e = np.where(mask, np.exp(xm - mx), 0.0)
    lse = np.log(e.sum(axis=1, keepdims=True)) + mx
    y = np.where(mask, x - lse, 0.0)
    p = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        gm = np.where(mask, g, 0.0)
        _acc(a, gm - p * gm.sum(axis=1, keepdims=True))

    return _node(y, (a,), backward)


def l2_normalize_rows(a: Tensor, floor: float = NORM_FLOOR) -> Tensor:
    x = a.data
    n = np.sqrt((x * x).sum(axis=1, keepdims=True))
    if np.any(n <= floor):
        raise NearZeroNorm(f"row norm at or below {floor}")
    y = x / n

    def backward(g):
        _acc(a, (g - y * (g * y).sum(axis=1, keepdims=True)) / n)

    return _node(y, (a,), backward)


# ------------------------------------------------------------ vector helpers


def l2_normalize(v, floor: float = NORM_FLOOR) -> np.ndarray:
    """Unit vector in the direction of ``v``; raises on (near) zero norm."""
    v = np.asarray(v, dtype=np.float64)
    n = math.sqrt(math.fsum(float(t) * float(t) for t in v.ravel()))
    if not math.isfinite(n) or n <= floor:
        raise NearZeroNorm(f"norm {n} at or below floor {floor}")
    return v / n


def normalize_rows(x, floor: float = NORM_FLOOR) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(n <= floor):
        raise NearZeroNorm(f"row norm at or below {floor}")
    return x / n


def log_softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise ValueError("non-finite logits")
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


# --------------------------------------------------------------- grad check


def grad_check(
    loss_fn: Callable[[], Tensor],
    params: Iterable[Tensor],
    eps: float = 1e-5,
) -> float:
    """Max relative error between backprop and central finite differences.

    ``loss_fn`` is re-evaluated for every probe and must read the current
    contents of ``params``; it must be deterministic.
    """
    if not (0.0 < eps <= 1e-2):
        raise ValueError(f"eps must lie in (0, 1e-2], got {eps}")
    params = list(params)
    for p in params:
        p.zero_grad()
    out = loss_fn()
    if not np.all(np.isfinite(out.data)):
        raise NonFiniteLoss("loss is not finite at the base point")
    out.backward()
    analytic = [p.grad.copy() for p in params]

    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + eps
            fp = loss_fn().item()
            flat[k] = orig - eps
            fm = loss_fn().item()
            flat[k] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise NonFiniteLoss(f"non-finite probe on {p.name or 'param'}[{k}]")
            fd = (fp - fm) / (2.0 * eps)
            a = float(ga.reshape(-1)[k])
            err = abs(a - fd) / max(abs(a), abs(fd), 1e-8)
            worst = max(worst, err)
    return worst
