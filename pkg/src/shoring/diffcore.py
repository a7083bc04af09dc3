"""Reverse-mode automatic differentiation on numpy arrays.

Every primitive records a node when one of its inputs requires a gradient.
``backward`` walks the recorded graph once in reverse topological order.
All arithmetic is float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import ContractViolation, DomainError, NondeterminismError

DTYPE = np.float64
EXP_CLAMP = 30.0


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, *, op: str = "leaf",
                 parents: tuple = (), backward: Callable | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.op = op
        self._parents = parents
        self._backward = backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, op: str, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    if any(t.requires_grad for t in inputs):
        return Tensor(data, True, op=op, parents=tuple(inputs), backward=backward)
    return Tensor(data, op=op)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _broadcast_shape(*shapes) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(*shapes)
    except ValueError as exc:
        raise ContractViolation(f"shapes {shapes} are not broadcast-compatible") from exc


# ---------------------------------------------------------------- primitives


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    return _make(a.data + b.data, "add", (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    return _make(a.data - b.data, "sub", (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, "neg", (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    return _make(a.data * b.data, "mul", (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def square(a) -> Tensor:
    a = as_tensor(a)
    return _make(a.data * a.data, "square", (a,), lambda g: (2.0 * a.data * g,))


def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ContractViolation(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ContractViolation(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    _broadcast_shape(a.shape[:-2], b.shape[:-2])

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data @ b.data, "matmul", (a, b), backward)


def relu(a) -> Tensor:
    a = as_tensor(a)
    active = a.data > 0
    return _make(np.where(active, a.data, 0.0), "relu", (a,), lambda g: (g * active,))


def exp(a) -> Tensor:
    """exp with the argument saturated to [-30, 30]; zero gradient where saturated."""
    a = as_tensor(a)
    inside = np.abs(a.data) <= EXP_CLAMP
    out = np.exp(np.clip(a.data, -EXP_CLAMP, EXP_CLAMP))
    return _make(out, "exp", (a,), lambda g: (g * out * inside,))


def log(a) -> Tensor:
    a = as_tensor(a)
    bad = ~(a.data > 0)
    if bad.any():
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        raise DomainError(f"log input must be strictly positive; got {a.data[idx]!r} at index {idx}")
    return _make(np.log(a.data), "log", (a,), lambda g: (g / a.data,))


def clamp(a, lo: float | None = None, hi: float | None = None) -> Tensor:
    a = as_tensor(a)
    out = np.clip(a.data, lo, hi)
    inside = np.ones_like(a.data, dtype=bool)
    if lo is not None:
        inside &= a.data >= lo
    if hi is not None:
        inside &= a.data <= hi
    return _make(out, "clamp", (a,), lambda g: (g * inside,))


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, "sum", (a,), backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / count)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ContractViolation("concat of an empty list")
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ContractViolation(str(exc)) from exc
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _make(out, "concat", ts, lambda g: tuple(np.split(g, bounds, axis=axis)))


def broadcast_to(a, shape: tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError as exc:
        raise ContractViolation(f"cannot broadcast {a.shape} to {shape}") from exc
    return _make(out, "broadcast", (a,), lambda g: (_unbroadcast(g, a.shape),))


def reshape(a, shape: tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ContractViolation(str(exc)) from exc
    return _make(out, "reshape", (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes: tuple[int, ...] | None = None) -> Tensor:
    a = as_tensor(a)
    out = np.transpose(a.data, axes)
    inverse = None if axes is None else tuple(np.argsort(axes))
    return _make(out, "transpose", (a,), lambda g: (np.transpose(g, inverse),))


def swapaxes(a, ax1: int = -1, ax2: int = -2) -> Tensor:
    a = as_tensor(a)
    return _make(np.swapaxes(a.data, ax1, ax2), "swapaxes", (a,),
                 lambda g: (np.swapaxes(g, ax1, ax2),))


def take(table, index) -> Tensor:
    """Row lookup: ``table[index]`` for an integer index array of any shape."""
    table = as_tensor(table)
    index = np.asarray(index)
    if index.size and (index.min() < 0 or index.max() >= table.shape[0]):
        raise ContractViolation(f"lookup index out of range for table with {table.shape[0]} rows")

    def backward(g):
        out = np.zeros_like(table.data)
        np.add.at(out, index.reshape(-1), g.reshape(-1, *table.shape[1:]))
        return (out,)

    return _make(table.data[index], "take", (table,), backward)


def spmm(matrix: sp.spmatrix, a) -> Tensor:
    """Constant sparse matrix times a dense 2-D tensor (scatter-add)."""
    a = as_tensor(a)
    if a.ndim != 2 or matrix.shape[1] != a.shape[0]:
        raise ContractViolation(f"spmm shapes differ: {matrix.shape} @ {a.shape}")
    csr = sp.csr_matrix(matrix)
    out = np.asarray(csr @ a.data)
    return _make(out, "spmm", (a,), lambda g: (np.asarray(csr.T @ g),))


def masked_softmax(scores, mask) -> Tensor:
    """Softmax over the last axis restricted to columns where ``mask`` is 1.

    ``mask`` broadcasts against ``scores`` (a length-tau key mask works for
    tau x tau and H x tau x tau scores). Masked columns get exactly zero weight;
    rows without any valid column are all zeros.
    """
    scores = as_tensor(scores)
    valid = np.broadcast_to(np.asarray(mask) > 0, scores.shape)
    shifted = np.where(valid, scores.data, -np.inf)
    row_max = shifted.max(axis=-1, keepdims=True)
    row_max = np.where(np.isfinite(row_max), row_max, 0.0)
    e = np.exp(np.where(valid, scores.data - row_max, -np.inf))
    denom = e.sum(axis=-1, keepdims=True)
    w = np.divide(e, denom, out=np.zeros_like(e), where=denom > 0)

    def backward(g):
        return (w * (g - (g * w).sum(axis=-1, keepdims=True)),)

    return _make(w, "masked_softmax", (scores,), backward)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    soft = np.exp(out)
    return _make(out, "log_softmax", (a,),
                 lambda g: (g - soft * g.sum(axis=axis, keepdims=True),))


OPS: dict[str, Callable[..., Tensor]] = {
    "add": add,
    "sub": sub,
    "neg": neg,
    "mul": mul,
    "square": square,
    "matmul": matmul,
    "relu": relu,
    "exp": exp,
    "log": log,
    "clamp": clamp,
    "sum": sum_,
    "mean": mean,
    "concat": lambda *ts, axis=-1: concat(ts, axis=axis),
    "broadcast": broadcast_to,
    "reshape": reshape,
    "transpose": transpose,
    "swapaxes": swapaxes,
    "take": take,
    "spmm": spmm,
    "masked_softmax": masked_softmax,
    "log_softmax": log_softmax,
}


def forward_eval(op_kind: str, inputs: Sequence, **kwargs) -> Tensor:
    try:
        fn = OPS[op_kind]
    except KeyError:
        raise ContractViolation(f"unknown primitive {op_kind!r}") from None
    return fn(*inputs, **kwargs)


# ---------------------------------------------------------------- tape / backward


@dataclass
class Tape:
    """Nodes reachable from a root, inputs before consumers."""

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def from_root(cls, root: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)


def backward(loss: Tensor, leaves: Sequence[Tensor] = ()) -> None:
    """Populate ``.grad`` of every requires-grad leaf reachable from ``loss``.

    Grads are overwritten, not accumulated. Leaves passed in ``leaves`` that
    the loss does not depend on get zero grads.
    """
    if loss.data.size != 1:
        raise ContractViolation(f"backward needs a scalar loss, got shape {loss.shape}")
    for leaf in leaves:
        leaf.grad = np.zeros_like(leaf.data)
    if not loss.requires_grad:
        return
    tape = Tape.from_root(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------- gradient check


@dataclass
class GradCheckReport:
    max_rel_error: list[float]
    tol: float

    @property
    def passed(self) -> bool:
        return all(e <= self.tol for e in self.max_rel_error)

    @property
    def worst(self) -> float:
        return max(self.max_rel_error, default=0.0)


def gradient_check(builder: Callable[[], Tensor], params: Sequence[Tensor],
                   step: float = 1e-5, tol: float = 1e-4, floor: float = 1e-4) -> GradCheckReport:
    """Compare analytic gradients of ``builder()`` with central differences.

    ``builder`` takes no arguments and reads the current values of ``params``.
    The relative error's denominator is at least ``floor``: entries with
    gradients below it are judged on absolute error ``tol * floor``, which is
    above central-difference round-off but far below any real gradient bug.
    """
    if step <= 0:
        raise ContractViolation("step must be positive")
    first = builder()
    second = builder()
    if not np.array_equal(first.data, second.data):
        raise NondeterminismError(
            f"builder is not deterministic: {first.data!r} != {second.data!r}")
    backward(second, leaves=params)
    errors = []
    for p in params:
        p.data = np.ascontiguousarray(p.data)
        analytic = p.grad.copy()
        numeric = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            f_plus = builder().item()
            flat[i] = orig - step
            f_minus = builder().item()
            flat[i] = orig
            numeric.reshape(-1)[i] = (f_plus - f_minus) / (2.0 * step)
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
        rel = np.abs(analytic - numeric) / denom
        errors.append(float(rel.max()) if rel.size else 0.0)
    return GradCheckReport(errors, tol)
