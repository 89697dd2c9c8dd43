"""
Dense float64 tensors with define-by-run reverse-mode differentiation.

Every differentiable operation appends a :class:`Node` to the implicit graph
rooted at its output.  :func:`backward` gathers the nodes reachable from a
scalar loss and replays them in reverse creation order, visiting each node
exactly once.  Gradients of every reachable tensor with ``requires_grad`` are
added to ``tensor.grad``, so calling ``backward`` twice doubles them.
"""

from __future__ import annotations

import itertools
import math
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, DomainError, NumericError

__all__ = [
    "Tensor",
    "Node",
    "Graph",
    "no_grad",
    "is_grad_enabled",
    "backward",
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "relu",
    "tanh",
    "exp",
    "log",
    "add_bias",
    "tsum",
    "mean",
    "log_softmax",
    "softmax_cross_entropy",
    "cosine_distance_rows",
    "squared_distance_rows",
    "elementwise",
    "ACTIVATIONS",
]

_node_ids = itertools.count()
_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Evaluate without recording graph nodes."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NumericError(f"non-finite value in tensor {name or ''}".rstrip())
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._node: Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def values(self) -> np.ndarray:
        """Flat view of the underlying values."""
        return self.data.reshape(-1)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def backward(self) -> None:
        backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, _as_tensor(other, self.shape))

    def __radd__(self, other):
        return add(_as_tensor(other, self.shape), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.shape))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.shape), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if not isinstance(other, (int, float)):
            raise TypeError("tensors may only be divided by python scalars")
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return tsum(self, axis)


def _as_tensor(x, shape) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if isinstance(x, (int, float)):
        return Tensor(np.full(shape, float(x)))
    return Tensor(x)


@dataclass(eq=False)
class Node:
    """One recorded operation: its inputs, output and local backward rule."""

    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    id: int = field(default_factory=lambda: next(_node_ids))


@dataclass
class Graph:
    """The nodes reachable from a root tensor, in insertion order."""

    nodes: list[Node]

    @classmethod
    def from_root(cls, root: Tensor) -> "Graph":
        seen: dict[int, Node] = {}
        stack = [root._node] if root._node is not None else []
        while stack:
            node = stack.pop()
            if node.id in seen:
                continue
            seen[node.id] = node
            for inp in node.inputs:
                if inp._node is not None and inp._node.id not in seen:
                    stack.append(inp._node)
        return cls(sorted(seen.values(), key=lambda n: n.id))


def _check_finite(arr: np.ndarray, what: str) -> np.ndarray:
    # a single reduction catches any NaN/inf (and sums that overflow)
    if not math.isfinite(arr.sum()):
        raise NumericError(f"non-finite result in {what}")
    return arr


def _record(op: str, out_data: np.ndarray, inputs: tuple[Tensor, ...], backward_fn) -> Tensor:
    _check_finite(out_data, op)
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    out.name = None
    out.requires_grad = is_grad_enabled() and any(t.requires_grad for t in inputs)
    out._node = Node(op, inputs, out, backward_fn) if out.requires_grad else None
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(tensor) into ``.grad`` of every reachable tensor."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss is not attached to any tensor that requires grad")
    graph = Graph.from_root(loss)
    upstream: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {id(loss): loss}
    for node in reversed(graph.nodes):
        g_out = upstream.pop(id(node.output), None)
        if g_out is None:
            continue
        _check_finite(g_out, f"gradient of {node.op}")
        out = node.output
        out.grad = g_out.copy() if out.grad is None else out.grad + g_out
        for inp, g in zip(node.inputs, node.backward_fn(g_out)):
            if g is None or not inp.requires_grad:
                continue
            key = id(inp)
            upstream[key] = upstream[key] + g if key in upstream else g
            if inp._node is None:
                leaves[key] = inp
    for key, g in upstream.items():
        t = leaves[key]
        _check_finite(g, "gradient")
        t.grad = g.copy() if t.grad is None else t.grad + g


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data

    def back(g):
        return (g @ bd.T if a.requires_grad else None, ad.T @ g if b.requires_grad else None)

    return _record("matmul", ad @ bd, (a, b), back)


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return _record("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return _record("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _record("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _record("scale", a.data * c, (a,), lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _record("relu", np.maximum(a.data, 0.0), (a,), lambda g: (g * mask,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _record("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _record("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise DomainError("log of a non-positive value")
    ad = a.data
    return _record("log", np.log(ad), (a,), lambda g: (g / ad,))


def identity(a: Tensor) -> Tensor:
    return a


ACTIVATIONS = {"identity": identity, "relu": relu, "tanh": tanh}


def elementwise(op: str, *operands, **kwargs) -> Tensor:
    """Dispatch an elementwise operation by name."""
    table = {"add": add, "sub": sub, "mul": mul, "relu": relu, "tanh": tanh,
             "exp": exp, "log": log, "scale": scale}
    try:
        fn = table[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(*operands, **kwargs)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a row vector ``b`` (shape [n]) to every row of ``x`` (shape [m, n])."""
    if x.data.ndim != 2 or b.data.ndim != 1 or x.shape[1] != b.shape[0]:
        raise DimensionError(f"add_bias: cannot add {b.shape} to rows of {x.shape}")
    return _record("add_bias", x.data + b.data, (x, b), lambda g: (g, g.sum(axis=0)))


def tsum(a: Tensor, axis: int | None = None) -> Tensor:
    shape = a.shape
    if axis is None:
        return _record("sum", np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))
    out = a.data.sum(axis=axis)
    return _record("sum", out, (a,), lambda g: (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),))


def mean(a: Tensor) -> Tensor:
    return scale(tsum(a), 1.0 / a.size)


def _log_softmax_np(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def log_softmax(a: Tensor) -> Tensor:
    """Row-wise log-softmax of a [batch, classes] tensor."""
    if a.data.ndim != 2:
        raise DimensionError(f"log_softmax expects a matrix, got {a.shape}")
    out = _log_softmax_np(a.data)
    probs = np.exp(out)
    return _record("log_softmax", out, (a,),
                   lambda g: (g - probs * g.sum(axis=1, keepdims=True),))


def softmax_cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under softmax(logits)."""
    if logits.data.ndim != 2:
        raise DimensionError(f"logits must be [batch, classes], got {logits.shape}")
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    n, c = logits.shape
    if targets.shape[0] != n:
        raise DimensionError(f"{targets.shape[0]} targets for a batch of {n}")
    if n and (targets.min() < 0 or targets.max() >= c):
        raise IndexError(f"target index out of range for {c} classes")
    logp = _log_softmax_np(logits.data)
    rows = np.arange(n)
    loss = -logp[rows, targets].mean()

    def back(g):
        d = np.exp(logp)
        d[rows, targets] -= 1.0
        return (d * (g / n),)

    return _record("softmax_cross_entropy", np.asarray(loss), (logits,), back)


def cosine_distance_rows(a: Tensor, b: Tensor) -> Tensor:
    """Per-row ``1 - cos(a_n, b_n)`` for two [batch, dim] tensors.

    Rows where either vector has zero norm fall back to ``||a_n - b_n||^2``.
    """
    _same_shape(a, b, "cosine_distance_rows")
    if a.data.ndim != 2:
        raise DimensionError(f"cosine_distance_rows expects matrices, got {a.shape}")
    ad, bd = a.data, b.data
    dot = (ad * bd).sum(axis=1)
    aa = (ad * ad).sum(axis=1)
    bb = (bd * bd).sum(axis=1)
    ok = (aa > 0) & (bb > 0)
    # sqrt(aa*bb) equals aa exactly when a == b, so identical rows give exactly 0
    denom = np.sqrt(np.where(ok, aa * bb, 1.0))
    cos = np.where(ok, dot / denom, 0.0)
    diff = ad - bd
    out = np.where(ok, 1.0 - cos, (diff * diff).sum(axis=1))

    def back(g):
        g = g[:, None]
        okc = ok[:, None]
        safe_aa = np.where(ok, aa, 1.0)[:, None]
        safe_bb = np.where(ok, bb, 1.0)[:, None]
        d = denom[:, None]
        c = cos[:, None]
        # d(1-cos)/da = -(b/(|a||b|) - cos * a/|a|^2)
        ga = np.where(okc, -(bd / d - c * ad / safe_aa), 2.0 * diff) * g
        gb = np.where(okc, -(ad / d - c * bd / safe_bb), -2.0 * diff) * g
        return (ga, gb)

    return _record("cosine_distance_rows", out, (a, b), back)


def squared_distance_rows(a: Tensor, b: Tensor) -> Tensor:
    """Per-row mean squared difference between two [batch, dim] tensors."""
    _same_shape(a, b, "squared_distance_rows")
    diff = a.data - b.data
    k = a.shape[1]
    return _record("squared_distance_rows", (diff * diff).sum(axis=1) / k, (a, b),
                   lambda g: (2.0 * diff * g[:, None] / k, -2.0 * diff * g[:, None] / k))
