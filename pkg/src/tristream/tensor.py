"""Dense float64 tensors with taped reverse-mode differentiation.

Every value in the network is a `Tensor`: a contiguous float64 numpy buffer
plus the bookkeeping that lets `backward()` replay the chain rule.  Ops are
module-level functions; each computes its result eagerly and, when any
operand requires gradients, attaches a closure holding the exact local
derivative rule.  Evaluation without a tape (`no_grad`) skips the closures
entirely and is safe to run from multiple threads.

Shape discipline: binary elementwise ops demand equal shapes; the single
sanctioned exception is scalar-vs-tensor, in which the scalar is applied
elementwise.  Nothing else broadcasts implicitly.
"""

from __future__ import annotations

import threading
from typing import Sequence

import numpy as np

from .errors import GradientError, ShapeError

_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


class no_grad:
    """Context manager: ops inside build no graph (pure evaluation)."""

    def __enter__(self):
        self._saved = _grad_enabled()
        _state.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _state.grad_enabled = self._saved
        return False


class Tensor:
    """A node of the computation record.

    `data` is the value, `grad` the lazily allocated cotangent of the same
    shape, `op` the tag of the producing operation, and `parents` the input
    nodes.  Leaves created directly have op "leaf".
    """

    __slots__ = ("data", "grad", "op", "parents", "_backward", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, *, op: str = "leaf",
                 parents: tuple = (), name: str | None = None):
        # order="C" (not ascontiguousarray, which promotes 0-d to 1-d)
        self.data = np.asarray(data, dtype=np.float64, order="C")
        self.grad: np.ndarray | None = None
        self.op = op
        self.parents = parents
        self._backward = None
        self.requires_grad = bool(requires_grad)
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Reverse sweep from this scalar node.

        Raises ShapeError for non-scalar roots and GradientError when a
        non-finite gradient reaches any op (the error names the op).
        """
        if self.shape != ():
            raise ShapeError(f"backward requires a scalar loss, got shape {self.shape}")
        order = _topo_order(self)
        self.grad = np.ones((), dtype=np.float64)
        for node in reversed(order):
            if node._backward is None or node.grad is None:
                continue
            if not np.all(np.isfinite(node.grad)):
                raise GradientError(f"non-finite gradient flowing into op '{node.op}'")
            node._backward(node.grad)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op!r}{tag})"

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

    def __neg__(self):
        return mul(self, -1.0)


def _topo_order(root: Tensor) -> list[Tensor]:
    """Iterative post-order DFS (graphs can be deeper than Python's stack)."""
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
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, op: str, parents: tuple[Tensor, ...]) -> Tensor:
    track = _grad_enabled() and any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=track, op=op, parents=parents if track else ())


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Collapse a gradient onto a scalar operand (the only broadcast we allow)."""
    if g.shape == shape:
        return g
    return np.asarray(g.sum(), dtype=np.float64).reshape(shape)


def _check_binary(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape or a.shape == () or b.shape == ():
        return
    raise ShapeError(f"{op}: operand shapes {a.shape} and {b.shape} do not match "
                     "(only scalar-vs-tensor is broadcast)")


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "add")
    out = _result(a.data + b.data, "add", (a, b))
    if out.requires_grad:
        def bw(g):
            if a.requires_grad:
                a.accumulate_grad(_reduce_to(g, a.shape))
            if b.requires_grad:
                b.accumulate_grad(_reduce_to(g, b.shape))
        out._backward = bw
    return out


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "sub")
    out = _result(a.data - b.data, "sub", (a, b))
    if out.requires_grad:
        def bw(g):
            if a.requires_grad:
                a.accumulate_grad(_reduce_to(g, a.shape))
            if b.requires_grad:
                b.accumulate_grad(_reduce_to(-g, b.shape))
        out._backward = bw
    return out


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "mul")
    out = _result(a.data * b.data, "mul", (a, b))
    if out.requires_grad:
        ad, bd = a.data, b.data
        def bw(g):
            if a.requires_grad:
                a.accumulate_grad(_reduce_to(g * bd, a.shape))
            if b.requires_grad:
                b.accumulate_grad(_reduce_to(g * ad, b.shape))
        out._backward = bw
    return out


def relu(a) -> Tensor:
    """max(0, x); the subgradient at exactly 0 is defined as 0."""
    a = as_tensor(a)
    out = _result(np.maximum(a.data, 0.0), "relu", (a,))
    if out.requires_grad:
        mask = a.data > 0.0
        out._backward = lambda g: a.accumulate_grad(g * mask)
    return out


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # Piecewise-stable form: never exponentiates a large positive argument.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _sigmoid_deriv(s: np.ndarray) -> np.ndarray:
    # Factored out so fault-injection tests can corrupt the rule.
    return s * (1.0 - s)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    s = _sigmoid(np.atleast_1d(a.data)).reshape(a.shape)
    out = _result(s, "sigmoid", (a,))
    if out.requires_grad:
        out._backward = lambda g: a.accumulate_grad(g * _sigmoid_deriv(s))
    return out


def tanh(a) -> Tensor:
    a = as_tensor(a)
    t = np.tanh(a.data)
    out = _result(t, "tanh", (a,))
    if out.requires_grad:
        out._backward = lambda g: a.accumulate_grad(g * (1.0 - t * t))
    return out


_ELEMENTWISE_BINARY = {"add": add, "sub": sub, "mul": mul}
_ELEMENTWISE_UNARY = {"relu": relu, "sigmoid": sigmoid, "tanh": tanh}


def elementwise(op_kind: str, a, b=None) -> Tensor:
    """Dispatch by name: add/sub/mul (binary), relu/sigmoid/tanh (unary)."""
    if op_kind in _ELEMENTWISE_BINARY:
        if b is None:
            raise ShapeError(f"{op_kind} requires two operands")
        return _ELEMENTWISE_BINARY[op_kind](a, b)
    if op_kind in _ELEMENTWISE_UNARY:
        if b is not None:
            raise ShapeError(f"{op_kind} takes a single operand")
        return _ELEMENTWISE_UNARY[op_kind](a)
    raise ValueError(f"unknown elementwise op {op_kind!r}")


# ---------------------------------------------------------------------------
# linear algebra and reductions
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} x {b.shape}")
    out = _result(a.data @ b.data, "matmul", (a, b))
    if out.requires_grad:
        ad, bd = a.data, b.data
        def bw(g):
            if a.requires_grad:
                a.accumulate_grad(g @ bd.T)
            if b.requires_grad:
                b.accumulate_grad(ad.T @ g)
        out._backward = bw
    return out


def tsum(a) -> Tensor:
    """Sum of all elements, as a scalar node."""
    a = as_tensor(a)
    out = _result(np.asarray(a.data.sum()), "sum", (a,))
    if out.requires_grad:
        out._backward = lambda g: a.accumulate_grad(np.full_like(a.data, float(g)))
    return out


def softmax(a) -> Tensor:
    """Softmax along the last axis, max-shifted before exponentiation."""
    a = as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)
    out = _result(s, "softmax", (a,))
    if out.requires_grad:
        def bw(g):
            dot = (g * s).sum(axis=-1, keepdims=True)
            a.accumulate_grad(s * (g - dot))
        out._backward = bw
    return out


# ---------------------------------------------------------------------------
# signal-axis ops: layout is [C, T] or [B, C, T], channel-major
# ---------------------------------------------------------------------------

def reverse_time(a) -> Tensor:
    """Flip the trailing (time) axis; an involution."""
    a = as_tensor(a)
    out = _result(np.ascontiguousarray(np.flip(a.data, axis=-1)), "reverse_time", (a,))
    if out.requires_grad:
        out._backward = lambda g: a.accumulate_grad(np.flip(g, axis=-1))
    return out


def avg_pool_time(a) -> Tensor:
    """Mean over the trailing time axis: [.., C, T] -> [.., C]."""
    a = as_tensor(a)
    if a.ndim < 2:
        raise ShapeError(f"avg_pool_time expects [.., C, T], got shape {a.shape}")
    T = a.shape[-1]
    if T == 0:
        raise ShapeError("avg_pool_time: empty time axis")
    out = _result(a.data.mean(axis=-1), "avg_pool_time", (a,))
    if out.requires_grad:
        out._backward = lambda g: a.accumulate_grad(
            np.repeat(g[..., None], T, axis=-1) / T)
    return out


def concat_channels(parts: Sequence, batched: bool = False) -> Tensor:
    """Concatenate along the channel axis (axis 0, or 1 when `batched`).

    Parts must share rank and every extent other than the channel extent;
    for [C, T] parts that means a common time extent.
    """
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat_channels: no parts")
    axis = 1 if batched else 0
    ndim = parts[0].ndim
    if any(p.ndim != ndim for p in parts):
        raise ShapeError("concat_channels: parts have mixed ranks "
                         f"{[p.shape for p in parts]}")
    if ndim <= axis:
        raise ShapeError(f"concat_channels: rank {ndim} too small for axis {axis}")
    for p in parts[1:]:
        rest_a = p.shape[:axis] + p.shape[axis + 1:]
        rest_b = parts[0].shape[:axis] + parts[0].shape[axis + 1:]
        if rest_a != rest_b:
            raise ShapeError("concat_channels: non-channel extents differ: "
                             f"{parts[0].shape} vs {p.shape}")
    out = _result(np.concatenate([p.data for p in parts], axis=axis),
                  "concat_channels", tuple(parts))
    if out.requires_grad:
        widths = [p.shape[axis] for p in parts]
        offsets = np.cumsum([0] + widths)
        def bw(g):
            for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
                if p.requires_grad:
                    idx = (slice(None),) * axis + (slice(lo, hi),)
                    p.accumulate_grad(g[idx])
        out._backward = bw
    return out


def add_bias(x, b) -> Tensor:
    """Add a bias vector to each row of a matrix, or plainly to a vector."""
    x, b = as_tensor(x), as_tensor(b)
    if b.ndim != 1 or x.shape[-1] != b.shape[0] or x.ndim not in (1, 2):
        raise ShapeError(f"add_bias: cannot add bias {b.shape} to {x.shape}")
    out = _result(x.data + b.data, "add_bias", (x, b))
    if out.requires_grad:
        def bw(g):
            if x.requires_grad:
                x.accumulate_grad(g)
            if b.requires_grad:
                b.accumulate_grad(g if g.ndim == 1 else g.sum(axis=0))
        out._backward = bw
    return out


def scale_channels(x, s) -> Tensor:
    """Per-channel rescaling: [.., C, T] * [.., C] broadcast over time."""
    x, s = as_tensor(x), as_tensor(s)
    if s.shape != x.shape[:-1]:
        raise ShapeError(f"scale_channels: scales {s.shape} do not match "
                         f"channels of {x.shape}")
    out = _result(x.data * s.data[..., None], "scale_channels", (x, s))
    if out.requires_grad:
        xd, sd = x.data, s.data
        def bw(g):
            if x.requires_grad:
                x.accumulate_grad(g * sd[..., None])
            if s.requires_grad:
                s.accumulate_grad((g * xd).sum(axis=-1))
        out._backward = bw
    return out
