"""Dense 4-D tensors with define-by-run reverse-mode differentiation.

Every tensor has shape ``(n, c, h, w)``.  Operations executed while a
:class:`Graph` is active are appended to its tape when at least one operand
requires a gradient; :func:`backward` then replays the tape in reverse.
Outside an active graph nothing is recorded, which is how inference and
finite-difference probes run.
"""

from __future__ import annotations

import os
from typing import Callable, NamedTuple, Optional, Sequence

import numpy as np

from .exceptions import ContractError, DimensionError, NonFiniteError

DEFAULT_DTYPE = np.float32

_debug = os.environ.get("DEMSR_DEBUG", "") not in ("", "0")
_graph_stack: list = []


def set_debug(enabled: bool) -> None:
    """Toggle finiteness checks at every op boundary."""
    global _debug
    _debug = bool(enabled)


def debug_enabled() -> bool:
    return _debug


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node_id", "_graph", "name")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(DEFAULT_DTYPE)
        if arr.ndim != 4:
            raise DimensionError(f"tensors are 4-D (n, c, h, w); got shape {arr.shape}")
        if arr.size == 0:
            raise DimensionError(f"tensor has an empty dimension: {arr.shape}")
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.node_id: Optional[int] = None
        self._graph: Optional[Graph] = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def __add__(self, other):
        return ew_binary("add", self, _as_tensor(other, self.dtype))

    def __sub__(self, other):
        return ew_binary("sub", self, _as_tensor(other, self.dtype))

    def __mul__(self, other):
        return ew_binary("mul", self, _as_tensor(other, self.dtype))

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"


def _as_tensor(value, dtype):
    if isinstance(value, Tensor):
        return value
    arr = np.asarray(value, dtype=dtype)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1, 1, 1)
    return Tensor(arr)


def zeros(shape, dtype=DEFAULT_DTYPE, requires_grad=False):
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def ones(shape, dtype=DEFAULT_DTYPE, requires_grad=False):
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=requires_grad)


class Node(NamedTuple):
    op: str
    inputs: tuple
    backward: Callable


class Graph:
    """Append-only tape of recorded operations.

    Use as a context manager; ops run inside the ``with`` block are recorded.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self):
        _graph_stack.append(self)
        return self

    def __exit__(self, *exc):
        _graph_stack.pop()
        return False

    def __len__(self):
        return len(self.nodes)

    def record(self, op, out, inputs, backward_fn):
        for t in inputs:
            if t._graph is self and t.node_id is not None and t.node_id >= len(self.nodes):
                raise ContractError("operand recorded after its consumer")
        out.node_id = len(self.nodes)
        out._graph = self
        self.nodes.append(Node(op, tuple(inputs), backward_fn))


def active_graph() -> Optional[Graph]:
    return _graph_stack[-1] if _graph_stack else None


class no_grad:
    """Suspend recording inside the block, even if a graph is active."""

    def __enter__(self):
        self._saved = list(_graph_stack)
        _graph_stack.clear()

    def __exit__(self, *exc):
        _graph_stack.extend(self._saved)
        return False


def apply(op: str, out_data: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    """Wrap ``out_data`` as a tensor and record it on the active graph.

    ``backward_fn(grad_out)`` must return one gradient (or ``None``) per input.
    """
    if _debug and not np.all(np.isfinite(out_data)):
        if all(np.all(np.isfinite(t.data)) for t in inputs):
            raise NonFiniteError(f"{op}: produced non-finite values from finite inputs")
        raise NonFiniteError(f"{op}: received non-finite input")
    out = Tensor(out_data)
    graph = active_graph()
    if graph is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        graph.record(op, out, inputs, backward_fn)
    return out


def backward(loss: Tensor, graph: Optional[Graph] = None) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``."""
    if loss.shape != (1, 1, 1, 1):
        raise ContractError(f"backward needs a scalar (1,1,1,1) loss, got shape {loss.shape}")
    if graph is None:
        graph = loss._graph
    if graph is None or loss._graph is not graph or loss.node_id is None:
        raise ContractError("loss is not a node of the given graph")
    pending = {loss.node_id: np.ones_like(loss.data)}
    for idx in range(loss.node_id, -1, -1):
        g = pending.pop(idx, None)
        if g is None:
            continue
        node = graph.nodes[idx]
        in_grads = node.backward(g)
        for inp, gi in zip(node.inputs, in_grads):
            if gi is None or not inp.requires_grad:
                continue
            if inp._graph is graph and inp.node_id is not None:
                prev = pending.get(inp.node_id)
                pending[inp.node_id] = gi if prev is None else prev + gi
            elif inp.grad is None:
                inp.grad = np.array(gi, dtype=inp.dtype, copy=True)
            else:
                inp.grad += gi


# ---------------------------------------------------------------------------
# Elementwise arithmetic and reductions


def _broadcast_ok(a_shape, b_shape):
    if a_shape == b_shape:
        return True
    n, c = a_shape[:2]
    return b_shape[2:] == (1, 1) and b_shape[0] in (1, n) and b_shape[1] in (1, c)


def _reduce_to(grad, shape):
    if grad.shape == shape:
        return grad
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    return grad.sum(axis=axes, keepdims=True)


def ew_binary(op: str, a: Tensor, b: Tensor) -> Tensor:
    """Elementwise ``add``/``sub``/``mul``; ``b`` may broadcast per channel."""
    if not _broadcast_ok(a.shape, b.shape):
        raise DimensionError(f"{op}: cannot combine shapes {a.shape} and {b.shape}")
    x, y = a.data, b.data
    if op == "add":
        out = x + y

        def grad_fn(g):
            return g, _reduce_to(g, b.shape)

    elif op == "sub":
        out = x - y

        def grad_fn(g):
            return g, -_reduce_to(g, b.shape)

    elif op == "mul":
        out = x * y

        def grad_fn(g):
            return g * y, _reduce_to(g * x, b.shape)

    else:
        raise ValueError(f"unknown elementwise op {op!r}")
    return apply(op, out, (a, b), grad_fn)


def add(a, b):
    return ew_binary("add", a, b)


def sub(a, b):
    return ew_binary("sub", a, b)


def mul(a, b):
    return ew_binary("mul", a, b)


def reduce_mean(x: Tensor) -> Tensor:
    """Mean of all elements as a (1,1,1,1) tensor."""
    size = x.data.size
    out = np.asarray(x.data.mean(), dtype=x.dtype).reshape(1, 1, 1, 1)

    def grad_fn(g):
        return (np.broadcast_to(g.reshape(()) / size, x.shape).astype(x.dtype),)

    return apply("reduce_mean", out, (x,), grad_fn)


# ---------------------------------------------------------------------------
# Finite-difference verification


def grad_check(f, x: Tensor, eps: float = 1e-6, indices=None) -> float:
    """Largest relative error between analytic and central-difference gradients.

    ``f`` maps ``x`` to a scalar tensor.  ``indices`` restricts the probe to
    a subset of flat positions; by default every element is checked.  The
    per-element error is ``|a - n| / max(1e-12, |a| + |n|)``.
    """
    if x.dtype != np.float64:
        raise ContractError(f"grad_check needs a float64 tensor, got {x.dtype}")
    was_requiring, saved_grad = x.requires_grad, x.grad
    x.requires_grad = True
    x.grad = None
    try:
        with Graph() as graph:
            loss = f(x)
        backward(loss, graph)
        analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    finally:
        x.requires_grad = was_requiring
        x.grad = saved_grad

    flat = x.data.reshape(-1)
    positions = range(flat.size) if indices is None else indices
    worst = 0.0
    with no_grad():
        for i in positions:
            orig = flat[i]
            flat[i] = orig + eps
            fp = f(x).item()
            flat[i] = orig - eps
            fm = f(x).item()
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * eps)
            a = analytic.reshape(-1)[i]
            err = abs(a - numeric) / max(1e-12, abs(a) + abs(numeric))
            worst = max(worst, err)
    return worst
