"""Reverse-mode differentiation over dense float64 arrays.

Every operation appends a node to an implicit tape: nodes get a monotonically
increasing id at creation, so sorting reachable nodes by id is a valid
topological order.  Backward rules are written with the same taped
operations, which means a gradient computed with ``create_graph=True`` is an
ordinary :class:`Var` that can be differentiated again (double backprop).

    >>> x = Var(np.array([3.0, 5.0]), requires_grad=True)
    >>> y = sum(x[0:1] * x[1:2])            # doctest: +SKIP
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "ContractError",
    "Var",
    "as_var",
    "grad",
    "no_grad",
    "enable_grad",
    "is_grad_enabled",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "transpose",
    "reshape",
    "sum",
    "mean",
    "sum_to",
    "broadcast_to",
    "tanh",
    "relu",
    "sigmoid",
    "softplus",
    "exp",
    "log",
    "square",
    "sqrt",
]


class ContractError(ValueError):
    """Raised when a differentiation request violates its preconditions."""


_ids = itertools.count()
_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def _grad_mode(flag: bool):
    prev = is_grad_enabled()
    _state.enabled = flag
    try:
        yield
    finally:
        _state.enabled = prev


def no_grad():
    """Context manager: operations inside are not recorded."""
    return _grad_mode(False)


def enable_grad():
    return _grad_mode(True)


BackwardFn = Callable[["Var", tuple], tuple]


class Var:
    """A node on the tape holding a float64 array."""

    __slots__ = ("value", "parents", "backward_fn", "requires_grad", "id", "__weakref__")

    __array_priority__ = 100.0

    def __init__(self, value, requires_grad: bool = False, *, _parents=(), _backward=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents: tuple[Var, ...] = _parents
        self.backward_fn: BackwardFn | None = _backward
        self.requires_grad = requires_grad
        self.id = next(_ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def is_leaf(self) -> bool:
        return self.backward_fn is None

    def detach(self) -> Var:
        return Var(self.value)

    def item(self) -> float:
        return float(self.value)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Var({self.value!r}{flag})"

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __truediv__ = lambda self, o: div(self, o)
    __rtruediv__ = lambda self, o: div(o, self)
    __matmul__ = lambda self, o: matmul(self, o)
    __rmatmul__ = lambda self, o: matmul(o, self)
    __neg__ = lambda self: neg(self)

    def __getitem__(self, idx) -> Var:
        return take(self, idx)

    @property
    def T(self) -> Var:
        return transpose(self)


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def _make(value, parents: Sequence[Var], backward: BackwardFn) -> Var:
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        return Var(value, True, _parents=tuple(parents), _backward=backward)
    return Var(value)


# ---------------------------------------------------------------- primitives


def add(a, b) -> Var:
    a, b = as_var(a), as_var(b)

    def back(g, needs):
        return (
            sum_to(g, a.shape) if needs[0] else None,
            sum_to(g, b.shape) if needs[1] else None,
        )

    return _make(a.value + b.value, (a, b), back)


def sub(a, b) -> Var:
    a, b = as_var(a), as_var(b)

    def back(g, needs):
        return (
            sum_to(g, a.shape) if needs[0] else None,
            sum_to(neg(g), b.shape) if needs[1] else None,
        )

    return _make(a.value - b.value, (a, b), back)


def mul(a, b) -> Var:
    a, b = as_var(a), as_var(b)

    def back(g, needs):
        return (
            sum_to(mul(g, b), a.shape) if needs[0] else None,
            sum_to(mul(g, a), b.shape) if needs[1] else None,
        )

    return _make(a.value * b.value, (a, b), back)


def div(a, b) -> Var:
    a, b = as_var(a), as_var(b)

    def back(g, needs):
        ga = sum_to(div(g, b), a.shape) if needs[0] else None
        gb = None
        if needs[1]:
            gb = sum_to(neg(div(mul(g, a), mul(b, b))), b.shape)
        return ga, gb

    return _make(a.value / b.value, (a, b), back)


def neg(a) -> Var:
    a = as_var(a)
    return _make(-a.value, (a,), lambda g, needs: (neg(g),))


def matmul(a, b) -> Var:
    """2-D matrix product."""
    a, b = as_var(a), as_var(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ContractError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")

    def back(g, needs):
        return (
            matmul(g, transpose(b)) if needs[0] else None,
            matmul(transpose(a), g) if needs[1] else None,
        )

    return _make(a.value @ b.value, (a, b), back)


def transpose(a) -> Var:
    a = as_var(a)
    return _make(a.value.T, (a,), lambda g, needs: (transpose(g),))


def reshape(a, shape) -> Var:
    a = as_var(a)
    old = a.shape
    return _make(a.value.reshape(shape), (a,), lambda g, needs: (reshape(g, old),))


def take(a, idx) -> Var:
    """Basic (slice) indexing.  Fancy indexing is deliberately unsupported."""
    a = as_var(a)
    shape = a.shape

    def back(g, needs):
        return (_pad(g, shape, idx),)

    return _make(a.value[idx], (a,), back)


def _pad(g, shape, idx) -> Var:
    # adjoint of basic indexing: scatter into zeros
    def back(gg, needs):
        return (take(gg, idx),)

    out = np.zeros(shape)
    out[idx] = g.value
    return _make(out, (g,), back)


def sum(a, axis=None, keepdims: bool = False) -> Var:  # noqa: A001
    a = as_var(a)
    shape = a.shape

    def back(g, needs):
        if axis is not None and not keepdims:
            g = reshape(g, np.expand_dims(np.empty(g.shape), axis).shape)
        elif axis is None and not keepdims:
            g = reshape(g, (1,) * len(shape))
        return (broadcast_to(g, shape),)

    return _make(a.value.sum(axis=axis, keepdims=keepdims), (a,), back)


def mean(a, axis=None, keepdims: bool = False) -> Var:
    a = as_var(a)
    n = a.value.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


def broadcast_to(a, shape) -> Var:
    a = as_var(a)
    shape = tuple(shape)
    if a.shape == shape:
        return a
    old = a.shape
    return _make(
        np.broadcast_to(a.value, shape).copy(), (a,), lambda g, needs: (sum_to(g, old),)
    )


def sum_to(a, shape) -> Var:
    """Reduce ``a`` to ``shape`` by summing over broadcast axes."""
    a = as_var(a)
    shape = tuple(shape)
    if a.shape == shape:
        return a
    value = a.value
    lead = value.ndim - len(shape)
    if lead:
        value = value.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and value.shape[i] != 1)
    if axes:
        value = value.sum(axis=axes, keepdims=True)
    old = a.shape
    return _make(value.reshape(shape), (a,), lambda g, needs: (broadcast_to(g, old),))


def tanh(a) -> Var:
    a = as_var(a)
    out_value = np.tanh(a.value)

    def back(g, needs):
        y = out if out.requires_grad else Var(out_value)
        return (mul(g, sub(1.0, mul(y, y))),)

    out = _make(out_value, (a,), back)
    return out


def relu(a) -> Var:
    a = as_var(a)
    mask = (a.value > 0).astype(np.float64)
    # second derivative is zero almost everywhere; the mask is a constant
    return _make(a.value * mask, (a,), lambda g, needs: (mul(g, mask),))


def sigmoid(a) -> Var:
    a = as_var(a)
    out_value = _stable_sigmoid(a.value)

    def back(g, needs):
        y = out if out.requires_grad else Var(out_value)
        return (mul(g, mul(y, sub(1.0, y))),)

    out = _make(out_value, (a,), back)
    return out


def softplus(a) -> Var:
    """log(1 + exp(a)), evaluated without overflow."""
    a = as_var(a)
    v = a.value
    value = np.maximum(v, 0.0) + np.log1p(np.exp(-np.abs(v)))
    return _make(value, (a,), lambda g, needs: (mul(g, sigmoid(a)),))


def exp(a) -> Var:
    a = as_var(a)
    out_value = np.exp(a.value)

    def back(g, needs):
        y = out if out.requires_grad else Var(out_value)
        return (mul(g, y),)

    out = _make(out_value, (a,), back)
    return out


def log(a) -> Var:
    a = as_var(a)
    return _make(np.log(a.value), (a,), lambda g, needs: (div(g, a),))


def square(a) -> Var:
    a = as_var(a)
    return _make(a.value * a.value, (a,), lambda g, needs: (mul(g, mul(a, 2.0)),))


def sqrt(a) -> Var:
    """Square root whose derivative at exactly 0 is taken as 0 instead of inf."""
    a = as_var(a)
    out_value = np.sqrt(a.value)
    zero = (out_value == 0).astype(np.float64)

    def back(g, needs):
        y = out if out.requires_grad else Var(out_value)
        # (y + zero) is y away from 0 and 1 at 0; g is masked there
        return (div(mul(g, 1.0 - zero), mul(add(y, zero), 2.0)),)

    out = _make(out_value, (a,), back)
    return out


def _stable_sigmoid(v: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(v))
    return np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


# ---------------------------------------------------------------- backward


def _reachable(output: Var, wrt_ids: set[int]) -> tuple[list[Var], set[int]]:
    """Nodes reachable from ``output`` and the subset lying on a path to ``wrt``."""
    seen: dict[int, Var] = {}
    stack = [output]
    while stack:
        node = stack.pop()
        if node.id in seen or not node.requires_grad:
            continue
        seen[node.id] = node
        stack.extend(node.parents)
    # ids increase with creation, so ascending id order visits parents first
    order = sorted(seen.values(), key=lambda n: n.id)
    relevant: set[int] = set()
    for node in order:
        if node.id in wrt_ids or any(p.id in relevant for p in node.parents):
            relevant.add(node.id)
    return order, relevant


def grad(
    output: Var,
    wrt: Sequence[Var],
    grad_output=None,
    create_graph: bool = False,
) -> list[Var]:
    """Gradients of ``output`` with respect to each of ``wrt``.

    ``output`` must be a scalar unless ``grad_output`` is given.  With
    ``create_graph=True`` the returned gradients are themselves taped and can
    be differentiated again.
    """
    if grad_output is None:
        if output.value.size != 1:
            raise ContractError(f"gradient requested of non-scalar output with shape {output.shape}")
        seed = Var(np.ones_like(output.value))
    else:
        seed = as_var(grad_output)
        if seed.shape != output.shape:
            raise ContractError("grad_output shape does not match output")

    wrt_ids = {v.id for v in wrt}
    order, relevant = _reachable(output, wrt_ids)
    grads: dict[int, Var] = {}
    if output.id in relevant:
        grads[output.id] = seed

    with _grad_mode(create_graph):
        for node in reversed(order):
            g = grads.get(node.id)
            if g is None or node.is_leaf:
                continue
            if node.id not in wrt_ids:
                # free intermediate gradients as soon as they are consumed
                del grads[node.id]
            needs = tuple(p.id in relevant for p in node.parents)
            for parent, pg in zip(node.parents, node.backward_fn(g, needs)):
                if pg is None or parent.id not in relevant:
                    continue
                prev = grads.get(parent.id)
                grads[parent.id] = pg if prev is None else add(prev, pg)

    out = []
    for v in wrt:
        g = grads.get(v.id)
        if g is None:
            g = Var(np.zeros_like(v.value))
        elif not create_graph:
            g = g.detach()
        out.append(g)
    return out
