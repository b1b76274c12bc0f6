"""Dense float64 tensors with reverse-mode differentiation.

Backward rules are written in terms of tensor operations, so running a
backward pass while graph recording is enabled produces a differentiable
graph of its own. That is what makes gradients of gradients (and therefore
gradients through optimization steps) possible.
"""
from __future__ import annotations

import threading
import weakref
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor", "Node", "ShapeError", "DomainError", "GraphError",
    "tensor", "zeros", "ones", "grad", "backward", "detach", "no_grad", "enable_grad",
    "is_grad_enabled", "add", "sub", "mul", "div", "neg", "exp", "log", "tanh", "relu",
    "power", "matmul", "transpose", "reshape", "sum", "mean", "concat", "stack",
    "mse_loss", "cross_entropy", "softmax", "topological_order",
]


class ShapeError(ValueError):
    """Operand shapes do not conform."""


class DomainError(ValueError):
    """An input lies outside an operation's mathematical domain."""


class GraphError(RuntimeError):
    """Differentiation was requested on something that is not on a graph."""


_local = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_local, "enabled", True)


@contextmanager
def enable_grad(enabled: bool = True):
    previous = is_grad_enabled()
    _local.enabled = enabled
    try:
        yield
    finally:
        _local.enabled = previous


def no_grad():
    return enable_grad(False)


class Node:
    """One recorded operation: its parents and how to push a gradient back to them."""

    __slots__ = ("op", "parents", "backward")

    def __init__(self, op: str, parents: tuple = (), backward: Callable | None = None):
        self.op = op
        self.parents = parents
        self.backward = backward

    def __repr__(self):
        return f"Node({self.op}, {len(self.parents)} parents)"


def _wrap(arr: np.ndarray) -> "Tensor":
    t = Tensor.__new__(Tensor)
    t.data = arr
    t.node = None
    t.grad = None
    return t


def _record(arr, op, parents, backward) -> "Tensor":
    out = _wrap(np.asarray(arr, dtype=np.float64))
    if is_grad_enabled() and any(p.node is not None for p in parents):
        out.node = Node(op, tuple(parents), backward)
    return out


def _as_tensor(x) -> "Tensor":
    if isinstance(x, Tensor):
        return x
    return _wrap(np.array(x, dtype=np.float64))


class Tensor:
    """A dense array of 64-bit reals that may take part in a differentiation graph."""

    __slots__ = ("data", "node", "grad", "__weakref__")
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if any(d == 0 for d in arr.shape):
            raise ShapeError(f"tensor dimensions must be positive, got {arr.shape}")
        self.data = arr
        self.node = Node("leaf") if requires_grad else None
        self.grad = None

    @property
    def requires_grad(self) -> bool:
        return self.node is not None

    @requires_grad.setter
    def requires_grad(self, flag: bool):
        if flag and self.node is None:
            self.node = Node("leaf")
        elif not flag:
            self.node = None

    @property
    def is_leaf(self) -> bool:
        return self.node is None or self.node.op == "leaf"

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> "Tensor":
        return detach(self)

    def clone(self) -> "Tensor":
        return _record(self.data.copy(), "clone", (self,), lambda g: (g,))

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({np.array2string(self.data, precision=6)}{flag})"

    def __len__(self):
        return len(self.data)

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, key):
        return _getitem(self, key)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def tanh(self):
        return tanh(self)

    def relu(self):
        return relu(self)

    def sum(self, axis=None):
        return sum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=requires_grad)


def detach(t: Tensor) -> Tensor:
    return _wrap(t.data)


# -- broadcasting -----------------------------------------------------------

def _broadcast_shape(a: tuple, b: tuple, op: str) -> tuple:
    if a == b:
        return a
    if a == ():
        return b
    if b == ():
        return a
    if len(a) == 1 and len(b) == 2 and b[1] == a[0]:
        return b
    if len(b) == 1 and len(a) == 2 and a[1] == b[0]:
        return a
    raise ShapeError(f"{op}: cannot broadcast shapes {a} and {b}")


def _sum_to(t: Tensor, shape: tuple) -> Tensor:
    """Reduce a broadcast result back to ``shape`` (inverse of ``_broadcast_to``)."""
    if t.shape == shape:
        return t
    arr = t.data
    lead = arr.ndim - len(shape)
    if lead:
        arr = arr.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and arr.shape[i] != 1)
    if axes:
        arr = arr.sum(axis=axes, keepdims=True)
    src = t.shape
    return _record(arr, "sum_to", (t,), lambda g: (_broadcast_to(g, src),))


def _broadcast_to(t: Tensor, shape: tuple) -> Tensor:
    if t.shape == shape:
        return t
    src = t.shape
    arr = np.array(np.broadcast_to(t.data, shape))
    return _record(arr, "broadcast_to", (t,), lambda g: (_sum_to(g, src),))


# -- elementwise --------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "add")
    sa, sb = a.shape, b.shape
    return _record(a.data + b.data, "add", (a, b),
                   lambda g: (_sum_to(g, sa), _sum_to(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "sub")
    sa, sb = a.shape, b.shape
    return _record(a.data - b.data, "sub", (a, b),
                   lambda g: (_sum_to(g, sa), _sum_to(neg(g), sb)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "mul")

    def backward(g):
        return (_sum_to(mul(g, b), a.shape) if a.node is not None else None,
                _sum_to(mul(g, a), b.shape) if b.node is not None else None)

    return _record(a.data * b.data, "mul", (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "div")
    if np.any(b.data == 0):
        raise DomainError("div: division by zero")

    def backward(g):
        ga = _sum_to(div(g, b), a.shape) if a.node is not None else None
        gb = None
        if b.node is not None:
            gb = _sum_to(neg(div(mul(g, a), mul(b, b))), b.shape)
        return ga, gb

    return _record(a.data / b.data, "div", (a, b), backward)


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _record(-a.data, "neg", (a,), lambda g: (neg(g),))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = _record(np.exp(a.data), "exp", (a,), None)
    if out.node is not None:
        ref = weakref.ref(out)
        out.node.backward = lambda g: (mul(g, ref()),)
    return out


def log(a) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainError("log: input must be strictly positive")
    return _record(np.log(a.data), "log", (a,), lambda g: (div(g, a),))


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out = _record(np.tanh(a.data), "tanh", (a,), None)
    if out.node is not None:
        ref = weakref.ref(out)

        def backward(g):
            y = ref()
            return (mul(g, sub(1.0, mul(y, y))),)

        out.node.backward = backward
    return out


def relu(a) -> Tensor:
    a = _as_tensor(a)
    # subgradient 0 at the kink
    mask = _wrap((a.data > 0).astype(np.float64))
    return _record(a.data * mask.data, "relu", (a,), lambda g: (mul(g, mask),))


def power(a, exponent: float) -> Tensor:
    a = _as_tensor(a)
    p = float(exponent)
    if not p.is_integer() and np.any(a.data < 0):
        raise DomainError(f"power: negative base with non-integer exponent {p}")
    if p < 0 and np.any(a.data == 0):
        raise DomainError(f"power: zero base with negative exponent {p}")
    if p == 0:
        return _record(np.ones_like(a.data), "power", (a,), lambda g: (mul(g, 0.0),))
    if p == 1:
        return _record(a.data.copy(), "power", (a,), lambda g: (g,))
    return _record(a.data ** p, "power", (a,), lambda g: (mul(g, mul(p, power(a, p - 1))),))


# -- linear algebra and shape ----------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def backward(g):
        return (matmul(g, transpose(b)) if a.node is not None else None,
                matmul(transpose(a), g) if b.node is not None else None)

    return _record(a.data @ b.data, "matmul", (a, b), backward)


def transpose(a) -> Tensor:
    a = _as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose: expected a matrix, got shape {a.shape}")
    return _record(a.data.T.copy(), "transpose", (a,), lambda g: (transpose(g),))


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(int(d) for d in shape)
    if int(np.prod(shape, dtype=np.int64)) != a.size or any(d <= 0 for d in shape):
        raise ShapeError(f"reshape: cannot reshape {a.shape} into {shape}")
    src = a.shape
    return _record(a.data.reshape(shape), "reshape", (a,), lambda g: (reshape(g, src),))


def sum(a, axis: int | None = None) -> Tensor:
    a = _as_tensor(a)
    if axis is None:
        return _sum_to(a, ()) if a.shape != () else a
    axis = axis % a.ndim
    keep = tuple(1 if i == axis else d for i, d in enumerate(a.shape))
    reduced = tuple(d for i, d in enumerate(a.shape) if i != axis)
    summed = _sum_to(a, keep) if keep != a.shape else a
    return reshape(summed, reduced) if reduced else reshape(summed, ())


def mean(a, axis: int | None = None) -> Tensor:
    a = _as_tensor(a)
    count = a.size if axis is None else a.shape[axis]
    return mul(sum(a, axis), 1.0 / count)


def _getitem(a: Tensor, key) -> Tensor:
    src = a.shape
    out = np.array(a.data[key], dtype=np.float64)
    return _record(out, "getitem", (a,), lambda g: (_scatter(g, key, src),))


def _scatter(g: Tensor, key, shape: tuple) -> Tensor:
    arr = np.zeros(shape)
    np.add.at(arr, key, g.data)
    return _record(arr, "scatter", (g,), lambda gg: (_getitem(gg, key),))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat: need at least one tensor")
    ndim = ts[0].ndim
    axis = axis % max(ndim, 1)
    for t in ts[1:]:
        other = tuple(d for i, d in enumerate(t.shape) if i != axis)
        first = tuple(d for i, d in enumerate(ts[0].shape) if i != axis)
        if t.ndim != ndim or other != first:
            raise ShapeError(f"concat: incompatible shapes {ts[0].shape} and {t.shape}")
    bounds = np.cumsum([0] + [t.shape[axis] for t in ts])

    def backward(g):
        grads = []
        for i in range(len(ts)):
            key = [slice(None)] * ndim
            key[axis] = slice(int(bounds[i]), int(bounds[i + 1]))
            grads.append(_getitem(g, tuple(key)))
        return tuple(grads)

    return _record(np.concatenate([t.data for t in ts], axis=axis), "concat", ts, backward)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("stack: need at least one tensor")
    for t in ts[1:]:
        if t.shape != ts[0].shape:
            raise ShapeError(f"stack: incompatible shapes {ts[0].shape} and {t.shape}")
    ndim = ts[0].ndim + 1
    axis = axis % ndim

    def backward(g):
        grads = []
        for i in range(len(ts)):
            key = [slice(None)] * ndim
            key[axis] = i
            grads.append(_getitem(g, tuple(key)))
        return tuple(grads)

    return _record(np.stack([t.data for t in ts], axis=axis), "stack", ts, backward)


# -- losses -------------------------------------------------------------------

def mse_loss(pred, target) -> Tensor:
    pred, target = _as_tensor(pred), _as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss: prediction shape {pred.shape} != target shape {target.shape}")
    diff = sub(pred, target)
    return mean(mul(diff, diff))


def _check_targets(logits: Tensor, target) -> np.ndarray:
    labels = np.asarray(target)
    if labels.ndim != 1 or labels.shape[0] != logits.shape[0]:
        raise ShapeError(f"cross_entropy: logits {logits.shape} do not match targets {labels.shape}")
    if not np.all(np.equal(np.mod(labels, 1), 0)):
        raise ValueError("cross_entropy: targets must be integer class indices")
    labels = labels.astype(np.int64)
    n_classes = logits.shape[1]
    if labels.min() < 0 or labels.max() >= n_classes:
        raise IndexError(f"cross_entropy: target outside [0, {n_classes})")
    return labels


def cross_entropy(logits, target) -> Tensor:
    """Mean softmax cross-entropy of ``logits`` (N, C) against integer targets (N,)."""
    logits = _as_tensor(logits)
    if logits.ndim == 1:
        logits = reshape(logits, (1, logits.shape[0]))
        target = np.atleast_1d(np.asarray(target))
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy: logits must be (N, C), got {logits.shape}")
    labels = _check_targets(logits, target)
    n, c = logits.shape
    # shift by a constant row max; the result and its derivatives are unchanged
    shift = _wrap(np.array(np.broadcast_to(logits.data.max(axis=1, keepdims=True), (n, c))))
    z = sub(logits, shift)
    lse = log(sum(exp(z), axis=1))
    onehot = np.zeros((n, c))
    onehot[np.arange(n), labels] = 1.0
    picked = sum(mul(z, _wrap(onehot)), axis=1)
    return mean(sub(lse, picked))


def softmax(logits) -> np.ndarray:
    """Row-wise softmax as a plain array (no graph)."""
    z = np.asarray(logits.data if isinstance(logits, Tensor) else logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


# -- differentiation --------------------------------------------------------

def topological_order(output: Tensor) -> list:
    """Graph tensors reachable from ``output``, parents before children."""
    order, seen = [], set()
    stack_ = [(output, False)]
    while stack_:
        t, expanded = stack_.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack_.append((t, True))
        for p in t.node.parents:
            if p.node is not None and id(p) not in seen:
                stack_.append((p, False))
    return order


def _check_output(output: Tensor):
    if not isinstance(output, Tensor) or output.node is None:
        raise GraphError("cannot differentiate a tensor that is not on a graph")
    if output.shape != ():
        raise ShapeError(f"differentiation needs a scalar output, got shape {output.shape}")


def _backprop(output: Tensor, targets: list | None, create_graph: bool) -> dict:
    order = topological_order(output)
    relevant = None
    if targets is not None:
        wanted = {id(t) for t in targets}
        relevant = set()
        for t in order:
            if id(t) in wanted or any(id(p) in relevant for p in t.node.parents):
                relevant.add(id(t))
    grads = {id(output): _wrap(np.ones(()))}
    keep = set() if targets is None else {id(t) for t in targets}
    with enable_grad(create_graph):
        for t in reversed(order):
            g = grads.get(id(t))
            if g is None or t.node.backward is None:
                continue
            if relevant is not None and id(t) not in relevant:
                continue
            parent_grads = t.node.backward(g)
            for p, pg in zip(t.node.parents, parent_grads):
                if pg is None or p.node is None:
                    continue
                if relevant is not None and id(p) not in relevant:
                    continue
                key = id(p)
                grads[key] = pg if key not in grads else add(grads[key], pg)
            if targets is not None and id(t) not in keep:
                del grads[id(t)]
    return grads if targets is not None else {"order": order, "grads": grads}


def grad(output: Tensor, inputs: Iterable[Tensor], create_graph: bool = False) -> list:
    """Gradients of scalar ``output`` with respect to each of ``inputs``.

    With ``create_graph`` the returned gradients are themselves on the graph
    and can be differentiated again. Inputs that do not influence ``output``
    get exact zeros.
    """
    _check_output(output)
    inputs = list(inputs)
    for i, x in enumerate(inputs):
        if not isinstance(x, Tensor) or x.node is None:
            raise GraphError(f"input {i} does not require grad")
    grads = _backprop(output, inputs, create_graph)
    result = []
    for x in inputs:
        g = grads.get(id(x))
        if g is None:
            g = _wrap(np.zeros(x.shape))
        elif not create_graph and g.node is not None:
            g = detach(g)
        result.append(g)
    return result


def backward(output: Tensor) -> None:
    """Accumulate d(output)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
    _check_output(output)
    state = _backprop(output, None, False)
    grads = state["grads"]
    for t in state["order"]:
        if t.node.op != "leaf" or id(t) not in grads:
            continue
        g = grads[id(t)].data
        t.grad = _wrap(g.copy()) if t.grad is None else _wrap(t.grad.data + g)
