"""
Small reverse-mode differentiation engine.

Only the operations needed for the grounding objective are provided: linear
maps, softmax over rows, l2 normalization, cosine similarity, elementwise
products, reductions and a stop-gradient barrier. Values are held as float64
numpy arrays inside the graph; persisted tensors are float32 (see tensorio).
"""
from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence

import numpy as np

EPS = 1e-8


class Node:
    """A value in the computation graph.

    ``backward_fn`` receives the upstream gradient and returns one gradient
    per input (or None where no gradient flows).
    """

    __slots__ = ("op", "inputs", "value", "grad", "requires_grad", "backward_fn")
    __array_ufunc__ = None  # make ndarray + Node dispatch to Node.__radd__

    def __init__(self, value, op: str = "leaf", inputs: Sequence["Node"] = (),
                 backward_fn: Optional[Callable] = None, requires_grad: bool = False):
        self.value = np.asarray(value, dtype=np.float64)
        self.op = op
        self.inputs = tuple(inputs)
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self):
        return self.value.shape

    def item(self) -> float:
        return float(self.value)

    def __repr__(self):
        return f"Node(op={self.op!r}, shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


def leaf(value, requires_grad: bool = False) -> Node:
    return Node(value, requires_grad=requires_grad)


def as_node(x) -> Node:
    return x if isinstance(x, Node) else Node(x)


def _make(value, op, inputs, backward_fn) -> Node:
    rg = any(n.requires_grad for n in inputs)
    return Node(value, op, inputs, backward_fn if rg else None, rg)


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Node:
    a, b = as_node(a), as_node(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.value + b.value, "add", (a, b), bw)


def scale(a, c: float) -> Node:
    a = as_node(a)
    c = float(c)
    return _make(a.value * c, "scale", (a,), lambda g: (g * c,))


def mul(a, b) -> Node:
    if not isinstance(b, Node) and np.ndim(b) == 0:
        return scale(a, b)
    if not isinstance(a, Node) and np.ndim(a) == 0:
        return scale(b, a)
    a, b = as_node(a), as_node(b)

    def bw(g):
        return _unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)

    return _make(a.value * b.value, "mul", (a, b), bw)


def stop_gradient(a) -> Node:
    """Detach ``a``: same value, no inputs, no gradient path."""
    a = as_node(a)
    return Node(a.value.copy(), op="stop_gradient")


# ----------------------------------------------------------------- reductions

def sum_(a, axis=None, keepdims: bool = False) -> Node:
    a = as_node(a)
    out = a.value.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, "sum", (a,), bw)


def mean(a, axis=None, keepdims: bool = False) -> Node:
    a = as_node(a)
    if axis is None:
        n = a.value.size
    else:
        axes = (axis,) if np.ndim(axis) == 0 else tuple(axis)
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


# ---------------------------------------------------------------- linear maps

def matmul(a, b) -> Node:
    """Batched matrix product with numpy broadcasting semantics."""
    a, b = as_node(a), as_node(b)
    if a.value.ndim < 2 or b.value.ndim < 2:
        raise ValueError("matmul expects operands of rank >= 2")

    def bw(g):
        ga = g @ np.swapaxes(b.value, -1, -2)
        gb = np.swapaxes(a.value, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(a.value @ b.value, "matmul", (a, b), bw)


def transpose(a, axes=None) -> Node:
    a = as_node(a)
    if axes is None:
        axes = tuple(range(a.value.ndim))[::-1]
    inv = np.argsort(axes)
    return _make(np.transpose(a.value, axes), "transpose", (a,),
                 lambda g: (np.transpose(g, inv),))


def reshape(a, shape) -> Node:
    a = as_node(a)
    old = a.shape
    return _make(a.value.reshape(shape), "reshape", (a,), lambda g: (g.reshape(old),))


def take(a, indices, axis: int = 0, grad_mask=None) -> Node:
    """Gather along ``axis``.

    ``grad_mask`` (boolean, one entry per slice of ``a`` along ``axis``)
    restricts which source slices receive gradient; used to keep frozen
    embedding rows out of the update.
    """
    a = as_node(a)
    idx = np.asarray(indices, dtype=np.intp)
    axis = axis % a.value.ndim

    def bw(g):
        full = np.zeros_like(a.value)
        moved = np.moveaxis(full, axis, 0)
        np.add.at(moved, idx, np.moveaxis(g, axis, 0))
        if grad_mask is not None:
            keep = np.asarray(grad_mask, dtype=bool)
            moved[~keep] = 0.0
        return (full,)

    return _make(np.take(a.value, idx, axis=axis), "take", (a,), bw)


def stack(nodes: Sequence, axis: int = 0) -> Node:
    nodes = [as_node(n) for n in nodes]

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(nodes)))

    return _make(np.stack([n.value for n in nodes], axis=axis), "stack", nodes, bw)


# ------------------------------------------------------------------ nonlinear

def softmax_rows(x) -> Node:
    """Softmax over the last axis of a 2D input."""
    x = as_node(x)
    if x.value.ndim != 2:
        raise ValueError(f"softmax_rows expects a 2D input, got shape {x.shape}")
    z = x.value - x.value.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=1, keepdims=True)),)

    return _make(y, "softmax_rows", (x,), bw)


def l2_normalize(x, axis: int = -1, eps: float = EPS) -> Node:
    """x / max(||x||, eps) along ``axis``."""
    x = as_node(x)
    norm = np.sqrt((x.value ** 2).sum(axis=axis, keepdims=True))
    guarded = np.maximum(norm, eps)
    y = x.value / guarded
    live = norm > eps

    def bw(g):
        # where the guard is active the map is linear: x / eps
        proj = (g * y).sum(axis=axis, keepdims=True)
        return (np.where(live, (g - y * proj) / guarded, g / guarded),)

    return _make(y, "l2_normalize", (x,), bw)


def cosine(u, v, axis=None, eps: float = EPS) -> Node:
    """Cosine similarity; over all elements (axis=None) or along ``axis``.

    Built from l2_normalize so a zero vector yields 0 instead of NaN.
    """
    u, v = as_node(u), as_node(v)
    if u.shape != v.shape:
        raise ValueError(f"cosine shape mismatch: {u.shape} vs {v.shape}")
    if axis is None:
        u, v = reshape(u, (-1,)), reshape(v, (-1,))
        axis = -1
    return sum_(mul(l2_normalize(u, axis, eps), l2_normalize(v, axis, eps)), axis=axis)


# ------------------------------------------------------------------- backward

def _topo(root: Node) -> list:
    order, seen = [], set()
    stack_ = [(root, False)]
    while stack_:
        node, done = stack_.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for parent in node.inputs:
            if parent.requires_grad and id(parent) not in seen:
                stack_.append((parent, False))
    return order


def backward(loss: Node) -> None:
    """Populate ``.grad`` on every requires_grad leaf reachable from ``loss``."""
    if loss.value.size != 1 or loss.value.ndim != 0:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads = {id(loss): np.ones_like(loss.value)}
    for node in reversed(_topo(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.backward_fn is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node.inputs, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


def finite_diff(loss_fn: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-3,
                indices: Optional[Iterable] = None) -> np.ndarray:
    """Central differences (f(x+h) - f(x-h)) / 2h, elementwise.

    ``indices`` optionally limits the flat positions probed; the rest stay 0.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    base = np.array(x, dtype=np.float64)
    flat = base.reshape(-1)
    out = np.zeros_like(flat)
    positions = range(flat.size) if indices is None else indices
    for i in positions:
        orig = flat[i]
        flat[i] = orig + h
        fp = float(loss_fn(base))
        flat[i] = orig - h
        fm = float(loss_fn(base))
        flat[i] = orig
        out[i] = (fp - fm) / (2.0 * h)
    return out.reshape(base.shape)


def gradients_match(analytic: np.ndarray, numeric: np.ndarray, rtol: float = 1e-4,
                    atol: float = 1e-6, small: float = 1e-8):
    """Compare gradients elementwise.

    Elements whose numeric gradient is below ``small`` in magnitude are held
    to ``atol``; all others to ``rtol`` relative error. Returns
    ``(ok, worst_relative, worst_absolute)``.
    """
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    diff = np.abs(analytic - numeric)
    tiny = np.abs(numeric) < small
    rel = np.where(tiny, 0.0, diff / np.where(tiny, 1.0, np.abs(numeric)))
    absd = np.where(tiny, diff, 0.0)
    worst_rel = float(rel.max(initial=0.0))
    worst_abs = float(absd.max(initial=0.0))
    return worst_rel < rtol and worst_abs < atol, worst_rel, worst_abs
