"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every operation returns a new :class:`Tensor`. When at least one input
requires a gradient, the result remembers its parents and a closure mapping
the upstream gradient to one gradient per parent; :func:`backward` walks that
graph in reverse topological order.

Broadcasting is deliberately limited to tensor-with-python-scalar. Batched
contractions go through :func:`affine` and :func:`einsum`, which spell out
their shapes explicitly.
"""

from __future__ import annotations

import contextlib
import numbers

import numpy as np

_grad_enabled = True


class ShapeError(ValueError):
    """Raised when operand shapes do not conform for an operation."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference, attacks' bookkeeping)."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self.op = "leaf"

    @classmethod
    def _result(cls, data, parents, backward_fn, op):
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.op = op
        track = _grad_enabled and any(p.requires_grad for p in parents)
        out.requires_grad = track
        out._parents = tuple(parents) if track else ()
        out._backward = backward_fn if track else None
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item: tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.grad = None
        out.requires_grad = False
        out._parents = ()
        out._backward = None
        out.op = "leaf"
        return out

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def __len__(self):
        return len(self.data)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if not _is_scalar(other):
            raise ShapeError("div: only division by a python scalar is supported")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def sum(self, axis=None):
        return tsum(self, axis)

    def backward(self):
        """Populate ``.grad`` on every leaf that requires a gradient."""
        grads = _accumulate(self)
        for node, g in grads.values():
            if not node._parents and node.requires_grad:
                node.grad = g


def _is_scalar(x) -> bool:
    return isinstance(x, numbers.Real) and not isinstance(x, bool) or (
        isinstance(x, np.ndarray) and x.ndim == 0
    )


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _same_shape(op: str, a: Tensor, b: Tensor):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a = as_tensor(a)
    if _is_scalar(b):
        return Tensor._result(a.data + float(b), (a,), lambda g: (g,), "add")
    b = as_tensor(b)
    _same_shape("add", a, b)
    return Tensor._result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    a = as_tensor(a)
    if _is_scalar(b):
        return Tensor._result(a.data - float(b), (a,), lambda g: (g,), "sub")
    b = as_tensor(b)
    _same_shape("sub", a, b)
    return Tensor._result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    if _is_scalar(b):
        s = float(b)
        return Tensor._result(a.data * s, (a,), lambda g: (g * s,), "scale")
    b = as_tensor(b)
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return Tensor._result(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return Tensor._result(-a.data, (a,), lambda g: (-g,), "neg")


def square(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return Tensor._result(ad * ad, (a,), lambda g: (2.0 * ad * g,), "square")


def absolute(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return Tensor._result(np.abs(ad), (a,), lambda g: (np.sign(ad) * g,), "abs")


def relu(a) -> Tensor:
    # derivative at exactly 0 is 0
    a = as_tensor(a)
    mask = a.data > 0
    return Tensor._result(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def clamp(a, lo=None, hi=None) -> Tensor:
    """Clip into [lo, hi]; gradient passes only strictly inside the interval."""
    a = as_tensor(a)
    out = np.clip(a.data, lo, hi)
    inside = np.ones(a.shape, dtype=bool)
    if lo is not None:
        inside &= a.data > lo
    if hi is not None:
        inside &= a.data < hi
    return Tensor._result(out, (a,), lambda g: (g * inside,), "clamp")


def maximum(a, b) -> Tensor:
    """Elementwise max of two tensors. Ties send the gradient to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("maximum", a, b)
    pick_a = a.data >= b.data
    return Tensor._result(
        np.where(pick_a, a.data, b.data),
        (a, b),
        lambda g: (g * pick_a, g * ~pick_a),
        "maximum",
    )


# ---------------------------------------------------------------- reductions


def _normalize_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    return tuple(ax % ndim for ax in axes)


def tsum(a, axis=None) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    axes = _normalize_axis(axis, a.ndim)

    def back(g):
        return (np.broadcast_to(np.expand_dims(g, axes), shape).copy(),)

    return Tensor._result(np.sum(a.data, axis=axes), (a,), back, "sum")


def mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    axes = _normalize_axis(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return mul(tsum(a, axis), 1.0 / count)


def tmax(a, axis: int = -1) -> Tensor:
    """Max over one axis; the gradient goes to the first maximiser."""
    a = as_tensor(a)
    axis = axis % a.ndim
    idx = np.argmax(a.data, axis=axis)
    out = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis).squeeze(axis)

    def back(g):
        ga = np.zeros(a.shape)
        np.put_along_axis(ga, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis)
        return (ga,)

    return Tensor._result(out, (a,), back, "max")


def log_sum_exp(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    axis = axis % a.ndim
    m = np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    s = np.sum(e, axis=axis, keepdims=True)
    out = (m + np.log(s)).squeeze(axis)
    soft = e / s
    return Tensor._result(out, (a,), lambda g: (soft * np.expand_dims(g, axis),), "logsumexp")


def softmax(a, temperature: float = 1.0, axis: int = -1) -> Tensor:
    """Softmax of ``a / temperature`` (max-subtracted)."""
    a = as_tensor(a)
    axis = axis % a.ndim
    z = a.data / temperature
    e = np.exp(z - np.max(z, axis=axis, keepdims=True))
    p = e / np.sum(e, axis=axis, keepdims=True)

    def back(g):
        inner = np.sum(g * p, axis=axis, keepdims=True)
        return (p * (g - inner) / temperature,)

    return Tensor._result(p, (a,), back, "softmax")


def log_softmax(a, temperature: float = 1.0, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    axis = axis % a.ndim
    z = a.data / temperature
    zm = z - np.max(z, axis=axis, keepdims=True)
    lse = np.log(np.sum(np.exp(zm), axis=axis, keepdims=True))
    out = zm - lse
    p = np.exp(out)

    def back(g):
        return ((g - p * np.sum(g, axis=axis, keepdims=True)) / temperature,)

    return Tensor._result(out, (a,), back, "log_softmax")


def gather(a, index) -> Tensor:
    """Pick ``a[..., index]`` along the last axis, one index per leading row."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.int64)
    if index.shape != a.shape[:-1]:
        raise ShapeError(f"gather: index shape {index.shape} vs tensor shape {a.shape}")
    k = a.shape[-1]
    if np.any(index < 0) or np.any(index >= k):
        raise IndexError(f"gather: index out of range for last dimension {k}")
    expanded = np.expand_dims(index, -1)
    out = np.take_along_axis(a.data, expanded, -1).squeeze(-1)

    def back(g):
        ga = np.zeros(a.shape)
        np.put_along_axis(ga, expanded, np.expand_dims(g, -1), -1)
        return (ga,)

    return Tensor._result(out, (a,), back, "gather")


# ---------------------------------------------------------------- contractions


def affine(weight, bias, x) -> Tensor:
    """``W x + b`` for ``x`` of shape [in] or a batch [B, in]; ``bias`` may be None."""
    weight, x = as_tensor(weight), as_tensor(x)
    if weight.ndim != 2 or x.ndim not in (1, 2) or x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"affine: weight {weight.shape} does not conform with input {x.shape}")
    W, xd = weight.data, x.data
    out = xd @ W.T
    parents = [weight, x]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (W.shape[0],):
            raise ShapeError(f"affine: bias {bias.shape} vs weight {weight.shape}")
        out = out + bias.data
        parents.append(bias)

    def back(g):
        gx = g @ W
        gW = np.outer(g, xd) if xd.ndim == 1 else g.T @ xd
        if bias is None:
            return (gW, gx)
        gb = g if g.ndim == 1 else g.sum(axis=0)
        return (gW, gx, gb)

    return Tensor._result(out, parents, back, "affine")


def _parse_einsum(subscripts: str):
    if "->" not in subscripts or "..." in subscripts:
        raise ValueError(f"einsum: explicit two-operand subscripts required, got {subscripts!r}")
    lhs, out = subscripts.replace(" ", "").split("->")
    ops = lhs.split(",")
    if len(ops) != 2:
        raise ValueError(f"einsum: exactly two operands supported, got {subscripts!r}")
    for term in (*ops, out):
        if len(set(term)) != len(term):
            raise ValueError(f"einsum: repeated index inside {term!r} is not differentiable here")
    return ops[0], ops[1], out


def einsum(subscripts: str, a, b) -> Tensor:
    """Two-operand ``numpy.einsum`` with gradients for both operands."""
    a, b = as_tensor(a), as_tensor(b)
    sa, sb, so = _parse_einsum(subscripts)
    if len(sa) != a.ndim or len(sb) != b.ndim:
        raise ShapeError(f"einsum {subscripts!r}: operand shapes {a.shape} and {b.shape}")
    sizes = {}
    for term, shape in ((sa, a.shape), (sb, b.shape)):
        for ch, n in zip(term, shape):
            if sizes.setdefault(ch, n) != n:
                raise ShapeError(f"einsum {subscripts!r}: index {ch!r} has sizes {sizes[ch]} and {n}")
    for ch in so:
        if ch not in sizes:
            raise ValueError(f"einsum {subscripts!r}: output index {ch!r} not in inputs")
    for term, other in ((sa, sb), (sb, sa)):
        for ch in term:
            if ch not in so and ch not in other:
                raise ValueError(f"einsum {subscripts!r}: index {ch!r} summed within one operand")
    ad, bd = a.data, b.data
    out = np.einsum(f"{sa},{sb}->{so}", ad, bd, optimize=True)

    def back(g):
        ga = np.einsum(f"{so},{sb}->{sa}", g, bd, optimize=True) if a.requires_grad else None
        gb = np.einsum(f"{so},{sa}->{sb}", g, ad, optimize=True) if b.requires_grad else None
        return (ga, gb)

    return Tensor._result(out, (a, b), back, "einsum")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return Tensor._result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


# ---------------------------------------------------------------- backward


def _topological(root: Tensor):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def _accumulate(root: Tensor) -> dict:
    if root.data.size != 1:
        raise ShapeError(f"backward: root must be a scalar, got shape {root.shape}")
    grads = {id(root): (root, np.ones(root.shape))}
    for node in reversed(_topological(root)):
        entry = grads.get(id(node))
        if entry is None or not node._parents:
            continue
        parent_grads = node._backward(entry[1])
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            prev = grads.get(id(parent))
            grads[id(parent)] = (parent, pg if prev is None else prev[1] + pg)
    return grads


def backward(loss: Tensor, params) -> list:
    """Gradients of the scalar ``loss`` w.r.t. each of ``params``.

    Parameters the loss does not depend on receive a zero array.
    """
    grads = _accumulate(loss)
    out = []
    for p in params:
        entry = grads.get(id(p))
        out.append(entry[1] if entry is not None else np.zeros(p.shape))
    return out


grad = backward

__all__ = [
    "Tensor",
    "ShapeError",
    "no_grad",
    "as_tensor",
    "add",
    "sub",
    "mul",
    "neg",
    "square",
    "absolute",
    "relu",
    "clamp",
    "maximum",
    "tsum",
    "mean",
    "tmax",
    "log_sum_exp",
    "softmax",
    "log_softmax",
    "gather",
    "affine",
    "einsum",
    "reshape",
    "backward",
    "grad",
]
