"""Small reverse-mode automatic differentiation engine on top of numpy.

Every op returns a new :class:`Tensor` that remembers its parents and a
closure that maps the output gradient to parent gradients.  Calling
:func:`backward` on a scalar builds a :class:`Tape` (the operations reachable
from the loss in topological order) and replays it in reverse.

All data is float64.  Binary ops broadcast numpy-style but only with
right-aligned shapes (missing leading axes or size-1 axes expand); gradients
are summed back down to the operand's shape.
"""

from __future__ import annotations

import contextlib
import threading

import numpy as np
from scipy.linalg import solve_triangular

__all__ = [
    "Tensor",
    "Tape",
    "backward",
    "no_grad",
    "as_tensor",
    "no_broadcast_error",
    "elementwise",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "exp",
    "log",
    "tanh",
    "sigmoid",
    "softplus",
    "clip",
    "matmul",
    "logsumexp",
    "logaddexp",
    "sum",
    "mean",
    "reshape",
    "transpose",
    "concat",
    "stack",
    "triangular_solve",
    "numerical_gradient",
    "relative_error",
]


class Tensor:
    """n-dimensional float64 array that can take part in differentiation."""

    __array_priority__ = 100
    __array_ufunc__ = None

    def __init__(self, data, requires_grad=False, parents=(), backward_fn=None, op=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = tuple(parents)
        self._backward_fn = backward_fn
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return self._backward_fn is None

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.item())

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __len__(self):
        return len(self.data)

    # operator sugar
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

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def tanh(self):
        return tanh(self)

    def sigmoid(self):
        return sigmoid(self)

    def softplus(self):
        return softplus(self)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def as_tensor(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


_local = threading.local()


@contextlib.contextmanager
def no_grad():
    """Evaluate ops without recording a graph (inference, sampling)."""
    prev = getattr(_local, "grad_enabled", True)
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


def _make(data, parents, backward_fn, op):
    """Wrap an op result; only record the graph if some parent needs grads."""
    if getattr(_local, "grad_enabled", True) and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, parents=parents, backward_fn=backward_fn, op=op)
    return Tensor(data, op=op)


class Tape:
    """Operations reachable from a root tensor, in topological order.

    Built by an iterative depth-first walk so deep recurrences (long
    forward lattices) do not hit the interpreter recursion limit.
    """

    def __init__(self, nodes):
        self.nodes = nodes

    @classmethod
    def from_root(cls, root):
        order = []
        seen = set()
        stack = [(root, False)]
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

    def __len__(self):
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)

    def replay(self, root, seed_grad=None):
        grads = {id(root): np.ones_like(root.data) if seed_grad is None else seed_grad}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                node.grad = g if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward_fn(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def backward(loss):
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every leaf needing it."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor that requires grad")
    tape = Tape.from_root(loss)
    tape.replay(loss)
    return tape


# ----------------------------------------------------------------------
# broadcasting helpers


def no_broadcast_error(a_shape, b_shape):
    return ValueError(f"shapes {tuple(a_shape)} and {tuple(b_shape)} are not broadcast-compatible")


def _check_broadcast(a, b):
    sa, sb = a.shape, b.shape
    for x, y in zip(reversed(sa), reversed(sb)):
        if x != y and x != 1 and y != 1:
            raise no_broadcast_error(sa, sb)


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ----------------------------------------------------------------------
# elementwise ops


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    ad, bd = a.data, b.data

    def bw(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return _make(ad * bd, (a, b), bw, "mul")


def div(a, b):
    """Elementwise quotient; division by zero follows IEEE semantics (inf/nan)."""
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        return (
            _unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None,
        )

    return _make(out, (a, b), bw, "div")


def neg(a):
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    """Natural log; log(0) = -inf and negative inputs give nan, untrapped."""
    a = as_tensor(a)
    ad = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(ad)
    return _make(out, (a,), lambda g: (g / ad,), "log")


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def _sigmoid(x):
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a):
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softplus(a):
    a = as_tensor(a)
    ad = a.data
    out = np.logaddexp(0.0, ad)
    return _make(out, (a,), lambda g: (g * _sigmoid(ad),), "softplus")


def clip(a, lo, hi):
    """Clamp to [lo, hi]; gradient passes only where the input was inside."""
    a = as_tensor(a)
    ad = a.data
    inside = (ad >= lo) & (ad <= hi)
    return _make(np.clip(ad, lo, hi), (a,), lambda g: (g * inside,), "clip")


_UNARY = {"neg": neg, "exp": exp, "log": log, "tanh": tanh, "sigmoid": sigmoid, "softplus": softplus}
_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(kind, a, b=None):
    """Dispatch an elementwise op by name."""
    if kind in _BINARY:
        if b is None:
            raise ValueError(f"{kind} needs two operands")
        return _BINARY[kind](a, b)
    if kind in _UNARY:
        if b is not None:
            raise ValueError(f"{kind} takes one operand")
        return _UNARY[kind](a)
    raise ValueError(f"unknown elementwise op {kind!r}")


# ----------------------------------------------------------------------
# linear algebra


def matmul(a, b):
    """``a @ b`` with ``a`` of shape (..., m, k) or (k,) and ``b`` of shape (k, n).

    Leading axes of ``a`` are treated as a batch; ``b`` is a single matrix.
    """
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim != 2:
        raise ValueError(f"matmul right operand must be 2-D, got shape {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise ValueError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ bd.T if a.requires_grad else None
        gb = None
        if b.requires_grad:
            gb = np.outer(ad, g) if ad.ndim == 1 else ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return _make(ad @ bd, (a, b), bw, "matmul")


def triangular_solve(a, b, lower, unit_diagonal=False):
    """Solve ``a @ x = b`` for triangular ``a`` (D, D) and ``b`` (D, K).

    Entries of ``a`` outside the triangle (and its diagonal when
    ``unit_diagonal``) are ignored and receive zero gradient.
    """
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    x = solve_triangular(ad, bd, lower=lower, unit_diagonal=unit_diagonal)
    if lower:
        keep = np.tril(np.ones_like(ad), -1 if unit_diagonal else 0)
    else:
        keep = np.triu(np.ones_like(ad), 1 if unit_diagonal else 0)

    def bw(g):
        gb = solve_triangular(ad, g, lower=lower, unit_diagonal=unit_diagonal, trans="T")
        ga = -(gb @ x.T) * keep if a.requires_grad else None
        return ga, gb if b.requires_grad else None

    return _make(x, (a, b), bw, "triangular_solve")


# ----------------------------------------------------------------------
# reductions


def sum(a, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy naming
    a = as_tensor(a)
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), bw, "sum")


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return sum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def logsumexp(a, axis=-1, keepdims=False):
    """Max-shifted log-sum-exp along ``axis``.

    Slices that are entirely -inf give -inf with zero gradient instead of nan.
    """
    a = as_tensor(a)
    ad = a.data
    if ad.shape[axis] == 0:
        raise ValueError("logsumexp over an empty axis")
    m = ad.max(axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out_k = m + np.log(np.exp(ad - m).sum(axis=axis, keepdims=True))
    out = out_k if keepdims else np.squeeze(out_k, axis=axis)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        with np.errstate(invalid="ignore"):
            w = np.where(np.isfinite(out_k), np.exp(ad - out_k), 0.0)
        return (g * w,)

    return _make(out, (a,), bw, "logsumexp")


def logaddexp(a, b):
    """Elementwise log(exp(a) + exp(b)) for same-shape tensors."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise no_broadcast_error(a.shape, b.shape)
    ad, bd = a.data, b.data
    m = np.maximum(ad, bd)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = m + np.log(np.exp(ad - m) + np.exp(bd - m))

    def bw(g):
        fin = np.isfinite(out)
        with np.errstate(invalid="ignore"):
            wa = np.where(fin, np.exp(ad - out), 0.0)
            wb = np.where(fin, np.exp(bd - out), 0.0)
        return g * wa, g * wb

    return _make(out, (a, b), bw, "logaddexp")


# ----------------------------------------------------------------------
# shape manipulation


def reshape(a, shape):
    a = as_tensor(a)
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes=None):
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def getitem(a, index):
    a = as_tensor(a)
    shape = a.shape
    items = index if isinstance(index, tuple) else (index,)
    fancy = any(isinstance(i, (np.ndarray, list)) for i in items)

    def bw(g):
        out = np.zeros(shape)
        if fancy:
            np.add.at(out, index, g)
        else:
            out[index] = g
        return (out,)

    return _make(a.data[index], (a,), bw, "getitem")


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bw, "concat")


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]

    def bw(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _make(np.stack([t.data for t in tensors], axis=axis), tuple(tensors), bw, "stack")


# ----------------------------------------------------------------------
# finite-difference oracle


def numerical_gradient(f, params, eps=1e-5):
    """Central finite differences of scalar ``f()`` w.r.t. each array in ``params``.

    ``params`` are Tensors whose ``.data`` is perturbed in place and restored.
    """
    grads = []
    for p in params:
        flat = p.data.reshape(-1)
        g = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = float(f())
            flat[i] = orig - eps
            down = float(f())
            flat[i] = orig
            g[i] = (up - down) / (2 * eps)
        grads.append(g.reshape(p.shape))
    return grads


def relative_error(analytic, numeric, floor=1e-8):
    """||a - n|| / max(||a||, ||n||, floor); robust where entries are near zero."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), floor)
    return float(np.linalg.norm(analytic - numeric) / scale)
