"""Small reverse-mode autodiff engine over numpy arrays.

Every op builds a node holding its inputs and a closure that maps the
upstream gradient to input gradients.  ``backward`` walks the graph once
in reverse topological order and then tears it down; a second call on the
same loss raises ``GraphError``.

Broadcasting is deliberately narrow: an operand may be a scalar (python
number or a size-1 tensor) or must match the other operand's shape.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

_DEFAULT_DTYPE = np.float64


class DimensionError(ValueError):
    pass


class DomainError(ValueError):
    pass


class GraphError(RuntimeError):
    pass


def set_default_dtype(dtype) -> None:
    """Switch the dtype used for new tensors built from python data (f32 or f64)."""
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype.type


def get_default_dtype():
    return _DEFAULT_DTYPE


class _Node:
    __slots__ = ("name", "parents", "backward")

    def __init__(self, name, parents, backward):
        self.name = name
        self.parents = parents
        self.backward = backward


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node", "_consumed")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype.kind != "f":
            arr = arr.astype(_DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self._node = None
        self._consumed = False

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
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

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
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return reduce_sum(self, axis)

    def mean(self, axis=None):
        return reduce_mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self):
        backward(self)


def make_op(name: str, data: np.ndarray, parents: Sequence[Tensor], grad_fn: Callable) -> Tensor:
    """Wrap ``data`` as the output of an op.

    ``grad_fn(g)`` receives the upstream gradient and returns one gradient
    (or None) per parent, in order.
    """
    out = Tensor(data, dtype=data.dtype)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._node = _Node(name, tuple(parents), grad_fn)
    return out


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _is_scalar(t: Tensor) -> bool:
    return t.data.size == 1


def _coerce_pair(a, b, opname):
    a_t = isinstance(a, Tensor)
    b_t = isinstance(b, Tensor)
    if not a_t:
        a = Tensor(np.asarray(a, dtype=b.dtype if b_t else _DEFAULT_DTYPE))
    if not b_t:
        b = Tensor(np.asarray(b, dtype=a.dtype))
    if a.shape != b.shape and not (_is_scalar(a) or _is_scalar(b)):
        raise DimensionError(f"{opname}: incompatible shapes {a.shape} and {b.shape}")
    return a, b


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    # operand was a size-1 tensor
    return np.asarray(g.sum()).reshape(shape)


def _scalar_view(t: Tensor, other: Tensor) -> np.ndarray:
    # size-1 operand against a larger one: squeeze so numpy broadcasts it
    if t.shape != other.shape and _is_scalar(t) and other.data.size > 1:
        return t.data.reshape(())
    return t.data


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _coerce_pair(a, b, "add")
    out = _scalar_view(a, b) + _scalar_view(b, a)
    return make_op("add", out, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _coerce_pair(a, b, "sub")
    out = _scalar_view(a, b) - _scalar_view(b, a)
    return make_op("sub", out, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _coerce_pair(a, b, "mul")
    av, bv = _scalar_view(a, b), _scalar_view(b, a)
    return make_op("mul", av * bv, (a, b),
                   lambda g: (_unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    return make_op("scale", a.data * c, (a,), lambda g: (g * c,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return make_op("exp", out, (a,), lambda g: (g * out,))


def sqrt(a: Tensor) -> Tensor:
    if np.any(a.data < 0):
        raise DomainError(f"sqrt of negative input (min {a.data.min()!r})")
    out = np.sqrt(a.data)
    return make_op("sqrt", out, (a,), lambda g: (g * 0.5 / out,))


def square(a: Tensor) -> Tensor:
    return make_op("square", a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so neither branch overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return make_op("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return make_op("relu", a.data * mask, (a,), lambda g: (g * mask,))


# ----------------------------------------------------------------- structural

def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out = a.data.reshape(shape)
    return make_op("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return make_op("matmul", a.data @ b.data, (a, b),
                   lambda g: (g @ b.data.T, a.data.T @ g))


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """x[n, m] + bias[m], the one row-broadcast a dense layer needs."""
    if x.ndim != 2 or bias.shape != (x.shape[1],):
        raise DimensionError(f"add_bias: incompatible shapes {x.shape} and {bias.shape}")
    return make_op("add_bias", x.data + bias.data, (x, bias),
                   lambda g: (g, g.sum(axis=0)))


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    out = matmul(x, weight)
    return out if bias is None else add_bias(out, bias)


# ----------------------------------------------------------------- reductions

def _check_axis(t: Tensor, axis):
    if axis is not None and not (-t.ndim <= axis < t.ndim):
        raise DimensionError(f"axis {axis} out of range for shape {t.shape}")


def reduce_sum(t: Tensor, axis: int | None = None) -> Tensor:
    _check_axis(t, axis)
    out = np.asarray(t.data.sum(axis=axis))

    def grad(g):
        if axis is None:
            return (np.broadcast_to(g, t.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), t.shape).copy(),)

    return make_op("sum", out, (t,), grad)


def reduce_mean(t: Tensor, axis: int | None = None) -> Tensor:
    _check_axis(t, axis)
    n = t.data.size if axis is None else t.shape[axis]
    out = np.asarray(t.data.sum(axis=axis) / n)

    def grad(g):
        g = g / n
        if axis is None:
            return (np.broadcast_to(g, t.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), t.shape).copy(),)

    return make_op("mean", out, (t,), grad)


def softmax(t: Tensor, axis: int = -1) -> Tensor:
    _check_axis(t, axis)
    z = t.data - t.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def grad(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_op("softmax", out, (t,), grad)


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5):
    """Train-mode batch normalization over axis 0 of a 2-D input.

    Returns the output tensor plus the batch mean and (biased) variance so
    the caller can update running statistics.
    """
    if x.ndim != 2 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise DimensionError(f"batchnorm: incompatible shapes {x.shape}, {gamma.shape}, {beta.shape}")
    n = x.shape[0]
    mu = x.data.mean(axis=0)
    xc = x.data - mu
    var = (xc * xc).mean(axis=0)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def grad(g):
        dxhat = g * gamma.data
        dxhat = dxhat - dxhat.mean(axis=0)
        dx = inv * (dxhat - xhat * (dxhat * xhat).mean(axis=0))
        return dx, (g * xhat).sum(axis=0), g.sum(axis=0)

    return make_op("batchnorm", out, (x, gamma, beta), grad), mu, var


def batchnorm_eval(x: Tensor, gamma: Tensor, beta: Tensor, mean, var, eps: float = 1e-5) -> Tensor:
    if x.ndim != 2 or gamma.shape != (x.shape[1],):
        raise DimensionError(f"batchnorm: incompatible shapes {x.shape}, {gamma.shape}")
    inv = 1.0 / np.sqrt(np.asarray(var) + eps)
    xhat = (x.data - mean) * inv
    out = xhat * gamma.data + beta.data
    return make_op("batchnorm_eval", out, (x, gamma, beta),
                   lambda g: (g * gamma.data * inv, (g * xhat).sum(axis=0), g.sum(axis=0)))


# ------------------------------------------------------------------- backward

def _toposort(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t._node is not None:
            for p in t._node.parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every requires_grad leaf reachable from ``loss``.

    Leaf gradients are overwritten, not accumulated across calls.
    """
    if loss.data.size != 1 or loss.ndim > 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise GraphError("graph already consumed by a previous backward; run a fresh forward pass")
    if not loss.requires_grad:
        raise GraphError("loss does not depend on any tensor that requires grad")
    order = _toposort(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for t in reversed(order):
        g = grads.pop(id(t), None)
        node = t._node
        if node is None:
            if t.requires_grad:
                t.grad = g if g is not None else np.zeros_like(t.data)
            continue
        if g is not None:
            for p, pg in zip(node.parents, node.backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                if id(p) in grads:
                    grads[id(p)] = grads[id(p)] + pg
                else:
                    grads[id(p)] = pg
        t._node = None
        t._consumed = True


# ----------------------------------------------------------------- grad check

# numeric side of the check runs in extended precision where the platform has it
ORACLE_DTYPE = np.longdouble if np.finfo(np.longdouble).eps < np.finfo(np.float64).eps else np.float64


def _rel_err(analytic, numeric, floor=1e-12):
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def grad_check(f: Callable, x, eps: float = 1e-5, oracle_dtype=None) -> float:
    """Max relative error between the autodiff gradient and central differences.

    ``x`` is a Tensor or a list of Tensors; ``f`` is called with the same
    object and must return a scalar Tensor.  All randomness inside ``f``
    has to be frozen by the caller.  The error per entry is
    ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-12)``.

    The analytic gradient is computed at the tensors' own dtype.  The
    finite differences are evaluated at ``oracle_dtype`` (extended precision
    by default) so that gradients far below the loss scale are still
    resolved.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    oracle_dtype = ORACLE_DTYPE if oracle_dtype is None else oracle_dtype
    xs = [x] if isinstance(x, Tensor) else list(x)
    for t in xs:
        t.requires_grad = True
        t.grad = None
    backward(f(x))
    analytic = [t.grad.copy() for t in xs]
    saved = [t.data for t in xs]
    worst = 0.0
    try:
        for t in xs:
            t.data = t.data.astype(oracle_dtype)
        for t, a in zip(xs, analytic):
            numeric = np.empty(t.shape, dtype=oracle_dtype)
            flat = t.data.reshape(-1)
            out = numeric.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                fp = f(x).data.reshape(())
                flat[i] = orig - eps
                fm = f(x).data.reshape(())
                flat[i] = orig
                out[i] = (fp - fm) / (2 * eps)
            if a.size:
                worst = max(worst, float(_rel_err(a.astype(oracle_dtype), numeric).max()))
    finally:
        for t, d in zip(xs, saved):
            t.data = d
    return worst
