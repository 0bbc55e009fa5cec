"""Fully connected capsule layers with dynamic routing.

Shapes used throughout:
    u     (batch, num_in, in_dim)            child capsule descriptions
    uhat  (batch, num_in, num_out, out_dim)  per-child predictions for each parent
    v     (batch, num_out, out_dim)          squashed parent outputs

The routing logits are updated outside the graph; gradients reach ``W``
through the final coupling-weighted sum and the squash only.
"""
from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from .layers import BatchNorm, ContractError, Module
from .tensor import DimensionError, Tensor, make_op, reshape, softmax

SQUASH_EPS = 1e-12
NORM_EPS = 1e-12


@dataclass
class RoutingState:
    logits: np.ndarray     # (batch, num_in, num_out)
    couplings: np.ndarray  # softmax of logits over num_out


# --------------------------------------------------------------------- kernels

def _predict_np(u, W):
    n_in, n_out, d_in, d_out = W.shape
    Wr = W.transpose(0, 2, 1, 3).reshape(n_in, d_in, n_out * d_out)
    out = np.matmul(u.transpose(1, 0, 2), Wr)  # (num_in, batch, num_out*out_dim)
    return out.transpose(1, 0, 2).reshape(u.shape[0], n_in, n_out, d_out), Wr


def _squash_np(s):
    q = (s * s).sum(axis=-1, keepdims=True)
    factor = q / ((1.0 + q) * np.sqrt(q + SQUASH_EPS))
    return factor * s, q, factor


def _softmax_np(b, axis):
    z = b - b.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


# ------------------------------------------------------------------------- ops

def predict(W: Tensor, u: Tensor) -> Tensor:
    """uhat[b, i, j, :] = u[b, i, :] @ W[i, j, :, :]."""
    if W.ndim != 4 or u.ndim != 3 or u.shape[1] != W.shape[0] or u.shape[2] != W.shape[2]:
        raise DimensionError(f"predict: capsule input {u.shape} does not fit weights {W.shape}")
    out, Wr = _predict_np(u.data, W.data)
    n_in, n_out, d_in, d_out = W.shape
    batch = u.shape[0]

    def grad(g):
        gt = g.reshape(batch, n_in, n_out * d_out).transpose(1, 0, 2)
        du = np.matmul(gt, Wr.transpose(0, 2, 1)).transpose(1, 0, 2)
        dWr = np.matmul(u.data.transpose(1, 2, 0), gt)
        dW = dWr.reshape(n_in, d_in, n_out, d_out).transpose(0, 2, 1, 3)
        return dW, du

    return make_op("predict", out, (W, u), grad)


def weighted_sum(uhat: Tensor, k: Tensor) -> Tensor:
    """s[b, j, :] = sum_i k[b, i, j] * uhat[b, i, j, :]."""
    if uhat.ndim != 4 or k.shape != uhat.shape[:3]:
        raise DimensionError(f"weighted_sum: couplings {k.shape} do not fit predictions {uhat.shape}")
    kd = k.data[..., None]
    out = (kd * uhat.data).sum(axis=1)

    def grad(g):
        ge = g[:, None, :, :]
        return kd * ge, (uhat.data * ge).sum(axis=-1)

    return make_op("weighted_sum", out, (uhat, k), grad)


def squash(s: Tensor) -> Tensor:
    """v = |s|^2 / (1 + |s|^2) * s / |s| along the last axis; zero maps to zero."""
    v, q, factor = _squash_np(s.data)

    def grad(g):
        root = np.sqrt(q + SQUASH_EPS)
        dfactor = 1.0 / ((1.0 + q) ** 2 * root) - 0.5 * q / ((1.0 + q) * root ** 3)
        gs = (g * s.data).sum(axis=-1, keepdims=True)
        return (factor * g + 2.0 * dfactor * gs * s.data,)

    return make_op("squash", v, (s,), grad)


def caps_norm(u: Tensor) -> Tensor:
    """Euclidean length of each capsule, sqrt(sum u^2 + 1e-12)."""
    n = np.sqrt((u.data * u.data).sum(axis=-1) + NORM_EPS)
    return make_op("caps_norm", n, (u,), lambda g: (g[..., None] * u.data / n[..., None],))


def route(uhat: Tensor, iters: int = 3, couplings: np.ndarray | None = None):
    """Dynamic routing by agreement.

    Returns the parent outputs and the final routing state.  When
    ``couplings`` is given the iterations are skipped and those
    coefficients are used as-is.
    """
    if iters < 1:
        raise ContractError("routing needs at least one iteration")
    if couplings is not None:
        k = Tensor(couplings)
        v = squash(weighted_sum(uhat, k))
        return v, RoutingState(np.log(np.maximum(couplings, 1e-300)), couplings)
    u = uhat.data
    b = np.zeros(u.shape[:3], dtype=u.dtype)
    for _ in range(iters - 1):
        k = _softmax_np(b, axis=2)
        v, _, _ = _squash_np((k[..., None] * u).sum(axis=1))
        b = b + (u * v[:, None, :, :]).sum(axis=-1)
    k = softmax(Tensor(b), axis=2)
    v = squash(weighted_sum(uhat, k))
    return v, RoutingState(b, k.data)


def caps_batchnorm(u: Tensor, bn: BatchNorm, training: bool = True) -> Tensor:
    """Normalize every (capsule, feature) channel over the batch."""
    batch, n, d = u.shape
    if training and batch < 2:
        raise ContractError("capsule batch norm in train mode needs a batch of at least 2")
    return reshape(bn(reshape(u, (batch, n * d)), training), (batch, n, d))


# ----------------------------------------------------------------------- layer

class FcCapsuleLayer(Module):
    def __init__(self, num_in, in_dim, num_out, out_dim, rng: np.random.Generator,
                 routing_iters=3, use_capsule_batchnorm=False, init_std=0.05, dtype=np.float64):
        super().__init__()
        if routing_iters < 1:
            raise ContractError("routing_iters must be >= 1")
        self.num_in, self.in_dim = num_in, in_dim
        self.num_out, self.out_dim = num_out, out_dim
        self.routing_iters = routing_iters
        self.use_capsule_batchnorm = use_capsule_batchnorm
        W = rng.normal(0.0, init_std, (num_in, num_out, in_dim, out_dim)).astype(dtype)
        self._params["W"] = Tensor(W, requires_grad=True)
        if use_capsule_batchnorm:
            self._children["bn"] = BatchNorm(num_out * out_dim, dtype=dtype)
        self.last_routing: RoutingState | None = None
        self._freeze = False
        self._frozen_k = None

    @property
    def W(self) -> Tensor:
        return self._params["W"]

    def weight_count(self) -> int:
        return self.W.size

    def __call__(self, u: Tensor, training: bool = True) -> Tensor:
        uhat = predict(self.W, u)
        v, state = route(uhat, self.routing_iters, self._frozen_k)
        if self._freeze and self._frozen_k is None:
            self._frozen_k = state.couplings
        self.last_routing = state
        if self.use_capsule_batchnorm:
            v = caps_batchnorm(v, self._children["bn"], training)
        return v


@contextmanager
def freeze_routing(module: Module):
    """Record couplings on the next forward pass and replay them afterwards.

    Used by finite-difference checks so the numeric derivative sees the
    same function the backward pass differentiates.
    """
    layers = [m for m in _walk(module) if isinstance(m, FcCapsuleLayer)]
    for layer in layers:
        layer._freeze, layer._frozen_k = True, None
    try:
        yield
    finally:
        for layer in layers:
            layer._freeze, layer._frozen_k = False, None


def _walk(module: Module):
    yield module
    for child in module._children.values():
        yield from _walk(child)
