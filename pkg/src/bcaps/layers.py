"""Dense and batch-norm layers shared by the encoders and the decoder."""
from __future__ import annotations

import numpy as np

from .tensor import DimensionError, Tensor, batchnorm, batchnorm_eval, linear


class ContractError(ValueError):
    pass


class Module:
    """Minimal parameter container; subclasses register tensors in ``_params``."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._buffers: dict[str, np.ndarray] = {}
        self._children: dict[str, Module] = {}

    def named_parameters(self, prefix=""):
        for name, p in self._params.items():
            yield prefix + name, p
        for cname, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{cname}.")

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def named_buffers(self, prefix=""):
        for name, b in self._buffers.items():
            yield prefix + name, b
        for cname, child in self._children.items():
            yield from child.named_buffers(f"{prefix}{cname}.")

    def buffers(self) -> dict[str, np.ndarray]:
        return dict(self.named_buffers())

    def set_buffer(self, dotted: str, value: np.ndarray) -> None:
        head, _, rest = dotted.partition(".")
        if rest:
            self._children[head].set_buffer(rest, value)
        else:
            if head not in self._buffers:
                raise KeyError(dotted)
            self._buffers[head][...] = value


class Dense(Module):
    """x @ weight (+ bias).  Use ``bias=False`` in front of a batch norm, whose shift absorbs it."""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, dtype=np.float64, gain=2.0, bias=True):
        super().__init__()
        std = np.sqrt(gain / n_in)
        self._params["weight"] = Tensor(rng.normal(0.0, std, (n_in, n_out)).astype(dtype), requires_grad=True)
        if bias:
            self._params["bias"] = Tensor(np.zeros(n_out, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self._params["weight"], self._params.get("bias"))


class BatchNorm(Module):
    """Batch normalization over axis 0 of a 2-D input with running statistics.

    Running stats follow ``running = momentum * running + (1 - momentum) * batch``.
    """

    def __init__(self, n: int, dtype=np.float64, eps: float = 1e-5, momentum: float = 0.9):
        super().__init__()
        self.eps = eps
        self.momentum = momentum
        self._params["gamma"] = Tensor(np.ones(n, dtype=dtype), requires_grad=True)
        self._params["beta"] = Tensor(np.zeros(n, dtype=dtype), requires_grad=True)
        self._buffers["running_mean"] = np.zeros(n, dtype=dtype)
        self._buffers["running_var"] = np.ones(n, dtype=dtype)

    def __call__(self, x: Tensor, training: bool = True) -> Tensor:
        gamma, beta = self._params["gamma"], self._params["beta"]
        if x.ndim != 2 or x.shape[1] != gamma.shape[0]:
            raise DimensionError(f"batchnorm: expected (batch, {gamma.shape[0]}), got {x.shape}")
        if not training:
            return batchnorm_eval(x, gamma, beta, self._buffers["running_mean"],
                                  self._buffers["running_var"], self.eps)
        if x.shape[0] < 2:
            raise ContractError("batch norm in train mode needs a batch of at least 2")
        out, mu, var = batchnorm(x, gamma, beta, self.eps)
        m = self.momentum
        rm, rv = self._buffers["running_mean"], self._buffers["running_var"]
        rm *= m
        rm += (1 - m) * mu
        rv *= m
        rv += (1 - m) * var
        return out
