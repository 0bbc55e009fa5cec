"""B-Caps and baseline VAE encoders, the shared decoder, sampling and losses."""
from __future__ import annotations

import enum
from dataclasses import asdict, dataclass

import numpy as np

from .capsules import FcCapsuleLayer, caps_norm
from .layers import BatchNorm, ContractError, Dense, Module
from .tensor import (DimensionError, Tensor, add, exp, mul, reduce_mean, reduce_sum,
                     relu, reshape, scale, sigmoid, square, sub)


class SamplingStrategy(str, enum.Enum):
    STANDARD_NORMAL = "standard-normal"
    SHIFTED_NORMAL = "shifted-normal"
    DATA_DRIVEN = "data-driven"


SHIFTED_MEAN = 0.5
SHIFTED_STD = 0.5


@dataclass
class BCapsConfig:
    C: int
    D: int
    L: int
    D1: int = 64
    routing_iters: int = 3
    sampling: SamplingStrategy = SamplingStrategy.DATA_DRIVEN
    capsule_batchnorm: bool = True
    image_dim: int = 784
    decoder_hidden: int = 512

    kind = "bcaps"

    def __post_init__(self):
        self.sampling = SamplingStrategy(self.sampling)
        for name in ("C", "D", "L", "D1", "routing_iters", "image_dim", "decoder_hidden"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    def to_dict(self):
        d = asdict(self)
        d["sampling"] = self.sampling.value
        return d


@dataclass
class BaselineVaeConfig:
    L: int
    hidden: int = 512
    sampling: SamplingStrategy = SamplingStrategy.STANDARD_NORMAL
    image_dim: int = 784
    decoder_hidden: int = 512

    kind = "vae"

    def __post_init__(self):
        self.sampling = SamplingStrategy(self.sampling)
        for name in ("L", "hidden", "image_dim", "decoder_hidden"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    def to_dict(self):
        d = asdict(self)
        d["sampling"] = self.sampling.value
        return d


def config_from_dict(kind: str, d: dict):
    if kind == "bcaps":
        return BCapsConfig(**d)
    if kind == "vae":
        return BaselineVaeConfig(**d)
    raise ValueError(f"unknown model kind {kind!r}")


@dataclass
class LatentHeads:
    mu: Tensor
    sigma: Tensor


# -------------------------------------------------------------------- networks

class BCapsEncoder(Module):
    """Image capsule -> C primary capsules (dim D) -> mean / std heads of L capsules (dim D1)."""

    def __init__(self, cfg: BCapsConfig, rng, dtype=np.float64):
        super().__init__()
        self.cfg = cfg
        self._children["primary"] = FcCapsuleLayer(
            1, cfg.image_dim, cfg.C, cfg.D, rng, cfg.routing_iters,
            use_capsule_batchnorm=cfg.capsule_batchnorm, dtype=dtype)
        self._children["mean"] = FcCapsuleLayer(cfg.C, cfg.D, cfg.L, cfg.D1, rng, cfg.routing_iters, dtype=dtype)
        self._children["std"] = FcCapsuleLayer(cfg.C, cfg.D, cfg.L, cfg.D1, rng, cfg.routing_iters, dtype=dtype)

    def __call__(self, x: Tensor, training=True) -> LatentHeads:
        if x.ndim != 2 or x.shape[1] != self.cfg.image_dim:
            raise DimensionError(f"bcaps encoder expects (batch, {self.cfg.image_dim}), got {x.shape}")
        u = reshape(x, (x.shape[0], 1, self.cfg.image_dim))
        primary = self._children["primary"](u, training)
        mu = caps_norm(self._children["mean"](primary, training))
        sigma = caps_norm(self._children["std"](primary, training))
        return LatentHeads(mu, sigma)


class VaeEncoder(Module):
    """FC(784 -> hidden) + batch norm + ReLU, then two linear heads of width L."""

    def __init__(self, cfg: BaselineVaeConfig, rng, dtype=np.float64):
        super().__init__()
        self.cfg = cfg
        self._children["fc"] = Dense(cfg.image_dim, cfg.hidden, rng, dtype, bias=False)
        self._children["bn"] = BatchNorm(cfg.hidden, dtype)
        self._children["mu"] = Dense(cfg.hidden, cfg.L, rng, dtype, gain=1.0)
        self._children["sigma"] = Dense(cfg.hidden, cfg.L, rng, dtype, gain=1.0)

    def __call__(self, x: Tensor, training=True) -> LatentHeads:
        if x.ndim != 2 or x.shape[1] != self.cfg.image_dim:
            raise DimensionError(f"vae encoder expects (batch, {self.cfg.image_dim}), got {x.shape}")
        h = relu(self._children["bn"](self._children["fc"](x), training))
        return LatentHeads(self._children["mu"](h), self._children["sigma"](h))


class Decoder(Module):
    """FC(L -> hidden) + batch norm + ReLU -> FC(hidden -> image_dim) + sigmoid."""

    def __init__(self, latent: int, rng, hidden=512, image_dim=784, dtype=np.float64):
        super().__init__()
        self.latent = latent
        self._children["fc"] = Dense(latent, hidden, rng, dtype, bias=False)
        self._children["bn"] = BatchNorm(hidden, dtype)
        self._children["out"] = Dense(hidden, image_dim, rng, dtype, gain=1.0)

    def __call__(self, z: Tensor, training=True) -> Tensor:
        if z.ndim != 2 or z.shape[1] != self.latent:
            raise DimensionError(f"decoder expects (batch, {self.latent}), got {z.shape}")
        h = relu(self._children["bn"](self._children["fc"](z), training))
        return sigmoid(self._children["out"](h))


class VariationalModel(Module):
    """Encoder + sampling + decoder.  ``kind`` is "bcaps" or "vae"."""

    def __init__(self, cfg, rng: np.random.Generator, dtype=np.float64):
        super().__init__()
        self.cfg = cfg
        self.kind = cfg.kind
        self.dtype = np.dtype(dtype)
        if self.kind == "bcaps":
            self._children["encoder"] = BCapsEncoder(cfg, rng, dtype)
        else:
            self._children["encoder"] = VaeEncoder(cfg, rng, dtype)
        self._children["decoder"] = Decoder(cfg.L, rng, cfg.decoder_hidden, cfg.image_dim, dtype)

    @property
    def encoder(self):
        return self._children["encoder"]

    @property
    def decoder(self):
        return self._children["decoder"]

    def encode(self, x: Tensor, training=True) -> LatentHeads:
        return self.encoder(x, training)

    def decode(self, z: Tensor, training=True) -> Tensor:
        return self.decoder(z, training)

    def forward(self, x: Tensor, rng=None, training=True, noise=None):
        """Returns (reconstruction, heads, z).  Pass ``noise`` to freeze epsilon."""
        heads = self.encode(x, training)
        if noise is None:
            noise = draw_noise(heads, self.cfg.sampling, rng)
        z = sample_latent(heads, self.cfg.sampling, noise=noise)
        return self.decode(z, training), heads, z

    def encoder_param_count(self) -> int:
        return param_count(self.cfg)


def build_model(cfg, rng: np.random.Generator, dtype=np.float64) -> VariationalModel:
    return VariationalModel(cfg, rng, dtype)


# -------------------------------------------------------------------- sampling

def draw_noise(heads: LatentHeads, strategy, rng: np.random.Generator) -> np.ndarray:
    """Draw epsilon for ``z = mu + sigma * eps``; the result is a constant for autodiff."""
    strategy = SamplingStrategy(strategy)
    mu, sigma = heads.mu.data, heads.sigma.data
    if strategy is SamplingStrategy.DATA_DRIVEN and np.any(sigma < 0):
        raise ContractError("data-driven sampling needs non-negative sigma")
    n = rng.standard_normal(mu.shape).astype(mu.dtype, copy=False)
    if strategy is SamplingStrategy.STANDARD_NORMAL:
        return n
    if strategy is SamplingStrategy.SHIFTED_NORMAL:
        return SHIFTED_MEAN + SHIFTED_STD * n
    return mu + sigma * n


def sample_latent(heads: LatentHeads, strategy=SamplingStrategy.STANDARD_NORMAL, rng=None, noise=None) -> Tensor:
    if noise is None:
        if rng is None:
            raise ContractError("sample_latent needs either rng or noise")
        noise = draw_noise(heads, strategy, rng)
    return add(heads.mu, mul(heads.sigma, Tensor(noise, dtype=heads.mu.dtype)))


# ---------------------------------------------------------------------- losses

def kl_loss(heads: LatentHeads) -> Tensor:
    """0.5 * sum_L(exp(sigma) + mu^2 - 1 - sigma), averaged over the batch."""
    mu, sigma = heads.mu, heads.sigma
    terms = sub(add(exp(sigma), square(mu)), add(sigma, 1.0))
    per_sample = reduce_sum(terms, axis=1)
    return scale(reduce_mean(per_sample), 0.5)


def recon_loss(x: Tensor, xhat: Tensor) -> Tensor:
    if x.shape != xhat.shape:
        raise DimensionError(f"recon_loss: shapes {x.shape} and {xhat.shape} differ")
    return reduce_mean(square(sub(x, xhat)))


def total_loss(x: Tensor, xhat: Tensor, heads: LatentHeads, kl_weight: float = 1.0) -> Tensor:
    return add(recon_loss(x, xhat), scale(kl_loss(heads), kl_weight))


# ---------------------------------------------------------------- param count

def param_count(cfg) -> int:
    """Trainable encoder scalars, counted the way the published parameter table does.

    B-Caps counts only capsule transformation weights.  The baseline counts
    FC weights and biases plus the batch-norm scale and shift; the first FC
    layer is built without a bias because the batch-norm shift absorbs it,
    but the table convention still counts those ``hidden`` scalars.
    """
    if cfg.kind == "bcaps":
        primary = 1 * cfg.C * cfg.image_dim * cfg.D
        heads = 2 * cfg.C * cfg.L * cfg.D * cfg.D1
        return primary + heads
    fc = cfg.image_dim * cfg.hidden + cfg.hidden
    bn = 2 * cfg.hidden
    heads = 2 * (cfg.hidden * cfg.L + cfg.L)
    return fc + bn + heads
