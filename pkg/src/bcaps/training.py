"""Adam, the mini-batch training loop, and checkpoint conversion."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .models import VariationalModel, build_model, config_from_dict, kl_loss, recon_loss
from .tensor import Tensor, add, backward, scale

log = logging.getLogger(__name__)

BETA1 = 0.9
BETA2 = 0.999
ADAM_EPS = 1e-8


class NonFiniteGradient(FloatingPointError):
    def __init__(self, name):
        self.name = name
        super().__init__(f"non-finite gradient for parameter {name!r}")


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch, batch, reason):
        self.epoch, self.batch = epoch, batch
        super().__init__(f"training diverged at epoch {epoch}, batch {batch}: {reason}")


@dataclass
class TrainConfig:
    batch_size: int = 128
    epochs: int = 100
    learning_rate: float = 1e-3
    seed: int = 0
    kl_weight: float = 1.0
    precision: str = "f64"
    kl_warmup_epochs: int = 0

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (batch norm)")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.precision not in ("f32", "f64"):
            raise ValueError(f"precision must be f32 or f64, got {self.precision!r}")

    @property
    def dtype(self):
        return np.float32 if self.precision == "f32" else np.float64


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict, grads: dict, state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update, in place on ``params`` and ``state``."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(name)
    state.t += 1
    c1 = 1.0 - BETA1 ** state.t
    c2 = 1.0 - BETA2 ** state.t
    for name, p in params.items():
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= BETA1
        m += (1.0 - BETA1) * g
        v *= BETA2
        v += (1.0 - BETA2) * (g * g)
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)


@dataclass
class EpochStats:
    epoch: int
    recon_loss: float
    kl_loss: float
    total_loss: float


class Trainer:
    """Owns a model, its optimizer state and the three seeded RNG streams.

    The seed is split into independent streams for parameter init, data
    shuffling and latent noise, so changing the sampling strategy does not
    change the initial weights or the batch order.
    """

    def __init__(self, model_cfg, cfg: TrainConfig):
        self.model_cfg = model_cfg
        self.cfg = cfg
        init_ss, shuffle_ss, noise_ss = np.random.SeedSequence(cfg.seed).spawn(3)
        self.model: VariationalModel = build_model(model_cfg, np.random.default_rng(init_ss), cfg.dtype)
        self.shuffle_rng = np.random.default_rng(shuffle_ss)
        self.noise_rng = np.random.default_rng(noise_ss)
        self.adam = AdamState()
        self.epoch = 0
        self.history: list[EpochStats] = []

    def _kl_weight(self):
        return 0.0 if self.epoch < self.cfg.kl_warmup_epochs else self.cfg.kl_weight

    def train_epoch(self, images: np.ndarray) -> EpochStats:
        images = np.asarray(images, dtype=self.cfg.dtype)
        n, bs = len(images), self.cfg.batch_size
        n_batches = n // bs
        if n_batches == 0:
            raise ValueError(f"dataset of {n} images is smaller than one batch of {bs}")
        perm = self.shuffle_rng.permutation(n)
        params = self.model.parameters()
        kl_w = self._kl_weight()
        sums = np.zeros(3)
        for bi in range(n_batches):
            x = Tensor(images[perm[bi * bs:(bi + 1) * bs]])
            xhat, heads, _ = self.model.forward(x, self.noise_rng, training=True)
            rec = recon_loss(x, xhat)
            kl = kl_loss(heads)
            loss = add(rec, scale(kl, kl_w))
            if not np.isfinite(loss.item()):
                raise TrainingDiverged(self.epoch + 1, bi, f"loss is {loss.item()}")
            backward(loss)
            try:
                adam_step(params, {k: p.grad for k, p in params.items()}, self.adam, self.cfg.learning_rate)
            except NonFiniteGradient as e:
                raise TrainingDiverged(self.epoch + 1, bi, str(e)) from e
            sums += (rec.item(), kl.item(), loss.item())
        self.epoch += 1
        rec, kl, tot = sums / n_batches
        stats = EpochStats(self.epoch, float(rec), float(kl), float(tot))
        self.history.append(stats)
        log.info("epoch %d recon=%.6f kl=%.6f total=%.6f", self.epoch, rec, kl, tot)
        return stats

    def fit(self, images, epochs: int | None = None, checkpoint_path=None, on_epoch=None):
        target = self.cfg.epochs if epochs is None else epochs
        while self.epoch < target:
            stats = self.train_epoch(images)
            if on_epoch is not None:
                on_epoch(self, stats)
            if checkpoint_path is not None:
                save_checkpoint(self.checkpoint(), checkpoint_path)
        return self.history

    # ------------------------------------------------------------- inference

    def encode(self, images, batch_size=1000):
        return encode(self.model, images, batch_size)

    def reconstruct(self, images, seed=0, batch_size=1000):
        return reconstruct(self.model, images, seed, batch_size)

    # ----------------------------------------------------------- persistence

    def checkpoint(self) -> Checkpoint:
        tensors = {}
        for name, p in self.model.parameters().items():
            tensors[f"param/{name}"] = p.data
        for name, b in self.model.buffers().items():
            tensors[f"buffer/{name}"] = b
        for name in self.adam.m:
            tensors[f"adam_m/{name}"] = self.adam.m[name]
            tensors[f"adam_v/{name}"] = self.adam.v[name]
        meta = {
            "kind": self.model.kind,
            "model_config": self.model_cfg.to_dict(),
            "train_config": asdict(self.cfg),
            "epoch": self.epoch,
            "adam_t": self.adam.t,
            "history": [asdict(h) for h in self.history],
            "rng": {"shuffle": self.shuffle_rng.bit_generator.state,
                    "noise": self.noise_rng.bit_generator.state},
        }
        return Checkpoint(meta=meta, tensors=tensors)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, **overrides) -> Trainer:
        meta = ckpt.meta
        try:
            model_cfg = config_from_dict(meta["kind"], meta["model_config"])
            cfg = TrainConfig(**{**meta["train_config"], **overrides})
        except (KeyError, TypeError, ValueError) as e:
            raise CheckpointError(f"checkpoint metadata is inconsistent: {e}") from e
        self = cls(model_cfg, cfg)
        params = self.model.parameters()
        for name, p in params.items():
            arr = ckpt.tensors.get(f"param/{name}")
            if arr is None or arr.shape != p.shape:
                raise CheckpointError(f"checkpoint does not match model config at parameter {name!r}")
            p.data = arr.astype(cfg.dtype, copy=True)
        for name in self.model.buffers():
            arr = ckpt.tensors.get(f"buffer/{name}")
            if arr is None:
                raise CheckpointError(f"checkpoint lacks buffer {name!r}")
            self.model.set_buffer(name, arr)
        self.adam.t = meta["adam_t"]
        for name in params:
            if f"adam_m/{name}" in ckpt.tensors:
                self.adam.m[name] = ckpt.tensors[f"adam_m/{name}"].astype(cfg.dtype, copy=True)
                self.adam.v[name] = ckpt.tensors[f"adam_v/{name}"].astype(cfg.dtype, copy=True)
        self.epoch = meta["epoch"]
        self.history = [EpochStats(**h) for h in meta["history"]]
        self.shuffle_rng.bit_generator.state = meta["rng"]["shuffle"]
        self.noise_rng.bit_generator.state = meta["rng"]["noise"]
        return self


def train(model_cfg, images, cfg: TrainConfig, checkpoint_path=None) -> Trainer:
    trainer = Trainer(model_cfg, cfg)
    trainer.fit(images, checkpoint_path=checkpoint_path)
    return trainer


def resume(path, images, epochs: int, checkpoint_path=None) -> Trainer:
    trainer = Trainer.from_checkpoint(load_checkpoint(path))
    trainer.fit(images, epochs=epochs, checkpoint_path=checkpoint_path)
    return trainer


def encode(model: VariationalModel, images, batch_size=1000):
    """Latent heads (mu, sigma) as arrays, eval-mode batch norm."""
    images = np.asarray(images, dtype=model.dtype)
    mus, sigmas = [], []
    for i in range(0, len(images), batch_size):
        heads = model.encode(Tensor(images[i:i + batch_size]), training=False)
        mus.append(heads.mu.data)
        sigmas.append(heads.sigma.data)
    return np.concatenate(mus), np.concatenate(sigmas)


def reconstruct(model: VariationalModel, images, seed=0, batch_size=1000, return_latent=False):
    """Encode, sample with the model's own strategy from a fixed seed, decode."""
    rng = np.random.default_rng(seed)
    images = np.asarray(images, dtype=model.dtype)
    outs, zs = [], []
    for i in range(0, len(images), batch_size):
        xhat, _, z = model.forward(Tensor(images[i:i + batch_size]), rng, training=False)
        outs.append(xhat.data)
        zs.append(z.data)
    out = np.concatenate(outs)
    return (out, np.concatenate(zs)) if return_latent else out
