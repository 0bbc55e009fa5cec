"""B-Caps: a capsule-network variational encoder, its baseline VAE, and the tooling to compare them."""
from .capsules import FcCapsuleLayer, caps_norm, predict, route, squash
from .models import (BaselineVaeConfig, BCapsConfig, LatentHeads, SamplingStrategy, build_model,
                     kl_loss, param_count, recon_loss, sample_latent, total_loss)
from .tensor import Tensor, backward, grad_check
from .training import TrainConfig, Trainer, train

__version__ = "0.1.0"
