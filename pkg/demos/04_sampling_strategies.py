"""How the three latent sampling strategies behave for B-Caps heads.

The heads are capsule norms, so they are never negative.  Standard-normal
noise is centred on zero, shifted-normal on 0.5, and data-driven noise is
drawn from N(mu, sigma) itself.
"""
import numpy as np

from bcaps import tensor as T
from bcaps.models import LatentHeads, SamplingStrategy, sample_latent

n = 100_000
mu = T.Tensor(np.full((n, 1), 0.5))
sigma = T.Tensor(np.full((n, 1), 0.1))
heads = LatentHeads(mu, sigma)

for strategy in SamplingStrategy:
    z = sample_latent(heads, strategy, np.random.default_rng(0)).data
    print(f"{strategy.value:16s} mean z {z.mean():.4f}  std z {z.std():.4f}  min z {z.min():.3f}")

# data-driven: z = mu + sigma * eps with eps ~ N(mu, sigma), so E[z] = mu + sigma * mu
print("expected data-driven mean", 0.5 + 0.1 * 0.5)
