"""Capsule predictions, dynamic routing and squashing on a toy layer."""
import numpy as np

from bcaps import tensor as T
from bcaps.capsules import FcCapsuleLayer, caps_norm, predict, route, squash

rng = np.random.default_rng(1)

# squash keeps direction and maps length r to r^2 / (1 + r^2)
for r in (0.1, 1.0, 10.0, 100.0):
    v = squash(T.Tensor([[[r, 0.0]]])).data
    print(f"|s|={r:6.1f}  |squash(s)|={np.linalg.norm(v):.6f}")

# three child capsules of length 4 vote for two parents of length 5
W = T.Tensor(rng.normal(0, 0.5, (3, 2, 4, 5)))
u = T.Tensor(rng.normal(size=(1, 3, 4)))
uhat = predict(W, u)
print("prediction shape", uhat.shape)

# routing sharpens the couplings as iterations add agreement
for iters in (1, 2, 3, 5):
    v, state = route(uhat, iters)
    print(f"iters={iters}  couplings of child 0: {np.round(state.couplings[0, 0], 4)}")

# a layer wraps the weights, routing, and an optional batch norm over description dims
layer = FcCapsuleLayer(3, 4, 2, 5, rng, routing_iters=3, use_capsule_batchnorm=False)
out = layer(T.Tensor(rng.normal(size=(8, 3, 4))))
print("parent lengths (always < 1):\n", np.round(caps_norm(out).data, 3))
