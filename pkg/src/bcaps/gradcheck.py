"""Finite-difference suite over every op and both models at micro scale."""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .capsules import FcCapsuleLayer, caps_norm, freeze_routing, predict, squash, weighted_sum
from .models import (BaselineVaeConfig, BCapsConfig, LatentHeads, build_model, draw_noise,
                     kl_loss, recon_loss, total_loss)

OP_TOL = 1e-6
MODEL_TOL = 1e-4

MICRO_BCAPS = BCapsConfig(C=2, D=8, L=2, D1=4, image_dim=8, decoder_hidden=6)
MICRO_VAE = BaselineVaeConfig(L=2, hidden=6, image_dim=8, decoder_hidden=6)


def _t(rng, *shape, low=-1.0, high=1.0):
    return T.Tensor(rng.uniform(low, high, shape))


def _corrupted_exp(a):
    out = np.exp(a.data)
    return T.make_op("exp", out, (a,), lambda g: (1.5 * g * out,))


def op_cases(rng):
    """(name, f, inputs) triples; every f reduces to a scalar via a random projection."""
    def proj(shape):
        w = T.Tensor(rng.normal(size=shape))
        return lambda t: T.reduce_sum(T.mul(t, w))

    a33, b33 = _t(rng, 3, 3), _t(rng, 3, 3)
    p33 = proj((3, 3))
    v5 = _t(rng, 5)
    p5 = proj((5,))
    pos = _t(rng, 4, 3, low=0.2, high=2.0)
    p43 = proj((4, 3))
    x43 = _t(rng, 4, 3)
    s24 = _t(rng, 2, 4, low=-3, high=3)

    bn_x = _t(rng, 6, 4)
    bn_g, bn_b = _t(rng, 4, low=0.5, high=1.5), _t(rng, 4)
    p64 = proj((6, 4))
    bn_mean, bn_var = rng.normal(size=4), rng.uniform(0.5, 2.0, 4)

    W = T.Tensor(rng.normal(0, 0.5, (2, 3, 4, 5)))
    u = _t(rng, 2, 2, 4)
    p_pred = proj((2, 2, 3, 5))
    uhat = _t(rng, 2, 3, 2, 4)
    k = T.Tensor(rng.dirichlet(np.ones(2), size=(2, 3)))
    p_ws = proj((2, 2, 4))
    sq = _t(rng, 3, 2, 4)
    p_sq = proj((3, 2, 4))
    p_cn = proj((3, 2))
    mu, sg = _t(rng, 4, 3), _t(rng, 4, 3)
    xr, xh = _t(rng, 3, 8, low=0, high=1), _t(rng, 3, 8, low=0.05, high=0.95)

    return [
        ("matmul", lambda xs: p33(T.matmul(xs[0], xs[1])), [a33, b33]),
        ("add", lambda xs: p43(T.add(xs[0], xs[1])), [x43, _t(rng, 4, 3)]),
        ("sub", lambda xs: p43(T.sub(xs[0], xs[1])), [_t(rng, 4, 3), _t(rng, 4, 3)]),
        ("mul", lambda xs: p43(T.mul(xs[0], xs[1])), [_t(rng, 4, 3), _t(rng, 4, 3)]),
        ("mul_scalar_tensor", lambda xs: p43(T.mul(xs[0], xs[1])), [_t(rng, 1), _t(rng, 4, 3)]),
        ("scale", lambda xs: p43(T.scale(xs[0], -2.5)), [_t(rng, 4, 3)]),
        ("exp", lambda xs: p43(T.exp(xs[0])), [_t(rng, 4, 3)]),
        ("sqrt", lambda xs: p43(T.sqrt(xs[0])), [pos]),
        ("square", lambda xs: p43(T.square(xs[0])), [_t(rng, 4, 3)]),
        ("sigmoid", lambda xs: p43(T.sigmoid(xs[0])), [_t(rng, 4, 3, low=-4, high=4)]),
        ("relu", lambda xs: p43(T.relu(xs[0])), [T.Tensor(rng.choice([-1, 1], (4, 3)) * rng.uniform(0.1, 1, (4, 3)))]),
        ("sum", lambda xs: T.reduce_sum(T.square(xs[0])), [_t(rng, 4, 3)]),
        ("sum_axis", lambda xs: p5(T.reduce_sum(xs[0], axis=0)), [_t(rng, 2, 5)]),
        ("mean_axis", lambda xs: p5(T.reduce_mean(xs[0], axis=1)), [_t(rng, 5, 3)]),
        ("softmax", lambda xs: p5(T.softmax(xs[0], axis=0)), [v5]),
        ("softmax_axis1", lambda xs: T.reduce_sum(T.mul(T.softmax(xs[0], axis=1), s24)), [_t(rng, 2, 4)]),
        ("reshape", lambda xs: p43(T.reshape(xs[0], (4, 3))), [_t(rng, 2, 6)]),
        ("add_bias", lambda xs: p43(T.add_bias(xs[0], xs[1])), [_t(rng, 4, 3), _t(rng, 3)]),
        ("batchnorm", lambda xs: p64(T.batchnorm(xs[0], xs[1], xs[2])[0]), [bn_x, bn_g, bn_b]),
        ("batchnorm_eval", lambda xs: p64(T.batchnorm_eval(xs[0], xs[1], xs[2], bn_mean, bn_var)),
         [_t(rng, 6, 4), _t(rng, 4), _t(rng, 4)]),
        ("predict", lambda xs: p_pred(predict(xs[0], xs[1])), [W, u]),
        ("weighted_sum", lambda xs: p_ws(weighted_sum(xs[0], xs[1])), [uhat, k]),
        ("squash", lambda xs: p_sq(squash(xs[0])), [sq]),
        ("caps_norm", lambda xs: p_cn(caps_norm(xs[0])), [_t(rng, 3, 2, 4)]),
        ("kl_loss", lambda xs: kl_loss(LatentHeads(xs[0], xs[1])), [mu, sg]),
        ("recon_loss", lambda xs: recon_loss(xr, xs[0]), [xh]),
    ]


def capsule_layer_case(rng):
    layer = FcCapsuleLayer(3, 4, 2, 5, rng, routing_iters=3, use_capsule_batchnorm=True, init_std=0.5)
    u = T.Tensor(rng.normal(size=(4, 3, 4)))
    w = T.Tensor(rng.normal(size=(4, 2, 5)))
    params = list(layer.parameters().values()) + [u]

    def f(_):
        return T.reduce_sum(T.mul(layer(u), w))

    return layer, f, params


def model_case(cfg, rng, batch=4):
    """Batch 4: at batch 2 every batch-norm output is +-gamma + beta, a sharply curved
    function that finite differences resolve poorly."""
    model = build_model(cfg, rng)
    x = T.Tensor(rng.uniform(0, 1, (batch, cfg.image_dim)))
    noise = draw_noise(model.encode(x), cfg.sampling, rng)
    params = list(model.parameters().values())

    def f(_):
        xhat, heads, _ = model.forward(x, noise=noise)
        return total_loss(x, xhat, heads)

    return model, f, params


def run_suite(seed=0, corrupt=False, eps=1e-5):
    """Returns a list of (name, max_rel_err, tolerance)."""
    rng = np.random.default_rng(seed)
    results = []
    cases = op_cases(rng)
    if corrupt:
        cases.append(("exp[corrupted]", lambda xs: T.reduce_sum(_corrupted_exp(xs[0])), [_t(rng, 3)]))
    for name, f, xs in cases:
        results.append((name, T.grad_check(f, xs, eps), OP_TOL))
    layer, f, params = capsule_layer_case(rng)
    with freeze_routing(layer):
        results.append(("fc_capsule_layer", T.grad_check(f, params, eps), MODEL_TOL))
    for label, cfg in (("bcaps_model", MICRO_BCAPS), ("vae_model", MICRO_VAE)):
        model, f, params = model_case(cfg, rng)
        with freeze_routing(model):
            results.append((label, T.grad_check(f, params, eps), MODEL_TOL))
    return results
