"""Shared test utilities: finite differences and small fixtures."""

import numpy as np

from adaptcl.nn import Backbone, ContinualModel, Linear
from adaptcl.tensor import backward


def finite_difference(loss_fn, params, h=1e-5):
    """Central differences of ``loss_fn()`` (a scalar Tensor) w.r.t. each tensor in ``params``."""
    grads = []
    for p in params:
        g = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = loss_fn().item()
            flat[i] = orig - h
            down = loss_fn().item()
            flat[i] = orig
            gflat[i] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def analytic(loss_fn, params):
    for p in params:
        p.grad = None
    backward(loss_fn())
    return [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params]


def rel_error(a, b, floor=0.0):
    """``||a - b|| / max(||a||, ||b||, floor)``.

    A positive ``floor`` keeps gradients that are exactly zero in theory
    (where central differences return pure round-off) from dividing noise by noise.
    """
    a, b = np.asarray(a), np.asarray(b)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    if denom == 0:
        return 0.0
    return float(np.linalg.norm(a - b) / denom)


def max_rel_error(loss_fn, params, h=1e-5):
    an = analytic(loss_fn, params)
    fd = finite_difference(loss_fn, params, h)
    return max(rel_error(a, n) for a, n in zip(an, fd))


def tiny_model(rng, input_dim=3, hidden=4, depth=2, classes=(3,), bottleneck=2, adapters=True,
               activation="relu"):
    layers = []
    dims = [input_dim] + [hidden] * depth
    for i, o in zip(dims, dims[1:]):
        lyr = Linear(i, o, activation, rng=rng, zero_bias=False)
        layers.append(lyr)
    model = ContinualModel(Backbone(layers, input_dim), use_adapters=adapters)
    for c in classes:
        br = model.spawn_task(c, bottleneck, rng)
        # non-zero biases so their gradients are exercised
        for p in br.named_parameters("").values():
            if p.data.ndim == 1:
                p.data = rng.uniform(-0.5, 0.5, size=p.shape)
    return model


