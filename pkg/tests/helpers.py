"""Shared test utilities: finite-difference oracles and tiny model builders."""

import numpy as np

from bmpc import autodiff as ad
from bmpc.world_model import ModelConfig, WorldModel

FD_STEP = 1e-5


def rel_err(a, b, floor=1e-6):
    return abs(a - b) / max(abs(a), abs(b), floor)


def central_diff(f, param_node, idx, h=FD_STEP):
    """Central finite difference of scalar f() w.r.t. one parameter coordinate."""
    flat = param_node.value.reshape(-1)
    old = flat[idx]
    flat[idx] = old + h
    fp = f()
    flat[idx] = old - h
    fm = f()
    flat[idx] = old
    return (fp - fm) / (2.0 * h)


def check_grads(f_node, params, rng, coords_per_param=3, tol=1e-4):
    """Compare analytic grads of a graph-building scalar against central FD.

    ``f_node()`` must rebuild the graph from scratch and return the loss node.
    Returns the worst relative error seen.
    """
    params.zero_grad()
    loss = f_node()
    ad.backward(loss)
    worst = 0.0
    for name, p in params.items():
        grad = np.zeros_like(p.value) if p.grad is None else p.grad
        n = p.value.size
        for idx in rng.choice(n, size=min(coords_per_param, n), replace=False):
            fd = central_diff(lambda: float(f_node().value), p, int(idx))
            err = rel_err(float(grad.reshape(-1)[idx]), fd)
            worst = max(worst, err)
            assert err < tol, f"{name}[{idx}]: analytic {grad.reshape(-1)[idx]} vs fd {fd}"
    params.zero_grad()
    return worst


def tiny_model(seed=0, obs_dim=3, action_dim=2, bins=9):
    cfg = ModelConfig(obs_dim=obs_dim, action_dim=action_dim, latent_dim=6,
                      hidden=(8, 8), num_bins=bins)
    model = WorldModel(cfg, seed=seed)
    # break the zero-init of reward/value output layers so grad checks see
    # nontrivial curvature everywhere
    rng = np.random.default_rng(seed + 1)
    for name, p in model.params.items():
        if np.all(p.value == 0.0):
            p.value[...] = 0.1 * rng.normal(size=p.value.shape)
    return model
