"""Shared generators for the test suites."""

import numpy as np


def smooth_trajectory(rng, T=8, dt=0.5):
    """Constant-curvature arc driven at a linearly ramped, strictly positive speed."""
    v0 = rng.uniform(0.5, 15.0)
    a = rng.uniform(-2.0, 2.0)
    v = np.maximum(v0 + a * dt * np.arange(1, T + 1), 0.3)
    kappa = rng.uniform(-0.05, 0.05)
    s = np.cumsum(v * dt)
    if abs(kappa) < 1e-9:
        return np.stack([s, np.zeros_like(s)], -1)
    th = kappa * s
    return np.stack([np.sin(th) / kappa, (1 - np.cos(th)) / kappa], -1)


def straight_trajectory(v, heading, T=8, dt=0.5):
    k = np.arange(1, T + 1) * v * dt
    return np.stack([np.cos(heading) * k, np.sin(heading) * k], -1)


def grad_rel_error(analytic, numeric, floor=1e-6):
    """Symmetric relative error; the floor keeps FD noise on vanishing gradients out."""
    a, n = np.ravel(analytic), np.ravel(numeric)
    return np.abs(a - n) / np.maximum(np.abs(a) + np.abs(n), floor)


def check_param_grads(build_loss, arrays, rng, per_tensor=8, eps=1e-5):
    """FD-check every named array.  ``build_loss(requires_grad)`` returns (loss Tensor, tensors dict)."""
    from factorplan.autograd import numeric_grad

    loss, tensors = build_loss(True)
    loss.backward()

    def f():
        return float(build_loss(False)[0].data)

    worst = {}
    for name, a in arrays.items():
        idx = rng.choice(a.size, min(a.size, per_tensor), replace=False)
        ng = numeric_grad(f, a, eps, idx).reshape(-1)[idx]
        g = tensors[name].grad
        ag = (np.zeros(a.size) if g is None else g.reshape(-1))[idx]
        worst[name] = float(grad_rel_error(ag, ng).max())
    return worst
