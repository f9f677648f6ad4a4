"""Central finite-difference oracle shared by the model and acceptance tests."""

import numpy as np

from nptl.models import ModelSpec, init_params, weighted_grad, weighted_loss

H = 1e-5
# central differences carry round-off of about eps * |loss| / H ~ 2e-11 |loss|,
# so coordinates with |grad| below REL_FLOOR * max(1, |loss|) are in effect
# compared absolutely
REL_FLOOR = 1e-5


def fd_grad(spec, params, X, y, w, h=H):
    g = np.empty(len(params))
    for i in range(len(params)):
        e = np.zeros(len(params))
        e[i] = h
        up = weighted_loss(spec, params.replace(params.values + e), X, y, w)
        dn = weighted_loss(spec, params.replace(params.values - e), X, y, w)
        g[i] = (up - dn) / (2 * h)
    return g


def relative_error(a, b, scale=1.0):
    floor = REL_FLOOR * max(1.0, abs(scale))
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def _near_kink(spec, params, X):
    # a ReLU pre-activation within the FD stencil makes the oracle invalid
    from nptl.models import _forward_cache, _inputs
    _, pre, _, _ = _forward_cache(spec, params, _inputs(spec, X))
    return spec.activation == "relu" and any(np.any(np.abs(z) < 1e3 * H) for z in pre)


def random_instance(seed):
    """Small random mlp problem; redrawn until no ReLU unit sits on a kink."""
    r = np.random.default_rng(seed)
    while True:
        act = ("relu", "swish")[int(r.integers(2))]
        d, k = int(r.integers(1, 5)), int(r.integers(2, 5))
        hidden = [int(x) for x in r.integers(2, 9, size=int(r.integers(1, 3)))]
        spec = ModelSpec("mlp", d, k, hidden, act)
        p = init_params(spec, r)
        p = p.replace(p.values + 0.1 * r.standard_normal(len(p)))
        n = int(r.integers(1, 8))
        X = r.standard_normal((n, d))
        if r.random() < 0.5:
            y = r.integers(0, k, n)
        else:
            y = r.dirichlet(np.ones(k), size=n)
        w = r.exponential(size=n)
        if not _near_kink(spec, p, X):
            return spec, p, X, y, w


def max_relative_error(spec, params, X, y, w):
    g = weighted_grad(spec, params, X, y, w)
    scale = weighted_loss(spec, params, X, y, w)
    return float(relative_error(g, fd_grad(spec, params, X, y, w), scale).max())
