"""Shared test utilities: central finite differences and random graphs."""

import numpy as np

from gbnlab.graphs import build_graph

FD_STEP = 1e-5


def random_graph(rng, n, edge_prob=0.3, connect=True):
    """Erdős–Rényi style test graph; optionally chained so no node is isolated."""
    edges = set()
    for i in range(n):
        for j in range(i + 1, n):
            if rng.random() < edge_prob:
                edges.add((i, j))
    if connect:
        for i in range(n - 1):
            edges.add((i, i + 1))
    return build_graph(sorted(edges), n)


def fd_gradient(fun, arrays, step=FD_STEP):
    """Central-difference gradient of a scalar function of several arrays.

    ``fun`` maps the list of arrays to a float. Each array is perturbed one
    entry at a time (in place, then restored), so the entries must be
    float64. Returns one gradient array per input, same shapes.
    """
    grads = []
    for base in arrays:
        g = np.zeros_like(base)
        flat = base.reshape(-1)
        gflat = g.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + step
            hi = fun(arrays)
            flat[idx] = orig - step
            lo = fun(arrays)
            flat[idx] = orig
            gflat[idx] = (hi - lo) / (2.0 * step)
        grads.append(g)
    return grads


def assert_grads_match(analytic, numeric, rtol=1e-4, atol=1e-7):
    """Compare analytic gradients against finite-difference references."""
    assert len(analytic) == len(numeric)
    for a, n in zip(analytic, numeric):
        assert a is not None, "missing analytic gradient"
        np.testing.assert_allclose(a, n, rtol=rtol, atol=atol)


def frozen_linear_gbn(g, layers, seed, in_dim=2, hidden=3):
    """Constant-coefficient, identity-transform model: one exact linear sweep.

    Coefficient nets keep their warm-start output biases but lose all input
    dependence, the per-layer transforms become the identity, and the source
    term is zeroed, so the forward pass applies one fixed propagation matrix
    per layer.
    """
    from gbnlab.models import GbnModel, ModelConfig

    cfg = ModelConfig(
        in_dim=in_dim, hidden=hidden, out_dim=1, layers=layers,
        activation="identity", norm="none", dropout=0.0,
    )
    rng = np.random.default_rng(seed)
    interior = (np.arange(g.n) % 3 != 0).astype(float)
    model = GbnModel.init(cfg, rng, indicator_override=interior)
    eye = np.eye(hidden)
    for t in model.transforms:
        t.first.w.values[:] = eye
        t.first.b.values[:] = 0.0
        t.second.w.values[:] = eye
        t.second.b.values[:] = 0.0
    for net in (model.alpha_net, model.beta_net):
        net.second.w.values[:] = 0.0
    model.gamma_net.second.w.values[:] = 0.0
    model.gamma_net.second.b.values[:] = 0.0
    return model


def frozen_linear_gcn(g, layers, seed, in_dim=2, hidden=3):
    """Identity-transform heat-step baseline: each layer is the plain shift."""
    from gbnlab.models import GcnModel, ModelConfig

    cfg = ModelConfig(
        in_dim=in_dim, hidden=hidden, out_dim=1, layers=layers,
        activation="identity", norm="none", dropout=0.0,
    )
    model = GcnModel.init(cfg, np.random.default_rng(seed))
    eye = np.eye(hidden)
    for t in model.transforms:
        t.first.w.values[:] = eye
        t.first.b.values[:] = 0.0
        t.second.w.values[:] = eye
        t.second.b.values[:] = 0.0
    return model
