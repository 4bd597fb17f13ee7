"""Canonical gradient-check episodes and a backward-rule mutation hook."""
from __future__ import annotations

from contextlib import contextmanager

import numpy as np

from . import autodiff as ad
from .model import ModelConfig, ModelInputs, SagModel, SagParams
from .network import AdjacencyBlocks, Edge, EdgeClass, build_topology, compute_adjacency, res, seg
from .training import masked_mse

# (segments, reservoirs, steps, hidden, features)
SIZES = {"tiny": (5, 1, 10, 3, 3), "small": (8, 2, 12, 4, 4)}
TOLERANCE = 1e-4


def _topology(n_seg: int, n_res: int):
    """Chain ``n-1 -> ... -> 0`` with each reservoir spliced above a distinct segment."""
    edges = []
    dist = 1000.0
    above = {1 + 2 * k: k for k in range(n_res)}  # segment fed by reservoir k
    for i in range(1, n_seg):
        dist += 750.0
        if i in above:
            k = above[i]
            edges.append(Edge(seg(i), res(k), EdgeClass.SEG_TO_RES, dist / 2))
            edges.append(Edge(res(k), seg(i - 1), EdgeClass.RES_TO_SEG, dist / 2))
        else:
            edges.append(Edge(seg(i), seg(i - 1), EdgeClass.SEG_TO_SEG, dist))
    nodes = [seg(i) for i in range(n_seg)] + [res(k) for k in range(n_res)]
    return build_topology(nodes, edges)


def canonical_episodes(size: str = "tiny", seed: int = 0):
    """One SE-routed and one PP-routed episode sharing topology and drivers.

    Yields ``(model, inputs, targets, mask)``; parameters have random nonzero
    biases so no gradient vanishes by construction.
    """
    if size not in SIZES:
        raise ValueError(f"unknown size {size!r}; choose from {sorted(SIZES)}")
    n, m, T, D, Dx = SIZES[size]
    rng = np.random.default_rng(seed)
    topo = _topology(n, m)
    blocks = AdjacencyBlocks.from_matrix(compute_adjacency(topo), n)
    drivers = rng.normal(size=(T, n, Dx))
    meta = rng.normal(size=(m, 5))
    targets = rng.normal(size=(n, T))
    mask = rng.random((n, T)) < 0.6
    mask[:, -1] = True
    L = 2
    out = []
    for r1_value in (True, False):
        cfg = ModelConfig(n_features=Dx, hidden=D, n_meta=5, n_layers=L)
        params = SagParams.initialize(cfg, rng, bias_scale=0.5)
        r1 = np.full(m, r1_value)
        se = rng.normal(size=(T, m, L + 1)) if r1_value else None
        pp = None if r1_value else rng.normal(size=(T, m, D))
        inputs = ModelInputs(drivers, meta, blocks, r1=r1, se=se, pp=pp)
        out.append((SagModel(cfg, params), inputs, targets, mask))
    return out


def episode_gradcheck(size: str = "tiny", eps: float = 1e-5, seed: int = 0) -> float:
    """Worst relative error over every parameter entry of every canonical episode."""
    worst = 0.0
    for model, inputs, targets, mask in canonical_episodes(size, seed):
        def loss(model=model, inputs=inputs, targets=targets, mask=mask):
            yhat, _ = model.run(inputs, 0, inputs.n_steps, model.initial_state(inputs))
            return masked_mse(yhat, targets, mask)

        worst = max(worst, ad.grad_check(loss, list(model.params), eps))
    return worst


@contextmanager
def corrupted_backward(op: str = "tanh", factor: float = 1.5):
    """Temporarily scale the gradient a primitive passes to its inputs (test-only)."""
    original = getattr(ad, op)

    def wrapped(*args, **kwargs):
        out = original(*args, **kwargs)
        fn = out.backward_fn
        if fn is not None:
            out.backward_fn = lambda g: fn(g * factor)
        return out

    setattr(ad, op, wrapped)
    try:
        yield
    finally:
        setattr(ad, op, original)
