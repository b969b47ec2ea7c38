"""End-to-end gradient audit of the network + mixture loss on a toy graph."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericError
from .graph import SkeletonGraph, path_graph
from .mdn import mixture_loss
from .network import BackboneConfig, GraphMDN, NetworkParams
from .numeric import GradCheckReport, Rng, grad_check, xavier_uniform

# Pre-activations closer than this to a ReLU kink are redrawn: at the kink
# the derivative does not exist and central differences straddle it.
KINK_MARGIN = 2e-3


@dataclass(frozen=True)
class AuditSpec:
    nodes: int = 4
    num_blocks: int = 2
    hidden_dim: int = 8
    kernels: int = 2
    batch: int = 4
    dropout: float = 0.0
    epsilon: float = 1e-5


def _randomise(net: GraphMDN, rng: np.random.Generator):
    """Move every parameter that init pins to a constant off its init value.

    Zero non-local output transforms would make the theta/phi/g gradients
    vanish identically, and a tied head would hide kernel-indexing bugs.
    """
    p = net.params
    for s in p.specs:
        leaf = s.name.rsplit(".", 1)[1]
        if leaf == "out" or s.name in ("head.w_self", "head.w_neigh"):
            p[s.name][...] = xavier_uniform(rng, *s.shape)
        elif leaf == "edge_scores":
            p[s.name][...] = rng.normal(0.0, 0.5, s.shape)
        elif leaf == "gamma":
            p[s.name][...] += rng.normal(0.0, 0.1, s.shape)
        elif leaf in ("beta", "bias"):
            p[s.name][...] = rng.normal(0.0, 0.1, s.shape)


def _min_preactivation(net, cache) -> float:
    low = np.inf
    for kind, name, c in cache.steps:
        if kind == "bn":
            xhat, gamma = c[0], c[2]
            low = min(low, float(np.abs(gamma * xhat + net.params[f"{name}.beta"]).min()))
    return low


def build_instance(seed: int, spec: AuditSpec = AuditSpec(), graph: SkeletonGraph | None = None, max_tries=200):
    """Seeded network, batch and dropout masks away from every ReLU kink."""
    graph = graph or path_graph(spec.nodes)
    cfg = BackboneConfig(spec.num_blocks, spec.hidden_dim, spec.dropout, spec.kernels)
    net = GraphMDN(cfg, graph)
    rng = Rng(seed)
    net.init_params(rng.stream(0))
    _randomise(net, rng.stream(1))
    data = rng.stream(2)
    k = graph.node_count
    for _ in range(max_tries):
        x = data.uniform(-1.0, 1.0, (spec.batch, k, 2))
        y = data.uniform(-0.5, 0.5, (spec.batch, k, 3))
        masks = net.make_dropout_masks(data, spec.batch) if spec.dropout > 0 else None
        _, cache = net.forward(x, training=True, masks=masks)
        if _min_preactivation(net, cache) >= KINK_MARGIN:
            return net, x, y, masks
    raise NumericError(f"no kink-free instance found for seed {seed}")


def audit_gradients(seed: int, mode: str = "pose", spec: AuditSpec = AuditSpec(), corrupt: bool = False) -> GradCheckReport:
    """Finite-difference check of every trainable parameter.

    ``corrupt`` is a negative-control hook: it skews the analytic gradient of
    the head's neighbour weights by 1%, which the check must catch.
    """
    net, x, y, masks = build_instance(seed, spec)
    m = spec.kernels
    logits, cache = net.forward(x, training=True, masks=masks)
    _, dlogits = mixture_loss(logits, y, m, mode)
    analytic = net.backward(cache, dlogits)
    if corrupt:
        view = net.params.zeros_like()
        view.vector[:] = analytic
        view["head.w_neigh"][...] *= 1.01
        analytic = view.vector

    def loss(v):
        net.params.vector[:] = v
        out, _ = net.forward(x, training=True, masks=masks)
        return mixture_loss(out, y, m, mode)[0]

    precise = GraphMDN(net.config, net.skeleton, NetworkParams(net.params.specs, dtype=np.longdouble))
    x_ld, y_ld = x.astype(np.longdouble), y.astype(np.longdouble)
    masks_ld = None if masks is None else [mk.astype(np.longdouble) for mk in masks]

    def precise_loss(v):
        precise.params.vector[:] = v
        out, _ = precise.forward(x_ld, training=True, masks=masks_ld)
        return mixture_loss(out, y_ld, m, mode)[0]

    v0 = net.params.flatten()
    idx = np.flatnonzero(net.params.trainable_mask())
    try:
        report = grad_check(loss, v0, spec.epsilon, analytic=analytic, indices=idx, precise_loss_fn=precise_loss)
    finally:
        net.params.vector[:] = v0
    report.names = net.params.coordinate_names()
    return report
