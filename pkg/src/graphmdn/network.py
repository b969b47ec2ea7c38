"""The GraphMDN backbone, output head and flat parameter vector."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import layers as L
from .errors import ConfigError, StateError
from .graph import SkeletonGraph, neighbor_mask
from .mdn import HeadParams
from .numeric import xavier_uniform


# Xavier draws for the head are scaled by this factor at init.
HEAD_INIT_SCALE = 0.1
# Relative per-kernel deviation of the head's mean rows at init.
KERNEL_SPREAD = 0.01


@dataclass(frozen=True)
class BackboneConfig:
    num_blocks: int = 4
    hidden_dim: int = 128
    dropout: float = 0.1
    kernels: int = 5
    input_dim: int = 2

    def __post_init__(self):
        if self.num_blocks < 1:
            raise ConfigError("num_blocks must be >= 1")
        if self.hidden_dim < 1:
            raise ConfigError("hidden_dim must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.kernels < 1:
            raise ConfigError("kernels must be >= 1")

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class ParamSpec:
    name: str
    shape: tuple
    offset: int
    trainable: bool = True

    @property
    def size(self) -> int:
        return math.prod(self.shape)


class NetworkParams:
    """Named parameter tensors backed by one contiguous float64 vector.

    ``params[name]`` is a writable view into ``params.vector``, so layers and
    optimisers see the same memory.
    """

    def __init__(self, specs, vector=None, dtype=np.float64):
        self.specs = list(specs)
        self._index = {s.name: s for s in self.specs}
        total = sum(s.size for s in self.specs)
        if vector is None:
            vector = np.zeros(total, dtype=dtype)
        vector = np.asarray(vector, dtype=dtype)
        if vector.shape != (total,):
            raise ConfigError(f"flat vector has length {vector.size}, expected {total}")
        self.vector = vector
        self._views = {
            s.name: vector[s.offset : s.offset + s.size].reshape(s.shape) for s in self.specs
        }

    def __getitem__(self, name) -> np.ndarray:
        return self._views[name]

    def __contains__(self, name):
        return name in self._index

    def __len__(self):
        return self.vector.size

    def zeros_like(self) -> "NetworkParams":
        return NetworkParams(self.specs, dtype=self.vector.dtype)

    def copy(self) -> "NetworkParams":
        return NetworkParams(self.specs, self.vector.copy())

    def flatten(self) -> np.ndarray:
        return self.vector.copy()

    def unflatten(self, vec) -> "NetworkParams":
        return NetworkParams(self.specs, np.array(vec, dtype=np.float64))

    def trainable_mask(self) -> np.ndarray:
        mask = np.zeros(self.vector.size, dtype=bool)
        for s in self.specs:
            mask[s.offset : s.offset + s.size] = s.trainable
        return mask

    def coordinate_name(self, index: int) -> str:
        for s in self.specs:
            if s.offset <= index < s.offset + s.size:
                pos = np.unravel_index(index - s.offset, s.shape)
                return f"{s.name}[{','.join(str(int(p)) for p in pos)}]"
        raise IndexError(index)

    def coordinate_names(self) -> list[str]:
        return [self.coordinate_name(i) for i in range(self.vector.size)]


class _SpecBuilder:
    def __init__(self):
        self.specs = []
        self.offset = 0

    def add(self, name, shape, trainable=True):
        spec = ParamSpec(name, tuple(int(d) for d in shape), self.offset, trainable)
        self.specs.append(spec)
        self.offset += spec.size


def _conv_specs(b, prefix, h_in, h_out, k, bias):
    b.add(f"{prefix}.w_self", (h_out, h_in))
    b.add(f"{prefix}.w_neigh", (h_out, h_in))
    b.add(f"{prefix}.edge_scores", (k, k))
    if bias:
        b.add(f"{prefix}.bias", (h_out,))


def _bn_specs(b, prefix, h):
    b.add(f"{prefix}.gamma", (h,))
    b.add(f"{prefix}.beta", (h,))
    b.add(f"{prefix}.running_mean", (h,), trainable=False)
    b.add(f"{prefix}.running_var", (h,), trainable=False)


def _nl_specs(b, prefix, h):
    for part in ("theta", "phi", "g", "out"):
        b.add(f"{prefix}.{part}", (h, h))


def _block_convs(config):
    """(prefix, bn prefix) of every conv followed by BN/ReLU, in order."""
    convs = [("input.conv", "input.bn")]
    for blk in range(config.num_blocks):
        for c in (1, 2):
            convs.append((f"blocks.{blk}.conv{c}", f"blocks.{blk}.bn{c}"))
    return convs


def param_specs(config: BackboneConfig, k: int) -> list[ParamSpec]:
    h = config.hidden_dim
    b = _SpecBuilder()
    # Convs that feed batch norm carry no bias: BN's mean subtraction cancels it.
    _conv_specs(b, "input.conv", config.input_dim, h, k, bias=False)
    _bn_specs(b, "input.bn", h)
    _nl_specs(b, "input.nonlocal", h)
    for blk in range(config.num_blocks):
        for c in (1, 2):
            _conv_specs(b, f"blocks.{blk}.conv{c}", h, h, k, bias=False)
            _bn_specs(b, f"blocks.{blk}.bn{c}", h)
        _nl_specs(b, f"blocks.{blk}.nonlocal", h)
    _conv_specs(b, "head", h, 5 * config.kernels, k, bias=True)
    return b.specs


def parameter_count(config: BackboneConfig, k: int) -> dict:
    """Closed-form parameter audit (total and trainable entry counts)."""
    h, m, c_in = config.hidden_dim, config.kernels, config.input_dim
    conv = lambda i, o, bias: 2 * i * o + k * k + (o if bias else 0)  # noqa: E731
    bn_train, bn_stats = 2 * h, 2 * h
    nonlocal_ = 4 * h * h
    n_bn = 1 + 2 * config.num_blocks
    trainable = (
        conv(c_in, h, False)
        + 2 * config.num_blocks * conv(h, h, False)
        + (1 + config.num_blocks) * nonlocal_
        + n_bn * bn_train
        + conv(h, 5 * m, True)
    )
    return {"total": trainable + n_bn * bn_stats, "trainable": trainable}


@dataclass
class ForwardCache:
    training: bool
    steps: list
    embeddings: np.ndarray
    bn_stats: dict


class GraphMDN:
    """Residual semantic-GCN backbone with a graph-conv mixture head.

    Layout: input conv -> BN -> ReLU -> non-local, then ``num_blocks``
    residual blocks ``[conv -> BN -> ReLU -> dropout] x 2 + skip`` each
    followed by a non-local layer, then a conv head emitting ``5M`` logits
    per node.
    """

    def __init__(self, config: BackboneConfig, skeleton: SkeletonGraph, params: NetworkParams | None = None):
        self.config = config
        self.skeleton = skeleton
        self.mask = neighbor_mask(skeleton)
        self._nbr = L.neighbours(self.mask)
        specs = param_specs(config, skeleton.node_count)
        if params is None:
            params = NetworkParams(specs)
        elif [(s.name, s.shape) for s in params.specs] != [(s.name, s.shape) for s in specs]:
            raise ConfigError("parameter layout does not match the network config")
        self.params = params

    @property
    def kernels(self) -> int:
        return self.config.kernels

    def init_params(self, rng: np.random.Generator) -> NetworkParams:
        """Xavier-uniform weights, zero edge scores and biases, unit BN.

        The non-local output transforms start at zero so every non-local
        layer is the identity at init; otherwise each one roughly doubles the
        variance of the residual stream. In the head, the mean rows are
        small random draws (near mu = 0 instead of saturated tanh means, yet
        distinct per kernel) and the pi and sigma rows start at zero. Every
        kernel then begins with exactly pi = 1/M and sigma = 1; a kernel
        given a slightly smaller initial sigma would otherwise claim all
        responsibility within a few steps and starve the others.
        """
        p = self.params
        p.vector[:] = 0.0
        for s in p.specs:
            leaf = s.name.rsplit(".", 1)[1]
            if leaf in ("w_self", "w_neigh", "theta", "phi", "g", "out"):
                w = xavier_uniform(rng, *s.shape)
                if leaf == "out":
                    w = 0.0
                elif s.name.startswith("head."):
                    w = HEAD_INIT_SCALE * w
                    m = self.kernels
                    shared = np.tile(w[:3], (m, 1))
                    w[: 3 * m] = shared + KERNEL_SPREAD * (w[: 3 * m] - shared)
                    w[3 * m :] = 0.0
                p[s.name][...] = w
            elif leaf in ("gamma", "running_var"):
                p[s.name][...] = 1.0
        return p

    def head_params(self) -> HeadParams:
        p = self.params
        return HeadParams(p["head.w_self"], p["head.w_neigh"], p["head.edge_scores"], p["head.bias"])

    # -- forward -----------------------------------------------------------

    def _conv_bn_relu(self, prefix, bn, x, training, steps, stats):
        p = self.params
        h, c = L.semgconv_forward(p[f"{prefix}.w_self"], p[f"{prefix}.w_neigh"], p[f"{prefix}.edge_scores"], None, x, self.mask, self._nbr)
        steps.append(("conv", prefix, c))
        h, c = L.batchnorm_forward(
            p[f"{bn}.gamma"], p[f"{bn}.beta"], p[f"{bn}.running_mean"], p[f"{bn}.running_var"], h, training
        )
        steps.append(("bn", bn, c))
        if training:
            stats[bn] = c[4]
        h, c = L.relu_forward(h)
        steps.append(("relu", None, c))
        return h

    def _nonlocal(self, prefix, x, steps):
        p = self.params
        y, c = L.nonlocal_forward(p[f"{prefix}.theta"], p[f"{prefix}.phi"], p[f"{prefix}.g"], p[f"{prefix}.out"], x)
        steps.append(("nonlocal", prefix, c))
        return y

    def make_dropout_masks(self, rng: np.random.Generator, batch: int) -> list:
        shape = (batch, self.skeleton.node_count, self.config.hidden_dim)
        return [L.dropout_mask(rng, shape, self.config.dropout) for _ in range(2 * self.config.num_blocks)]

    def backbone_forward(self, x, training: bool = False, rng=None, masks=None):
        """Node embeddings ``(N, K, H)`` for a batch of 2D poses.

        ``x`` is ``(N, K, 2)`` or flat ``(N, 2K)``. In training mode with a
        positive dropout rate, pass either ``rng`` to sample dropout masks or
        precomputed ``masks`` (from :meth:`make_dropout_masks`).
        """
        x = np.asarray(x, dtype=self.params.vector.dtype)
        k = self.skeleton.node_count
        if x.ndim == 2 and x.shape[1] == self.config.input_dim * k:
            x = x.reshape(x.shape[0], k, self.config.input_dim)
        if x.ndim == 2:
            x = x[None]
        n = x.shape[0]
        use_dropout = training and self.config.dropout > 0
        if use_dropout and masks is None:
            if rng is None:
                raise StateError("training with dropout needs an rng or fixed masks")
            masks = self.make_dropout_masks(rng, n)
        steps, stats = [], {}
        h = self._conv_bn_relu("input.conv", "input.bn", x, training, steps, stats)
        h = self._nonlocal("input.nonlocal", h, steps)
        mi = 0
        for blk in range(self.config.num_blocks):
            skip = h
            steps.append(("skip_start", None, None))
            for c in (1, 2):
                h = self._conv_bn_relu(f"blocks.{blk}.conv{c}", f"blocks.{blk}.bn{c}", h, training, steps, stats)
                if use_dropout:
                    h = h * masks[mi]
                    steps.append(("dropout", None, masks[mi]))
                mi += 1
            h = h + skip
            steps.append(("skip_end", None, None))
            h = self._nonlocal(f"blocks.{blk}.nonlocal", h, steps)
        return h, ForwardCache(training, steps, h, stats)

    def forward(self, x, training: bool = False, rng=None, masks=None):
        """Raw head logits ``(N, K, 5M)`` and the cache for :meth:`backward`."""
        emb, cache = self.backbone_forward(x, training, rng, masks)
        p = self.params
        logits, c = L.semgconv_forward(p["head.w_self"], p["head.w_neigh"], p["head.edge_scores"], p["head.bias"], emb, self.mask, self._nbr)
        cache.steps.append(("head", "head", c))
        return logits, cache

    # -- backward ----------------------------------------------------------

    def backward(self, cache: ForwardCache | None, upstream) -> np.ndarray:
        """Flat gradient of all parameters given d(loss)/d(output).

        ``upstream`` is the gradient w.r.t. the head logits if the cache came
        from :meth:`forward`, or w.r.t. the embeddings if it came from
        :meth:`backbone_forward`.
        """
        if cache is None or not cache.steps:
            raise StateError("backward called without a forward cache")
        grads = self.params.zeros_like()
        d = np.asarray(upstream, dtype=self.params.vector.dtype)
        skip_grads = []
        for kind, name, c in reversed(cache.steps):
            if kind in ("conv", "head"):
                d, g = L.semgconv_backward(c, d)
                for leaf, val in g.items():
                    grads[f"{name}.{leaf}"][...] += val
            elif kind == "bn":
                d, g = L.batchnorm_backward(c, d)
                for leaf, val in g.items():
                    grads[f"{name}.{leaf}"][...] += val
            elif kind == "relu":
                d = L.relu_backward(c, d)
            elif kind == "dropout":
                d = d * c
            elif kind == "nonlocal":
                d, g = L.nonlocal_backward(c, d)
                for leaf, val in g.items():
                    grads[f"{name}.{leaf}"][...] += val
            elif kind == "skip_end":
                skip_grads.append(d)
            elif kind == "skip_start":
                d = d + skip_grads.pop()
        return grads.vector

    backbone_backward = backward

    def update_running_stats(self, cache: ForwardCache, momentum: float = 0.1):
        for bn, stats in cache.bn_stats.items():
            L.update_running_stats(self.params[f"{bn}.running_mean"], self.params[f"{bn}.running_var"], stats, momentum)


def backbone_forward(params: NetworkParams, config: BackboneConfig, skeleton: SkeletonGraph, x, training=False, rng=None, masks=None):
    return GraphMDN(config, skeleton, params).backbone_forward(x, training, rng, masks)
