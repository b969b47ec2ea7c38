"""Mixture density heads and their negative log-likelihoods.

Raw head output per node is ``5M`` logits laid out as
``[mu (M x 3, kernel-major) | pi (M) | sigma (M)]``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DomainError, NumericError, ParseError, ShapeError
from .layers import semgconv_forward
from .numeric import as_float, log_sum_exp, softmax

SIGMA_FLOOR = 1e-6
LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class NodeMixture:
    mu: np.ndarray  # (..., K, M, 3)
    sigma: np.ndarray  # (..., K, M)
    pi: np.ndarray  # (..., K, M)


@dataclass
class PoseMixture:
    mu: np.ndarray  # (..., M, 3K)
    sigma: np.ndarray  # (..., M)
    pi: np.ndarray  # (..., M)

    @property
    def kernels(self) -> int:
        return self.pi.shape[-1]


@dataclass
class HeadParams:
    w_self: np.ndarray
    w_neigh: np.ndarray
    edge_scores: np.ndarray
    bias: np.ndarray


def elu_plus_one(z):
    z = as_float(z)
    out = np.where(z >= 0, z + 1.0, np.exp(np.minimum(z, 0.0)))
    return np.maximum(out, SIGMA_FLOOR)


def elu_plus_one_grad(z):
    z = as_float(z)
    e = np.exp(np.minimum(z, 0.0))
    d = np.where(z >= 0, 1.0, e)
    return np.where((z < 0) & (e < SIGMA_FLOOR), 0.0, d)


def split_logits(logits, kernels: int):
    logits = as_float(logits)
    if logits.shape[-1] != 5 * kernels:
        raise ShapeError(f"expected {5 * kernels} logits per node, got {logits.shape[-1]}")
    m = kernels
    mu = logits[..., : 3 * m].reshape(logits.shape[:-1] + (m, 3))
    return mu, logits[..., 3 * m : 4 * m], logits[..., 4 * m :]


def node_activations(logits, kernels: int) -> NodeMixture:
    mu_l, pi_l, sig_l = split_logits(logits, kernels)
    return NodeMixture(np.tanh(mu_l), elu_plus_one(sig_l), softmax(pi_l, axis=-1))


def node_head(head: HeadParams, embeddings, mask, kernels: int):
    """Apply the output graph convolution and per-node activations."""
    logits, _ = semgconv_forward(head.w_self, head.w_neigh, head.edge_scores, head.bias, embeddings, mask)
    return logits, node_activations(logits, kernels)


def pose_aggregate(logits, kernels: int) -> PoseMixture:
    """Pose-level mixture: average pi and sigma logits over nodes before
    their activations; concatenate node means per kernel."""
    mu_l, pi_l, sig_l = split_logits(logits, kernels)
    pi = softmax(pi_l.mean(axis=-2), axis=-1)
    sigma = elu_plus_one(sig_l.mean(axis=-2))
    mu = np.tanh(mu_l)  # (..., K, M, 3)
    mu = np.swapaxes(mu, -3, -2)  # (..., M, K, 3)
    mu = mu.reshape(mu.shape[:-2] + (-1,))
    return PoseMixture(mu, sigma, pi)


def gaussian_logpdf_iso(y, mu, sigma, d=None):
    """Log-density of an isotropic Gaussian with scalar std ``sigma``.

    Works on arrays: the last axis of ``y``/``mu`` is the ``d``-dimensional
    event axis and ``sigma`` broadcasts against the remaining axes.
    """
    y = as_float(y)
    mu = as_float(mu)
    sigma = as_float(sigma)
    if np.any(sigma <= 0):
        raise DomainError("sigma must be positive")
    if d is None:
        d = y.shape[-1]
    sq = np.sum((y - mu) ** 2, axis=-1)
    out = -0.5 * d * LOG_2PI - d * np.log(sigma) - sq / (2.0 * sigma**2)
    return float(out) if np.ndim(out) == 0 else out


def _log_softmax(z):
    m = np.max(z, axis=-1, keepdims=True)
    s = z - m
    return s - np.log(np.sum(np.exp(s), axis=-1, keepdims=True))


def _targets(y, k):
    y = as_float(y)
    if y.shape[-1] != 3:
        y = y.reshape(y.shape[:-1] + (k, 3))
    return y


def _node_terms(logits, y, kernels):
    mu_l, pi_l, sig_l = split_logits(logits, kernels)
    k = mu_l.shape[-3]
    y = _targets(y, k)
    if y.shape != mu_l.shape[:-2] + (3,):
        raise ShapeError(f"targets {y.shape} do not match logits {logits.shape}")
    mu = np.tanh(mu_l)
    sigma = elu_plus_one(sig_l)
    diff = y[..., None, :] - mu  # (..., K, M, 3)
    sq = np.sum(diff * diff, axis=-1)
    comp = _log_softmax(pi_l) - 1.5 * LOG_2PI - 3.0 * np.log(sigma) - sq / (2.0 * sigma**2)
    lse = log_sum_exp(comp, axis=-1)  # (..., K)
    if not np.all(np.isfinite(lse)):
        bad = np.argwhere(~np.isfinite(lse))[0]
        raise NumericError(f"non-finite node likelihood at node {int(bad[-1])}", index=int(bad[-1]))
    return lse, (mu_l, pi_l, sig_l, mu, sigma, diff, sq, comp)


def _pose_terms(logits, y, kernels):
    mu_l, pi_l, sig_l = split_logits(logits, kernels)
    k = mu_l.shape[-3]
    y = _targets(y, k)
    if y.shape != mu_l.shape[:-2] + (3,):
        raise ShapeError(f"targets {y.shape} do not match logits {logits.shape}")
    mu = np.tanh(mu_l)
    sig_bar = sig_l.mean(axis=-2)
    sigma = elu_plus_one(sig_bar)  # (..., M)
    diff = y[..., None, :] - mu  # (..., K, M, 3)
    sq = np.sum(diff * diff, axis=(-3, -1))  # (..., M)
    d = 3 * k
    comp = _log_softmax(pi_l.mean(axis=-2)) - 0.5 * d * LOG_2PI - d * np.log(sigma) - sq / (2.0 * sigma**2)
    lse = log_sum_exp(comp, axis=-1)
    if not np.all(np.isfinite(lse)):
        raise NumericError("non-finite pose likelihood")
    return lse, (mu_l, pi_l, sig_l, sig_bar, mu, sigma, diff, sq, comp, d)


def node_nll(logits, y, kernels: int):
    """Sum over nodes of ``-log sum_j pi_j f(y_i | mu_j, sigma_j)``.

    ``logits`` is ``(K, 5M)`` or batched ``(N, K, 5M)``; returns a float or
    a length-N array of per-sample losses.
    """
    lse, _ = _node_terms(logits, y, kernels)
    out = -np.sum(lse, axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def pose_nll(logits, y, kernels: int):
    """``-log sum_j pi_j g(y | mu_j, sigma_j)`` for the pose-level mixture."""
    lse, _ = _pose_terms(logits, y, kernels)
    out = -lse
    return float(out) if np.ndim(out) == 0 else out


def _node_grad(terms, lse):
    mu_l, pi_l, sig_l, mu, sigma, diff, sq, comp = terms
    r = np.exp(comp - lse[..., None])
    pi = softmax(pi_l, axis=-1)
    d_pi = pi - r
    d_mu = -(r / sigma**2)[..., None] * diff * (1.0 - mu * mu)
    d_sigma = -r * (-3.0 / sigma + sq / sigma**3)
    d_sig_l = d_sigma * elu_plus_one_grad(sig_l)
    return _pack(d_mu, d_pi, d_sig_l)


def _pose_grad(terms, lse):
    mu_l, pi_l, sig_l, sig_bar, mu, sigma, diff, sq, comp, d = terms
    k = mu_l.shape[-3]
    r = np.exp(comp - lse[..., None])  # (..., M)
    pi = softmax(pi_l.mean(axis=-2), axis=-1)
    d_pi = np.broadcast_to(((pi - r) / k)[..., None, :], pi_l.shape)
    d_mu = -(r / sigma**2)[..., None, :, None] * diff * (1.0 - mu * mu)
    d_sigma = -r * (-d / sigma + sq / sigma**3)
    d_sig_l = np.broadcast_to((d_sigma * elu_plus_one_grad(sig_bar) / k)[..., None, :], sig_l.shape)
    return _pack(d_mu, d_pi, d_sig_l)


def _pack(d_mu, d_pi, d_sig):
    return np.concatenate([d_mu.reshape(d_mu.shape[:-2] + (-1,)), d_pi, d_sig], axis=-1)


def mixture_loss(logits, y, kernels: int, mode: str = "pose"):
    """Batch-mean NLL and its gradient with respect to the raw logits."""
    logits = as_float(logits)
    batched = logits.ndim == 3
    n = logits.shape[0] if batched else 1
    if mode == "node":
        lse, terms = _node_terms(logits, y, kernels)
        per_sample = -np.sum(lse, axis=-1)
        grad = _node_grad(terms, lse)
    elif mode == "pose":
        lse, terms = _pose_terms(logits, y, kernels)
        per_sample = -lse
        grad = _pose_grad(terms, lse)
    else:
        raise DomainError(f"unknown loss mode {mode!r}")
    return np.sum(per_sample) / n, grad / n


def nll_backward(logits, y, kernels: int, mode: str = "pose"):
    return mixture_loss(logits, y, kernels, mode)[1]


def unflatten_kernel_mean(mu_vec):
    """Inverse of the per-kernel concatenation: 3K vector -> (K, 3)."""
    return np.asarray(mu_vec, dtype=np.float64).reshape(-1, 3)


# -- prediction dump (JSON lines) -------------------------------------------


def prediction_record(sample_id: str, mix: PoseMixture) -> dict:
    return {
        "id": sample_id,
        "pi": [float(v) for v in mix.pi],
        "sigma": [float(v) for v in mix.sigma],
        "mu": [[float(v) for v in row] for row in mix.mu],
    }


def write_predictions(path, ids, mixtures: PoseMixture):
    """Write one JSON line per sample (field order: id, pi, sigma, mu)."""
    with open(path, "w") as fh:
        for n, sid in enumerate(ids):
            mix = PoseMixture(mixtures.mu[n], mixtures.sigma[n], mixtures.pi[n])
            fh.write(json.dumps(prediction_record(sid, mix)) + "\n")


def read_predictions(path) -> dict[str, PoseMixture]:
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            mix = PoseMixture(
                np.asarray(rec["mu"], dtype=np.float64),
                np.asarray(rec["sigma"], dtype=np.float64),
                np.asarray(rec["pi"], dtype=np.float64),
            )
            sid = str(rec["id"])
        except (ValueError, KeyError, TypeError) as exc:
            raise ParseError(f"bad prediction record: {exc}", lineno) from None
        m = mix.pi.shape[0]
        if mix.sigma.shape != (m,) or mix.mu.ndim != 2 or mix.mu.shape[0] != m:
            raise ParseError("inconsistent mixture shapes", lineno)
        if sid in out:
            raise ParseError(f"duplicate prediction id {sid}", lineno)
        out[sid] = mix
    if not out:
        raise ParseError("prediction file is empty")
    return out
