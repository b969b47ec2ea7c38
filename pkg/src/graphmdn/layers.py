"""Differentiable graph layers with hand-written backward passes.

Every forward function takes node features shaped ``(N, K, H)`` (a batch of
``N`` graphs with ``K`` nodes) and returns ``(output, cache)``; the matching
backward function consumes the cache and an upstream gradient and returns
the input gradient plus a dict of parameter gradients.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, ShapeError
from .numeric import as_float


def _batched(x, width=None):
    x = as_float(x)
    squeeze = x.ndim == 2
    if squeeze:
        x = x[None]
    if x.ndim != 3:
        raise ShapeError(f"node features must be (K, H) or (N, K, H), got {x.shape}")
    if width is not None and x.shape[2] != width:
        raise ShapeError(f"feature width {x.shape[2]} does not match layer width {width}")
    return x, squeeze


def _linear(x, w):
    """Apply ``w`` (out x in) to the last axis of a (N, K, in) array."""
    n, k, h = x.shape
    return (x.reshape(n * k, h) @ w.T).reshape(n, k, w.shape[0])


def _linear_grad_w(dout, x):
    n, k, _ = x.shape
    return dout.reshape(n * k, -1).T @ x.reshape(n * k, -1)


def _node_mix(alpha, x):
    """``out[n] = alpha @ x[n]`` for every graph in the batch, as one GEMM."""
    n, k, h = x.shape
    flat = x.transpose(1, 0, 2).reshape(k, n * h)
    return (alpha @ flat).reshape(alpha.shape[0], n, h).transpose(1, 0, 2)


def neighbours(mask) -> np.ndarray:
    """Boolean neighbour matrix: ``mask`` with the diagonal cleared."""
    nbr = np.asarray(mask) > 0
    np.fill_diagonal(nbr, False)
    return nbr


def masked_edge_softmax(edge_scores, mask, nbr=None):
    """Row softmax of ``edge_scores`` over each node's neighbours.

    The diagonal and every entry outside ``mask`` get weight exactly zero;
    rows with no neighbours are all zero. ``nbr`` may carry a precomputed
    :func:`neighbours` matrix.
    """
    if nbr is None:
        nbr = neighbours(mask)
    s = np.where(nbr, edge_scores, -np.inf)
    row_max = s.max(axis=1, keepdims=True)
    row_max[row_max == -np.inf] = 0.0
    e = np.exp(s - row_max)
    z = e.sum(axis=1, keepdims=True)
    z[z == 0] = 1.0
    return e / z


def semgconv_forward(w_self, w_neigh, edge_scores, bias, x, mask, nbr=None):
    """Semantic graph convolution.

    ``out_i = W_self h_i + sum_{j in N(i)} alpha_ij W_neigh h_j + bias`` with
    ``alpha_i.`` the masked softmax of ``edge_scores`` over node i's
    neighbours (self excluded). ``bias`` may be None.
    """
    x, squeeze = _batched(x, w_self.shape[1])
    k = x.shape[1]
    if mask.shape != (k, k) or edge_scores.shape != (k, k):
        raise ShapeError(f"mask/edge scores must be {k} x {k}")
    alpha = masked_edge_softmax(edge_scores, mask, nbr)
    xn = _linear(x, w_neigh)
    out = _linear(x, w_self) + _node_mix(alpha, xn)
    if bias is not None:
        out = out + bias
    cache = (x, xn, alpha, w_self, w_neigh, bias is not None, squeeze)
    return (out[0] if squeeze else out), cache


def semgconv_backward(cache, dout):
    x, xn, alpha, w_self, w_neigh, has_bias, squeeze = cache
    dout = dout[None] if squeeze else dout
    n, k, _ = x.shape
    grads = {"w_self": _linear_grad_w(dout, x)}
    dxn = _node_mix(alpha.T, dout)
    grads["w_neigh"] = _linear_grad_w(dxn, x)
    d_flat = dout.transpose(1, 0, 2).reshape(k, -1)
    xn_flat = xn.transpose(1, 0, 2).reshape(k, -1)
    dalpha = d_flat @ xn_flat.T
    grads["edge_scores"] = alpha * (dalpha - np.sum(alpha * dalpha, axis=1, keepdims=True))
    if has_bias:
        grads["bias"] = dout.sum(axis=(0, 1))
    dx = _linear(dout, w_self.T) + _linear(dxn, w_neigh.T)
    return (dx[0] if squeeze else dx), grads


def nonlocal_forward(theta, phi, g, out_w, x):
    """Residual non-local layer: ``y = x + out(A g(x))`` with
    ``A = softmax_rows(theta(x) phi(x)^T / sqrt(H))``."""
    x, squeeze = _batched(x, theta.shape[1])
    h = x.shape[2]
    q = _linear(x, theta)
    kk = _linear(x, phi)
    v = _linear(x, g)
    scale = 1.0 / np.sqrt(h)
    s = np.matmul(q, kk.transpose(0, 2, 1)) * scale
    s = s - s.max(axis=2, keepdims=True)
    a = np.exp(s)
    a /= a.sum(axis=2, keepdims=True)
    z = np.matmul(a, v)
    y = x + _linear(z, out_w)
    cache = (x, q, kk, v, a, z, theta, phi, g, out_w, scale, squeeze)
    return (y[0] if squeeze else y), cache


def nonlocal_backward(cache, dy):
    x, q, kk, v, a, z, theta, phi, g, out_w, scale, squeeze = cache
    dy = dy[None] if squeeze else dy
    grads = {"out": _linear_grad_w(dy, z)}
    dz = _linear(dy, out_w.T)
    da = np.matmul(dz, v.transpose(0, 2, 1))
    dv = np.matmul(a.transpose(0, 2, 1), dz)
    ds = a * (da - np.sum(a * da, axis=2, keepdims=True)) * scale
    dq = np.matmul(ds, kk)
    dk = np.matmul(ds.transpose(0, 2, 1), q)
    grads["theta"] = _linear_grad_w(dq, x)
    grads["phi"] = _linear_grad_w(dk, x)
    grads["g"] = _linear_grad_w(dv, x)
    dx = dy + _linear(dq, theta.T) + _linear(dk, phi.T) + _linear(dv, g.T)
    return (dx[0] if squeeze else dx), grads


def batchnorm_forward(gamma, beta, running_mean, running_var, x, training, eps=1e-5):
    """Per-feature normalisation over the batch and node axes.

    Returns ``(out, cache)``; in training mode ``cache`` also carries the
    batch mean and variance for the running-statistics update. The running
    variance tracks the same biased estimate used to normalise, so once the
    running values settle, inference reproduces training-mode outputs.
    """
    x, squeeze = _batched(x, gamma.shape[0])
    if training:
        count = x.shape[0] * x.shape[1]
        if count < 2:
            raise ConfigError("batch norm in training mode needs more than one value per feature")
        mean = x.sum(axis=(0, 1)) / count
        xc = x - mean
        var = np.sum(xc * xc, axis=(0, 1)) / count
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv_std
        stats = (mean, var)
    else:
        inv_std = 1.0 / np.sqrt(running_var + eps)
        xhat = (x - running_mean) * inv_std
        stats = None
    out = gamma * xhat + beta
    cache = (xhat, inv_std, gamma, training, stats, squeeze)
    return (out[0] if squeeze else out), cache


def batchnorm_backward(cache, dout):
    xhat, inv_std, gamma, training, _, squeeze = cache
    dout = dout[None] if squeeze else dout
    grads = {"gamma": np.sum(dout * xhat, axis=(0, 1)), "beta": dout.sum(axis=(0, 1))}
    dxhat = dout * gamma
    if training:
        count = xhat.shape[0] * xhat.shape[1]
        dx = inv_std * (
            dxhat - dxhat.sum(axis=(0, 1)) / count - xhat * (np.sum(dxhat * xhat, axis=(0, 1)) / count)
        )
    else:
        dx = dxhat * inv_std
    return (dx[0] if squeeze else dx), grads


def update_running_stats(running_mean, running_var, stats, momentum=0.1):
    mean, var = stats
    running_mean *= 1.0 - momentum
    running_mean += momentum * mean
    running_var *= 1.0 - momentum
    running_var += momentum * var


def relu_forward(x):
    return np.maximum(x, 0.0), x > 0


def relu_backward(mask, dout):
    return dout * mask


def dropout_mask(rng: np.random.Generator, shape, rate: float):
    """Inverted-dropout mask: kept units are scaled by 1 / (1 - rate)."""
    keep = rng.random(shape) >= rate
    return keep / (1.0 - rate)
