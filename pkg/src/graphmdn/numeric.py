"""Numeric substrate: float64 linear algebra helpers, stable special
functions, splittable seeded randomness and a finite-difference gradient
checker."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import DomainError, NumericError, ShapeError

DTYPE = np.float64


def as_float(a) -> np.ndarray:
    """Array view of ``a`` keeping any floating dtype (float64 otherwise)."""
    if isinstance(a, np.ndarray) and a.dtype.kind == "f":
        return a
    a = np.asarray(a)
    if a.dtype.kind != "f":
        a = a.astype(DTYPE)
    return a


def as_matrix(a) -> np.ndarray:
    m = np.asarray(a, dtype=DTYPE)
    if m.ndim == 1:
        m = m[:, None]
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-d matrix, got shape {m.shape}")
    return m


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def log_sum_exp(v, axis=None):
    """``log(sum(exp(v)))`` evaluated with a max shift.

    With ``axis=None`` the input must be a nonempty vector and a float is
    returned; otherwise the reduction runs along ``axis``.
    """
    v = as_float(v)
    if v.size == 0:
        raise DomainError("log_sum_exp of an empty vector")
    if axis is None:
        m = np.max(v)
        if not np.isfinite(m):
            return float(m)
        return float(m + np.log(np.sum(np.exp(v - m))))
    m = np.max(v, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    out = m + np.log(np.sum(np.exp(v - m), axis=axis, keepdims=True))
    return np.squeeze(out, axis=axis)


def softmax(v, axis=-1) -> np.ndarray:
    v = as_float(v)
    if v.size == 0:
        raise DomainError("softmax of an empty vector")
    e = np.exp(v - np.max(v, axis=axis, keepdims=True))
    return e / np.sum(e, axis=axis, keepdims=True)


def xavier_uniform(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_out, fan_in))


class Rng:
    """Seeded counter-based generator (Philox) with independent streams.

    ``Rng(seed).stream(i)`` returns a generator whose draws are independent
    of every other stream index, so data shuffling and weight init never
    share state.
    """

    def __init__(self, seed: int):
        if seed < 0 or seed >= 2**64:
            raise DomainError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = int(seed)

    def stream(self, index: int) -> np.random.Generator:
        ss = np.random.SeedSequence(self.seed, spawn_key=(int(index),))
        return np.random.Generator(np.random.Philox(ss))

    @staticmethod
    def get_state(gen: np.random.Generator) -> dict:
        return gen.bit_generator.state

    @staticmethod
    def from_state(state: dict) -> np.random.Generator:
        bg = np.random.Philox()
        bg.state = state
        return np.random.Generator(bg)


@dataclass
class GradCheckReport:
    analytic: np.ndarray
    numeric: np.ndarray
    max_rel_error: float
    argmax: int
    names: Sequence[str] | None = field(default=None, repr=False)

    @property
    def worst_name(self) -> str:
        if self.names is None:
            return f"param[{self.argmax}]"
        return self.names[self.argmax]

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_rel_error < tol


def relative_errors(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return np.abs(analytic - numeric) / denom


def grad_check(
    loss_fn: Callable[[np.ndarray], float],
    params,
    epsilon: float = 1e-5,
    analytic: np.ndarray | None = None,
    grad_fn: Callable[[np.ndarray], np.ndarray] | None = None,
    indices: Sequence[int] | None = None,
    names: Sequence[str] | None = None,
    precise_loss_fn: Callable[[np.ndarray], float] | None = None,
) -> GradCheckReport:
    """Compare an analytic gradient against central differences.

    Supply the analytic gradient either directly or as ``grad_fn(params)``.
    ``indices`` restricts the check to a subset of coordinates; unchecked
    coordinates are reported with numeric = analytic.

    ``precise_loss_fn`` (same loss, evaluated in extended precision) is used
    to redo any central difference whose float64 round-off bound,
    ``4 ulp(f) / 2 eps``, could exceed 1e-5 of the estimate itself. The
    decision looks only at the numeric side.
    """
    p = np.array(params, dtype=DTYPE)
    if analytic is None:
        if grad_fn is None:
            raise DomainError("grad_check needs an analytic gradient or grad_fn")
        analytic = grad_fn(p.copy())
    analytic = np.asarray(analytic, dtype=DTYPE)
    if analytic.shape != p.shape:
        raise ShapeError(f"gradient shape {analytic.shape} != params shape {p.shape}")
    numeric = analytic.copy()
    idx = range(p.size) if indices is None else indices

    def central(fn, i):
        orig = p[i]
        p[i] = orig + epsilon
        fp = fn(p)
        p[i] = orig - epsilon
        fm = fn(p)
        p[i] = orig
        if not (math.isfinite(float(fp)) and math.isfinite(float(fm))):
            raise NumericError(f"non-finite loss while perturbing parameter {i}", index=i)
        # fn may return an extended-precision scalar; difference before rounding.
        return (fp - fm) / (2.0 * epsilon), max(abs(float(fp)), abs(float(fm)))

    for i in idx:
        numeric[i], scale = central(loss_fn, i)
        if precise_loss_fn is not None:
            roundoff = 4.0 * np.spacing(scale) / (2.0 * epsilon)
            if roundoff > 1e-5 * max(abs(numeric[i]), 1e-8):
                numeric[i] = central(precise_loss_fn, i)[0]
    rel = relative_errors(analytic, numeric)
    k = int(np.argmax(rel)) if rel.size else 0
    return GradCheckReport(analytic, numeric, float(rel[k]) if rel.size else 0.0, k, names)
