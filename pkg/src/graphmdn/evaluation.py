"""Hypothesis selection, MPJPE / P-MPJPE and per-action reports."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateAlignmentError, JoinError, ShapeError
from .mdn import PoseMixture, pose_aggregate

STRATEGIES = ("highest", "mean", "oracle")
PROTOCOLS = ("MPJPE", "P-MPJPE")


@dataclass
class HypothesisSet:
    mu: np.ndarray  # (M, 3K)
    pi: np.ndarray  # (M,)
    id: str = ""

    @classmethod
    def from_mixture(cls, mix: PoseMixture, sample_id: str = "") -> "HypothesisSet":
        return cls(np.asarray(mix.mu, dtype=np.float64), np.asarray(mix.pi, dtype=np.float64), sample_id)


def select_highest(h: HypothesisSet) -> np.ndarray:
    """Mean of the kernel with the largest pi; ``argmax`` keeps the lowest
    index on ties."""
    return h.mu[int(np.argmax(h.pi))]


def select_mean(h: HypothesisSet) -> np.ndarray:
    return np.asarray(h.pi) @ np.asarray(h.mu)


def oracle_index(h: HypothesisSet, gt) -> int:
    errs = [mpjpe(mu, gt) for mu in h.mu]
    return int(np.argmin(errs))


def select_oracle(h: HypothesisSet, gt) -> np.ndarray:
    """Kernel mean closest to ``gt`` in MPJPE; lowest index on ties."""
    return h.mu[oracle_index(h, gt)]


def _joints(v) -> np.ndarray:
    a = np.asarray(v, dtype=np.float64)
    return a if a.ndim == 2 else a.reshape(-1, 3)


def mpjpe(pred, gt) -> float:
    """Mean Euclidean distance over joints (same units as the inputs)."""
    p, g = _joints(pred), _joints(gt)
    if p.shape != g.shape:
        raise ShapeError(f"pose shapes differ: {p.shape} vs {g.shape}")
    return float(np.mean(np.sqrt(np.sum((p - g) ** 2, axis=1))))


# -- 3x3 SVD by one-sided Jacobi ---------------------------------------------


def svd3(a, sweeps: int = 60, tol: float = 1e-15):
    """SVD of a 3x3 matrix by cyclic one-sided Jacobi rotations.

    Returns ``(u, s, vt)`` with ``s`` sorted descending and ``u``, ``vt``
    orthogonal. Columns of ``a`` are rotated pairwise until mutually
    orthogonal; their norms are the singular values.
    """
    w = np.array(a, dtype=np.float64)
    if w.shape != (3, 3):
        raise ShapeError("svd3 expects a 3 x 3 matrix")
    v = np.eye(3)
    for _ in range(sweeps):
        rotated = False
        for i, j in ((0, 1), (0, 2), (1, 2)):
            alpha = w[:, i] @ w[:, i]
            beta = w[:, j] @ w[:, j]
            gamma = w[:, i] @ w[:, j]
            if abs(gamma) <= tol * math.sqrt(alpha * beta) or gamma == 0.0:
                continue
            rotated = True
            zeta = (beta - alpha) / (2.0 * gamma)
            t = math.copysign(1.0, zeta) / (abs(zeta) + math.sqrt(1.0 + zeta * zeta))
            c = 1.0 / math.sqrt(1.0 + t * t)
            sn = c * t
            wi, wj = w[:, i].copy(), w[:, j].copy()
            w[:, i], w[:, j] = c * wi - sn * wj, sn * wi + c * wj
            vi, vj = v[:, i].copy(), v[:, j].copy()
            v[:, i], v[:, j] = c * vi - sn * vj, sn * vi + c * vj
        if not rotated:
            break
    s = np.sqrt(np.sum(w * w, axis=0))
    order = np.argsort(-s, kind="stable")
    s, w, v = s[order], w[:, order], v[:, order]
    u = np.zeros((3, 3))
    scale = s[0] if s[0] > 0 else 1.0
    for k in range(3):
        if s[k] > 1e-14 * scale:
            u[:, k] = w[:, k] / s[k]
        else:
            u[:, k] = _complete_basis(u, k)
    return u, s, v.T


def _complete_basis(u, k):
    """A unit vector orthogonal to the first ``k`` columns of ``u``."""
    if k == 2:
        return np.cross(u[:, 0], u[:, 1])
    base = u[:, 0] if k == 1 else np.array([1.0, 0.0, 0.0])
    trial = np.eye(3)[int(np.argmin(np.abs(base)))]
    vec = np.cross(base, trial) if k == 1 else trial
    return vec / np.linalg.norm(vec)


# -- Procrustes ---------------------------------------------------------------


@dataclass
class Alignment:
    rotation: np.ndarray
    scale: float
    translation: np.ndarray

    def apply(self, pts) -> np.ndarray:
        return self.scale * _joints(pts) @ self.rotation.T + self.translation


def procrustes_fit(pred, gt, scale: bool = True) -> Alignment:
    """Transform ``x -> s R x + t`` minimising ``sum |s R pred_i + t - gt_i|^2``.

    ``R`` is a proper rotation (reflections are removed by flipping the
    smallest singular direction). With ``scale=False`` the fit is rigid.
    """
    p, g = _joints(pred), _joints(gt)
    if p.shape != g.shape or p.shape[0] < 3:
        raise ShapeError("procrustes needs two matching sets of at least 3 points")
    mp, mg = p.mean(axis=0), g.mean(axis=0)
    pc, gc = p - mp, g - mg
    for name, pts in (("prediction", pc), ("ground truth", gc)):
        sv = svd3(pts.T @ pts)[1]
        if sv[0] <= 0 or sv[1] <= 1e-12 * sv[0]:
            raise DegenerateAlignmentError(f"{name} points are collinear or coincident")
    u, s, vt = svd3(pc.T @ gc)
    d = np.ones(3)
    if np.linalg.det(vt.T @ u.T) < 0:
        d[2] = -1.0
    rot = vt.T @ np.diag(d) @ u.T
    sc = float(np.sum(s * d) / np.sum(pc * pc)) if scale else 1.0
    return Alignment(rot, sc, mg - sc * rot @ mp)


def procrustes_align(pred, gt, scale: bool = True) -> np.ndarray:
    """``pred`` (K x 3 or flat) aligned onto ``gt``; returns K x 3."""
    return procrustes_fit(pred, gt, scale).apply(pred)


def p_mpjpe(pred, gt, scale: bool = True) -> float:
    return mpjpe(procrustes_align(pred, gt, scale), gt)


# -- prediction ---------------------------------------------------------------


def predict(network, inputs, batch_size: int = 1024) -> PoseMixture:
    """Pose mixtures for a batch of flat 2D inputs (inference mode)."""
    x = np.asarray(inputs, dtype=np.float64)
    parts = []
    for start in range(0, x.shape[0], batch_size):
        logits, _ = network.forward(x[start : start + batch_size], training=False)
        parts.append(pose_aggregate(logits, network.kernels))
    return PoseMixture(
        np.concatenate([p.mu for p in parts]),
        np.concatenate([p.sigma for p in parts]),
        np.concatenate([p.pi for p in parts]),
    )


# -- reports ------------------------------------------------------------------


@dataclass
class EvalReport:
    """Errors in millimetres keyed by ``(strategy, protocol)`` then action
    (plus ``"Avg"``)."""

    actions: list
    counts: dict
    table: dict
    per_sample: dict = field(default_factory=dict)  # (strategy, protocol) -> {id: error}

    def value(self, strategy: str, protocol: str, action: str = "Avg") -> float:
        return self.table[(strategy, protocol)][action]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["strategy", "protocol"] + self.actions + ["Avg"])
        w.writerow(["count", ""] + [self.counts[a] for a in self.actions] + [sum(self.counts.values())])
        for (strat, prot), row in self.table.items():
            w.writerow([strat, prot] + [repr(row[a]) for a in self.actions] + [repr(row["Avg"])])
        return buf.getvalue()

    def to_json(self) -> str:
        doc = {
            "actions": self.actions,
            "counts": self.counts,
            "results": [
                {"strategy": s, "protocol": p, "values": row} for (s, p), row in self.table.items()
            ],
        }
        return json.dumps(doc, indent=2)

    def write(self, stem):
        stem = str(stem)
        with open(stem + ".csv", "w") as fh:
            fh.write(self.to_csv())
        with open(stem + ".json", "w") as fh:
            fh.write(self.to_json() + "\n")


def evaluate(predictions: dict, dataset, strategies=STRATEGIES, scale_3d: float | None = None, rigid: bool = False) -> EvalReport:
    """Score pose mixtures against a dataset.

    ``predictions`` maps sample id to a :class:`PoseMixture`. Every id must
    exist in ``dataset``; unknown ids raise :class:`JoinError`. Errors are
    de-normalised with the manifest's 3D scale. Aggregates use exact
    summation over id-sorted samples, so the report does not depend on the
    order of either stream.
    """
    gt = dataset.by_id()
    missing = sorted(set(predictions) - set(gt))
    if missing:
        shown = ", ".join(missing[:10]) + (" ..." if len(missing) > 10 else "")
        raise JoinError(f"{len(missing)} prediction id(s) have no ground truth: {shown}", missing)
    if not predictions:
        raise JoinError("no predictions to evaluate")
    scale = dataset.manifest.normalization.scale_3d if scale_3d is None else scale_3d
    per_sample = {(s, p): {} for s in strategies for p in PROTOCOLS}
    by_action: dict[str, list] = {}
    for sid in sorted(predictions):
        rec = gt[sid]
        h = HypothesisSet.from_mixture(predictions[sid], sid)
        target = rec.target3d * scale
        by_action.setdefault(rec.action, []).append(sid)
        for strat in strategies:
            if strat == "highest":
                pose = select_highest(h)
            elif strat == "mean":
                pose = select_mean(h)
            elif strat == "oracle":
                pose = select_oracle(h, rec.target3d)
            else:
                raise ValueError(f"unknown strategy {strat!r}")
            pose = pose * scale
            per_sample[(strat, "MPJPE")][sid] = mpjpe(pose, target)
            per_sample[(strat, "P-MPJPE")][sid] = p_mpjpe(pose, target, scale=not rigid)
    actions = sorted(by_action)
    counts = {a: len(by_action[a]) for a in actions}
    n = sum(counts.values())
    table = {}
    for key, errs in per_sample.items():
        row = {a: math.fsum(errs[i] for i in by_action[a]) / counts[a] for a in actions}
        row["Avg"] = math.fsum(errs.values()) / n
        table[key] = row
    return EvalReport(actions, counts, table, per_sample)
