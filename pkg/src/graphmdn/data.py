"""Dataset format, normalisation and synthetic inverse-problem corpora.

File format (JSON lines)::

    {"manifest": {...}}                      # first line
    {"id": ..., "subject": ..., "action": ..., "camera": ...,
     "input2d": [2K floats], "target3d": [3K floats]}
    ...

``input2d``/``target3d`` are normalised: 2D is ``(px - offset_2d) /
scale_2d``, 3D is root-relative millimetres divided by ``scale_3d``.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import brentq

from .errors import ConfigError, DataError, DomainError, IncompatibleError, ParseError, UnsupportedError
from .graph import H36M_PARENTS, SkeletonGraph, human_skeleton, path_graph
from .numeric import Rng

TRAIN_SUBJECTS = ("S1", "S5", "S6", "S7", "S8")
TEST_SUBJECTS = ("S9", "S11")
ACTIONS = (
    "Directions", "Discussion", "Eating", "Greeting", "Phoning", "Photo", "Posing", "Purchases",
    "Sitting", "SittingDown", "Smoking", "Waiting", "WalkDog", "Walking", "WalkTogether",
)

# Bone lengths in mm for each child joint of the 16-joint skeleton.
BONE_LENGTHS_MM = (0.0, 133.0, 454.0, 450.0, 133.0, 454.0, 450.0, 233.0, 257.0, 200.0, 150.0, 280.0, 250.0, 150.0, 280.0, 250.0)
# Limbs whose depth sign the mirror generator randomises, in order of use:
# (limb root joint, joints of the limb chain). Flipping a limb reflects the
# chain's depth about its root.
AMBIGUOUS_LIMBS = (
    (4, (5, 6)),  # left leg
    (1, (2, 3)),  # right leg
    (10, (11, 12)),  # left arm
    (13, (14, 15)),  # right arm
)
FIXED_DEPTH_FRACTION = 0.3
AMBIGUOUS_DEPTH_RANGE = (0.5, 0.95)


@dataclass(frozen=True)
class Normalization:
    offset_2d: tuple = (0.0, 0.0)
    scale_2d: float = 1.0
    scale_3d: float = 1.0  # millimetres per normalised unit
    root: int = 0

    def __post_init__(self):
        if not (self.scale_2d > 0 and self.scale_3d > 0):
            raise DomainError("normalisation scales must be positive")


@dataclass
class SampleRecord:
    id: str
    input2d: np.ndarray
    target3d: np.ndarray
    subject: str = ""
    action: str = ""
    camera: str = ""

    def to_json(self) -> str:
        return json.dumps(
            {
                "id": self.id,
                "subject": self.subject,
                "action": self.action,
                "camera": self.camera,
                "input2d": [float(v) for v in self.input2d],
                "target3d": [float(v) for v in self.target3d],
            }
        )


@dataclass
class DatasetManifest:
    skeleton_hash: str
    sample_count: int
    node_count: int
    normalization: Normalization = field(default_factory=Normalization)
    splits: dict = field(default_factory=lambda: {"train": list(TRAIN_SUBJECTS), "test": list(TEST_SUBJECTS)})
    generator: dict | None = None

    def to_dict(self) -> dict:
        return {
            "skeleton_hash": self.skeleton_hash,
            "sample_count": self.sample_count,
            "node_count": self.node_count,
            "normalization": {
                "offset_2d": list(self.normalization.offset_2d),
                "scale_2d": self.normalization.scale_2d,
                "scale_3d": self.normalization.scale_3d,
                "root": self.normalization.root,
            },
            "splits": self.splits,
            "generator": self.generator,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        n = d.get("normalization", {})
        norm = Normalization(
            tuple(float(v) for v in n.get("offset_2d", (0.0, 0.0))),
            float(n.get("scale_2d", 1.0)),
            float(n.get("scale_3d", 1.0)),
            int(n.get("root", 0)),
        )
        return cls(
            str(d["skeleton_hash"]),
            int(d["sample_count"]),
            int(d["node_count"]),
            norm,
            d.get("splits") or {"train": list(TRAIN_SUBJECTS), "test": list(TEST_SUBJECTS)},
            d.get("generator"),
        )


@dataclass
class Dataset:
    records: list
    manifest: DatasetManifest

    def __len__(self):
        return len(self.records)

    @property
    def inputs(self) -> np.ndarray:
        return np.array([r.input2d for r in self.records]).reshape(len(self.records), -1)

    @property
    def targets(self) -> np.ndarray:
        return np.array([r.target3d for r in self.records]).reshape(len(self.records), -1)

    @property
    def ids(self) -> list:
        return [r.id for r in self.records]

    def subset(self, records) -> "Dataset":
        return Dataset(list(records), dataclasses.replace(self.manifest, sample_count=len(records)))

    def split(self, name: str) -> "Dataset":
        """Records whose subject belongs to the ``train``/``test`` tag."""
        subjects = set(self.manifest.splits.get(name, ()))
        if not subjects:
            raise DataError(f"unknown split {name!r}")
        return self.subset([r for r in self.records if r.subject in subjects])

    def by_id(self) -> dict:
        return {r.id: r for r in self.records}


# -- file IO -----------------------------------------------------------------


def save_dataset(path, dataset: Dataset):
    lines = [json.dumps({"manifest": dataset.manifest.to_dict()}, sort_keys=True)]
    lines += [r.to_json() for r in dataset.records]
    Path(path).write_text("\n".join(lines) + "\n")


def _validate_record(rec: SampleRecord, k: int, lineno: int):
    if rec.input2d.shape != (2 * k,) or rec.target3d.shape != (3 * k,):
        raise ParseError(f"record {rec.id}: expected {2 * k} inputs and {3 * k} targets", lineno)
    if not (np.all(np.isfinite(rec.input2d)) and np.all(np.isfinite(rec.target3d))):
        raise ParseError(f"record {rec.id}: non-finite coordinate", lineno)
    if np.max(np.abs(rec.target3d)) > 1.0:
        raise ParseError(f"record {rec.id}: normalised target outside [-1, 1]", lineno)


def load_dataset(path, skeleton: SkeletonGraph | None = None) -> Dataset:
    """Read and validate a JSON-lines dataset.

    With ``skeleton`` the manifest's skeleton hash must match it.
    """
    text = Path(path).read_text()
    lines = text.splitlines()
    if not any(line.strip() for line in lines):
        raise ParseError("dataset file is empty")
    manifest = None
    records = []
    seen = set()
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except ValueError as exc:
            raise ParseError(f"invalid JSON: {exc.msg}", lineno) from None
        if not isinstance(obj, dict):
            raise ParseError("expected a JSON object", lineno)
        if manifest is None:
            if "manifest" not in obj:
                raise ParseError("first line must be the manifest header", lineno)
            try:
                manifest = DatasetManifest.from_dict(obj["manifest"])
            except (KeyError, TypeError, ValueError) as exc:
                raise ParseError(f"bad manifest: {exc}", lineno) from None
            if skeleton is not None and manifest.skeleton_hash != skeleton.hash:
                raise IncompatibleError(
                    f"dataset skeleton {manifest.skeleton_hash} does not match {skeleton.hash}"
                )
            continue
        try:
            rec = SampleRecord(
                str(obj["id"]),
                np.asarray(obj["input2d"], dtype=np.float64),
                np.asarray(obj["target3d"], dtype=np.float64),
                str(obj.get("subject", "")),
                str(obj.get("action", "")),
                str(obj.get("camera", "")),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"bad record: {exc}", lineno) from None
        _validate_record(rec, manifest.node_count, lineno)
        if rec.id in seen:
            raise ParseError(f"duplicate id {rec.id}", lineno)
        seen.add(rec.id)
        records.append(rec)
    if not records:
        raise ParseError("dataset has a manifest but no records")
    if manifest.sample_count != len(records):
        raise ParseError(f"manifest declares {manifest.sample_count} samples, file has {len(records)}")
    return Dataset(records, manifest)


# -- normalisation -------------------------------------------------------------


def fit_normalization(raw2d, raw3d, root: int = 0) -> Normalization:
    """Corpus-wide constants: 3D scale so the root-relative corpus max |coord|
    is exactly 1, 2D offset/scale mapping the corpus bounding box to [-1, 1]."""
    raw2d = np.asarray(raw2d, dtype=np.float64)
    raw3d = np.asarray(raw3d, dtype=np.float64)
    rel = raw3d - raw3d[:, root : root + 1, :]
    scale_3d = float(np.max(np.abs(rel)))
    lo = raw2d.reshape(-1, 2).min(axis=0)
    hi = raw2d.reshape(-1, 2).max(axis=0)
    scale_2d = float(np.max(hi - lo) / 2.0)
    if scale_3d <= 0 or scale_2d <= 0:
        raise DomainError("corpus has zero extent; cannot normalise")
    return Normalization(tuple(float(v) for v in (lo + hi) / 2.0), scale_2d, scale_3d, root)


def normalize(raw2d, raw3d, norm: Normalization):
    """Map one raw pose (K x 2 pixels, K x 3 mm) to normalised flat vectors."""
    raw2d = np.asarray(raw2d, dtype=np.float64)
    raw3d = np.asarray(raw3d, dtype=np.float64)
    if not (np.all(np.isfinite(raw2d)) and np.all(np.isfinite(raw3d))):
        raise DomainError("raw pose contains non-finite values")
    if np.ptp(raw2d, axis=0).max() == 0 or np.ptp(raw3d, axis=0).max() == 0:
        raise DomainError("degenerate pose with zero extent")
    rel = raw3d - raw3d[norm.root]
    x = (raw2d - np.asarray(norm.offset_2d)) / norm.scale_2d
    return x.reshape(-1), (rel / norm.scale_3d).reshape(-1)


def normalize_sample(raw2d, raw3d, norm, sample_id, subject="", action="", camera="") -> SampleRecord:
    x, y = normalize(raw2d, raw3d, norm)
    return SampleRecord(sample_id, x, y, subject, action, camera)


def denormalize_3d(target, norm: Normalization) -> np.ndarray:
    """Normalised pose (flat or K x 3) -> root-relative millimetres."""
    return np.asarray(target, dtype=np.float64) * norm.scale_3d


def denormalize_2d(inputs, norm: Normalization) -> np.ndarray:
    x = np.asarray(inputs, dtype=np.float64).reshape(-1, 2)
    return x * norm.scale_2d + np.asarray(norm.offset_2d)


def dataset_from_raw(raw2d, raw3d, skeleton: SkeletonGraph, ids, subjects, actions, cameras, root=0, generator=None) -> Dataset:
    """Fit corpus normalisation and build a dataset from raw arrays.

    This is the import path for external corpora (e.g. a licensed Human3.6M
    copy converted to arrays of pixels and millimetres).
    """
    norm = fit_normalization(raw2d, raw3d, root)
    records = [
        normalize_sample(raw2d[i], raw3d[i], norm, ids[i], subjects[i], actions[i], cameras[i])
        for i in range(len(ids))
    ]
    manifest = DatasetManifest(skeleton.hash, len(records), skeleton.node_count, norm, generator=generator)
    return Dataset(records, manifest)


# -- synthetic corpora ---------------------------------------------------------


@dataclass(frozen=True)
class SynthSpec:
    kind: str
    count: int
    noise: float = 0.0
    seed: int = 0
    ambiguous_limbs: int = 2
    amplitude: float = 0.3
    test_count: int = 0

    def __post_init__(self):
        if self.kind not in ("bimodal-1d", "mirror-skeleton"):
            raise ConfigError(f"unknown generator kind {self.kind!r}")
        if self.count < 1:
            raise ConfigError("count must be >= 1")
        if self.test_count < 0:
            raise ConfigError("test_count must be >= 0")
        if self.noise < 0:
            raise ConfigError("noise must be >= 0")
        if not 0 <= self.ambiguous_limbs <= len(AMBIGUOUS_LIMBS):
            raise ConfigError(f"ambiguous_limbs must lie in 0..{len(AMBIGUOUS_LIMBS)}")
        if not 0 <= self.amplitude < 1:
            raise ConfigError("amplitude must lie in [0, 1)")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise ConfigError(f"unknown generator keys: {', '.join(unknown)}")
        if "kind" not in d or "count" not in d:
            raise ConfigError("generator spec needs 'kind' and 'count'")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def load(cls, path) -> "SynthSpec":
        try:
            data = json.loads(Path(path).read_text())
        except ValueError as exc:
            raise ConfigError(f"generator spec is not valid JSON: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError("generator spec must be a JSON object")
        return cls.from_dict(data)


def _labels(i: int, spec: SynthSpec):
    if i < spec.count:
        return TRAIN_SUBJECTS[i % len(TRAIN_SUBJECTS)]
    return TEST_SUBJECTS[(i - spec.count) % len(TEST_SUBJECTS)]


def bimodal_forward(t, amplitude=0.3):
    return t + amplitude * np.sin(2.0 * np.pi * t)


def _bimodal_critical_points(amplitude):
    c = -1.0 / (2.0 * np.pi * amplitude) if amplitude > 0 else -np.inf
    if c < -1.0:
        return []
    t1 = math.acos(c) / (2.0 * math.pi)
    return [t1, 1.0 - t1]


def bimodal_roots(x: float, amplitude: float = 0.3, tol: float = 1e-14) -> list:
    """All t in [0, 1] with ``t + amplitude sin(2 pi t) = x``.

    The interval is cut at the critical points of the forward map; each
    monotone piece holds at most one root, found with Brent's method. A
    tangency at a fold counts once.
    """
    cuts = [0.0] + _bimodal_critical_points(amplitude) + [1.0]
    roots = []
    for a, b in zip(cuts[:-1], cuts[1:]):
        fa = bimodal_forward(a, amplitude) - x
        fb = bimodal_forward(b, amplitude) - x
        if abs(fa) <= 1e-15:
            roots.append(a)
        elif abs(fb) <= 1e-15:
            roots.append(b)
        elif fa * fb < 0:
            roots.append(brentq(lambda t: bimodal_forward(t, amplitude) - x, a, b, xtol=tol, rtol=4 * np.finfo(float).eps))
    out = []
    for r in sorted(roots):
        if not out or abs(r - out[-1]) > 1e-9:
            out.append(float(r))
    return out


def bimodal_conditional_mean(x: float, amplitude: float = 0.3) -> float:
    """E[t | x] for uniform t and noise-free x: the squared-error optimum a
    unimodal regressor converges to. Branch weights are ``1 / |f'(t)|``."""
    roots = bimodal_roots(x, amplitude)
    if not roots:
        raise DomainError(f"x = {x} is outside the range of the forward map")
    w = [1.0 / max(abs(1.0 + 2.0 * np.pi * amplitude * math.cos(2.0 * np.pi * t)), 1e-300) for t in roots]
    return float(np.dot(w, roots) / np.sum(w))


def synth_bimodal(spec: SynthSpec) -> Dataset:
    """Scalar inverse problem on a 2-node graph.

    Node 0 carries the observation ``x = t + a sin(2 pi t) + noise`` as its
    2D input and the latent ``t`` as the first target coordinate; node 1 is
    a fixed anchor at the origin.
    """
    graph = path_graph(2)
    rng = Rng(spec.seed).stream(0)
    n = spec.count + spec.test_count
    t = rng.uniform(0.0, 1.0, n)
    eps = rng.normal(0.0, 1.0, n) * spec.noise
    x = bimodal_forward(t, spec.amplitude) + eps
    records = []
    for i in range(n):
        inp = np.array([x[i], 0.0, 0.0, 0.0])
        tgt = np.array([t[i], 0.0, 0.0, 0.0, 0.0, 0.0])
        records.append(SampleRecord(f"bimodal-{i:06d}", inp, tgt, _labels(i, spec), "bimodal", "synthetic"))
    manifest = DatasetManifest(graph.hash, n, 2, Normalization(), generator=spec.to_dict())
    return Dataset(records, manifest)


def ambiguous_limbs(spec_or_count) -> tuple:
    count = spec_or_count.ambiguous_limbs if isinstance(spec_or_count, SynthSpec) else int(spec_or_count)
    return AMBIGUOUS_LIMBS[:count]


def ambiguous_joints(spec_or_count) -> tuple:
    """Joints whose depth is sign-ambiguous, with the root of their limb."""
    return tuple((root, j) for root, chain in ambiguous_limbs(spec_or_count) for j in chain)


def _mirror_pose(rng, limbs):
    """One random pose in mm.

    Every bone gets a random in-plane heading. Its depth component is
    ``+0.3 * length``, except inside an ambiguous limb, where each bone's
    depth fraction is drawn from [0.5, 0.95] and one random sign is shared
    by the whole chain.
    """
    k = len(H36M_PARENTS)
    limb_of = {j: i for i, (_, chain) in enumerate(limbs) for j in chain}
    signs = [1.0 if rng.random() < 0.5 else -1.0 for _ in limbs]
    pose = np.zeros((k, 3))
    for j in range(1, k):
        length = BONE_LENGTHS_MM[j]
        heading = rng.uniform(0.0, 2.0 * np.pi)
        if j in limb_of:
            frac = rng.uniform(*AMBIGUOUS_DEPTH_RANGE)
            sign = signs[limb_of[j]]
        else:
            frac, sign = FIXED_DEPTH_FRACTION, 1.0
        planar = length * math.sqrt(1.0 - frac * frac)
        bone = np.array([planar * math.cos(heading), planar * math.sin(heading), sign * frac * length])
        pose[j] = pose[H36M_PARENTS[j]] + bone
    return pose


def synth_mirror_skeleton(spec: SynthSpec) -> Dataset:
    """Random skeleton poses under orthographic projection along depth.

    Every 2D input is consistent with exactly ``2 ** ambiguous_limbs`` 3D
    poses (one per depth-sign pattern of the ambiguous limbs).
    Gaussian ``noise`` (in normalised units) is added to the 2D input only.
    """
    graph = human_skeleton()
    limbs = ambiguous_limbs(spec)
    rng = Rng(spec.seed)
    pose_rng, noise_rng, label_rng = rng.stream(0), rng.stream(1), rng.stream(2)
    n = spec.count + spec.test_count
    raw3d = np.stack([_mirror_pose(pose_rng, limbs) for _ in range(n)])
    raw2d = raw3d[:, :, :2].copy()
    norm = fit_normalization(raw2d, raw3d)
    actions = label_rng.integers(0, len(ACTIONS), n)
    records = []
    for i in range(n):
        x, y = normalize(raw2d[i], raw3d[i], norm)
        if spec.noise > 0:
            x = x + noise_rng.normal(0.0, spec.noise, x.shape)
        records.append(SampleRecord(f"mirror-{i:06d}", x, y, _labels(i, spec), ACTIONS[actions[i]], "synthetic"))
    manifest = DatasetManifest(graph.hash, n, graph.node_count, norm, generator=spec.to_dict())
    return Dataset(records, manifest)


def synthesize(spec: SynthSpec) -> Dataset:
    if spec.kind == "bimodal-1d":
        return synth_bimodal(spec)
    return synth_mirror_skeleton(spec)


def oracle_posterior(sample: SampleRecord, spec: SynthSpec | dict | None) -> list:
    """Every noise-free target consistent with the sample's 2D input.

    Mirror corpus: all depth-sign patterns of the ambiguous limbs applied
    to the stored target (2 ** L poses, stored sign pattern first).
    Bimodal corpus: one target per root of the forward map at the observed x.
    """
    if isinstance(spec, dict):
        spec = SynthSpec.from_dict(spec)
    if spec is None:
        raise UnsupportedError(f"sample {sample.id} was not produced by a synthetic generator")
    if spec.kind == "bimodal-1d":
        out = []
        for t in bimodal_roots(float(sample.input2d[0]), spec.amplitude):
            v = np.zeros(6)
            v[0] = t
            out.append(v)
        return out
    pose = np.asarray(sample.target3d, dtype=np.float64).reshape(-1, 3)
    limbs = ambiguous_limbs(spec)
    out = []
    for pattern in range(2 ** len(limbs)):
        p = pose.copy()
        for bit, (root, chain) in enumerate(limbs):
            if pattern >> bit & 1:
                idx = list(chain)
                p[idx, 2] = 2.0 * p[root, 2] - p[idx, 2]
        out.append(p.reshape(-1))
    return out


def ambiguous_relative_depth(poses, spec: SynthSpec) -> np.ndarray:
    """Depth of each ambiguous joint relative to its limb root, shape (..., J)."""
    p = np.asarray(poses, dtype=np.float64)
    p = p.reshape(p.shape[:-1] + (-1, 3))
    pairs = ambiguous_joints(spec)
    joints = [j for _, j in pairs]
    roots = [r for r, _ in pairs]
    return p[..., joints, 2] - p[..., roots, 2]
