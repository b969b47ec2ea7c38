"""Skeleton topology and pose containers."""

from __future__ import annotations

import hashlib
from collections import deque
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DomainError, ParseError, ShapeError

SKELETON_VERSION = "h36m-16/v1"

# 16-joint Human3.6M subset used by graph lifting models; joint 0 is the root.
H36M_JOINTS = (
    "Hip", "RHip", "RKnee", "RFoot", "LHip", "LKnee", "LFoot", "Spine",
    "Thorax", "Head", "LShoulder", "LElbow", "LWrist", "RShoulder", "RElbow", "RWrist",
)
H36M_PARENTS = (-1, 0, 1, 2, 0, 4, 5, 0, 7, 8, 8, 10, 11, 8, 13, 14)


@dataclass(frozen=True)
class SkeletonGraph:
    node_count: int
    edges: tuple[tuple[int, int], ...]
    node_names: tuple[str, ...]

    def __post_init__(self):
        k = self.node_count
        if k < 1:
            raise DomainError("graph needs at least one node")
        if len(self.node_names) != k:
            raise DomainError(f"{len(self.node_names)} names for {k} nodes")
        seen = set()
        for i, j in self.edges:
            if not (0 <= i < k and 0 <= j < k):
                raise DomainError(f"edge ({i}, {j}) references a node outside 0..{k - 1}")
            if i == j:
                raise DomainError(f"self-loop on node {i}")
            key = (min(i, j), max(i, j))
            if key in seen:
                raise DomainError(f"duplicate edge ({i}, {j})")
            seen.add(key)
        if not _connected(k, self.edges):
            raise DomainError("graph is not connected")

    @property
    def adjacency(self) -> np.ndarray:
        """Binary K x K adjacency with self-loops."""
        a = np.eye(self.node_count)
        for i, j in self.edges:
            a[i, j] = a[j, i] = 1.0
        return a

    @property
    def degrees(self) -> np.ndarray:
        return self.adjacency.sum(axis=1) - 1.0

    def parents(self, root: int = 0) -> list[int]:
        """BFS tree parents from ``root`` (root maps to -1)."""
        nbrs = [[] for _ in range(self.node_count)]
        for i, j in self.edges:
            nbrs[i].append(j)
            nbrs[j].append(i)
        parent = [-2] * self.node_count
        parent[root] = -1
        queue = deque([root])
        while queue:
            u = queue.popleft()
            for v in sorted(nbrs[u]):
                if parent[v] == -2:
                    parent[v] = u
                    queue.append(v)
        return parent

    def canonical_text(self) -> str:
        lines = [f"nodes {self.node_count}"]
        lines += [f"edge {min(e)} {max(e)}" for e in sorted((min(e), max(e)) for e in self.edges)]
        return "\n".join(lines) + "\n"

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.canonical_text().encode()).hexdigest()[:16]

    def permuted(self, perm) -> "SkeletonGraph":
        """Relabel nodes so that new node ``a`` is old node ``perm[a]``."""
        perm = list(perm)
        inv = {old: new for new, old in enumerate(perm)}
        edges = tuple((inv[i], inv[j]) for i, j in self.edges)
        return SkeletonGraph(self.node_count, edges, tuple(self.node_names[p] for p in perm))


def _connected(k, edges) -> bool:
    nbrs = [[] for _ in range(k)]
    for i, j in edges:
        nbrs[i].append(j)
        nbrs[j].append(i)
    seen = {0}
    stack = [0]
    while stack:
        u = stack.pop()
        for v in nbrs[u]:
            if v not in seen:
                seen.add(v)
                stack.append(v)
    return len(seen) == k


def human_skeleton() -> SkeletonGraph:
    edges = tuple((j, p) for j, p in enumerate(H36M_PARENTS) if p >= 0)
    return SkeletonGraph(len(H36M_JOINTS), edges, H36M_JOINTS)


def path_graph(k: int) -> SkeletonGraph:
    return SkeletonGraph(k, tuple((i, i + 1) for i in range(k - 1)), tuple(f"n{i}" for i in range(k)))


def neighbor_mask(g: SkeletonGraph) -> np.ndarray:
    """Entry (i, j) is 1 iff j is a neighbour of i or j == i."""
    return g.adjacency


def parse_graph(text: str) -> SkeletonGraph:
    """Parse the ``nodes <K>`` / ``edge <i> <j>`` override format.

    Blank lines and ``#`` comments are ignored. Duplicate edges (in either
    orientation) are rejected.
    """
    k = None
    edges = []
    seen = set()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        try:
            if parts[0] == "nodes" and len(parts) == 2:
                if k is not None:
                    raise ParseError("repeated nodes header", lineno)
                k = int(parts[1])
                if k < 1:
                    raise ParseError("node count must be positive", lineno)
            elif parts[0] == "edge" and len(parts) == 3:
                if k is None:
                    raise ParseError("edge before nodes header", lineno)
                i, j = int(parts[1]), int(parts[2])
                if not (0 <= i < k and 0 <= j < k) or i == j:
                    raise ParseError(f"invalid edge {i} {j}", lineno)
                key = (min(i, j), max(i, j))
                if key in seen:
                    raise ParseError(f"duplicate edge {i} {j}", lineno)
                seen.add(key)
                edges.append((i, j))
            else:
                raise ParseError(f"unrecognised line {raw!r}", lineno)
        except ValueError as exc:
            if isinstance(exc, ParseError):
                raise
            raise ParseError(f"bad integer in {raw!r}", lineno) from None
    if k is None:
        raise ParseError("missing nodes header")
    try:
        return SkeletonGraph(k, tuple(edges), tuple(f"n{i}" for i in range(k)))
    except DomainError as exc:
        raise ParseError(str(exc)) from None


def load_graph(path) -> SkeletonGraph:
    return parse_graph(Path(path).read_text())


def flatten_pose(pose) -> np.ndarray:
    pose = np.asarray(pose, dtype=np.float64)
    if pose.ndim != 2 or pose.shape[1] not in (2, 3):
        raise ShapeError(f"pose must be K x 2 or K x 3, got {pose.shape}")
    return pose.reshape(-1).copy()


def unflatten_pose(vec, dim: int = 3) -> np.ndarray:
    vec = np.asarray(vec, dtype=np.float64)
    if vec.ndim != 1 or vec.size % dim:
        raise ShapeError(f"vector of length {vec.size} is not a multiple of {dim}")
    return vec.reshape(-1, dim).copy()
