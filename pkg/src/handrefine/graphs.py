"""Joint-skeleton and mesh graphs, stored as dense symmetric 0/1 adjacency."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Graph:
    adjacency: np.ndarray

    def __post_init__(self) -> None:
        a = np.asarray(self.adjacency)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ValueError(f"adjacency must be square, got {a.shape}")
        if not np.array_equal(a, a.T):
            raise ValueError("adjacency must be symmetric")
        if np.any(np.diag(a)):
            raise ValueError("adjacency must have a zero diagonal")
        object.__setattr__(self, "adjacency", (a != 0).astype(np.float64))

    @property
    def n(self) -> int:
        return self.adjacency.shape[0]

    def with_self_loops(self) -> np.ndarray:
        return self.adjacency + np.eye(self.n)

    def neighborhood_mask(self) -> np.ndarray:
        return self.with_self_loops() > 0

    def edges(self) -> set[tuple[int, int]]:
        i, j = np.nonzero(np.triu(self.adjacency))
        return {(int(a), int(b)) for a, b in zip(i, j)}

    def degree(self) -> np.ndarray:
        return self.adjacency.sum(axis=1).astype(np.int64)

    def is_connected(self) -> bool:
        if self.n == 0:
            return True
        seen = np.zeros(self.n, dtype=bool)
        seen[0] = True
        queue = deque([0])
        while queue:
            u = queue.popleft()
            for w in np.flatnonzero(self.adjacency[u]):
                if not seen[w]:
                    seen[w] = True
                    queue.append(w)
        return bool(seen.all())


def _from_edges(n: int, edges) -> Graph:
    a = np.zeros((n, n))
    for i, j in edges:
        if i != j:
            a[i, j] = a[j, i] = 1.0
    return Graph(a)


def adjacency_from_parents(parents, fingertip_attach=()) -> Graph:
    """Skeleton graph: joint-parent edges plus (tip node, distal joint) pairs.

    Tip node ids are absolute, so with K joints and five tips the tip nodes
    are usually K..K+4.
    """
    parents = np.asarray(parents)
    attach = [tuple(int(x) for x in pair) for pair in fingertip_attach]
    n = max([parents.shape[0]] + [max(p) + 1 for p in attach])
    for tip, joint in attach:
        if min(tip, joint) < 0:
            raise ValueError(f"invalid fingertip attachment ({tip}, {joint})")
    edges = [(j, int(p)) for j, p in enumerate(parents) if p >= 0]
    return _from_edges(n, edges + attach)


def adjacency_from_faces(faces, n: int) -> Graph:
    faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    bad = np.flatnonzero(((faces < 0) | (faces >= n)).any(axis=1))
    if bad.size:
        raise ValueError(f"face {int(bad[0])} {faces[bad[0]].tolist()} has an index outside [0, {n})")
    a = np.zeros((n, n))
    for u, w in ((0, 1), (1, 2), (2, 0)):
        a[faces[:, u], faces[:, w]] = 1.0
        a[faces[:, w], faces[:, u]] = 1.0
    np.fill_diagonal(a, 0.0)
    return Graph(a)


def normalize_adjacency(g: Graph) -> np.ndarray:
    """Symmetric normalization D^-1/2 (A + I) D^-1/2 used by the plain GCN layer."""
    if g.n > 1 and np.any(g.degree() == 0):
        raise ValueError(f"node {int(np.flatnonzero(g.degree() == 0)[0])} is isolated")
    a = g.with_self_loops()
    d = 1.0 / np.sqrt(a.sum(axis=1))
    return a * d[:, None] * d[None, :]


def hand_joint_graph(parents, tip_joints) -> Graph:
    """Skeleton graph over articulated joints followed by one node per fingertip."""
    k = len(parents)
    return adjacency_from_parents(parents, [(k + i, int(j)) for i, j in enumerate(tip_joints)])
