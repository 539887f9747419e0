"""Joint graph, hop-distance matrix and root-distance groups."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._accel import kernels
from .errors import DisconnectedGraph, DuplicateEdge, IndexOutOfRange, SelfLoop

H36M_JOINT_NAMES = (
    "pelvis",
    "r_hip",
    "r_knee",
    "r_ankle",
    "l_hip",
    "l_knee",
    "l_ankle",
    "spine",
    "thorax",
    "neck",
    "head",
    "l_shoulder",
    "l_elbow",
    "l_wrist",
    "r_shoulder",
    "r_elbow",
    "r_wrist",
)

H36M_EDGES = (
    (0, 1), (1, 2), (2, 3),
    (0, 4), (4, 5), (5, 6),
    (0, 7), (7, 8), (8, 9), (9, 10),
    (8, 11), (11, 12), (12, 13),
    (8, 14), (14, 15), (15, 16),
)  # fmt: skip

DEFAULT_NUM_GROUPS = 5


@dataclass(frozen=True)
class Skeleton:
    num_joints: int
    edges: tuple[tuple[int, int], ...]
    root: int = 0
    names: tuple[str, ...] | None = None

    def neighbors_csr(self) -> tuple[np.ndarray, np.ndarray]:
        adj: list[list[int]] = [[] for _ in range(self.num_joints)]
        for a, b in self.edges:
            adj[a].append(b)
            adj[b].append(a)
        indptr = np.zeros(self.num_joints + 1, dtype=np.int64)
        indptr[1:] = np.cumsum([len(n) for n in adj])
        indices = np.array([v for n in adj for v in n], dtype=np.int64)
        return indptr, indices

    def parents(self) -> np.ndarray:
        """Parent index per joint in the BFS tree rooted at ``root`` (root maps to -1)."""
        indptr, indices = self.neighbors_csr()
        parent = np.full(self.num_joints, -2, dtype=np.int64)
        parent[self.root] = -1
        queue = [self.root]
        for u in queue:
            for v in indices[indptr[u] : indptr[u + 1]]:
                if parent[v] == -2:
                    parent[v] = u
                    queue.append(int(v))
        return parent

    def to_json(self) -> dict:
        return {"num_joints": self.num_joints, "root": self.root, "edges": [list(e) for e in self.edges]}


def build_skeleton(
    num_joints: int,
    edges,
    root: int = 0,
    names=None,
) -> Skeleton:
    """Validate and freeze a joint graph.

    Raises IndexOutOfRange, SelfLoop, DuplicateEdge or DisconnectedGraph.
    """
    if num_joints < 1:
        raise IndexOutOfRange(f"num_joints must be positive, got {num_joints}")
    if not 0 <= root < num_joints:
        raise IndexOutOfRange(f"root {root} outside [0, {num_joints})")
    seen: set[tuple[int, int]] = set()
    clean = []
    for a, b in edges:
        a, b = int(a), int(b)
        if not (0 <= a < num_joints and 0 <= b < num_joints):
            raise IndexOutOfRange(f"edge ({a}, {b}) outside [0, {num_joints})")
        if a == b:
            raise SelfLoop(f"self loop on joint {a}")
        key = (min(a, b), max(a, b))
        if key in seen:
            raise DuplicateEdge(f"duplicate edge {key}")
        seen.add(key)
        clean.append((a, b))
    if names is not None and len(names) != num_joints:
        raise IndexOutOfRange("names must have one entry per joint")
    sk = Skeleton(num_joints, tuple(clean), root, tuple(names) if names is not None else None)
    if np.any(sk.parents() == -2):
        raise DisconnectedGraph("skeleton graph is not connected")
    return sk


def h36m_skeleton() -> Skeleton:
    """Canonical 17-joint Human3.6M tree rooted at the pelvis."""
    return build_skeleton(17, H36M_EDGES, root=0, names=H36M_JOINT_NAMES)


def load_skeleton(path: str | Path) -> Skeleton:
    doc = json.loads(Path(path).read_text())
    return build_skeleton(doc["num_joints"], doc["edges"], doc.get("root", 0), doc.get("names"))


def distance_matrix(s: Skeleton) -> np.ndarray:
    """All-pairs hop counts by BFS from every joint, as an int64 J x J array."""
    indptr, indices = s.neighbors_csr()
    return kernels.bfs_all_pairs(s.num_joints, indptr, indices)


def assign_groups(d: np.ndarray, root: int, num_groups: int = DEFAULT_NUM_GROUPS) -> np.ndarray:
    """Group index per joint: hop distance to ``root``, clamped to the last group."""
    if num_groups < 1:
        raise ValueError("num_groups must be >= 1")
    return np.minimum(np.asarray(d)[:, root], num_groups - 1).astype(np.int64)
