"""Skeleton topology: joint tree, neighbour tables and the pooling hierarchy."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


class TopologyError(ValueError):
    pass


@dataclass(frozen=True)
class SkeletonTopology:
    """A joint tree rooted at joint 0 plus a hierarchy of joint groupings.

    ``pooling_tree[l]`` lists ``(new_index, source_indices)`` pairs that
    partition the joints of level ``l`` (level 0 is the full skeleton).
    """

    joint_count: int
    edges: tuple[tuple[int, int], ...]
    pooling_tree: tuple[tuple[tuple[int, tuple[int, ...]], ...], ...] = ()
    joint_names: tuple[str, ...] = field(default=())

    def __post_init__(self):
        _validate_tree(self.joint_count, self.edges)
        n = self.joint_count
        for depth, level in enumerate(self.pooling_tree):
            seen = sorted(j for _, group in level for j in group)
            if seen != list(range(n)):
                raise TopologyError(f"pooling level {depth} does not partition {n} joints: {seen}")
            if sorted(idx for idx, _ in level) != list(range(len(level))):
                raise TopologyError(f"pooling level {depth} output indices must be 0..{len(level) - 1}")
            n = len(level)

    def neighbors(self, j: int) -> list[int]:
        """Tree-adjacent joints of ``j`` (parent and children), self excluded."""
        out = [c for p, c in self.edges if p == j] + [p for p, c in self.edges if c == j]
        return sorted(out)

    def neighbor_table(self) -> list[list[int]]:
        return [self.neighbors(j) for j in range(self.joint_count)]

    def adjacency(self) -> np.ndarray:
        a = np.zeros((self.joint_count, self.joint_count))
        for p, c in self.edges:
            a[p, c] = a[c, p] = 1.0
        return a

    def mean_neighbor_matrix(self) -> np.ndarray:
        """Row-normalised adjacency; rows of isolated joints are all zero."""
        a = self.adjacency()
        deg = a.sum(axis=1, keepdims=True)
        return np.divide(a, deg, out=np.zeros_like(a), where=deg > 0)

    def pooled(self, level: int = 0) -> "SkeletonTopology":
        """Topology after applying pooling level ``level``.

        Two groups are adjacent when any of their members are. Remaining
        pooling levels carry over.
        """
        groups = self.groups(level)
        owner = {j: g for g, members in enumerate(groups) for j in members}
        edges = set()
        for p, c in self.edges:
            gp, gc = owner[p], owner[c]
            if gp != gc:
                edges.add((min(gp, gc), max(gp, gc)))
        root = owner[0]
        # re-root at the group holding joint 0 and orient edges away from it
        oriented = _orient(len(groups), sorted(edges), root)
        if root != 0:
            raise TopologyError("pooling must keep joint 0 in group 0")
        return SkeletonTopology(len(groups), tuple(oriented), self.pooling_tree[level + 1:])

    def groups(self, level: int = 0) -> list[tuple[int, ...]]:
        if level >= len(self.pooling_tree):
            raise TopologyError(f"pooling level {level} undefined (tree has {len(self.pooling_tree)})")
        return [tuple(src) for _, src in sorted(self.pooling_tree[level])]

    def pool_matrix(self, level: int = 0) -> np.ndarray:
        """(J_out, J_in) matrix averaging each group's members."""
        groups = self.groups(level)
        m = np.zeros((len(groups), self.joint_count))
        for g, members in enumerate(groups):
            m[g, list(members)] = 1.0 / len(members)
        return m

    def unpool_matrix(self, level: int = 0) -> np.ndarray:
        """(J_in, J_out) matrix copying each pooled joint back to its members."""
        groups = self.groups(level)
        m = np.zeros((self.joint_count, len(groups)))
        for g, members in enumerate(groups):
            m[list(members), g] = 1.0
        return m

    def to_dict(self) -> dict:
        return {
            "joint_count": self.joint_count,
            "edges": [list(e) for e in self.edges],
            "pooling_tree": [[[i, list(src)] for i, src in level] for level in self.pooling_tree],
            "joint_names": list(self.joint_names),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SkeletonTopology":
        return cls(
            d["joint_count"],
            tuple(tuple(e) for e in d["edges"]),
            tuple(tuple((i, tuple(src)) for i, src in level) for level in d["pooling_tree"]),
            tuple(d.get("joint_names", ())),
        )


def _validate_tree(n: int, edges: Sequence[tuple[int, int]]) -> None:
    if n < 1:
        raise TopologyError("skeleton needs at least one joint")
    if len(edges) != n - 1:
        raise TopologyError(f"a tree on {n} joints has {n - 1} edges, got {len(edges)}")
    adj: dict[int, list[int]] = {j: [] for j in range(n)}
    for p, c in edges:
        if not (0 <= p < n and 0 <= c < n) or p == c:
            raise TopologyError(f"bad edge ({p}, {c})")
        adj[p].append(c)
        adj[c].append(p)
    seen = {0}
    stack = [0]
    while stack:
        for k in adj[stack.pop()]:
            if k not in seen:
                seen.add(k)
                stack.append(k)
    if len(seen) != n:
        raise TopologyError("edges do not connect every joint to the root")


def _orient(n: int, edges: list[tuple[int, int]], root: int) -> list[tuple[int, int]]:
    adj: dict[int, list[int]] = {j: [] for j in range(n)}
    for a, b in edges:
        adj[a].append(b)
        adj[b].append(a)
    out, seen, stack = [], {root}, [root]
    while stack:
        p = stack.pop()
        for c in sorted(adj[p]):
            if c not in seen:
                seen.add(c)
                out.append((p, c))
                stack.append(c)
    return sorted(out)


# Toy body: root(pelvis), spine, head, left upper arm, left hand,
# right upper arm, right hand, left leg, right leg.
TOY_JOINT_NAMES = ("root", "spine", "head", "l_arm", "l_hand", "r_arm", "r_hand", "l_leg", "r_leg")
TOY_EDGES = ((0, 1), (1, 2), (1, 3), (3, 4), (1, 5), (5, 6), (0, 7), (0, 8))
TOY_POOLING = (
    ((0, (0, 7, 8)), (1, (1, 2)), (2, (3, 4)), (3, (5, 6))),
    ((0, (0, 1, 2, 3)),),
)

# Rest-pose offsets from parent (metres, y up, body facing +z).
TOY_OFFSETS = np.array([
    [0.0, 0.0, 0.0],     # root, placed at hip height by the trajectory
    [0.0, 0.45, 0.0],    # spine (chest)
    [0.0, 0.25, 0.0],    # head
    [0.20, 0.0, 0.0],    # l_arm (shoulder)
    [0.0, -0.55, 0.0],   # l_hand
    [-0.20, 0.0, 0.0],   # r_arm
    [0.0, -0.55, 0.0],   # r_hand
    [0.12, -0.85, 0.0],  # l_leg (foot)
    [-0.12, -0.85, 0.0], # r_leg
])


def toy_skeleton() -> SkeletonTopology:
    """Nine-joint body with a two-level pooling tree (9 -> 4 -> 1)."""
    return SkeletonTopology(9, TOY_EDGES, TOY_POOLING, TOY_JOINT_NAMES)


def chain_skeleton(n: int) -> SkeletonTopology:
    """Path graph 0-1-...-(n-1) with no pooling tree; handy in tests."""
    return SkeletonTopology(n, tuple((i, i + 1) for i in range(n - 1)))
