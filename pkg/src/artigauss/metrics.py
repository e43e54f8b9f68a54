"""Evaluation metrics against ground truth, and the brute-force oracles that check them.

MSE-family metrics are stored raw (squared scene units); the ×100 scaling is
only applied when a report is formatted.
"""

from __future__ import annotations

import itertools
from collections import deque
from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np

from . import assignment_solver
from .dataio import MissingGroundTruth
from .geometry import PRISMATIC


class LengthMismatch(ValueError):
    pass


DISPLAY_SCALE = 100.0
REANIMATE_SUBSAMPLE = 256


# ---------------------------------------------------------------------------
# Rand index


def _pairs(n: int) -> int:
    return n * (n - 1) // 2


def rand_index(a, b) -> float:
    """Fraction of point pairs on which two partitions agree (same/same or different/different)."""
    a = np.asarray(a).reshape(-1)
    b = np.asarray(b).reshape(-1)
    if len(a) != len(b):
        raise LengthMismatch(f"partitions have {len(a)} and {len(b)} labels")
    n = len(a)
    if n < 2:
        raise LengthMismatch("rand index needs at least two points")
    _, ia = np.unique(a, return_inverse=True)
    _, ib = np.unique(b, return_inverse=True)
    table = np.zeros((ia.max() + 1, ib.max() + 1), dtype=np.int64)
    np.add.at(table, (ia, ib), 1)
    both = sum(_pairs(int(v)) for v in table.ravel())
    in_a = sum(_pairs(int(v)) for v in table.sum(1))
    in_b = sum(_pairs(int(v)) for v in table.sum(0))
    total = _pairs(n)
    agree = total + 2 * both - in_a - in_b
    return agree / total


def rand_index_bruteforce(a, b) -> float:
    a = list(np.asarray(a).reshape(-1))
    b = list(np.asarray(b).reshape(-1))
    if len(a) != len(b):
        raise LengthMismatch(f"partitions have {len(a)} and {len(b)} labels")
    agree = total = 0
    for i, j in itertools.combinations(range(len(a)), 2):
        total += 1
        agree += (a[i] == a[j]) == (b[i] == b[j])
    return agree / total


def rand_index_suite(predicted: Sequence, truth: Sequence) -> tuple[float, float]:
    """(per-scan RI averaged over frames without weighting, RI of all frames pooled)."""
    if len(predicted) != len(truth):
        raise LengthMismatch(f"{len(predicted)} predicted frames for {len(truth)} ground-truth frames")
    per = [rand_index(p, t) for p, t in zip(predicted, truth)]
    pooled = rand_index(np.concatenate([np.asarray(p).reshape(-1) for p in predicted]),
                        np.concatenate([np.asarray(t).reshape(-1) for t in truth]))
    return float(np.mean(per)), pooled


# ---------------------------------------------------------------------------
# tree edit distance
#
# Trees are unlabeled and rooted; they are given as parent lists (−1 marks the
# root) or as nested tuples where each node is the tuple of its children.


Tree = tuple


def to_nested(parents: Sequence[int]) -> Tree:
    parents = [int(p) for p in parents]
    roots = [i for i, p in enumerate(parents) if p == -1]
    if len(roots) != 1:
        raise ValueError(f"a rooted tree needs exactly one root, got {len(roots)}")
    kids: dict[int, list[int]] = {i: [] for i in range(len(parents))}
    for i, p in enumerate(parents):
        if p != -1:
            kids[p].append(i)

    def build(i: int, depth: int) -> Tree:
        if depth > len(parents):
            raise ValueError("parent list contains a cycle")
        return tuple(build(c, depth + 1) for c in kids[i])

    tree = build(roots[0], 0)
    if tree_size(tree) != len(parents):
        raise ValueError("parent list is not connected")
    return tree


def _as_tree(t) -> Tree:
    if isinstance(t, tuple):
        return t
    return to_nested(t)


def tree_size(t: Tree) -> int:
    return 1 + sum(tree_size(c) for c in t)


@lru_cache(maxsize=None)
def _canonical_key(t: Tree) -> str:
    return "(" + "".join(_canonical_key(c) for c in t) + ")"


def canonical(t: Tree) -> Tree:
    """Children ordered by (subtree size, canonical string) descending, recursively."""
    kids = [canonical(c) for c in t]
    kids.sort(key=lambda c: (tree_size(c), _canonical_key(c)), reverse=True)
    return tuple(kids)


def _postorder(t: Tree) -> list[int]:
    """Leftmost-leaf index of every node, nodes numbered in postorder."""
    lmd: list[int] = []

    def walk(node: Tree) -> int:
        first = None
        for c in node:
            idx = walk(c)
            if first is None:
                first = lmd[idx]
        me = len(lmd)
        lmd.append(me if first is None else first)
        return me

    walk(t)
    return lmd


def ordered_tree_edit_distance(a: Tree, b: Tree) -> int:
    """Ordered edit distance with unit insert/delete and free relabel (Zhang-Shasha)."""
    la, lb = _postorder(a), _postorder(b)
    na, nb = len(la), len(lb)
    keys_a = sorted({max(i for i in range(na) if la[i] == v) for v in set(la)})
    keys_b = sorted({max(j for j in range(nb) if lb[j] == v) for v in set(lb)})
    td = np.zeros((na, nb), dtype=np.int64)
    for i in keys_a:
        for j in keys_b:
            ai, bj = la[i], lb[j]
            m, n = i - ai + 2, j - bj + 2
            fd = np.zeros((m, n), dtype=np.int64)
            fd[:, 0] = np.arange(m)
            fd[0, :] = np.arange(n)
            for x in range(1, m):
                for y in range(1, n):
                    ii, jj = ai + x - 1, bj + y - 1
                    if la[ii] == ai and lb[jj] == bj:
                        fd[x, y] = min(fd[x - 1, y] + 1, fd[x, y - 1] + 1, fd[x - 1, y - 1])
                        td[ii, jj] = fd[x, y]
                    else:
                        px, py = la[ii] - ai, lb[jj] - bj
                        fd[x, y] = min(fd[x - 1, y] + 1, fd[x, y - 1] + 1, fd[px, py] + td[ii, jj])
    return int(td[na - 1, nb - 1])


MAX_ORDERINGS = 5040


def child_orderings(t: Tree, limit: int = MAX_ORDERINGS) -> set[Tree] | None:
    """Every distinct sibling ordering of ``t``, or None if there are more than ``limit``."""
    options = []
    for c in t:
        sub = child_orderings(c, limit)
        if sub is None:
            return None
        options.append(sorted(sub, key=_canonical_key))
    out: set[Tree] = set()
    for choice in itertools.product(*options):
        for perm in itertools.permutations(choice):
            out.add(tuple(perm))
            if len(out) > limit:
                return None
    return out


def tree_edit_distance(a, b) -> int:
    """Edit distance between unlabeled rooted trees (unit insert/delete, free relabel).

    The ordered algorithm runs against the canonical form of ``b`` for every
    distinct sibling ordering of the smaller tree and keeps the minimum; this
    agrees with exhaustive edit search on every pair of trees up to 7 nodes.
    Past ``MAX_ORDERINGS`` orderings only the canonical ordering is used, which
    gives an upper bound.
    """
    a, b = canonical(_as_tree(a)), canonical(_as_tree(b))
    if tree_size(a) > tree_size(b):
        a, b = b, a
    orders = child_orderings(a)
    if orders is None:
        return ordered_tree_edit_distance(a, b)
    return min(ordered_tree_edit_distance(x, b) for x in sorted(orders, key=_canonical_key))


# brute-force oracle: breadth-first search over unordered trees


def _from_parents_canonical(parents: list[int]) -> Tree:
    return canonical(to_nested(parents))


def _to_parents(t: Tree) -> list[int]:
    parents: list[int] = []

    def walk(node: Tree, parent: int) -> None:
        me = len(parents)
        parents.append(parent)
        for c in node:
            walk(c, me)

    walk(t, -1)
    return parents


def _relabel(parents: list[int], keep: list[int]) -> list[int]:
    index = {old: new for new, old in enumerate(keep)}
    return [index[parents[o]] if parents[o] != -1 else -1 for o in keep]


@lru_cache(maxsize=None)
def tree_neighbors(t: Tree) -> frozenset[Tree]:
    """Trees one non-root insertion or deletion away (deleting a node hands its children to its parent)."""
    parents = _to_parents(t)
    n = len(parents)
    out = set()
    for v in range(1, n):
        p = parents[v]
        new = [p if q == v else q for q in parents]
        keep = [i for i in range(n) if i != v]
        out.add(_from_parents_canonical(_relabel(new, keep)))
    for p in range(n):
        kids = [c for c in range(n) if parents[c] == p]
        for r in range(len(kids) + 1):
            for moved in itertools.combinations(kids, r):
                new = list(parents) + [p]
                for c in moved:
                    new[c] = n
                out.add(_from_parents_canonical(new))
    return frozenset(out)


def tree_edit_distance_bruteforce(a, b) -> int:
    """Exhaustive BFS over single-node edits; only trees up to the larger size are visited."""
    a, b = canonical(_as_tree(a)), canonical(_as_tree(b))
    limit = max(tree_size(a), tree_size(b))
    dist = {a: 0}
    queue = deque([a])
    while queue:
        t = queue.popleft()
        if t == b:
            return dist[t]
        for u in tree_neighbors(t):
            if u not in dist and tree_size(u) <= limit:
                dist[u] = dist[t] + 1
                queue.append(u)
    raise RuntimeError("edit search did not reach the target tree")


def all_trees(n: int) -> list[Tree]:
    """Every unlabeled rooted tree with ``n`` nodes, canonical form."""
    level = {()}
    for _ in range(n - 1):
        level = {u for t in level for u in tree_neighbors(t) if tree_size(u) == tree_size(t) + 1}
    return sorted(level, key=_canonical_key)


# ---------------------------------------------------------------------------
# motion-based errors


def _apply_per_point(motions: np.ndarray, labels: np.ndarray, pts: np.ndarray) -> np.ndarray:
    return np.einsum("nij,nj->ni", motions[labels, :3, :3], pts) + motions[labels, :3, 3]


def reconstruction_error(points0, gt_labels0, gt_motions, est_labels0, est_motions) -> float:
    """Mean squared distance between frame-0 points carried to each later step by GT and by the estimate.

    ``*_motions`` are rest-relative part motions (P, K, 4, 4) with identity at step 0.
    Averaged over steps 1..K−1 (step 0 is identical by construction).
    """
    pts = np.asarray(points0, dtype=np.float64).reshape(-1, 3)
    gl = np.asarray(gt_labels0, dtype=np.int64)
    el = np.asarray(est_labels0, dtype=np.int64)
    gm, em = np.asarray(gt_motions), np.asarray(est_motions)
    if not len(pts) == len(gl) == len(el):
        raise LengthMismatch("points and labels differ in length")
    K = gm.shape[1]
    if em.shape[1] != K:
        raise LengthMismatch(f"estimate has {em.shape[1]} steps, ground truth {K}")
    if K < 2:
        return 0.0
    errs = []
    for t in range(1, K):
        d = _apply_per_point(gm[:, t], gl, pts) - _apply_per_point(em[:, t], el, pts)
        errs.append(float(np.mean((d * d).sum(1))))
    return float(np.mean(errs))


def flow_error(frames, gt_labels, gt_motions, est_labels, est_motions) -> float:
    """Mean over all points of all transitions of ‖GT displacement − estimated displacement‖²."""
    gm, em = np.asarray(gt_motions), np.asarray(est_motions)
    K = len(frames)
    if K < 2:
        raise LengthMismatch("flow needs at least two frames")
    total, count = 0.0, 0
    for t in range(K - 1):
        pts = np.asarray(frames[t], dtype=np.float64).reshape(-1, 3)
        gl = np.asarray(gt_labels[t], dtype=np.int64)
        el = np.asarray(est_labels[t], dtype=np.int64)
        if not len(pts) == len(gl) == len(el):
            raise LengthMismatch(f"frame {t}: points and labels differ in length")
        g_step = gm[:, t + 1] @ np.linalg.inv(gm[:, t])
        e_step = em[:, t + 1] @ np.linalg.inv(em[:, t])
        d = _apply_per_point(g_step, gl, pts) - _apply_per_point(e_step, el, pts)
        total += float((d * d).sum())
        count += len(pts)
    return total / max(count, 1)


def matched_mse(a, b, rng: np.random.Generator, subsample: int = REANIMATE_SUBSAMPLE) -> float:
    """Mean squared distance under the optimal one-to-one pairing of two subsampled clouds."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 3)
    n = min(subsample, len(a), len(b))
    if n < 1:
        raise LengthMismatch("cannot pair empty clouds")
    ia = np.sort(rng.choice(len(a), size=n, replace=False))
    ib = np.sort(rng.choice(len(b), size=n, replace=False))
    _, cost = assignment_solver.solve(assignment_solver.squared_distance_matrix(a[ia], b[ib]))
    return cost / n


def reanimate_error(predicted: Sequence[np.ndarray], truth: Sequence[np.ndarray], seed: int = 0,
                    subsample: int = REANIMATE_SUBSAMPLE) -> float:
    """Assignment MSE between each re-articulated cloud and its unseen ground-truth cloud, averaged."""
    if len(truth) == 0:
        raise MissingGroundTruth("no unseen articulations provided")
    if len(predicted) != len(truth):
        raise LengthMismatch(f"{len(predicted)} predictions for {len(truth)} unseen poses")
    errs = [matched_mse(p, t, np.random.default_rng([seed, h]), subsample)
            for h, (p, t) in enumerate(zip(predicted, truth))]
    return float(np.mean(errs))


def project_joint_value(kind: str, axis: np.ndarray, origin: np.ndarray, motion: np.ndarray) -> float:
    """Joint value whose screw best explains one relative motion (axis and origin fixed)."""
    R, t = motion[:3, :3], motion[:3, 3]
    if kind == PRISMATIC:
        return float(axis @ (R.T @ t))
    K = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return float(np.arctan2(np.sum(K * R), np.trace(R) - axis @ R @ axis))


# ---------------------------------------------------------------------------
# reports


@dataclass
class MetricsReport:
    recon_error: float
    flow_error: float
    reanimate_error: float | None
    rand_index_per_scan: float
    rand_index_multi_scan: float
    tree_edit_distance: int

    def to_dict(self) -> dict:
        return {
            "recon_error_raw": self.recon_error,
            "recon_error_x100": self.recon_error * DISPLAY_SCALE,
            "flow_error_raw": self.flow_error,
            "flow_error_x100": self.flow_error * DISPLAY_SCALE,
            "reanimate_error_raw": self.reanimate_error,
            "reanimate_error_x100": None if self.reanimate_error is None else self.reanimate_error * DISPLAY_SCALE,
            "rand_index_per_scan": self.rand_index_per_scan,
            "rand_index_multi_scan": self.rand_index_multi_scan,
            "tree_edit_distance": int(self.tree_edit_distance),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(d["recon_error_raw"], d["flow_error_raw"], d["reanimate_error_raw"],
                   d["rand_index_per_scan"], d["rand_index_multi_scan"], int(d["tree_edit_distance"]))

    @staticmethod
    def _pair(value: float | None) -> tuple[str, str]:
        if value is None:
            return "n/a", "n/a"
        return f"{value:.6g}", f"{value * DISPLAY_SCALE:.4f}"

    def table(self) -> str:
        rows = [
            ("metric", "raw", "x100"),
            ("reconstruction error", *self._pair(self.recon_error)),
            ("flow error", *self._pair(self.flow_error)),
            ("reanimate error", *self._pair(self.reanimate_error)),
            ("rand index (per scan)", f"{self.rand_index_per_scan:.4f}", ""),
            ("rand index (multi scan)", f"{self.rand_index_multi_scan:.4f}", ""),
            ("tree edit distance", str(self.tree_edit_distance), ""),
        ]
        widths = [max(len(r[c]) for r in rows) for c in range(3)]
        return "\n".join(
            f"{r[0]:<{widths[0]}}  {r[1]:>{widths[1]}}  {r[2]:>{widths[2]}}".rstrip() for r in rows
        )
