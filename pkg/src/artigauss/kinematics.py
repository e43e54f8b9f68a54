"""Steps 2 and 3: merge co-moving Gaussians into parts, extract a kinematic tree,
fit 1-DOF joints, and refine them through forward kinematics.

Conventions. ``T_p^k`` is the pose of part ``p`` at step ``k``. Incremental
world motions are ``O_p^k = T_p^{k+1} (T_p^k)⁻¹``; rest-relative motions are
``M_p^k = T_p^k (T_p^0)⁻¹`` so that ``M_p^0 = I``. A joint stores its axis and
origin in the world frame at step 0 and one value per step 1..K−1 (step 0 is
the rest configuration, value 0). Forward kinematics composes
``M_child = M_parent ∘ S(q)`` down the tree from the root's free track.
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from scipy.spatial import cKDTree

from . import _jsonio
from .gaussian_model import GaussianSet, assign_hard
from .geometry import (
    PRISMATIC,
    REVOLUTE,
    RigidTransform,
    ScrewMotion,
    axis_angle_matrix,
    axis_angle_matrix_torch,
    rot6d_to_matrix_torch,
    wrap_angle,
)
from .losses import LossContext, LossWeights, total_graph

log = logging.getLogger("artigauss")

KINEMATIC_VERSION = 1
MERGE_THRESHOLD = 3e-2
NEIGHBOR_FACTOR = 0.05
LAMBDA_SPATIAL = 100.0
LAMBDA_1DOF = 1.0
REVOLUTE_MARGIN = 1e-6
DEGENERATE_MOTION_EPS = 1e-10
EXACT_RESIDUAL = 1e-12


class DegenerateMotion(ValueError):
    pass


class EmptyPart(ValueError):
    pass


class MissingState(ValueError):
    pass


class UnknownLabel(ValueError):
    pass


# ---------------------------------------------------------------------------
# motion bookkeeping


def _as_matrices(motions) -> np.ndarray:
    if isinstance(motions, np.ndarray):
        arr = np.asarray(motions, dtype=np.float64)
    else:
        arr = np.stack([m.as_matrix() if isinstance(m, RigidTransform) else np.asarray(m, dtype=np.float64)
                        for m in motions]) if len(motions) else np.zeros((0, 4, 4))
    return arr.reshape(-1, 4, 4)


def pose_matrices(gset: GaussianSet, part: int) -> np.ndarray:
    """(K, 4, 4) poses of one part."""
    return np.stack([gset.pose(part, k).as_matrix() for k in range(gset.num_timesteps)])


def incremental_motions(poses: np.ndarray) -> np.ndarray:
    """O^k = T^{k+1} (T^k)⁻¹ for k = 0..K−2."""
    return poses[1:] @ np.linalg.inv(poses[:-1])


def rest_motions(poses: np.ndarray) -> np.ndarray:
    """M^k = T^k (T^0)⁻¹ for k = 0..K−1."""
    return poses @ np.linalg.inv(poses[0])


def merge_loss(gset: GaussianSet, i: int, j: int) -> float:
    """Σ_k ‖(O_i^k)⁻¹ O_j^k − I‖²_F over the K−1 transitions."""
    if i == j:
        raise ValueError("merge_loss needs two distinct parts")
    return _merge_loss_poses(pose_matrices(gset, i), pose_matrices(gset, j))


def _merge_loss_poses(pi: np.ndarray, pj: np.ndarray) -> float:
    oi, oj = incremental_motions(pi), incremental_motions(pj)
    d = np.linalg.inv(oi) @ oj - np.eye(4)
    return float((d * d).sum())


# ---------------------------------------------------------------------------
# merging


@dataclass
class MergeResult:
    set: GaussianSet  # one Gaussian per surviving part (the representative's track)
    part_of: np.ndarray  # (m,) part id of every original Gaussian, −1 if dropped
    members: list[list[int]]
    representatives: list[int]

    @property
    def num_parts(self) -> int:
        return len(self.members)

    def relabel(self, labels: Sequence[np.ndarray]) -> list[np.ndarray]:
        return [self.part_of[np.asarray(l, dtype=np.int64)] for l in labels]


def hard_labels(gset: GaussianSet, frames: Sequence[np.ndarray]) -> list[np.ndarray]:
    """Noise-free argmin assignment of every frame to its own step."""
    return [assign_hard(f, gset, k) for k, f in enumerate(frames)]


def part_labels(gset: GaussianSet, part_of: np.ndarray, frames: Sequence[np.ndarray]) -> list[np.ndarray]:
    """Part id of every point: nearest surviving Gaussian (Mahalanobis), mapped through ``part_of``."""
    from .gaussian_model import mahalanobis_all

    part_of = np.asarray(part_of, dtype=np.int64)
    dropped = part_of < 0
    out = []
    for k, f in enumerate(frames):
        d = mahalanobis_all(np.asarray(f, dtype=np.float64).reshape(-1, 3), gset, k)
        d[:, dropped] = np.inf
        out.append(part_of[np.argmin(d, axis=1)] if len(d) else np.zeros(0, dtype=np.int64))
    return out


def _min_sq_distance(a: np.ndarray, b: np.ndarray) -> float:
    d, _ = cKDTree(b).query(a)
    return float(np.min(d) ** 2)


def _carried_points(frames, labels, gset: GaussianSet, members: Sequence[int], rep: int, step: int = 0) -> np.ndarray:
    """Points of ``members`` from every frame, carried to ``step`` by the pose track of ``rep``."""
    poses = pose_matrices(gset, rep)
    out = []
    for k, (f, l) in enumerate(zip(frames, labels)):
        sel = f[np.isin(l, members)]
        if len(sel):
            A = poses[step] @ np.linalg.inv(poses[k])
            out.append(sel @ A[:3, :3].T + A[:3, 3])
    if not out:
        raise EmptyPart(f"part with Gaussians {list(members)} owns no points")
    return np.concatenate(out)


def _group_points(frames, labels, gset: GaussianSet, members: Sequence[int], rep: int, step: int = 0) -> np.ndarray:
    """Points owned by ``members`` at the canonical step; if none, all frames carried there."""
    mask = np.isin(labels[step], members)
    if mask.any():
        return frames[step][mask]
    return _carried_points(frames, labels, gset, members, rep, step)


def merge_parts(gset: GaussianSet, frames: Sequence[np.ndarray], labels: Sequence[np.ndarray] | None = None,
                threshold: float = MERGE_THRESHOLD, neighbor_factor: float = NEIGHBOR_FACTOR) -> MergeResult:
    """Greedily merge spatially neighbouring Gaussians whose relative motion is nearly static.

    The pair with the lowest merge loss below ``threshold`` merges first and losses
    are recomputed after every merge. A merged part keeps the pose track of the
    member owning more points. Gaussians owning no point in any frame are dropped.
    """
    if threshold <= 0:
        raise ValueError("merge threshold must be positive")
    frames = [np.asarray(f, dtype=np.float64).reshape(-1, 3) for f in frames]
    labels = hard_labels(gset, frames) if labels is None else [np.asarray(l, dtype=np.int64) for l in labels]
    counts = np.zeros(gset.m, dtype=np.int64)
    for l in labels:
        counts += np.bincount(l, minlength=gset.m)[: gset.m]
    groups = [[i] for i in range(gset.m) if counts[i] > 0]
    if not groups:
        raise EmptyPart("no Gaussian owns any point")
    reps = [g[0] for g in groups]
    allpts = np.concatenate(frames)
    gate = (neighbor_factor * float(np.linalg.norm(allpts.max(0) - allpts.min(0)))) ** 2
    poses = {i: pose_matrices(gset, i) for i in range(gset.m)}

    while len(groups) > 1:
        pts = [_group_points(frames, labels, gset, g, r) for g, r in zip(groups, reps)]
        best = None
        for a, b in itertools.combinations(range(len(groups)), 2):
            loss = _merge_loss_poses(poses[reps[a]], poses[reps[b]])
            if loss >= threshold:
                continue
            if _min_sq_distance(pts[a], pts[b]) > gate:
                continue
            if best is None or loss < best[0]:
                best = (loss, a, b)
        if best is None:
            break
        _, a, b = best
        ca, cb = counts[groups[a]].sum(), counts[groups[b]].sum()
        rep = reps[a] if (ca, -reps[a]) >= (cb, -reps[b]) else reps[b]
        log.debug("merge parts %s + %s (loss %.3g)", groups[a], groups[b], best[0])
        groups[a] = sorted(groups[a] + groups[b])
        reps[a] = rep
        del groups[b], reps[b]

    part_of = np.full(gset.m, -1, dtype=np.int64)
    for p, g in enumerate(groups):
        part_of[g] = p
    return MergeResult(gset.subset(reps), part_of, groups, reps)


# ---------------------------------------------------------------------------
# screw fitting


@dataclass(frozen=True)
class ScrewFit:
    screw: ScrewMotion
    residual: float


def _residual_revolute(mats: np.ndarray, axis: np.ndarray, origin: np.ndarray, angles: np.ndarray) -> float:
    total = 0.0
    for M, th in zip(mats, angles):
        rot = axis_angle_matrix(axis, th)
        A = M[:3, :3] @ rot.T
        total += float(((A - np.eye(3)) ** 2).sum())
        total += float(((M[:3, 3] - A @ (origin - rot @ origin)) ** 2).sum())
    return total


def _residual_prismatic(mats: np.ndarray, axis: np.ndarray, states: np.ndarray) -> float:
    total = 0.0
    for M, s in zip(mats, states):
        R = M[:3, :3]
        total += float(((R - np.eye(3)) ** 2).sum())
        total += float(((M[:3, 3] - s * (R @ axis)) ** 2).sum())
    return total


def screw_residual(screw: ScrewMotion, motions) -> float:
    """Σ_k ‖M_k · S(q_k)⁻¹ − I‖²_F for a screw whose states align with ``motions``."""
    mats = _as_matrices(motions)
    if len(screw.states) != len(mats):
        raise ValueError(f"{len(screw.states)} states for {len(mats)} motions")
    total = 0.0
    for M, q in zip(mats, screw.states):
        S = screw.transform(q).as_matrix()
        d = M @ np.linalg.inv(S) - np.eye(4)
        total += float((d * d).sum())
    return total


def _rotation_axis(R: np.ndarray) -> tuple[np.ndarray, float]:
    """Unit axis (sign from the skew part) and angle of a rotation matrix."""
    w = 0.5 * np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    _, _, vt = np.linalg.svd(R - np.eye(3))
    a = vt[-1]
    if w @ a < 0:
        a = -a
    c = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    return a, math.atan2(float(w @ a), float(c))


def _angles_about(mats: np.ndarray, axis: np.ndarray) -> np.ndarray:
    out = []
    for M in mats:
        R = M[:3, :3]
        # project R onto rotations about ``axis``: maximize tr(Rot(axis,θ)ᵀ R)
        K = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
        c = np.trace(R) - float(axis @ R @ axis)
        s = float(np.sum(K * R))
        out.append(math.atan2(s, c) if abs(s) + abs(c) > 0 else 0.0)
    return np.array(out)


def _init_revolute(mats: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    axes, angles = zip(*(_rotation_axis(M[:3, :3]) for M in mats))
    axes, angles = np.array(axes), np.array(angles)
    ref = int(np.argmax(np.abs(angles)))
    if abs(angles[ref]) < 1e-12:
        axis = np.array([0.0, 0.0, 1.0])
    else:
        signs = np.where(axes @ axes[ref] < 0, -1.0, 1.0)
        avg = ((signs * np.abs(angles))[:, None] * axes).sum(0)
        axis = avg / np.linalg.norm(avg)
    th = _angles_about(mats, axis)
    A = np.concatenate([np.eye(3) - axis_angle_matrix(axis, t) for t in th])
    b = np.concatenate([M[:3, 3] for M in mats])
    origin = np.linalg.lstsq(A, b, rcond=None)[0]
    return axis, origin, th


def _init_prismatic(mats: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # translations expressed before the rotation: t = s·R·d
    local = np.stack([M[:3, :3].T @ M[:3, 3] for M in mats])
    _, _, vt = np.linalg.svd(local)
    d = vt[0]
    return d, local @ d


def _refine(kind: str, mats: np.ndarray, axis, origin, states, lr: float, steps: int):
    M = torch.as_tensor(mats)
    R = M[:, :3, :3]
    t = M[:, :3, 3]
    eye = torch.eye(3, dtype=torch.float64)
    ax = torch.tensor(axis, requires_grad=True)
    org = torch.tensor(origin, requires_grad=True)
    q = torch.tensor(states, requires_grad=True)
    params = [ax, org, q] if kind == REVOLUTE else [ax, q]
    from .optimizer import Adam  # local: the optimizer module imports losses, not kinematics

    opt = Adam(params, lr)

    def residual():
        a = ax / torch.linalg.norm(ax)
        if kind == REVOLUTE:
            rot = axis_angle_matrix_torch(a.expand(len(q), 3), q)
            A = R @ rot.transpose(1, 2)
            trans = t - torch.einsum("kij,kj->ki", A, org[None] - torch.einsum("kij,j->ki", rot, org))
        else:
            A = R
            trans = t - q[:, None] * torch.einsum("kij,j->ki", R, a)
        return ((A - eye) ** 2).sum() + (trans ** 2).sum()

    best = (float(residual().detach()), axis.copy(), origin.copy(), states.copy())
    for _ in range(steps):
        opt.zero_grad()
        r = residual()
        r.backward()
        opt.step()
        with torch.no_grad():
            ax /= torch.linalg.norm(ax)
        val = float(residual().detach())
        if val < best[0]:
            best = (val, ax.detach().numpy().copy(), org.detach().numpy().copy(), q.detach().numpy().copy())
    return best[1], best[2], best[3]


def _canonical(kind: str, axis: np.ndarray, origin: np.ndarray, states: np.ndarray):
    axis = axis / np.linalg.norm(axis)
    nz = np.flatnonzero(np.abs(states) > 1e-12)
    if len(nz) and states[nz[0]] < 0:
        axis, states = -axis, -states
    if kind == REVOLUTE:
        origin = origin - (origin @ axis) * axis
    else:
        origin = np.zeros(3)
    return axis, origin, states


def fit_screw(relative_motions, lr: float = 1.5e-2, refine_steps: int = 200,
              margin: float = REVOLUTE_MARGIN) -> ScrewFit:
    """Best 1-DOF screw (revolute or prismatic) explaining a sequence of relative motions.

    Each candidate starts from a closed-form estimate and is refined by Adam on
    the Frobenius residual; revolute wins unless prismatic is better by more
    than ``margin``. States follow the sign convention "first nonzero state positive".
    """
    mats = _as_matrices(relative_motions)
    if len(mats) < 1:
        raise ValueError("fit_screw needs at least one motion")
    if all(np.abs(M - np.eye(4)).max() <= DEGENERATE_MOTION_EPS for M in mats):
        raise DegenerateMotion("all relative motions are the identity; no axis is defined")

    candidates = []
    axis, origin, th = _init_revolute(mats)
    d, s = _init_prismatic(mats)
    # an exact closed-form fit of either kind cannot be beaten, so neither candidate needs refining
    exact = min(_residual_revolute(mats, axis, origin, th), _residual_prismatic(mats, d, s)) <= EXACT_RESIDUAL
    if not exact and refine_steps > 0:
        axis, origin, th = _refine(REVOLUTE, mats, axis, origin, th, lr, refine_steps)
    axis, origin, th = _canonical(REVOLUTE, axis, origin, np.array([wrap_angle(v) for v in th]))
    candidates.append((_residual_revolute(mats, axis, origin, th), REVOLUTE, axis, origin, th))

    if not exact and refine_steps > 0:
        d, _, s = _refine(PRISMATIC, mats, d, np.zeros(3), s, lr, refine_steps)
    d, o, s = _canonical(PRISMATIC, d, np.zeros(3), s)
    candidates.append((_residual_prismatic(mats, d, s), PRISMATIC, d, o, s))

    rev, pri = candidates
    res, kind, axis, origin, states = rev if rev[0] <= pri[0] + margin else pri
    return ScrewFit(ScrewMotion(kind, axis, origin, tuple(states)), float(res))


# ---------------------------------------------------------------------------
# edge costs and spanning tree


@dataclass
class EdgeCosts:
    spatial: np.ndarray  # (P, P) squared scene units
    one_dof: np.ndarray  # (P, P) Frobenius residual

    @property
    def num_parts(self) -> int:
        return self.spatial.shape[0]

    def combined(self, lambda_spatial: float = LAMBDA_SPATIAL, lambda_1dof: float = LAMBDA_1DOF) -> np.ndarray:
        return lambda_spatial * self.spatial + lambda_1dof * self.one_dof


def edge_costs(gset: GaussianSet, frames: Sequence[np.ndarray], labels: Sequence[np.ndarray] | None = None,
               fused: bool = False) -> EdgeCosts:
    """Spatial and 1-DOF costs for every pair of parts.

    ``spatial`` is the minimum squared distance between the parts' points at
    step 0 (or fused at step 0). ``one_dof`` is the residual of the best screw
    fitted to (O_i^k)⁻¹ O_j^k; pairs whose relative motion is the identity cost 0.
    """
    P = gset.m
    frames = [np.asarray(f, dtype=np.float64).reshape(-1, 3) for f in frames]
    labels = hard_labels(gset, frames) if labels is None else [np.asarray(l, dtype=np.int64) for l in labels]
    pts = []
    for p in range(P):
        if fused:
            pts.append(_carried_points(frames, labels, gset, [p], p))
        else:
            sel = frames[0][labels[0] == p]
            if len(sel) == 0:
                raise EmptyPart(f"part {p} owns no points at step 0")
            pts.append(sel)
    spatial = np.zeros((P, P))
    one_dof = np.zeros((P, P))
    poses = [pose_matrices(gset, p) for p in range(P)]
    for i, j in itertools.combinations(range(P), 2):
        spatial[i, j] = spatial[j, i] = _min_sq_distance(pts[i], pts[j])
        rel = np.linalg.inv(incremental_motions(poses[i])) @ incremental_motions(poses[j])
        try:
            r = fit_screw(rel).residual
        except DegenerateMotion:
            r = 0.0
        one_dof[i, j] = one_dof[j, i] = r
    return EdgeCosts(spatial, one_dof)


class _UnionFind:
    def __init__(self, n: int):
        self.parent = list(range(n))

    def find(self, a: int) -> int:
        while self.parent[a] != a:
            self.parent[a] = self.parent[self.parent[a]]
            a = self.parent[a]
        return a

    def union(self, a: int, b: int) -> bool:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return False
        self.parent[max(ra, rb)] = min(ra, rb)
        return True


def minimum_spanning_tree(weights: np.ndarray) -> list[tuple[int, int]]:
    """Kruskal over a complete symmetric weight matrix; ties broken by (i, j)."""
    n = weights.shape[0]
    order = sorted((float(weights[i, j]), i, j) for i, j in itertools.combinations(range(n), 2))
    uf = _UnionFind(n)
    edges = []
    for _, i, j in order:
        if uf.union(i, j):
            edges.append((i, j))
            if len(edges) == n - 1:
                break
    return sorted(edges)


def build_tree(costs: EdgeCosts, lambda_spatial: float = LAMBDA_SPATIAL,
               lambda_1dof: float = LAMBDA_1DOF) -> list[tuple[int, int]]:
    return minimum_spanning_tree(costs.combined(lambda_spatial, lambda_1dof))


def tree_cost(weights: np.ndarray, edges: Sequence[tuple[int, int]]) -> float:
    return float(sum(weights[i, j] for i, j in edges))


# ---------------------------------------------------------------------------
# kinematic model


@dataclass
class Joint:
    parent: int
    child: int
    screw: ScrewMotion
    residual: float = 0.0


@dataclass
class KinematicModel:
    parts: list[int]
    gaussians: GaussianSet  # one Gaussian per part, its pose track is the unconstrained fit
    root: int
    edges: list[Joint]
    rest_pose: np.ndarray  # (P, 4, 4) T_p^0
    root_track: np.ndarray  # (K, 4, 4) M_root^k, identity at k = 0
    part_of: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __post_init__(self):
        P = len(self.parts)
        if len(self.edges) != P - 1:
            raise ValueError(f"a tree over {P} parts needs {P - 1} edges, got {len(self.edges)}")
        children = [e.child for e in self.edges]
        if self.root in children or len(set(children)) != len(children):
            raise ValueError("every non-root part needs exactly one parent")
        if set(children) | {self.root} != set(self.parts):
            raise ValueError("edges do not span the parts")
        self.order()  # raises on a disconnected structure

    @property
    def num_timesteps(self) -> int:
        return self.root_track.shape[0]

    def parent_of(self, part: int) -> int:
        for e in self.edges:
            if e.child == part:
                return e.parent
        return -1

    def order(self) -> list[Joint]:
        """Edges in breadth-first order from the root."""
        out, frontier = [], [self.root]
        remaining = list(self.edges)
        while frontier:
            p = frontier.pop(0)
            kids = sorted((e for e in remaining if e.parent == p), key=lambda e: e.child)
            for e in kids:
                out.append(e)
                frontier.append(e.child)
                remaining.remove(e)
        if remaining:
            raise ValueError("edges are not connected to the root")
        return out

    def states(self) -> np.ndarray:
        """(E, K) joint values per edge in stored order, 0 at step 0."""
        return np.array([[0.0, *e.screw.states] for e in self.edges]).reshape(len(self.edges), -1)

    def to_dict(self) -> dict:
        return {
            "version": KINEMATIC_VERSION,
            "K": self.num_timesteps,
            "root": int(self.root),
            "parts": [int(p) for p in self.parts],
            "part_of": [int(p) for p in self.part_of],
            "edges": [
                {
                    "parent": int(e.parent),
                    "child": int(e.child),
                    "kind": e.screw.kind,
                    "axis": [float(v) for v in e.screw.axis],
                    "origin": [float(v) for v in e.screw.origin],
                    "states": [float(v) for v in e.screw.states],
                    "residual": float(e.residual),
                }
                for e in self.edges
            ],
            "rest_pose": [m.reshape(-1).tolist() for m in self.rest_pose],
            "root_track": [m.reshape(-1).tolist() for m in self.root_track],
            "gaussians": self.gaussians.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "KinematicModel":
        if d.get("version") != KINEMATIC_VERSION:
            raise ValueError(f"unsupported kinematic model version {d.get('version')!r}")
        edges = [
            Joint(int(e["parent"]), int(e["child"]),
                  ScrewMotion(e["kind"], np.array(e["axis"]), np.array(e["origin"]), tuple(e["states"])),
                  float(e.get("residual", 0.0)))
            for e in d["edges"]
        ]
        return cls(
            parts=[int(p) for p in d["parts"]],
            gaussians=GaussianSet.from_dict(d["gaussians"]),
            root=int(d["root"]),
            edges=edges,
            rest_pose=np.array(d["rest_pose"], dtype=np.float64).reshape(-1, 4, 4),
            root_track=np.array(d["root_track"], dtype=np.float64).reshape(-1, 4, 4),
            part_of=np.array(d.get("part_of", []), dtype=np.int64),
        )

    def save(self, path: str | Path) -> None:
        _jsonio.write(path, self.to_dict())

    @classmethod
    def load(cls, path: str | Path) -> "KinematicModel":
        return cls.from_dict(_jsonio.read(path))


def part_motion_score(poses: np.ndarray) -> float:
    """Σ_k ‖O^k − I‖²_F, how much a part moves over the sequence."""
    d = incremental_motions(poses) - np.eye(4)
    return float((d * d).sum())


def select_root(gset: GaussianSet) -> int:
    scores = [part_motion_score(pose_matrices(gset, p)) for p in range(gset.m)]
    return int(np.argmin(scores))  # first minimum: lowest id on ties


def orient_edges(edges: Sequence[tuple[int, int]], root: int) -> list[tuple[int, int]]:
    """(parent, child) pairs in breadth-first order from ``root``."""
    adj: dict[int, list[int]] = {}
    for i, j in edges:
        adj.setdefault(i, []).append(j)
        adj.setdefault(j, []).append(i)
    out, seen, frontier = [], {root}, [root]
    while frontier:
        p = frontier.pop(0)
        for c in sorted(adj.get(p, [])):
            if c not in seen:
                seen.add(c)
                out.append((p, c))
                frontier.append(c)
    if len(out) != len(edges):
        raise ValueError("edge list is not a tree reachable from the root")
    return out


def joint_motions(parent_poses: np.ndarray, child_poses: np.ndarray) -> np.ndarray:
    """(M_parent^k)⁻¹ M_child^k for k = 1..K−1: the child's motion seen from its parent's rest frame."""
    mp, mc = rest_motions(parent_poses), rest_motions(child_poses)
    return (np.linalg.inv(mp) @ mc)[1:]


def select_root_and_orient(tree: Sequence[tuple[int, int]], gset: GaussianSet,
                           part_of: np.ndarray | None = None) -> KinematicModel:
    """Root at the least-moving part, edges oriented outward, one screw per edge."""
    P, K = gset.m, gset.num_timesteps
    root = select_root(gset)
    poses = [pose_matrices(gset, p) for p in range(P)]
    joints = []
    for parent, child in orient_edges(tree, root):
        rel = joint_motions(poses[parent], poses[child])
        try:
            fit = fit_screw(rel)
            joints.append(Joint(parent, child, fit.screw, fit.residual))
        except DegenerateMotion:
            joints.append(Joint(parent, child, ScrewMotion(REVOLUTE, np.array([0.0, 0.0, 1.0]), np.zeros(3),
                                                           (0.0,) * (K - 1)), 0.0))
    return KinematicModel(
        parts=list(range(P)),
        gaussians=gset,
        root=root,
        edges=joints,
        rest_pose=np.stack([p[0] for p in poses]),
        root_track=rest_motions(poses[root]),
        part_of=np.arange(P) if part_of is None else np.asarray(part_of, dtype=np.int64),
    )


# ---------------------------------------------------------------------------
# forward kinematics


def part_motions(model: KinematicModel, joint_values: Sequence[float], root_motion: np.ndarray | None = None) -> np.ndarray:
    """Rest-relative motion of every part for one configuration: (P, 4, 4).

    ``joint_values`` follow ``model.edges``; the root moves by ``root_motion`` (identity by default).
    """
    values = np.asarray(joint_values, dtype=np.float64).reshape(-1)
    if len(values) != len(model.edges):
        raise MissingState(f"{len(values)} joint values for {len(model.edges)} edges")
    P = len(model.parts)
    idx = {p: n for n, p in enumerate(model.parts)}
    out = np.zeros((P, 4, 4))
    out[idx[model.root]] = np.eye(4) if root_motion is None else np.asarray(root_motion)
    value_of = {id(e): v for e, v in zip(model.edges, values)}
    for e in model.order():
        out[idx[e.child]] = out[idx[e.parent]] @ e.screw.transform(value_of[id(e)]).as_matrix()
    return out


def forward_kinematics(model: KinematicModel, step: int, states: np.ndarray | None = None) -> np.ndarray:
    """Absolute part poses (P, 4, 4) at ``step`` from per-edge states (E, K) (model states by default)."""
    K = model.num_timesteps
    if not 0 <= step < K:
        raise IndexError(f"step {step} out of range for K={K}")
    st = model.states() if states is None else np.asarray(states, dtype=np.float64)
    if st.ndim != 2 or st.shape[0] != len(model.edges) or st.shape[1] <= step:
        raise MissingState(f"states of shape {st.shape} do not cover step {step} for {len(model.edges)} edges")
    return part_motions(model, st[:, step], model.root_track[step]) @ model.rest_pose


# ---------------------------------------------------------------------------
# fine-tuning


class _KinematicParams:
    """Differentiable joint and root-track parameters for a fixed tree."""

    def __init__(self, model: KinematicModel):
        self.model = model
        K = model.num_timesteps
        self.axes = [torch.tensor(e.screw.axis, requires_grad=True) for e in model.edges]
        self.origins = [torch.tensor(e.screw.origin, requires_grad=e.screw.kind == REVOLUTE) for e in model.edges]
        self.states = [torch.tensor(np.asarray(e.screw.states, dtype=np.float64), requires_grad=True) for e in model.edges]
        track = model.root_track[1:]
        self.root_rot = torch.tensor(np.concatenate([track[:, :3, 0], track[:, :3, 1]], axis=1).reshape(K - 1, 6),
                                     requires_grad=True)
        self.root_trans = torch.tensor(track[:, :3, 3].copy(), requires_grad=True)
        self.index = {p: n for n, p in enumerate(model.parts)}
        self.order = [model.edges.index(e) for e in model.order()]

    def parameters(self) -> list[torch.Tensor]:
        out = [self.root_rot, self.root_trans]
        for n, e in enumerate(self.model.edges):
            out += [self.axes[n], self.states[n]]
            if e.screw.kind == REVOLUTE:
                out.append(self.origins[n])
        return out

    def motions(self) -> torch.Tensor:
        """(P, K, 4, 4) rest-relative motions."""
        K = self.model.num_timesteps
        P = len(self.model.parts)
        root = torch.eye(4, dtype=torch.float64).repeat(K, 1, 1)
        if K > 1:
            R = rot6d_to_matrix_torch(self.root_rot)
            top = torch.cat([R, self.root_trans[:, :, None]], dim=2)
            bottom = torch.tensor([0.0, 0.0, 0.0, 1.0], dtype=torch.float64).expand(K - 1, 1, 4)
            root = torch.cat([root[:1], torch.cat([top, bottom], dim=1)], dim=0)
        out: list[torch.Tensor | None] = [None] * P
        out[self.index[self.model.root]] = root
        for n in self.order:
            e = self.model.edges[n]
            S = self._screw(n, e.screw.kind, K)
            out[self.index[e.child]] = out[self.index[e.parent]] @ S
        return torch.stack(out)

    def _screw(self, n: int, kind: str, K: int) -> torch.Tensor:
        a = self.axes[n] / torch.linalg.norm(self.axes[n])
        q = torch.cat([torch.zeros(1, dtype=torch.float64), self.states[n]])
        if kind == REVOLUTE:
            R = axis_angle_matrix_torch(a.expand(K, 3), q)
            t = self.origins[n][None] - torch.einsum("kij,j->ki", R, self.origins[n])
        else:
            R = torch.eye(3, dtype=torch.float64).repeat(K, 1, 1)
            t = q[:, None] * a[None]
        bottom = torch.tensor([0.0, 0.0, 0.0, 1.0], dtype=torch.float64).expand(K, 1, 4)
        return torch.cat([torch.cat([R, t[:, :, None]], dim=2), bottom], dim=1)

    @torch.no_grad()
    def normalize(self) -> None:
        for a in self.axes:
            a /= torch.linalg.norm(a)

    def to_model(self) -> KinematicModel:
        m = self.model
        edges = []
        for n, e in enumerate(m.edges):
            axis = self.axes[n].detach().numpy().copy()
            origin = self.origins[n].detach().numpy().copy()
            if e.screw.kind == REVOLUTE:
                axis = axis / np.linalg.norm(axis)
                origin = origin - (origin @ axis) * axis
            screw = ScrewMotion(e.screw.kind, axis, origin, tuple(self.states[n].detach().numpy()))
            edges.append(Joint(e.parent, e.child, screw, e.residual))
        with torch.no_grad():
            root_track = self.motions()[self.index[m.root]].numpy().copy()
        return KinematicModel(m.parts, m.gaussians, m.root, edges, m.rest_pose.copy(), root_track, m.part_of.copy())


class KinematicMover:
    """H_{k→t} under forward-kinematics poses and fixed per-point part labels."""

    def __init__(self, motions: torch.Tensor, frames: Sequence[torch.Tensor], labels: Sequence[np.ndarray]):
        self.motions = motions  # (P, K, 4, 4)
        self.frames = frames
        self.labels = [torch.as_tensor(np.ascontiguousarray(l, dtype=np.int64)) for l in labels]

    def __call__(self, k: int, t: int) -> torch.Tensor:
        if k == t:
            return self.frames[k]
        Mt = self.motions[:, t]
        Mk_inv = torch.linalg.inv(self.motions[:, k])
        H = Mt @ Mk_inv  # (P,4,4)
        lab = self.labels[k]
        A, b = H[lab, :3, :3], H[lab, :3, 3]
        return torch.einsum("nij,nj->ni", A, self.frames[k]) + b


def _check_labels(model: KinematicModel, labels: Sequence[np.ndarray]) -> list[np.ndarray]:
    idx = {p: n for n, p in enumerate(model.parts)}
    out = []
    for l in labels:
        l = np.asarray(l, dtype=np.int64)
        bad = sorted(set(np.unique(l).tolist()) - set(idx))
        if bad:
            raise UnknownLabel(f"labels {bad} are not parts of the model")
        out.append(np.array([idx[v] for v in l], dtype=np.int64) if len(l) else l)
    return out


def kinematic_score(model: KinematicModel, frames: Sequence[np.ndarray], labels: Sequence[np.ndarray]) -> float:
    """Σ_k Σ_t symmetric Chamfer of frame k carried to step t by forward kinematics."""
    from .losses import chamfer_term

    ft = [torch.as_tensor(np.ascontiguousarray(f, dtype=np.float64)) for f in frames]
    with torch.no_grad():
        mover = KinematicMover(_KinematicParams(model).motions(), ft, _check_labels(model, labels))
        return float(sum(float(chamfer_term(mover, ft, k, range(len(ft)))) for k in range(len(ft))))


def finetune_joints(model: KinematicModel, frames: Sequence[np.ndarray], labels: Sequence[np.ndarray],
                    iterations: int = 500, lr: float = 1.5e-2, weights: LossWeights | None = None,
                    mode: str = "full", seed: int = 0, target_subset: int = 8,
                    emd_subsample: int = 256) -> tuple[KinematicModel, list[float]]:
    """Adam over joint states, axes, origins and the root track on λ_cd·CD + λ_emd·EMD.

    Returns the refined model and the per-iteration objective. The refined model
    replaces the input only if its full Chamfer score is not worse.
    """
    from .optimizer import Adam, NonFiniteLoss

    if iterations == 0 or model.num_timesteps < 2:
        return model, []
    weights = weights or LossWeights()
    w = weights.with_(lambda_mle=0.0, lambda_sep=0.0, lambda_flow=0.0, lambda_split=0.0)
    frames_np = [np.asarray(f, dtype=np.float64).reshape(-1, 3) for f in frames]
    ft = [torch.as_tensor(f) for f in frames_np]
    lab = _check_labels(model, labels)
    K = len(frames_np)
    if K != model.num_timesteps:
        raise ValueError(f"model has {model.num_timesteps} steps but {K} frames were given")
    params = _KinematicParams(model)
    opt = Adam(params.parameters(), lr)
    rng = np.random.default_rng([seed, 7])
    n_targets = min(K, target_subset)
    history = []
    for it in range(iterations):
        k = int(rng.integers(K))
        targets = list(range(K)) if n_targets >= K else sorted(int(t) for t in rng.choice(K, n_targets, replace=False))
        ctx = LossContext(ft, frames_np, weights=w, mode=mode, rng=rng, targets=targets, emd_subsample=emd_subsample)
        opt.zero_grad()
        mover = KinematicMover(params.motions(), ft, lab)
        loss, _ = total_graph(None, k, ctx, mover=mover)
        if not torch.isfinite(loss):
            raise NonFiniteLoss(it, "joint fine-tuning")
        history.append(float(loss.detach()))
        if loss.requires_grad:
            loss.backward()
            opt.step()
            params.normalize()
        if (it + 1) % 100 == 0:
            log.info("finetune iter=%d loss=%.6g", it + 1, history[-1])
    refined = params.to_model()
    if kinematic_score(refined, frames_np, labels) <= kinematic_score(model, frames_np, labels):
        return refined, history
    return model, history


# ---------------------------------------------------------------------------
# pipeline glue and re-articulation


@dataclass
class KinematicFit:
    model: KinematicModel
    merge: MergeResult
    costs: EdgeCosts
    labels: list[np.ndarray]  # per-frame part labels
    history: list[float]


def extract_kinematics(gset: GaussianSet, frames: Sequence[np.ndarray], threshold: float = MERGE_THRESHOLD,
                       lambda_spatial: float = LAMBDA_SPATIAL, lambda_1dof: float = LAMBDA_1DOF,
                       finetune_iterations: int = 500, lr: float = 1.5e-2, weights: LossWeights | None = None,
                       mode: str = "full", seed: int = 0) -> KinematicFit:
    """Merge, build the tree, fit joints, then refine them through forward kinematics."""
    frames = [np.asarray(f, dtype=np.float64).reshape(-1, 3) for f in frames]
    raw_labels = hard_labels(gset, frames)
    merged = merge_parts(gset, frames, raw_labels, threshold)
    labels = part_labels(gset, merged.part_of, frames)
    if merged.num_parts > 1:
        costs = edge_costs(merged.set, frames, labels)
    else:
        costs = EdgeCosts(np.zeros((1, 1)), np.zeros((1, 1)))
    tree = build_tree(costs, lambda_spatial, lambda_1dof)
    model = select_root_and_orient(tree, merged.set, merged.part_of)
    model, history = finetune_joints(model, frames, labels, finetune_iterations, lr, weights, mode, seed)
    return KinematicFit(model, merged, costs, labels, history)


def reanimate(model: KinematicModel, joint_values: Sequence[float], points, labels) -> np.ndarray:
    """Carry step-0 points to a new configuration, root held at rest."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    (lab,) = _check_labels(model, [labels])
    if len(lab) != len(pts):
        raise ValueError(f"{len(lab)} labels for {len(pts)} points")
    M = part_motions(model, joint_values)
    return np.einsum("nij,nj->ni", M[lab, :3, :3], pts) + M[lab, :3, 3]
