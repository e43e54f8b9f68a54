"""Training losses over dynamic Gaussians and their gradients.

All terms are evaluated in float64 torch graphs so that every loss yields a
value and a gradient with respect to every Gaussian parameter. Matchings
(nearest neighbours, optimal assignments) are found on detached copies and
held fixed while the differentiable cost is assembled.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, NamedTuple, Protocol, Sequence

import numpy as np
import torch
from scipy.spatial import cKDTree

from . import assignment_solver
from .gaussian_model import (
    GaussianSet,
    GaussianTensors,
    SoftAssignment,
    log_density_t,
    mahalanobis_t,
    soft_weights_t,
    step_transforms_t,
    transform_soft_t,
)

EMD_SUBSAMPLE = 256
PARTIAL_EMD_SLACK = 4


class OracleShapeMismatch(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    lambda_mle: float = 1.0
    lambda_sep: float = 1.0
    lambda_cd: float = 1.0
    lambda_emd: float = 0.3
    lambda_flow: float = 1.0
    alpha_sep: float = 0.5
    lambda_split: float = 1.0

    def __post_init__(self):
        for name in ("lambda_mle", "lambda_sep", "lambda_cd", "lambda_emd", "lambda_flow", "lambda_split"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and nonnegative, got {v}")
        if not (math.isfinite(self.alpha_sep) and self.alpha_sep > 0):
            raise ValueError(f"alpha_sep must be positive, got {self.alpha_sep}")

    def with_(self, **kw) -> "LossWeights":
        return replace(self, **kw)


@dataclass
class LossBreakdown:
    mle: float = 0.0
    sep: float = 0.0
    cd: float = 0.0
    emd: float = 0.0
    flow: float = 0.0
    split: float = 0.0
    total: float = 0.0
    gradient: np.ndarray | None = None

    def terms(self) -> dict[str, float]:
        return {
            "total": self.total,
            "mle": self.mle,
            "sep": self.sep,
            "cd": self.cd,
            "emd": self.emd,
            "flow": self.flow,
            "split": self.split,
        }


class LossValue(NamedTuple):
    value: float
    gradient: np.ndarray


# ---------------------------------------------------------------------------
# flow oracles


class FlowOracle(Protocol):
    """Per-point motion between consecutive frames.

    ``queries`` are points placed at step ``t``; ``source_frame`` and
    ``source_indices`` say which observed points they were moved from, which
    label-aware oracles may use and others ignore.
    """

    def flow(self, frames: Sequence[np.ndarray], t: int, queries: np.ndarray,
             source_frame: int, source_indices: np.ndarray) -> np.ndarray: ...


class GroundTruthFlow:
    """Exact flow from ground-truth labels and per-part motions.

    ``motions[p, k]`` is the 4×4 world transform taking part ``p`` from step 0 to step ``k``.
    """

    def __init__(self, labels: Sequence[np.ndarray], motions: np.ndarray):
        self.labels = [np.asarray(l, dtype=np.int64) for l in labels]
        self.motions = np.asarray(motions, dtype=np.float64)

    def flow(self, frames, t, queries, source_frame, source_indices):
        parts = self.labels[source_frame][source_indices]
        step = self.motions[:, t + 1] @ np.linalg.inv(self.motions[:, t])  # (P,4,4)
        A = step[parts, :3, :3]
        b = step[parts, :3, 3]
        return np.einsum("nij,nj->ni", A, queries) + b - queries


class NearestNeighborFlow:
    """Motion of every query to its nearest point in the next frame."""

    def flow(self, frames, t, queries, source_frame, source_indices):
        tree = cKDTree(frames[t + 1])
        _, idx = tree.query(queries)
        return frames[t + 1][idx] - queries


class ZeroFlow:
    def flow(self, frames, t, queries, source_frame, source_indices):
        return np.zeros_like(queries)


# ---------------------------------------------------------------------------
# assignment handling


@dataclass
class Assignments:
    """How points are attached to parts while a loss is evaluated.

    ``soft``  Gumbel-Softmax weights computed in-graph (noise from ``noise[k]`` if given)
    ``hard``  one-hot argmin of the Mahalanobis distance, detached
    ``fixed`` one-hot of externally provided ``labels[k]`` (or fixed soft weights)
    """

    mode: str = "soft"
    temperature: float = 1.0
    noise: dict[int, np.ndarray] | None = None
    labels: Sequence | None = None

    def weights(self, g: GaussianTensors, k: int, points: torch.Tensor) -> torch.Tensor:
        m = g.centers.shape[0]
        if self.mode == "soft":
            noise = None if self.noise is None else self.noise.get(k)
            return soft_weights_t(points, g, k, self.temperature, noise)
        if self.mode == "hard":
            with torch.no_grad():
                lab = torch.argmin(mahalanobis_t(points, g, k), dim=1)
            return torch.nn.functional.one_hot(lab, m).to(torch.float64)
        if self.mode == "fixed":
            lab = self.labels[k]
            if isinstance(lab, SoftAssignment):
                return torch.as_tensor(lab.weights)
            lab = torch.as_tensor(np.ascontiguousarray(lab, dtype=np.int64))
            return torch.nn.functional.one_hot(lab, m).to(torch.float64)
        raise ValueError(f"unknown assignment mode {self.mode!r}")


def as_assignments(assignments) -> Assignments:
    if assignments is None:
        return Assignments("soft")
    if isinstance(assignments, Assignments):
        return assignments
    if isinstance(assignments, str):
        return Assignments(assignments)
    return Assignments("fixed", labels=list(assignments))


class GaussianMover:
    """Produces H_{k→t}, the points of frame ``k`` carried to step ``t`` by the Gaussian poses."""

    def __init__(self, g: GaussianTensors, frames: Sequence[torch.Tensor], assign: Assignments):
        self.g = g
        self.frames = frames
        self.assign = assign
        self._w: dict[int, torch.Tensor] = {}

    def weights(self, k: int) -> torch.Tensor:
        if k not in self._w:
            self._w[k] = self.assign.weights(self.g, k, self.frames[k])
        return self._w[k]

    def __call__(self, k: int, t: int) -> torch.Tensor:
        if k == t:
            return self.frames[k]
        A, b = step_transforms_t(self.g, k, t)
        return transform_soft_t(self.frames[k], self.weights(k), A, b)


Mover = Callable[[int, int], torch.Tensor]


# ---------------------------------------------------------------------------
# point-set distances


def _nearest(query: torch.Tensor, ref: torch.Tensor) -> torch.Tensor:
    _, idx = cKDTree(ref.detach().numpy()).query(query.detach().numpy())
    return torch.as_tensor(np.ascontiguousarray(idx, dtype=np.int64))


def chamfer_one_way(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Σ_{a∈x} min_{b∈y} ‖a − b‖²."""
    if len(x) == 0:
        return x.new_zeros(())
    if len(y) == 0:
        raise ValueError("nearest-neighbour target set is empty")
    idx = _nearest(x, y) if torch.isfinite(x).all() and torch.isfinite(y).all() else None
    if idx is None or bool((idx >= len(y)).any()):
        return x.new_full((), math.inf)  # the k-d tree reports overflowing distances as a miss
    d = x - y[idx]
    return (d * d).sum()


def chamfer_symmetric(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    return chamfer_one_way(x, y) + chamfer_one_way(y, x)


def _subsample(n: int, size: int, rng: np.random.Generator) -> np.ndarray:
    if size >= n:
        return np.arange(n)
    return np.sort(rng.choice(n, size=size, replace=False))


def matched_cost(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Optimal injective matching of the rows of ``x`` into ``y``; matching held fixed for the gradient."""
    if not (torch.isfinite(x).all() and torch.isfinite(y).all()):
        return x.new_full((), math.inf)
    xd, yd = x.detach().numpy(), y.detach().numpy()
    cost = assignment_solver.squared_distance_matrix(xd, yd)
    cols, _ = assignment_solver.solve(cost)
    d = x - y[torch.as_tensor(cols)]
    return (d * d).sum()


def emd_pair(x: torch.Tensor, y: torch.Tensor, rng: np.random.Generator, subsample: int = EMD_SUBSAMPLE) -> torch.Tensor:
    n = min(subsample, len(x), len(y))
    ix = _subsample(len(x), n, rng)
    iy = _subsample(len(y), n, rng)
    return matched_cost(x[torch.as_tensor(ix)], y[torch.as_tensor(iy)])


# ---------------------------------------------------------------------------
# individual terms on tensors


def mle_term(points: torch.Tensor, g: GaussianTensors, step: int) -> torch.Tensor:
    m = g.centers.shape[0]
    logp = log_density_t(points, g, step) - math.log(m)  # equal mixture weights 1/m
    return -torch.logsumexp(logp, dim=1).sum()


def sep_term(g: GaussianTensors, step: int, alpha: float) -> torch.Tensor:
    m = g.centers.shape[0]
    if m < 2:
        return g.centers.new_zeros(())
    maha = mahalanobis_t(g.centers[:, step], g, step)  # [j, i] = M(μ_j, G_i)
    mask = torch.eye(m, dtype=torch.bool)
    maha = maha.masked_fill(mask, math.inf)
    closest = maha.min(dim=0).values
    return torch.exp(-alpha * closest).mean()


def chamfer_term(mover: Mover, frames: Sequence[torch.Tensor], k: int, targets: Sequence[int]) -> torch.Tensor:
    total = frames[k].new_zeros(())
    for t in targets:
        total = total + chamfer_symmetric(mover(k, t), frames[t])
    return total


def emd_term(mover: Mover, frames, k: int, targets: Sequence[int], rng: np.random.Generator,
             subsample: int = EMD_SUBSAMPLE) -> torch.Tensor:
    total = frames[k].new_zeros(())
    for t in targets:
        total = total + emd_pair(mover(k, t), frames[t], rng, subsample)
    return total


def fused_t(mover: Mover, frames, t: int, sources: Sequence[int]) -> torch.Tensor:
    return torch.cat([mover(k, t) for k in sources], dim=0)


def partial_chamfer_term(mover: Mover, frames, t: int) -> torch.Tensor:
    others = [k for k in range(len(frames)) if k != t]
    return chamfer_one_way(frames[t], fused_t(mover, frames, t, others))


def partial_emd_term(mover: Mover, frames, t: int, rng: np.random.Generator,
                     subsample: int = EMD_SUBSAMPLE) -> torch.Tensor:
    others = [k for k in range(len(frames)) if k != t]
    fused = fused_t(mover, frames, t, others)
    x = frames[t]
    n = min(subsample, len(x))
    if len(fused) < n:
        raise ValueError(f"fused cloud has {len(fused)} points, fewer than the {n} to match")
    ix = _subsample(len(x), n, rng)
    iy = _subsample(len(fused), min(len(fused), PARTIAL_EMD_SLACK * n), rng)
    return matched_cost(x[torch.as_tensor(ix)], fused[torch.as_tensor(iy)])


def split_term(mover: Mover, frames, t: int, rng: np.random.Generator) -> torch.Tensor:
    K = len(frames)
    if K < 2:
        return frames[t].new_zeros(())
    perm = rng.permutation(K)
    half = K // 2
    a = sorted(int(i) for i in perm[:half])
    b = sorted(int(i) for i in perm[half:])
    return chamfer_symmetric(fused_t(mover, frames, t, a), fused_t(mover, frames, t, b))


def flow_term(mover: Mover, frames_np: Sequence[np.ndarray], k: int, transitions: Sequence[int],
              oracle: FlowOracle) -> torch.Tensor:
    total = None
    src_idx = np.arange(len(frames_np[k]))
    for t in transitions:
        here = mover(k, t)
        there = mover(k, t + 1)
        q = here.detach().numpy()
        g = np.asarray(oracle.flow(frames_np, t, q, k, src_idx), dtype=np.float64)
        if g.shape != q.shape:
            raise OracleShapeMismatch(f"oracle returned shape {g.shape} for {q.shape} queries")
        if not np.isfinite(g).all():
            raise OracleShapeMismatch("oracle returned non-finite flow")
        d = (there - here) - torch.as_tensor(g)
        term = (d * d).sum()
        total = term if total is None else total + term
    if total is None:
        return torch.zeros((), dtype=torch.float64)
    return total


# ---------------------------------------------------------------------------
# numpy-facing API: value and gradient per term


def _frames_t(frames) -> list[torch.Tensor]:
    return [torch.as_tensor(np.ascontiguousarray(f, dtype=np.float64).reshape(-1, 3)) for f in frames]


def _evaluate(gset: GaussianSet, fn) -> LossValue:
    g = gset.tensors(requires_grad=True)
    value = fn(g)
    if value.requires_grad:
        value.backward()
    return LossValue(float(value.detach()), g.flat_grad())


def mle_loss(points, gset: GaussianSet, step: int) -> LossValue:
    pts = _frames_t([points])[0]
    return _evaluate(gset, lambda g: mle_term(pts, g, step))


def sep_loss(gset: GaussianSet, step: int, alpha: float = 0.5) -> LossValue:
    return _evaluate(gset, lambda g: sep_term(g, step, alpha))


def chamfer_loss(gset: GaussianSet, frames, assignments, k: int, targets: Sequence[int] | None = None) -> LossValue:
    ft = _frames_t(frames)
    targets = range(len(ft)) if targets is None else targets
    a = as_assignments(assignments)
    return _evaluate(gset, lambda g: chamfer_term(GaussianMover(g, ft, a), ft, k, targets))


def emd_loss(gset: GaussianSet, frames, assignments, k: int, subsample: int = EMD_SUBSAMPLE,
             rng: np.random.Generator | None = None, targets: Sequence[int] | None = None) -> LossValue:
    ft = _frames_t(frames)
    targets = range(len(ft)) if targets is None else targets
    a = as_assignments(assignments)
    rng = np.random.default_rng(0) if rng is None else rng
    return _evaluate(gset, lambda g: emd_term(GaussianMover(g, ft, a), ft, k, targets, rng, subsample))


def flow_loss(gset: GaussianSet, frames, assignments, oracle: FlowOracle, k: int = 0,
              transitions: Sequence[int] | None = None) -> LossValue:
    """Flow agreement anchored at frame ``k``; all K−1 transitions unless given."""
    K = len(frames)
    if K < 2:
        raise ValueError("flow loss needs at least two frames")
    ft = _frames_t(frames)
    fn = [f.numpy() for f in ft]
    transitions = range(K - 1) if transitions is None else transitions
    a = as_assignments(assignments)
    return _evaluate(gset, lambda g: flow_term(GaussianMover(g, ft, a), fn, k, transitions, oracle))


def partial_chamfer_loss(gset: GaussianSet, frames, assignments, t: int) -> LossValue:
    if len(frames) < 2:
        raise ValueError("partial losses need at least two frames")
    ft = _frames_t(frames)
    a = as_assignments(assignments)
    return _evaluate(gset, lambda g: partial_chamfer_term(GaussianMover(g, ft, a), ft, t))


def partial_emd_loss(gset: GaussianSet, frames, assignments, t: int, subsample: int = EMD_SUBSAMPLE,
                     rng: np.random.Generator | None = None) -> LossValue:
    if len(frames) < 2:
        raise ValueError("partial losses need at least two frames")
    ft = _frames_t(frames)
    a = as_assignments(assignments)
    rng = np.random.default_rng(0) if rng is None else rng
    return _evaluate(gset, lambda g: partial_emd_term(GaussianMover(g, ft, a), ft, t, rng, subsample))


def split_fusion_regularizer(gset: GaussianSet, frames, assignments, t: int,
                             rng: np.random.Generator | None = None) -> LossValue:
    ft = _frames_t(frames)
    a = as_assignments(assignments)
    rng = np.random.default_rng(0) if rng is None else rng
    return _evaluate(gset, lambda g: split_term(GaussianMover(g, ft, a), ft, t, rng))


@dataclass
class LossContext:
    """Everything besides the parameters that a total-loss evaluation needs."""

    frames: list[torch.Tensor]
    frames_np: list[np.ndarray]
    weights: LossWeights = field(default_factory=LossWeights)
    mode: str = "full"
    oracle: FlowOracle | None = None
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))
    assignments: Assignments = field(default_factory=Assignments)
    targets: Sequence[int] | None = None
    flow_transitions: Sequence[int] | None = None
    emd_subsample: int = EMD_SUBSAMPLE

    @classmethod
    def build(cls, frames, **kw) -> "LossContext":
        ft = _frames_t(frames)
        return cls(ft, [f.numpy() for f in ft], **kw)


def total_graph(g: GaussianTensors, k: int, ctx: LossContext, mover: Mover | None = None) -> tuple[torch.Tensor, LossBreakdown]:
    """Weighted sum of the configured terms as a differentiable scalar; zero-weight terms are skipped."""
    w = ctx.weights
    K = len(ctx.frames)
    if not 0 <= k < K:
        raise IndexError(f"frame {k} out of range for K={K}")
    mover = GaussianMover(g, ctx.frames, ctx.assignments) if mover is None else mover
    targets = list(range(K)) if ctx.targets is None else list(ctx.targets)
    out = LossBreakdown()
    total = torch.zeros((), dtype=torch.float64)

    def add(name: str, lam: float, value: torch.Tensor):
        nonlocal total
        setattr(out, name, float(value.detach()))
        total = total + lam * value

    if w.lambda_mle > 0:
        add("mle", w.lambda_mle, mle_term(ctx.frames[k], g, k))
    if w.lambda_sep > 0:
        add("sep", w.lambda_sep, sep_term(g, k, w.alpha_sep))
    if ctx.mode == "full":
        if w.lambda_cd > 0:
            add("cd", w.lambda_cd, chamfer_term(mover, ctx.frames, k, targets))
        if w.lambda_emd > 0:
            add("emd", w.lambda_emd, emd_term(mover, ctx.frames, k, targets, ctx.rng, ctx.emd_subsample))
    elif ctx.mode == "partial":
        if K < 2:
            raise ValueError("partial mode needs at least two frames")
        if w.lambda_cd > 0:
            add("cd", w.lambda_cd, partial_chamfer_term(mover, ctx.frames, k))
        if w.lambda_emd > 0:
            add("emd", w.lambda_emd, partial_emd_term(mover, ctx.frames, k, ctx.rng, ctx.emd_subsample))
        if w.lambda_split > 0:
            add("split", w.lambda_split, split_term(mover, ctx.frames, k, ctx.rng))
    else:
        raise ValueError(f"unknown loss mode {ctx.mode!r}")
    if w.lambda_flow > 0 and ctx.oracle is not None and K >= 2:
        transitions = range(K - 1) if ctx.flow_transitions is None else ctx.flow_transitions
        add("flow", w.lambda_flow, flow_term(mover, ctx.frames_np, k, transitions, ctx.oracle))
    out.total = float(total.detach())
    return total, out


def total_loss(gset: GaussianSet, frames, k: int, weights: LossWeights | None = None, mode: str = "full",
               oracle: FlowOracle | None = None, rng: np.random.Generator | None = None,
               assignments=None, targets: Sequence[int] | None = None,
               flow_transitions: Sequence[int] | None = None) -> LossBreakdown:
    ctx = LossContext.build(
        frames,
        weights=weights or LossWeights(),
        mode=mode,
        oracle=oracle,
        rng=np.random.default_rng(0) if rng is None else rng,
        assignments=as_assignments(assignments),
        targets=targets,
        flow_transitions=flow_transitions,
    )
    g = gset.tensors(requires_grad=True)
    total, out = total_graph(g, k, ctx)
    if total.requires_grad:
        total.backward()
    out.gradient = g.flat_grad()
    return out
