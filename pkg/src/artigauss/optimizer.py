"""Step 1: fit m dynamic Gaussians to a point cloud sequence.

Each iteration samples one frame ``k`` and takes two Adam steps: one on the
likelihood and separation terms, then one on everything except the likelihood
(Chamfer before ``emd_start_iteration``, EMD after, plus flow).
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np
import torch

from .gaussian_model import (
    LOG_SCALE_MAX,
    LOG_SCALE_MIN,
    GaussianSet,
    GaussianTensors,
    gumbel_noise,
)
from .losses import (
    Assignments,
    FlowOracle,
    LossContext,
    LossWeights,
    ZeroFlow,
    chamfer_term,
    GaussianMover,
    mle_term,
    sep_term,
    total_graph,
)

log = logging.getLogger("artigauss")


class TooFewPoints(ValueError):
    pass


class NonFiniteLoss(FloatingPointError):
    def __init__(self, iteration: int, detail: str = ""):
        super().__init__(f"non-finite loss or parameters at iteration {iteration}{': ' + detail if detail else ''}")
        self.iteration = iteration


class Adam:
    """Adam on a list of tensors, updated in place (bias-corrected moments)."""

    def __init__(self, params: Sequence[torch.Tensor], lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = [torch.zeros_like(p) for p in self.params]
        self.v = [torch.zeros_like(p) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    @torch.no_grad()
    def step(self) -> None:
        self.step_count += 1
        bc1 = 1.0 - self.beta1 ** self.step_count
        bc2 = 1.0 - self.beta2 ** self.step_count
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m.mul_(self.beta1).add_(g, alpha=1.0 - self.beta1)
            v.mul_(self.beta2).addcmul_(g, g, value=1.0 - self.beta2)
            p.sub_(self.lr * (m / bc1) / (torch.sqrt(v / bc2) + self.eps))


@dataclass(frozen=True)
class OptimizerConfig:
    m_candidates: tuple[int, ...] = (2, 3, 4)
    iterations: int = 1500
    lr_gaussians: float = 2e-3
    lr_kinematic: float = 1.5e-2
    warmup_iterations: int = 300
    emd_start_iteration: int = 500
    weights: LossWeights = field(default_factory=LossWeights)
    temperature: float = 1.0
    seed: int = 0
    mode: str = "full"
    emd_subsample: int = 256
    target_subset: int = 8
    finetune_iterations: int = 500
    gumbel: bool = True

    def __post_init__(self):
        if not self.m_candidates:
            raise ValueError("m_candidates must not be empty")
        if any(m < 1 for m in self.m_candidates):
            raise ValueError("every candidate m must be positive")
        if self.iterations < 0 or self.warmup_iterations < 0 or self.finetune_iterations < 0:
            raise ValueError("iteration counts must be nonnegative")
        if self.emd_start_iteration > self.iterations:
            raise ValueError("emd_start_iteration must not exceed iterations")
        if self.lr_gaussians <= 0 or self.lr_kinematic <= 0 or self.temperature <= 0:
            raise ValueError("learning rates and temperature must be positive")
        if self.mode not in ("full", "partial"):
            raise ValueError(f"mode must be 'full' or 'partial', got {self.mode!r}")
        if self.target_subset < 1 or self.emd_subsample < 1:
            raise ValueError("target_subset and emd_subsample must be positive")

    @classmethod
    def desk(cls, **kw) -> "OptimizerConfig":
        return cls(**kw)

    @classmethod
    def paper(cls, **kw) -> "OptimizerConfig":
        base = dict(iterations=15000, emd_start_iteration=5000, warmup_iterations=500)
        base.update(kw)
        return cls(**base)

    def replace(self, **kw) -> "OptimizerConfig":
        return replace(self, **kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["m_candidates"] = list(self.m_candidates)
        return d


@dataclass
class FitResult:
    set: GaussianSet
    m: int
    final_cd: float
    loss_history: list[dict[str, float]]
    config: OptimizerConfig


# ---------------------------------------------------------------------------
# initialization


def fps_init(cloud, m: int, seed: int = 0, start: int | None = None) -> np.ndarray:
    """Indices of ``m`` farthest-point samples; the first one is drawn from ``seed`` unless given."""
    cloud = np.asarray(cloud, dtype=np.float64).reshape(-1, 3)
    n = len(cloud)
    if n < m:
        raise TooFewPoints(f"cannot pick {m} points from a cloud of {n}")
    if start is None:
        start = int(np.random.default_rng(seed).integers(n))
    chosen = [start]
    d = ((cloud - cloud[start]) ** 2).sum(1)
    for _ in range(m - 1):
        nxt = int(np.argmax(d))  # first maximum: lowest index wins ties
        chosen.append(nxt)
        d = np.minimum(d, ((cloud - cloud[nxt]) ** 2).sum(1))
    return np.array(chosen, dtype=np.int64)


def bbox_diagonal(cloud) -> float:
    cloud = np.asarray(cloud, dtype=np.float64).reshape(-1, 3)
    return float(np.linalg.norm(cloud.max(0) - cloud.min(0)))


def _clamp_scales(g: GaussianTensors) -> None:
    with torch.no_grad():
        g.log_scales.clamp_(LOG_SCALE_MIN, LOG_SCALE_MAX)


def warmup_fit(cloud, m: int, seed: int, warmup: int, num_timesteps: int = 1,
               weights: LossWeights | None = None, lr: float = 2e-3) -> tuple[GaussianSet, list[float]]:
    """FPS centers, identity rotations, then ``warmup`` Adam steps of MLE + separation on ``cloud``.

    Returns the set (frame-0 pose copied to every step) and the MLE value before each step.
    """
    weights = weights or LossWeights()
    cloud = np.asarray(cloud, dtype=np.float64).reshape(-1, 3)
    idx = fps_init(cloud, m, seed)
    scale = max(0.1 * bbox_diagonal(cloud), 1e-3)
    single = GaussianSet.static(cloud[idx], 1, scale)
    g = single.tensors(requires_grad=True)
    pts = torch.as_tensor(cloud)
    opt = Adam(g.parameters(), lr)
    history = []
    for _ in range(warmup):
        opt.zero_grad()
        mle = mle_term(pts, g, 0)
        loss = weights.lambda_mle * mle + weights.lambda_sep * sep_term(g, 0, weights.alpha_sep)
        history.append(float(mle.detach()))
        loss.backward()
        opt.step()
        _clamp_scales(g)
    fitted = GaussianSet.from_tensors(g)
    out = GaussianSet(
        np.repeat(fitted.rot6d, num_timesteps, axis=1),
        np.repeat(fitted.centers, num_timesteps, axis=1),
        fitted.log_scales,
    )
    return out, history


def init_gaussians(cloud, m: int, seed: int = 0, warmup: int = 0, num_timesteps: int = 1,
                   weights: LossWeights | None = None, lr: float = 2e-3) -> GaussianSet:
    return warmup_fit(cloud, m, seed, warmup, num_timesteps, weights, lr)[0]


# ---------------------------------------------------------------------------
# main loop


def _frames_tensors(frames) -> list[torch.Tensor]:
    return [torch.as_tensor(np.ascontiguousarray(f, dtype=np.float64).reshape(-1, 3)) for f in frames]


def full_chamfer_score(gset: GaussianSet, frames) -> float:
    """Σ_k Σ_t symmetric Chamfer of H_{k→t} against X^t with hard, noise-free assignment."""
    ft = _frames_tensors(frames)
    with torch.no_grad():
        g = gset.tensors()
        mover = GaussianMover(g, ft, Assignments("hard"))
        total = 0.0
        for k in range(len(ft)):
            total += float(chamfer_term(mover, ft, k, range(len(ft))))
    return total


def _phase_b_weights(config: OptimizerConfig, iteration: int, oracle) -> LossWeights:
    w = config.weights.with_(lambda_mle=0.0)
    if iteration < config.emd_start_iteration:
        w = w.with_(lambda_emd=0.0)
    else:
        w = w.with_(lambda_cd=0.0)
    if oracle is None or isinstance(oracle, ZeroFlow):
        w = w.with_(lambda_flow=0.0)
    return w


def fit_once(frames, m: int, config: OptimizerConfig, oracle: FlowOracle | None = None,
             init: GaussianSet | None = None) -> FitResult:
    K = len(frames)
    if K < 2:
        raise ValueError("fitting needs a sequence of at least two frames")
    frames_np = [np.asarray(f, dtype=np.float64).reshape(-1, 3) for f in frames]
    ft = _frames_tensors(frames_np)
    rng = np.random.default_rng([config.seed, m])
    if init is None:
        init = init_gaussians(frames_np[0], m, config.seed, config.warmup_iterations, K, config.weights,
                              config.lr_gaussians)
    g = init.tensors(requires_grad=True)
    # each phase keeps its own moment estimates so the likelihood's gradient scale
    # does not shrink the geometric step
    opt_a = Adam(g.parameters(), config.lr_gaussians)
    opt_b = Adam(g.parameters(), config.lr_gaussians)
    w = config.weights
    history: list[dict[str, float]] = []
    n_targets = min(K, config.target_subset)

    for it in range(config.iterations):
        k = int(rng.integers(K))

        # phase A: likelihood + separation
        opt_a.zero_grad()
        mle = mle_term(ft[k], g, k)
        sep = sep_term(g, k, w.alpha_sep)
        loss_a = w.lambda_mle * mle + w.lambda_sep * sep
        if not torch.isfinite(loss_a):
            raise NonFiniteLoss(it, "phase A")
        loss_a.backward()
        opt_a.step()
        _clamp_scales(g)

        # phase B: everything but the likelihood, fresh Gumbel noise
        wb = _phase_b_weights(config, it, oracle)
        if config.mode == "partial":
            noise_frames = range(K)
        else:
            noise_frames = [k]
        noise = {j: gumbel_noise(rng, (len(frames_np[j]), m)) for j in noise_frames} if config.gumbel else None
        if n_targets >= K:
            targets = list(range(K))
        else:
            targets = sorted(int(t) for t in rng.choice(K, size=n_targets, replace=False))
        ctx = LossContext(
            ft, frames_np, weights=wb, mode=config.mode, oracle=oracle, rng=rng,
            assignments=Assignments("soft", config.temperature, noise), targets=targets,
            emd_subsample=config.emd_subsample,
        )
        opt_b.zero_grad()
        loss_b, parts = total_graph(g, k, ctx)
        if not torch.isfinite(loss_b):
            raise NonFiniteLoss(it, "phase B")
        if loss_b.requires_grad:
            loss_b.backward()
            opt_b.step()
            _clamp_scales(g)
        if not all(torch.isfinite(p).all() for p in g.parameters()):
            raise NonFiniteLoss(it, "parameters")

        record = {
            "iteration": it,
            "frame": k,
            "mle": float(mle.detach()),
            "sep": parts.sep,
            "cd": parts.cd,
            "emd": parts.emd,
            "flow": parts.flow,
            "split": parts.split,
        }
        record["total"] = w.lambda_mle * record["mle"] + w.lambda_sep * float(sep.detach()) + parts.total
        history.append(record)
        if (it + 1) % 100 == 0:
            log.info(
                "iter=%d total=%.6g mle=%.6g sep=%.6g cd=%.6g emd=%.6g flow=%.6g",
                it + 1, record["total"], record["mle"], record["sep"], record["cd"], record["emd"], record["flow"],
            )

    fitted = GaussianSet.from_tensors(g)
    return FitResult(fitted, m, full_chamfer_score(fitted, frames_np), history, config)


def fit_sweep(frames, config: OptimizerConfig, oracle: FlowOracle | None = None) -> tuple[FitResult, list[FitResult]]:
    """Fit every candidate m and keep the one with the lowest final Chamfer score (smaller m on ties)."""
    results = [fit_once(frames, m, config, oracle) for m in config.m_candidates]
    best = min(results, key=lambda r: (r.final_cd, r.m))
    return best, results
