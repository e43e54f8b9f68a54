"""Dynamic 3D Gaussians: one Gaussian per rigid part, one pose per timestep.

Each part carries ``K`` poses (6D rotation + center) and a single scale vector
shared over time. The covariance is ``Σ = R S (R S)ᵀ`` with ``S = diag(exp(log_scales))``,
and the pose ``T = [R μ; 0 1]`` maps the part's local frame into the world frame.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
import torch

from . import _jsonio
from .geometry import RigidTransform, Rot6D, rot6d_to_matrix, rot6d_to_matrix_torch

SCALE_MIN = 1e-4
SCALE_MAX = 1e2
LOG_SCALE_MIN = math.log(SCALE_MIN)
LOG_SCALE_MAX = math.log(SCALE_MAX)
MODEL_VERSION = 1

IDENTITY_6D = np.array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0])


@dataclass(frozen=True)
class GaussianPart:
    rotations: np.ndarray  # (K, 6)
    centers: np.ndarray  # (K, 3)
    log_scales: np.ndarray  # (3,)


@dataclass
class GaussianSet:
    rot6d: np.ndarray  # (m, K, 6)
    centers: np.ndarray  # (m, K, 3)
    log_scales: np.ndarray  # (m, 3)

    def __post_init__(self):
        self.rot6d = np.array(self.rot6d, dtype=np.float64)
        self.centers = np.array(self.centers, dtype=np.float64)
        self.log_scales = np.clip(np.array(self.log_scales, dtype=np.float64), LOG_SCALE_MIN, LOG_SCALE_MAX)
        m, K = self.centers.shape[:2]
        if m < 1 or K < 1:
            raise ValueError("a GaussianSet needs at least one part and one timestep")
        if self.rot6d.shape != (m, K, 6) or self.centers.shape != (m, K, 3) or self.log_scales.shape != (m, 3):
            raise ValueError(
                f"inconsistent shapes rot6d={self.rot6d.shape} centers={self.centers.shape} "
                f"log_scales={self.log_scales.shape}"
            )
        if not (np.isfinite(self.rot6d).all() and np.isfinite(self.centers).all() and np.isfinite(self.log_scales).all()):
            raise ValueError("GaussianSet parameters must be finite")

    @property
    def m(self) -> int:
        return self.centers.shape[0]

    @property
    def num_timesteps(self) -> int:
        return self.centers.shape[1]

    @property
    def parts(self) -> list[GaussianPart]:
        return [GaussianPart(self.rot6d[i], self.centers[i], self.log_scales[i]) for i in range(self.m)]

    @classmethod
    def from_parts(cls, parts: Sequence[GaussianPart]) -> "GaussianSet":
        return cls(
            np.stack([p.rotations for p in parts]),
            np.stack([p.centers for p in parts]),
            np.stack([p.log_scales for p in parts]),
        )

    @classmethod
    def static(cls, centers: np.ndarray, num_timesteps: int, scales) -> "GaussianSet":
        """Identity-rotation parts with centers replicated over all steps."""
        centers = np.asarray(centers, dtype=np.float64).reshape(-1, 3)
        m = len(centers)
        scales = np.broadcast_to(np.asarray(scales, dtype=np.float64), (m, 3))
        return cls(
            np.tile(IDENTITY_6D, (m, num_timesteps, 1)),
            np.repeat(centers[:, None, :], num_timesteps, axis=1),
            np.log(scales),
        )

    def copy(self) -> "GaussianSet":
        return GaussianSet(self.rot6d.copy(), self.centers.copy(), self.log_scales.copy())

    def subset(self, indices: Sequence[int]) -> "GaussianSet":
        idx = list(indices)
        return GaussianSet(self.rot6d[idx], self.centers[idx], self.log_scales[idx])

    # flat layout: per part, per step rot6d then center, then the part's log_scales
    def flat(self) -> np.ndarray:
        m, K = self.m, self.num_timesteps
        per_step = np.concatenate([self.rot6d, self.centers], axis=2).reshape(m, K * 9)
        return np.concatenate([per_step, self.log_scales], axis=1).reshape(-1)

    @classmethod
    def from_flat(cls, vec: np.ndarray, m: int, K: int) -> "GaussianSet":
        vec = np.asarray(vec, dtype=np.float64).reshape(m, K * 9 + 3)
        per_step = vec[:, : K * 9].reshape(m, K, 9)
        return cls(per_step[..., :6], per_step[..., 6:], vec[:, K * 9 :])

    def tensors(self, requires_grad: bool = False) -> "GaussianTensors":
        return GaussianTensors(
            torch.tensor(self.rot6d, dtype=torch.float64, requires_grad=requires_grad),
            torch.tensor(self.centers, dtype=torch.float64, requires_grad=requires_grad),
            torch.tensor(self.log_scales, dtype=torch.float64, requires_grad=requires_grad),
        )

    @classmethod
    def from_tensors(cls, t: "GaussianTensors") -> "GaussianSet":
        return cls(t.rot6d.detach().numpy(), t.centers.detach().numpy(), t.log_scales.detach().numpy())

    def rotation(self, part: int, step: int) -> np.ndarray:
        return rot6d_to_matrix(Rot6D.from_array(self.rot6d[part, step]))

    def pose(self, part: int, step: int) -> RigidTransform:
        return RigidTransform(self.rotation(part, step), self.centers[part, step])

    def pose_track(self, part: int) -> list[RigidTransform]:
        return [self.pose(part, k) for k in range(self.num_timesteps)]

    # serialization
    def to_dict(self) -> dict:
        return {
            "version": MODEL_VERSION,
            "m": self.m,
            "K": self.num_timesteps,
            "parts": [
                {
                    "rot6d": self.rot6d[i].tolist(),
                    "centers": self.centers[i].tolist(),
                    "log_scales": self.log_scales[i].tolist(),
                }
                for i in range(self.m)
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GaussianSet":
        parts = d["parts"]
        if len(parts) != d["m"]:
            raise ValueError(f"model declares m={d['m']} but lists {len(parts)} parts")
        gs = cls(
            np.array([p["rot6d"] for p in parts], dtype=np.float64),
            np.array([p["centers"] for p in parts], dtype=np.float64),
            np.array([p["log_scales"] for p in parts], dtype=np.float64),
        )
        if gs.num_timesteps != d["K"]:
            raise ValueError(f"model declares K={d['K']} but parts carry {gs.num_timesteps} steps")
        return gs

    def save(self, path: str | Path) -> None:
        _jsonio.write(path, self.to_dict())

    @classmethod
    def load(cls, path: str | Path) -> "GaussianSet":
        return cls.from_dict(_jsonio.read(path))


class GaussianTensors(NamedTuple):
    rot6d: torch.Tensor
    centers: torch.Tensor
    log_scales: torch.Tensor

    def parameters(self) -> list[torch.Tensor]:
        return [self.rot6d, self.centers, self.log_scales]

    def flat_grad(self) -> np.ndarray:
        """Gradient in the :meth:`GaussianSet.flat` layout (zeros where untouched)."""
        m, K = self.centers.shape[:2]
        g = [p.grad if p.grad is not None else torch.zeros_like(p) for p in self.parameters()]
        per_step = torch.cat([g[0], g[1]], dim=2).reshape(m, K * 9)
        return torch.cat([per_step, g[2]], dim=1).reshape(-1).detach().numpy().copy()


@dataclass(frozen=True)
class SoftAssignment:
    weights: np.ndarray  # (N, m), rows sum to one

    def hard(self) -> np.ndarray:
        return np.argmax(self.weights, axis=1)


# ---------------------------------------------------------------------------
# differentiable kernels (torch, float64)


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.ascontiguousarray(x, dtype=np.float64))


def mahalanobis_t(points: torch.Tensor, g: GaussianTensors, step: int) -> torch.Tensor:
    """Squared Mahalanobis distance of every point to every part: (N, m).

    Uses the structural factor ``Σ = (R S)(R S)ᵀ`` so ``Σ⁻¹ d = R S⁻² Rᵀ d``
    without forming an inverse.
    """
    R = rot6d_to_matrix_torch(g.rot6d[:, step])  # (m,3,3)
    d = points[:, None, :] - g.centers[None, :, step, :]  # (N,m,3)
    local = torch.einsum("mji,nmj->nmi", R, d) * torch.exp(-g.log_scales)[None]
    return (local * local).sum(-1)


def log_density_t(points: torch.Tensor, g: GaussianTensors, step: int) -> torch.Tensor:
    """Per point, per part Gaussian log-density: (N, m)."""
    maha = mahalanobis_t(points, g, step)
    log_det = 2.0 * g.log_scales.sum(-1)  # log|Σ|
    return -0.5 * maha - 0.5 * log_det[None] - 1.5 * math.log(2.0 * math.pi)


def soft_weights_t(points: torch.Tensor, g: GaussianTensors, step: int, temperature: float, noise=None) -> torch.Tensor:
    logits = -mahalanobis_t(points, g, step)
    if noise is not None:
        logits = logits + _as_tensor(noise)
    return torch.softmax(logits / temperature, dim=1)


def step_transforms_t(g: GaussianTensors, k: int, t: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-part rigid maps T_i^t · (T_i^k)⁻¹ as (rotations (m,3,3), translations (m,3))."""
    Rk = rot6d_to_matrix_torch(g.rot6d[:, k])
    Rt = rot6d_to_matrix_torch(g.rot6d[:, t])
    A = Rt @ Rk.transpose(1, 2)
    b = g.centers[:, t] - torch.einsum("mij,mj->mi", A, g.centers[:, k])
    return A, b


def transform_soft_t(points: torch.Tensor, weights: torch.Tensor, A: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    moved = torch.einsum("mij,nj->nmi", A, points) + b[None]  # (N,m,3)
    return (weights[..., None] * moved).sum(1)


def transform_hard_t(points: torch.Tensor, labels, A: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    labels = torch.as_tensor(np.ascontiguousarray(labels, dtype=np.int64))
    return torch.einsum("nij,nj->ni", A[labels], points) + b[labels]


# ---------------------------------------------------------------------------
# numpy-facing operations


def _check_index(gset: GaussianSet, part: int | None, step: int) -> None:
    if part is not None and not 0 <= part < gset.m:
        raise IndexError(f"part {part} out of range for m={gset.m}")
    if not 0 <= step < gset.num_timesteps:
        raise IndexError(f"step {step} out of range for K={gset.num_timesteps}")


def covariance(gset: GaussianSet, part: int, step: int) -> np.ndarray:
    _check_index(gset, part, step)
    RS = gset.rotation(part, step) * np.exp(gset.log_scales[part])[None, :]
    return RS @ RS.T


def mahalanobis_sq(x, gset: GaussianSet, part: int, step: int) -> float:
    _check_index(gset, part, step)
    R = gset.rotation(part, step)
    local = R.T @ (np.asarray(x, dtype=np.float64) - gset.centers[part, step])
    local = local / np.exp(gset.log_scales[part])
    return float(local @ local)


def mahalanobis_all(points, gset: GaussianSet, step: int) -> np.ndarray:
    _check_index(gset, None, step)
    with torch.no_grad():
        return mahalanobis_t(_as_tensor(points), gset.tensors(), step).numpy()


def assign_hard(points, gset: GaussianSet, step: int) -> np.ndarray:
    """Label of the part with the smallest Mahalanobis distance; ties go to the lowest index."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(points) == 0:
        return np.zeros(0, dtype=np.int64)
    return np.argmin(mahalanobis_all(points, gset, step), axis=1).astype(np.int64)


def gumbel_noise(rng: np.random.Generator, shape) -> np.ndarray:
    u = rng.random(shape)
    return -np.log(-np.log(np.clip(u, 1e-20, 1.0 - 1e-16)))


def assign_soft(points, gset: GaussianSet, step: int, temperature: float = 1.0, gumbel=None) -> SoftAssignment:
    """Gumbel-Softmax relaxation of :func:`assign_hard`; ``gumbel=None`` disables the noise."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    _check_index(gset, None, step)
    with torch.no_grad():
        w = soft_weights_t(_as_tensor(points), gset.tensors(), step, temperature, gumbel)
    return SoftAssignment(w.numpy())


def transform_points(points, assignment, gset: GaussianSet, k: int, t: int) -> np.ndarray:
    """Move points observed at step ``k`` to step ``t`` with their parts' poses.

    ``assignment`` is either integer labels or a :class:`SoftAssignment`
    (convex blend of the per-part transformed points).
    """
    _check_index(gset, None, k)
    _check_index(gset, None, t)
    pts = _as_tensor(np.asarray(points, dtype=np.float64).reshape(-1, 3))
    with torch.no_grad():
        A, b = step_transforms_t(gset.tensors(), k, t)
        if isinstance(assignment, SoftAssignment):
            out = transform_soft_t(pts, _as_tensor(assignment.weights), A, b)
        else:
            out = transform_hard_t(pts, assignment, A, b)
    return out.numpy()


def fuse_to_step(frames: Sequence[np.ndarray], gset: GaussianSet, assignments: Sequence, t: int, exclude: Sequence[int] = ()) -> np.ndarray:
    """Concatenate every frame (except ``exclude``) transformed to step ``t``."""
    parts = [
        transform_points(frames[k], assignments[k], gset, k, t)
        for k in range(len(frames))
        if k not in exclude
    ]
    if not parts:
        return np.zeros((0, 3))
    return np.concatenate(parts, axis=0)
