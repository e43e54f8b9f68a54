"""Rigid-body algebra: 6D rotations, SE(3) transforms and 1-DOF screw motions."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

DEGENERATE_EPS = 1e-9


class DegenerateRotation(ValueError):
    pass


@dataclass(frozen=True)
class Rot6D:
    """First two columns of a rotation matrix, before orthonormalization."""

    a: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "a", np.asarray(self.a, dtype=np.float64).reshape(3))
        object.__setattr__(self, "b", np.asarray(self.b, dtype=np.float64).reshape(3))

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.a, self.b])

    @classmethod
    def from_array(cls, v) -> "Rot6D":
        v = np.asarray(v, dtype=np.float64).reshape(6)
        return cls(v[:3], v[3:])


def rot6d_to_matrix(r: Rot6D | np.ndarray) -> np.ndarray:
    """Gram-Schmidt the 6D representation into a proper rotation matrix."""
    v = r.as_array() if isinstance(r, Rot6D) else np.asarray(r, dtype=np.float64).reshape(6)
    a, b = v[:3], v[3:]
    na = np.linalg.norm(a)
    if na < DEGENERATE_EPS:
        raise DegenerateRotation(f"first column has norm {na:.3g}")
    c1 = a / na
    resid = b - (b @ c1) * c1
    nr = np.linalg.norm(resid)
    if nr < DEGENERATE_EPS:
        raise DegenerateRotation(f"columns are (nearly) parallel, residual {nr:.3g}")
    c2 = resid / nr
    c3 = np.cross(c1, c2)
    return np.stack([c1, c2, c3], axis=1)


def matrix_to_rot6d(R: np.ndarray) -> Rot6D:
    R = np.asarray(R, dtype=np.float64)
    return Rot6D(R[:, 0].copy(), R[:, 1].copy())


def rot6d_to_matrix_torch(v: torch.Tensor) -> torch.Tensor:
    """Batched, differentiable version of :func:`rot6d_to_matrix`; ``v`` is (..., 6)."""
    a, b = v[..., :3], v[..., 3:]
    c1 = a / torch.linalg.norm(a, dim=-1, keepdim=True)
    resid = b - (b * c1).sum(-1, keepdim=True) * c1
    c2 = resid / torch.linalg.norm(resid, dim=-1, keepdim=True)
    c3 = torch.linalg.cross(c1, c2, dim=-1)
    return torch.stack([c1, c2, c3], dim=-1)


@dataclass(frozen=True)
class RigidTransform:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64).reshape(3, 3))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    @classmethod
    def from_matrix(cls, M) -> "RigidTransform":
        M = np.asarray(M, dtype=np.float64)
        return cls(M[:3, :3], M[:3, 3])

    def as_matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M

    def apply(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation.T + self.translation

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        return compose(self, other)

    def inverse(self) -> "RigidTransform":
        return inverse(self)


def compose(t1: RigidTransform, t2: RigidTransform) -> RigidTransform:
    """(t1 ∘ t2)(x) = t1(t2(x))."""
    return RigidTransform(t1.rotation @ t2.rotation, t1.rotation @ t2.translation + t1.translation)


def inverse(t: RigidTransform) -> RigidTransform:
    Rt = t.rotation.T
    return RigidTransform(Rt, -Rt @ t.translation)


def relative_motion(t_next: RigidTransform, t_curr: RigidTransform) -> RigidTransform:
    """World-frame motion of a part between consecutive steps: t_next · t_curr⁻¹."""
    return compose(t_next, inverse(t_curr))


def axis_angle_matrix(axis: np.ndarray, angle: float) -> np.ndarray:
    """Rodrigues rotation about a unit axis."""
    x, y, z = np.asarray(axis, dtype=np.float64)
    K = np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])
    return np.eye(3) + math.sin(angle) * K + (1.0 - math.cos(angle)) * (K @ K)


def axis_angle_matrix_torch(axis: torch.Tensor, angle: torch.Tensor) -> torch.Tensor:
    """Batched Rodrigues; ``axis`` (..., 3) unit, ``angle`` (...) -> (..., 3, 3)."""
    x, y, z = axis[..., 0], axis[..., 1], axis[..., 2]
    zero = torch.zeros_like(x)
    K = torch.stack(
        [
            torch.stack([zero, -z, y], -1),
            torch.stack([z, zero, -x], -1),
            torch.stack([-y, x, zero], -1),
        ],
        -2,
    )
    s = torch.sin(angle)[..., None, None]
    c = torch.cos(angle)[..., None, None]
    eye = torch.eye(3, dtype=axis.dtype).expand(K.shape)
    return eye + s * K + (1.0 - c) * (K @ K)


def wrap_angle(theta: float) -> float:
    """Map an angle into (-π, π]."""
    w = math.remainder(theta, 2.0 * math.pi)
    if w <= -math.pi:
        w += 2.0 * math.pi
    return w


REVOLUTE = "revolute"
PRISMATIC = "prismatic"


@dataclass(frozen=True)
class ScrewMotion:
    kind: str
    axis: np.ndarray
    origin: np.ndarray
    states: tuple[float, ...]

    def __post_init__(self):
        if self.kind not in (REVOLUTE, PRISMATIC):
            raise ValueError(f"unknown joint kind {self.kind!r}")
        axis = np.asarray(self.axis, dtype=np.float64).reshape(3)
        n = np.linalg.norm(axis)
        if n < DEGENERATE_EPS:
            raise ValueError("screw axis has zero length")
        object.__setattr__(self, "axis", axis / n)
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=np.float64).reshape(3))
        states = [float(s) for s in self.states]
        if self.kind == REVOLUTE:
            states = [wrap_angle(s) for s in states]
        object.__setattr__(self, "states", tuple(states))

    def transform(self, value: float) -> RigidTransform:
        """Rigid motion for an arbitrary joint value."""
        if self.kind == PRISMATIC:
            return RigidTransform(np.eye(3), value * self.axis)
        R = axis_angle_matrix(self.axis, value)
        return RigidTransform(R, self.origin - R @ self.origin)


def screw_to_transform(s: ScrewMotion, step: int) -> RigidTransform:
    if not 0 <= step < len(s.states):
        raise IndexError(f"step {step} out of range for {len(s.states)} joint states")
    return s.transform(s.states[step])


def homogeneous(R: np.ndarray, t: np.ndarray) -> np.ndarray:
    M = np.eye(4)
    M[:3, :3] = R
    M[:3, 3] = t
    return M


def stack_matrices(transforms: Sequence[RigidTransform]) -> np.ndarray:
    return np.stack([t.as_matrix() for t in transforms])
