"""Synthetic articulated scenes, occlusion variants, and the on-disk dataset format.

A dataset directory holds::

    manifest.json      {version, frames, files, has_gt}
    frame_0000.csv     x,y,z[,label] per line, 17 significant digits
    gt.json            joints, per-frame part poses (row-major 4x4), held-out articulations
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.spatial import ConvexHull

from . import _jsonio
from .geometry import PRISMATIC, REVOLUTE, RigidTransform, ScrewMotion, axis_angle_matrix

DATASET_VERSION = 1
HPR_GAMMA = 2.0
SHAPES = ("box", "cylinder", "sphere")

PALETTE = [
    (230, 25, 75), (60, 180, 75), (255, 225, 25), (0, 130, 200),
    (245, 130, 48), (145, 30, 180), (70, 240, 240), (240, 50, 230),
    (210, 245, 60), (250, 190, 212), (0, 128, 128), (220, 190, 255),
    (170, 110, 40), (255, 250, 200), (128, 0, 0), (0, 0, 128),
]


class InvalidSpec(ValueError):
    pass


class FormatError(ValueError):
    pass


class MissingGroundTruth(ValueError):
    pass


@dataclass(frozen=True)
class PartShape:
    """A rigid part's surface. ``pose`` places the shape frame in the world at rest.

    box: size = (lx, ly, lz); cylinder: (radius, height) along local z; sphere: (radius,)
    """

    kind: str
    size: tuple[float, ...]
    pose: RigidTransform = field(default_factory=RigidTransform)


@dataclass(frozen=True)
class JointSpec:
    parent: int
    child: int
    kind: str
    axis: tuple[float, float, float]
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def screw(self) -> ScrewMotion:
        return ScrewMotion(self.kind, np.array(self.axis), np.array(self.origin), ())


@dataclass(frozen=True)
class SceneSpec:
    parts: tuple[PartShape, ...]
    joints: tuple[JointSpec, ...]
    trajectory: np.ndarray  # (J, K) joint states per frame
    points_per_frame: int = 512
    noise_sigma: float = 0.0
    seed: int = 0
    held_out: np.ndarray | None = None  # (H, J) unseen joint states

    @property
    def frames(self) -> int:
        return int(np.asarray(self.trajectory).shape[1])


@dataclass
class HeldOut:
    states: np.ndarray  # (J,)
    points: np.ndarray
    labels: np.ndarray
    poses: np.ndarray  # (P, 4, 4)


@dataclass
class GroundTruth:
    labels: list[np.ndarray]
    poses: np.ndarray  # (P, K, 4, 4) shape frame -> world
    joints: list[JointSpec]
    joint_states: np.ndarray  # (J, K)
    held_out: list[HeldOut] = field(default_factory=list)

    @property
    def num_parts(self) -> int:
        return self.poses.shape[0]

    def parents(self) -> list[int]:
        parents = [-1] * self.num_parts
        for j in self.joints:
            parents[j.child] = j.parent
        return parents

    def motions(self) -> np.ndarray:
        """Per-part world motions from step 0 to each step: (P, K, 4, 4)."""
        inv0 = np.linalg.inv(self.poses[:, 0])
        return self.poses @ inv0[:, None]


@dataclass
class Dataset:
    frames: list[np.ndarray]
    gt: GroundTruth | None = None

    @property
    def num_frames(self) -> int:
        return len(self.frames)

    def require_gt(self) -> GroundTruth:
        if self.gt is None:
            raise MissingGroundTruth("dataset has no ground truth")
        return self.gt


# ---------------------------------------------------------------------------
# surface sampling


def shape_area(shape: PartShape) -> float:
    if shape.kind == "box":
        lx, ly, lz = shape.size
        return 2.0 * (lx * ly + ly * lz + lx * lz)
    if shape.kind == "cylinder":
        r, h = shape.size
        return 2.0 * math.pi * r * h + 2.0 * math.pi * r * r
    if shape.kind == "sphere":
        (r,) = shape.size
        return 4.0 * math.pi * r * r
    raise InvalidSpec(f"unknown shape {shape.kind!r}")


def sample_surface(shape: PartShape, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` points uniform by area on the shape surface, in the shape frame."""
    if n == 0:
        return np.zeros((0, 3))
    if shape.kind == "box":
        half = np.asarray(shape.size, dtype=np.float64) / 2.0
        lx, ly, lz = shape.size
        face_areas = np.array([ly * lz, ly * lz, lx * lz, lx * lz, lx * ly, lx * ly])
        faces = rng.choice(6, size=n, p=face_areas / face_areas.sum())
        pts = (rng.random((n, 3)) * 2.0 - 1.0) * half
        axis = faces // 2
        sign = np.where(faces % 2 == 0, 1.0, -1.0)
        pts[np.arange(n), axis] = sign * half[axis]
        return pts
    if shape.kind == "cylinder":
        r, h = shape.size
        side = 2.0 * math.pi * r * h
        cap = math.pi * r * r
        which = rng.choice(3, size=n, p=np.array([side, cap, cap]) / (side + 2 * cap))
        phi = rng.random(n) * 2.0 * math.pi
        rad = np.where(which == 0, r, r * np.sqrt(rng.random(n)))
        z = np.where(which == 0, (rng.random(n) - 0.5) * h, np.where(which == 1, h / 2.0, -h / 2.0))
        return np.stack([rad * np.cos(phi), rad * np.sin(phi), z], axis=1)
    if shape.kind == "sphere":
        (r,) = shape.size
        v = rng.normal(size=(n, 3))
        return r * v / np.linalg.norm(v, axis=1, keepdims=True)
    raise InvalidSpec(f"unknown shape {shape.kind!r}")


# ---------------------------------------------------------------------------
# kinematics of the ground-truth tree


def _validate(spec: SceneSpec) -> list[int]:
    P = len(spec.parts)
    if P < 1:
        raise InvalidSpec("scene needs at least one part")
    for p in spec.parts:
        if p.kind not in SHAPES:
            raise InvalidSpec(f"unknown shape {p.kind!r}")
        expected = {"box": 3, "cylinder": 2, "sphere": 1}[p.kind]
        if len(p.size) != expected or any(s <= 0 for s in p.size):
            raise InvalidSpec(f"{p.kind} needs {expected} positive sizes, got {p.size}")
    if len(spec.joints) != P - 1:
        raise InvalidSpec(f"a tree over {P} parts needs {P - 1} joints, got {len(spec.joints)}")
    parents = [-1] * P
    for j in spec.joints:
        if not (0 <= j.parent < P and 0 <= j.child < P) or j.parent == j.child:
            raise InvalidSpec(f"joint {j.parent}->{j.child} references unknown parts")
        if parents[j.child] != -1:
            raise InvalidSpec(f"part {j.child} has two parents")
        if j.kind not in (REVOLUTE, PRISMATIC):
            raise InvalidSpec(f"unknown joint kind {j.kind!r}")
        if np.linalg.norm(j.axis) < 1e-9:
            raise InvalidSpec("joint axis has zero length")
        parents[j.child] = j.parent
    roots = [p for p in range(P) if parents[p] == -1]
    if len(roots) != 1:
        raise InvalidSpec(f"expected exactly one root, found {roots}")
    for p in range(P):  # cycle check: every chain must reach the root
        seen = set()
        q = p
        while parents[q] != -1:
            if q in seen:
                raise InvalidSpec("joint graph has a cycle")
            seen.add(q)
            q = parents[q]
    traj = np.asarray(spec.trajectory, dtype=np.float64)
    if traj.ndim != 2 or traj.shape[0] != len(spec.joints) or traj.shape[1] < 1:
        raise InvalidSpec(f"trajectory must be (joints, frames), got {traj.shape}")
    if spec.points_per_frame < 1:
        raise InvalidSpec("points_per_frame must be at least 1")
    if not spec.noise_sigma >= 0:
        raise InvalidSpec("noise_sigma must be nonnegative")
    return parents


def _topological(parents: list[int]) -> list[int]:
    order, frontier = [], [p for p in range(len(parents)) if parents[p] == -1]
    while frontier:
        p = frontier.pop(0)
        order.append(p)
        frontier.extend(c for c in range(len(parents)) if parents[c] == p)
    return order


def articulate(spec: SceneSpec, states: np.ndarray) -> np.ndarray:
    """Shape-frame poses of every part for one joint configuration: (P, 4, 4)."""
    parents = _validate(spec)
    P = len(spec.parts)
    by_child = {j.child: (i, j) for i, j in enumerate(spec.joints)}
    motion = [None] * P
    for p in _topological(parents):
        if parents[p] == -1:
            motion[p] = RigidTransform()
        else:
            i, j = by_child[p]
            motion[p] = motion[j.parent] @ j.screw().transform(float(states[i]))
    return np.stack([(motion[p] @ spec.parts[p].pose).as_matrix() for p in range(P)])


def sample_articulation(spec: SceneSpec, poses: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Freshly sampled, noisy surface points and labels for parts placed at ``poses``."""
    areas = np.array([shape_area(p) for p in spec.parts])
    counts = rng.multinomial(spec.points_per_frame, areas / areas.sum())
    pts, labels = [], []
    for p, (shape, c) in enumerate(zip(spec.parts, counts)):
        local = sample_surface(shape, int(c), rng)
        pts.append(local @ poses[p, :3, :3].T + poses[p, :3, 3])
        labels.append(np.full(int(c), p, dtype=np.int64))
    pts = np.concatenate(pts)
    labels = np.concatenate(labels)
    if spec.noise_sigma > 0:
        pts = pts + rng.normal(scale=spec.noise_sigma, size=pts.shape)
    order = rng.permutation(len(pts))
    return pts[order], labels[order]


def generate(spec: SceneSpec) -> Dataset:
    _validate(spec)
    traj = np.asarray(spec.trajectory, dtype=np.float64)
    K = traj.shape[1]
    poses = np.stack([articulate(spec, traj[:, k]) for k in range(K)], axis=1)  # (P,K,4,4)
    frames, labels = [], []
    for k in range(K):
        rng = np.random.default_rng([spec.seed, k])
        pts, lab = sample_articulation(spec, poses[:, k], rng)
        frames.append(pts)
        labels.append(lab)
    held = []
    if spec.held_out is not None:
        for h, states in enumerate(np.atleast_2d(np.asarray(spec.held_out, dtype=np.float64))):
            hp = articulate(spec, states)
            pts, lab = sample_articulation(spec, hp, np.random.default_rng([spec.seed, 100_000 + h]))
            held.append(HeldOut(states.copy(), pts, lab, hp))
    gt = GroundTruth(labels, poses, list(spec.joints), traj.copy(), held)
    return Dataset(frames, gt)


# ---------------------------------------------------------------------------
# presets


def _box(size, center) -> PartShape:
    return PartShape("box", tuple(size), RigidTransform(np.eye(3), np.asarray(center, dtype=np.float64)))


def _cyl(radius, height, center, axis=(0.0, 0.0, 1.0)) -> PartShape:
    z = np.asarray(axis, dtype=np.float64)
    z = z / np.linalg.norm(z)
    helper = np.array([1.0, 0.0, 0.0]) if abs(z[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    x = np.cross(helper, z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return PartShape("cylinder", (radius, height), RigidTransform(np.stack([x, y, z], 1), np.asarray(center, dtype=np.float64)))


def _ramp(K: int) -> np.ndarray:
    return np.linspace(0.0, 1.0, K) if K > 1 else np.zeros(1)


PRESETS = ("chain2", "chain3", "chain3-taper", "prism2", "star4", "cyl-axis")


def preset(name: str, frames: int = 8, points: int = 512, noise: float = 0.002, seed: int = 0) -> SceneSpec:
    """Built-in scenes; ``noise`` is a fraction of the rest-pose bounding-box diagonal."""
    s = _ramp(frames)
    wave = np.sin(np.pi * s)
    if name == "chain2":
        parts = (_box((0.5, 0.14, 0.14), (0.25, 0, 0)), _box((0.45, 0.1, 0.1), (0.75, 0, 0)))
        joints = (JointSpec(0, 1, REVOLUTE, (0, 0, 1), (0.51, 0, 0)),)
        traj = np.array([0.8 * s])
        held = np.array([[0.25], [0.55]])
    elif name == "chain3":
        parts = (
            _box((0.36, 0.1, 0.1), (0.18, 0, 0)),
            _box((0.36, 0.1, 0.1), (0.56, 0, 0)),
            _box((0.36, 0.1, 0.1), (0.94, 0, 0)),
        )
        joints = (
            JointSpec(0, 1, REVOLUTE, (0, 0, 1), (0.37, 0, 0)),
            JointSpec(1, 2, REVOLUTE, (0, 1, 0), (0.75, 0, 0)),
        )
        traj = np.array([0.6 * s, 0.7 * wave])
        held = np.array([[0.45, 0.2], [0.15, 0.45]])
    elif name == "chain3-taper":  # unequal links: stresses the equal-weight likelihood
        parts = (
            _box((0.4, 0.12, 0.12), (0.2, 0, 0)),
            _box((0.36, 0.1, 0.1), (0.62, 0, 0)),
            _box((0.36, 0.08, 0.08), (1.02, 0, 0)),
        )
        joints = (
            JointSpec(0, 1, REVOLUTE, (0, 0, 1), (0.42, 0, 0)),
            JointSpec(1, 2, REVOLUTE, (0, 1, 0), (0.82, 0, 0)),
        )
        traj = np.array([0.6 * s, 0.7 * wave])
        held = np.array([[0.45, 0.2], [0.15, 0.45]])
    elif name == "prism2":
        parts = (_box((0.6, 0.2, 0.2), (0.3, 0, 0)), _box((0.4, 0.1, 0.1), (0.75, 0, 0)))
        joints = (JointSpec(0, 1, PRISMATIC, (1, 0, 0), (0.6, 0, 0)),)
        traj = np.array([0.3 * s])
        held = np.array([[0.12], [0.22]])
    elif name == "star4":
        parts = (
            _box((0.3, 0.3, 0.1), (0, 0, 0)),
            _box((0.3, 0.08, 0.08), (0.32, 0, 0)),
            _box((0.08, 0.3, 0.08), (0, 0.32, 0)),
            _box((0.3, 0.08, 0.08), (-0.32, 0, 0)),
        )
        joints = (
            JointSpec(0, 1, REVOLUTE, (0, 1, 0), (0.16, 0, 0)),
            JointSpec(0, 2, REVOLUTE, (1, 0, 0), (0, 0.16, 0)),
            JointSpec(0, 3, REVOLUTE, (0, 1, 0), (-0.16, 0, 0)),
        )
        traj = np.array([0.7 * s, -0.6 * wave, -0.5 * s])
        held = np.array([[0.3, -0.3, -0.2], [0.5, -0.1, -0.4]])
    elif name == "cyl-axis":
        parts = (_box((0.4, 0.4, 0.1), (0, 0, 0)), _cyl(0.08, 0.5, (0, 0, 0.3)))
        joints = (JointSpec(0, 1, REVOLUTE, (0, 0, 1), (0, 0, 0)),)
        traj = np.array([1.2 * s])
        held = np.array([[0.4], [0.9]])
    else:
        raise InvalidSpec(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    base = SceneSpec(parts, joints, traj, points, 0.0, seed, held)
    rest = generate_rest_cloud(base)
    diag = float(np.linalg.norm(rest.max(0) - rest.min(0)))
    return SceneSpec(parts, joints, traj, points, noise * diag, seed, held)


def generate_rest_cloud(spec: SceneSpec, n: int = 2048) -> np.ndarray:
    poses = articulate(spec, np.zeros(len(spec.joints)))
    rng = np.random.default_rng(0)
    return np.concatenate([
        sample_surface(p, n // len(spec.parts), rng) @ poses[i, :3, :3].T + poses[i, :3, 3]
        for i, p in enumerate(spec.parts)
    ])


# ---------------------------------------------------------------------------
# missing-data variants


def _with_kept(ds: Dataset, keep: list[np.ndarray]) -> Dataset:
    gt = ds.gt
    new_gt = GroundTruth([l[k] for l, k in zip(gt.labels, keep)], gt.poses, gt.joints, gt.joint_states, gt.held_out)
    return Dataset([f[k] for f, k in zip(ds.frames, keep)], new_gt)


def make_partial(ds: Dataset, seed: int = 0, min_keep: float = 0.2) -> Dataset:
    """Per frame and part, drop the half facing away from a random direction.

    At least ``min_keep`` of every part's points survive in every frame.
    """
    gt = ds.require_gt()
    keep = []
    for k, (pts, lab) in enumerate(zip(ds.frames, gt.labels)):
        rng = np.random.default_rng([seed, k])
        mask = np.zeros(len(pts), dtype=bool)
        for p in range(gt.num_parts):
            idx = np.flatnonzero(lab == p)
            d = rng.normal(size=3)
            d /= np.linalg.norm(d)
            if len(idx) == 0:
                continue
            proj = (pts[idx] - pts[idx].mean(0)) @ d
            sel = proj >= 0.0
            need = int(math.ceil(min_keep * len(idx)))
            if sel.sum() < need:
                sel = np.zeros(len(idx), dtype=bool)
                sel[np.argsort(-proj, kind="stable")[:need]] = True
            mask[idx[sel]] = True
        keep.append(np.flatnonzero(mask))
    return _with_kept(ds, keep)


def visible_mask(pts: np.ndarray, camera: np.ndarray, gamma: float = HPR_GAMMA) -> np.ndarray:
    """Which points of ``pts`` are visible from ``camera`` (hidden point removal).

    Points are flipped through a sphere around the camera of radius
    ``10**gamma`` times the farthest point distance; the visible ones are the
    flipped points on the convex hull together with the camera.
    """
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
    if len(pts) < 4:
        return np.ones(len(pts), dtype=bool)
    v = pts - camera
    dist = np.linalg.norm(v, axis=1)
    radius = dist.max() * 10.0 ** gamma
    flipped = v + 2.0 * (radius - dist)[:, None] * v / dist[:, None]
    hull = ConvexHull(np.vstack([flipped, np.zeros(3)]))
    visible = np.zeros(len(pts), dtype=bool)
    idx = hull.vertices
    visible[idx[idx < len(pts)]] = True
    return visible


def make_occluded(ds: Dataset, seed: int = 0, radius_factor: float = 3.0, gamma: float = HPR_GAMMA) -> Dataset:
    """Keep only points visible from a random camera per frame (whole parts may vanish)."""
    ds.require_gt()
    allpts = np.concatenate(ds.frames)
    diag = float(np.linalg.norm(allpts.max(0) - allpts.min(0)))
    keep = []
    for k, pts in enumerate(ds.frames):
        rng = np.random.default_rng([seed, k])
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        center = (pts.max(0) + pts.min(0)) / 2.0
        camera = center + radius_factor * diag * d
        keep.append(np.flatnonzero(visible_mask(pts, camera, gamma)))
    return _with_kept(ds, keep)


# ---------------------------------------------------------------------------
# files


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def _write_frame(path: Path, pts: np.ndarray, labels: np.ndarray | None) -> None:
    lines = []
    for n, p in enumerate(pts):
        row = [_fmt(p[0]), _fmt(p[1]), _fmt(p[2])]
        if labels is not None:
            row.append(str(int(labels[n])))
        lines.append(",".join(row))
    path.write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


def _read_frame(path: Path, with_labels: bool) -> tuple[np.ndarray, np.ndarray | None]:
    cols = 4 if with_labels else 3
    pts, labels = [], []
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise FormatError(f"{path}: cannot read frame file ({e})") from e
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        fields = line.split(",")
        if len(fields) != cols:
            raise FormatError(f"{path}:{lineno}: expected {cols} comma-separated fields, got {len(fields)}")
        try:
            xyz = [float(v) for v in fields[:3]]
            if with_labels:
                labels.append(int(fields[3]))
        except ValueError as e:
            raise FormatError(f"{path}:{lineno}: {e}") from e
        if not all(math.isfinite(v) for v in xyz):
            raise FormatError(f"{path}:{lineno}: non-finite coordinate")
        pts.append(xyz)
    arr = np.array(pts, dtype=np.float64).reshape(-1, 3)
    return arr, (np.array(labels, dtype=np.int64) if with_labels else None)


def _joint_to_dict(j: JointSpec) -> dict:
    return {"parent": j.parent, "child": j.child, "kind": j.kind, "axis": list(j.axis), "origin": list(j.origin)}


def _joint_from_dict(d: dict) -> JointSpec:
    return JointSpec(int(d["parent"]), int(d["child"]), str(d["kind"]),
                     tuple(float(v) for v in d["axis"]), tuple(float(v) for v in d["origin"]))


def save(ds: Dataset, directory: str | Path) -> None:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for k, pts in enumerate(ds.frames):
        name = f"frame_{k:04d}.csv"
        _write_frame(out / name, pts, ds.gt.labels[k] if ds.gt is not None else None)
        files.append(name)
    _jsonio.write(out / "manifest.json", {
        "version": DATASET_VERSION,
        "frames": len(ds.frames),
        "files": files,
        "has_gt": ds.gt is not None,
    })
    if ds.gt is not None:
        gt = ds.gt
        P, K = gt.poses.shape[:2]
        _jsonio.write(out / "gt.json", {
            "num_parts": P,
            "joints": [_joint_to_dict(j) for j in gt.joints],
            "joint_states": gt.joint_states.tolist(),
            "poses": [[gt.poses[p, k].reshape(-1).tolist() for k in range(K)] for p in range(P)],
            "held_out": [
                {
                    "states": h.states.tolist(),
                    "poses": [h.poses[p].reshape(-1).tolist() for p in range(P)],
                    "points": h.points.tolist(),
                    "labels": h.labels.tolist(),
                }
                for h in gt.held_out
            ],
        })


def load(directory: str | Path) -> Dataset:
    d = Path(directory)
    manifest_path = d / "manifest.json"
    if not manifest_path.is_file():
        raise FormatError(f"{d}: missing manifest.json")
    try:
        manifest = _jsonio.read(manifest_path)
    except ValueError as e:
        raise FormatError(f"{manifest_path}: invalid JSON ({e})") from e
    for key in ("version", "frames", "files", "has_gt"):
        if key not in manifest:
            raise FormatError(f"{manifest_path}: missing field {key!r}")
    if manifest["version"] != DATASET_VERSION:
        raise FormatError(f"{manifest_path}: unsupported version {manifest['version']!r}")
    if len(manifest["files"]) != manifest["frames"]:
        raise FormatError(f"{manifest_path}: 'frames' is {manifest['frames']} but {len(manifest['files'])} files are listed")
    has_gt = bool(manifest["has_gt"])
    frames, labels = [], []
    for name in manifest["files"]:
        pts, lab = _read_frame(d / name, has_gt)
        frames.append(pts)
        labels.append(lab)
    gt = None
    if has_gt:
        gt_path = d / "gt.json"
        if not gt_path.is_file():
            raise FormatError(f"{d}: manifest says has_gt but gt.json is missing")
        try:
            g = _jsonio.read(gt_path)
            P = int(g["num_parts"])
            poses = np.array(g["poses"], dtype=np.float64).reshape(P, len(frames), 4, 4)
            joints = [_joint_from_dict(j) for j in g["joints"]]
            states = np.array(g["joint_states"], dtype=np.float64).reshape(len(joints), len(frames))
            held = [
                HeldOut(
                    np.array(h["states"], dtype=np.float64),
                    np.array(h["points"], dtype=np.float64).reshape(-1, 3),
                    np.array(h["labels"], dtype=np.int64),
                    np.array(h["poses"], dtype=np.float64).reshape(P, 4, 4),
                )
                for h in g["held_out"]
            ]
        except (KeyError, ValueError, TypeError) as e:
            raise FormatError(f"{gt_path}: malformed ground truth ({e})") from e
        gt = GroundTruth(labels, poses, joints, states, held)
    return Dataset(frames, gt)


def export_ply(cloud, labels, path: str | Path) -> None:
    cloud = np.asarray(cloud, dtype=np.float64).reshape(-1, 3)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if len(labels) != len(cloud):
        raise ValueError(f"{len(labels)} labels for {len(cloud)} points")
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(cloud)}",
        "property double x",
        "property double y",
        "property double z",
        "property uchar red",
        "property uchar green",
        "property uchar blue",
        "end_header",
    ]
    for p, l in zip(cloud, labels):
        r, g, b = PALETTE[int(l) % len(PALETTE)]
        lines.append(f"{_fmt(p[0])} {_fmt(p[1])} {_fmt(p[2])} {r} {g} {b}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def read_ply(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    """Coordinates and RGB colours of an ASCII PLY written by :func:`export_ply`."""
    lines = Path(path).read_text(encoding="ascii").splitlines()
    end = lines.index("end_header")
    n = next(int(l.split()[-1]) for l in lines[:end] if l.startswith("element vertex"))
    rows = [l.split() for l in lines[end + 1 : end + 1 + n]]
    xyz = np.array([[float(v) for v in r[:3]] for r in rows]).reshape(-1, 3)
    rgb = np.array([[int(v) for v in r[3:6]] for r in rows], dtype=np.int64).reshape(-1, 3)
    return xyz, rgb
