"""End-to-end wiring: fit Gaussians, extract the kinematic model, evaluate against ground truth."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .dataio import Dataset, GroundTruth
from .gaussian_model import SCALE_MAX, SCALE_MIN, GaussianSet
from .geometry import ScrewMotion
from .kinematics import Joint, KinematicFit, KinematicModel, extract_kinematics, part_motions, reanimate
from .losses import FlowOracle
from .metrics import (
    MetricsReport,
    flow_error,
    project_joint_value,
    rand_index_suite,
    reanimate_error,
    reconstruction_error,
    tree_edit_distance,
)
from .optimizer import FitResult, OptimizerConfig, fit_sweep


@dataclass
class PipelineResult:
    fit: FitResult
    candidates: list[FitResult]
    kinematics: KinematicFit


def run(frames: Sequence[np.ndarray], config: OptimizerConfig, oracle: FlowOracle | None = None,
        merge_threshold: float = 3e-2) -> PipelineResult:
    best, candidates = fit_sweep(frames, config, oracle)
    kfit = extract_kinematics(
        best.set, frames, threshold=merge_threshold, finetune_iterations=config.finetune_iterations,
        lr=config.lr_kinematic, weights=config.weights, mode=config.mode, seed=config.seed,
    )
    return PipelineResult(best, candidates, kfit)


def model_motions(model: KinematicModel) -> np.ndarray:
    """Rest-relative motions (P, K, 4, 4) of every part under forward kinematics."""
    states = model.states()
    return np.stack([part_motions(model, states[:, k], model.root_track[k]) for k in range(model.num_timesteps)],
                    axis=1)


def _majority(labels: np.ndarray, gt_labels: np.ndarray, part: int) -> int | None:
    sel = gt_labels[labels == part]
    if len(sel) == 0:
        return None
    return int(np.bincount(sel).argmax())


def articulation_values(model: KinematicModel, gt: GroundTruth, labels0: np.ndarray, gt_labels0: np.ndarray,
                        poses: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Model joint values (and root motion) that reproduce a ground-truth articulation.

    Every model part is matched to the ground-truth part owning most of its
    step-0 points; each joint value is the projection of the matched parts'
    relative motion onto the model's screw.
    """
    gt_motion = poses @ np.linalg.inv(gt.poses[:, 0])  # (P_gt, 4, 4) relative to step 0
    match = {p: _majority(labels0, gt_labels0, p) for p in model.parts}

    def motion_of(p: int) -> np.ndarray:
        g = match[p]
        return np.eye(4) if g is None else gt_motion[g]

    values = []
    for e in model.edges:
        rel = np.linalg.inv(motion_of(e.parent)) @ motion_of(e.child)
        values.append(project_joint_value(e.screw.kind, e.screw.axis, e.screw.origin, rel))
    return np.array(values), motion_of(model.root)


def reanimate_clouds(model: KinematicModel, ds: Dataset, labels0: np.ndarray) -> list[np.ndarray]:
    gt = ds.require_gt()
    out = []
    for h in gt.held_out:
        values, root_motion = articulation_values(model, gt, labels0, gt.labels[0], h.poses)
        moved = reanimate(model, values, ds.frames[0], labels0)
        out.append(moved @ root_motion[:3, :3].T + root_motion[:3, 3])
    return out


def evaluate(ds: Dataset, model: KinematicModel, labels: Sequence[np.ndarray], seed: int = 0) -> MetricsReport:
    """All five metrics for a kinematic model and its per-frame part labels."""
    gt = ds.require_gt()
    est = model_motions(model)
    gt_motions = gt.motions()
    recon = reconstruction_error(ds.frames[0], gt.labels[0], gt_motions, labels[0], est)
    flow = flow_error(ds.frames, gt.labels, gt_motions, labels, est)
    per_scan, multi_scan = rand_index_suite(labels, gt.labels)
    parents = [-1] * len(model.parts)
    for e in model.edges:
        parents[e.child] = e.parent
    ted = tree_edit_distance(parents, gt.parents())
    if gt.held_out:
        reanim = reanimate_error(reanimate_clouds(model, ds, labels[0]), [h.points for h in gt.held_out], seed)
    else:
        reanim = None
    return MetricsReport(recon, flow, reanim, per_scan, multi_scan, ted)


def _joint_motions_gt(gt: GroundTruth, states: np.ndarray) -> np.ndarray:
    """World motions (P, 4, 4) of every part for ground-truth joint states, relative to all-zero states."""
    P = gt.num_parts
    parents = gt.parents()
    by_child = {j.child: (i, j) for i, j in enumerate(gt.joints)}
    out = [None] * P
    pending = [p for p in range(P) if parents[p] == -1]
    while pending:
        p = pending.pop(0)
        if parents[p] == -1:
            out[p] = np.eye(4)
        else:
            i, j = by_child[p]
            out[p] = out[j.parent] @ j.screw().transform(float(states[i])).as_matrix()
        pending.extend(c for c in range(P) if parents[c] == p)
    return np.stack(out)


def gt_gaussians(ds: Dataset) -> GaussianSet:
    """One Gaussian per ground-truth part, shaped by the part's point moments in its own frame."""
    gt = ds.require_gt()
    P, K = gt.poses.shape[:2]
    rot6d = np.zeros((P, K, 6))
    centers = np.zeros((P, K, 3))
    log_scales = np.zeros((P, 3))
    for p in range(P):
        local = []
        for k in range(K):
            sel = ds.frames[k][gt.labels[k] == p]
            inv = np.linalg.inv(gt.poses[p, k])
            local.append(sel @ inv[:3, :3].T + inv[:3, 3])
        local = np.concatenate(local)
        c = local.mean(0)
        evals, V = np.linalg.eigh(np.cov(local.T) if len(local) > 1 else np.eye(3))
        if np.linalg.det(V) < 0:
            V[:, 0] = -V[:, 0]
        log_scales[p] = np.log(np.clip(np.sqrt(np.maximum(evals, 0.0)), SCALE_MIN, SCALE_MAX))
        for k in range(K):
            R = gt.poses[p, k, :3, :3] @ V
            rot6d[p, k] = np.concatenate([R[:, 0], R[:, 1]])
            centers[p, k] = gt.poses[p, k, :3, :3] @ c + gt.poses[p, k, :3, 3]
    return GaussianSet(rot6d, centers, log_scales)


def gt_model(ds: Dataset) -> tuple[GaussianSet, KinematicModel]:
    """The ground truth expressed as a fitted model: raw Gaussians and their kinematic tree."""
    gt = ds.require_gt()
    gset = gt_gaussians(ds)
    P, K = gt.poses.shape[:2]
    q0 = gt.joint_states[:, 0]
    at0 = _joint_motions_gt(gt, q0)
    edges = []
    for i, j in enumerate(gt.joints):
        A = at0[j.parent]
        axis = A[:3, :3] @ np.asarray(j.axis, dtype=np.float64)
        origin = A[:3, :3] @ np.asarray(j.origin, dtype=np.float64) + A[:3, 3]
        states = tuple(gt.joint_states[i, 1:] - q0[i])
        edges.append(Joint(j.parent, j.child, ScrewMotion(j.kind, axis, origin, states), 0.0))
    root = gt.parents().index(-1)
    rest = np.stack([gset.pose(p, 0).as_matrix() for p in range(P)])
    track = gt.poses[root] @ np.linalg.inv(gt.poses[root, 0])
    model = KinematicModel(list(range(P)), gset, root, edges, rest, track, np.arange(P))
    return gset, model
