"""Pose evaluation metrics.

* MPJAE — mean per-joint angular error over the 15 articulated joints.
  Default is the geodesic angle of the relative rotation (axis-angle
  representation independent); a per-axis mode reports intrinsic XYZ Euler
  component deltas instead.
* PA-MPJPE — mean per-joint position error in millimetres after a
  similarity (Procrustes) alignment of the predicted keypoints onto the
  ground truth: optimal rotation (determinant +1), uniform scale and
  translation.
* pose consistency loss — L1 keypoint distance plus squared L2 pose
  parameter distance, the objective used to encourage agreement between a
  fitted state and reference keypoints in 3D.
* tap / pinch series — knuckle flexion angle traces and fingertip-to-thumb
  distances for gesture-level analysis.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation

from .hand_model import (
    NUM_ARTICULATED,
    TIP_KEYPOINTS,
    HandMesh,
    HandState,
    RiggedHandTemplate,
    joint_names,
    mcp_joint_index,
)


@dataclass
class PosePair:
    """A predicted and a ground-truth hand state, optionally with keypoints."""

    predicted: HandState
    ground_truth: HandState
    predicted_keypoints: np.ndarray | None = None   # (21, 3) metres
    ground_truth_keypoints: np.ndarray | None = None


@dataclass
class MetricReport:
    """Per-frame metric bundle."""

    mpjae_per_joint: dict          # joint name -> degrees
    mpjae_deg: float               # mean over the 15 articulated joints
    pa_mpjpe_mm: float | None      # None when keypoints are unavailable


def rotation_angles_deg(pose_a: np.ndarray, pose_b: np.ndarray,
                        mode: str = "geodesic",
                        euler_convention: str = "XYZ") -> np.ndarray:
    """Angular difference per articulated joint, degrees.

    geodesic: the rotation angle of R_a^T R_b (always in [0, 180]).
    per_axis: mean absolute intrinsic Euler component difference.
    """
    pose_a = np.asarray(pose_a, dtype=float).reshape(NUM_ARTICULATED, 3)
    pose_b = np.asarray(pose_b, dtype=float).reshape(NUM_ARTICULATED, 3)
    ra = Rotation.from_rotvec(pose_a)
    rb = Rotation.from_rotvec(pose_b)
    if mode == "geodesic":
        relative = ra.inv() * rb
        return np.degrees(relative.magnitude())
    if mode == "per_axis":
        ea = ra.as_euler(euler_convention, degrees=True)
        eb = rb.as_euler(euler_convention, degrees=True)
        return np.mean(np.abs(ea - eb), axis=1)
    raise ValueError(f"unknown angle mode {mode!r}")


def mpjae(pair: PosePair, template: RiggedHandTemplate | None = None,
          mode: str = "geodesic") -> tuple[np.ndarray, float]:
    """Per-joint angular errors and their mean, degrees.

    The per-joint array is ordered by articulated joint index; use
    per_joint_names for reporting labels.
    """
    convention = template.euler_convention if template is not None else "XYZ"
    per_joint = rotation_angles_deg(pair.predicted.pose, pair.ground_truth.pose,
                                    mode=mode, euler_convention=convention)
    return per_joint, float(per_joint.mean())


def similarity_align(source: np.ndarray, target: np.ndarray):
    """Least-squares similarity transform mapping source onto target.

    Returns (scale, rotation (3, 3), translation (3,)) minimizing
    ``|| s R x + t - y ||^2`` with det(R) = +1 (reflections are never
    produced).  Raises for degenerate (coincident or collinear) sources.
    """
    src = np.asarray(source, dtype=float)
    dst = np.asarray(target, dtype=float)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 3:
        raise ValueError("source and target must both be (N, 3)")
    n = src.shape[0]
    if n < 3:
        raise ValueError("similarity alignment needs at least 3 points")
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    xs = src - mu_s
    xd = dst - mu_d
    var_s = float((xs ** 2).sum()) / n
    if var_s < 1e-18:
        raise ValueError("source points are coincident; alignment is degenerate")
    cov = xd.T @ xs / n
    u, s, vt = np.linalg.svd(cov)
    if s[1] < 1e-12 * max(s[0], 1.0):
        raise ValueError("source points are collinear; alignment is degenerate")
    d = np.sign(np.linalg.det(u @ vt))
    flip = np.diag([1.0, 1.0, d])
    rot = u @ flip @ vt
    scale = float(np.trace(np.diag(s) @ flip)) / var_s
    trans = mu_d - scale * rot @ mu_s
    return scale, rot, trans


def pa_mpjpe(predicted: np.ndarray, ground_truth: np.ndarray) -> float:
    """Procrustes-aligned mean per-joint position error, millimetres."""
    scale, rot, trans = similarity_align(predicted, ground_truth)
    aligned = scale * np.asarray(predicted, dtype=float) @ rot.T + trans
    err = np.linalg.norm(aligned - np.asarray(ground_truth, dtype=float), axis=1)
    return float(err.mean() * 1000.0)


def metric_report(pair: PosePair, template: RiggedHandTemplate,
                  mode: str = "geodesic") -> MetricReport:
    per_joint, mean_deg = mpjae(pair, template, mode=mode)
    names = joint_names(template)
    pa = None
    if pair.predicted_keypoints is not None and pair.ground_truth_keypoints is not None:
        pa = pa_mpjpe(pair.predicted_keypoints, pair.ground_truth_keypoints)
    return MetricReport(
        mpjae_per_joint={name: float(v) for name, v in zip(names, per_joint)},
        mpjae_deg=mean_deg,
        pa_mpjpe_mm=pa,
    )


def pose_consistency_loss(pair: PosePair) -> float:
    """L1 keypoint distance (metres) plus squared L2 pose distance (radians)."""
    if pair.predicted_keypoints is None or pair.ground_truth_keypoints is None:
        raise ValueError("pose consistency loss needs both keypoint sets")
    kp_term = float(np.abs(np.asarray(pair.predicted_keypoints)
                           - np.asarray(pair.ground_truth_keypoints)).sum())
    pose_term = float(((pair.predicted.pose - pair.ground_truth.pose) ** 2).sum())
    return kp_term + pose_term


def flexion_angle_series(states: list, template: RiggedHandTemplate,
                         finger: str) -> np.ndarray:
    """Knuckle flexion trace: intrinsic-X Euler angle of the finger's
    metacarpophalangeal joint rotation, degrees, one value per state.

    Meaningful for the four long fingers whose flexion axis is the local x.
    """
    if finger == "thumb":
        raise ValueError("flexion traces are defined for the four long fingers")
    idx = mcp_joint_index(template, finger)
    out = np.empty(len(states))
    for i, state in enumerate(states):
        rot = Rotation.from_rotvec(state.pose[idx])
        out[i] = rot.as_euler(template.euler_convention, degrees=True)[0]
    return out


@dataclass
class TapSeries:
    predicted_deg: np.ndarray
    ground_truth_deg: np.ndarray
    rmse_deg: float


def tap_angle_series(predicted_states: list, ground_truth_states: list,
                     template: RiggedHandTemplate, finger: str) -> TapSeries:
    """Flexion traces of predicted vs ground-truth states and their RMSE."""
    if len(predicted_states) != len(ground_truth_states) or not predicted_states:
        raise ValueError("need equal-length, non-empty state sequences")
    pred = flexion_angle_series(predicted_states, template, finger)
    gt = flexion_angle_series(ground_truth_states, template, finger)
    rmse = float(np.sqrt(np.mean((pred - gt) ** 2)))
    return TapSeries(predicted_deg=pred, ground_truth_deg=gt, rmse_deg=rmse)


def fingertip_thumb_distance(mesh: HandMesh, finger: str) -> float:
    """Distance between a fingertip keypoint and the thumb tip, millimetres."""
    if finger not in TIP_KEYPOINTS or finger == "thumb":
        raise ValueError(f"finger must be one of the four long fingers, got {finger!r}")
    kp = mesh.keypoints21
    d = np.linalg.norm(kp[TIP_KEYPOINTS[finger]] - kp[TIP_KEYPOINTS["thumb"]])
    return float(d * 1000.0)


@dataclass
class PinchSeries:
    predicted_mm: np.ndarray
    ground_truth_mm: np.ndarray
    rmse_mm: float


def pinch_distance_series(predicted_meshes: list, ground_truth_meshes: list,
                          finger: str) -> PinchSeries:
    """Fingertip-to-thumb distance traces and their RMSE, millimetres."""
    if len(predicted_meshes) != len(ground_truth_meshes) or not predicted_meshes:
        raise ValueError("need equal-length, non-empty mesh sequences")
    pred = np.asarray([fingertip_thumb_distance(m, finger) for m in predicted_meshes])
    gt = np.asarray([fingertip_thumb_distance(m, finger) for m in ground_truth_meshes])
    rmse = float(np.sqrt(np.mean((pred - gt) ** 2)))
    return PinchSeries(predicted_mm=pred, ground_truth_mm=gt, rmse_mm=rmse)


def per_joint_names(template: RiggedHandTemplate) -> list[str]:
    """Reporting labels for the 15 articulated joints (layout order)."""
    return joint_names(template)
