"""Tests for pose and keypoint evaluation metrics.

Angular errors are cross-checked against an independent rotation-library
oracle, the Procrustes alignment against a closed-form reimplementation,
and the series metrics against hand-built traces with known answers.
"""

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from handkit.hand_model import (
    NUM_ARTICULATED,
    TIP_KEYPOINTS,
    HandMesh,
    HandState,
    pose_mesh,
)
from handkit.metrics import (
    MetricReport,
    PosePair,
    fingertip_thumb_distance,
    metric_report,
    mpjae,
    pa_mpjpe,
    per_joint_names,
    pinch_distance_series,
    pose_consistency_loss,
    rotation_angles_deg,
    similarity_align,
    tap_angle_series,
)

from conftest import random_articulated_state
from oracles import geodesic_angle_deg, similarity_align_error_mm


def _pair(template, pose_a, pose_b, **kw):
    a = HandState.neutral(template.shape_rank)
    a.pose = np.asarray(pose_a, dtype=float)
    b = HandState.neutral(template.shape_rank)
    b.pose = np.asarray(pose_b, dtype=float)
    return PosePair(predicted=a, ground_truth=b, **kw)


# ---------------------------------------------------------------------------
# angular error


def test_mpjae_zero_for_identical_poses(template):
    pose = random_articulated_state(template, seed=1).pose
    per_joint, overall = mpjae(_pair(template, pose, pose), template)
    assert np.all(per_joint == 0.0)
    assert overall == 0.0


def test_mpjae_single_thirty_degree_joint(template):
    axis = np.array([0.36, -0.48, 0.8])          # unit length
    pose_a = np.zeros((NUM_ARTICULATED, 3))
    pose_b = np.zeros((NUM_ARTICULATED, 3))
    pose_b[7] = np.radians(30.0) * axis
    per_joint, overall = mpjae(_pair(template, pose_a, pose_b), template)
    assert per_joint[7] == pytest.approx(30.0, abs=1e-9)
    assert np.all(per_joint[np.arange(NUM_ARTICULATED) != 7] == 0.0)
    assert overall == pytest.approx(2.0, abs=1e-9)


def test_mpjae_thirty_degrees_composed_on_nonzero_joint(template):
    base = random_articulated_state(template, seed=2).pose
    axis = np.array([0.0, 0.6, 0.8])
    extra = Rotation.from_rotvec(np.radians(30.0) * axis)
    pose_b = base.copy()
    pose_b[4] = (Rotation.from_rotvec(base[4]) * extra).as_rotvec()
    per_joint, overall = mpjae(_pair(template, base, pose_b), template)
    assert per_joint[4] == pytest.approx(30.0, abs=1e-6)
    assert overall == pytest.approx(30.0 / NUM_ARTICULATED, abs=1e-6)


def test_mpjae_antipodal_axis_angle_is_zero(template):
    pose_a = np.zeros((NUM_ARTICULATED, 3))
    pose_b = np.zeros((NUM_ARTICULATED, 3))
    pose_a[3] = np.array([np.pi, 0.0, 0.0])
    pose_b[3] = np.array([-np.pi, 0.0, 0.0])
    per_joint, overall = mpjae(_pair(template, pose_a, pose_b), template)
    assert per_joint[3] == pytest.approx(0.0, abs=1e-6)
    assert overall == pytest.approx(0.0, abs=1e-6)


def test_mpjae_matches_independent_geodesic_oracle(template):
    pose_a = random_articulated_state(template, seed=3).pose
    pose_b = random_articulated_state(template, seed=4).pose
    per_joint, _ = mpjae(_pair(template, pose_a, pose_b), template)
    for j in range(NUM_ARTICULATED):
        assert per_joint[j] == pytest.approx(
            geodesic_angle_deg(pose_a[j], pose_b[j]), abs=1e-9)


def test_mpjae_invariant_under_shared_left_rotation(template):
    pose_a = random_articulated_state(template, seed=5).pose
    pose_b = random_articulated_state(template, seed=6).pose
    g = Rotation.from_rotvec([0.4, -0.2, 0.9])
    rot_a = (g * Rotation.from_rotvec(pose_a)).as_rotvec()
    rot_b = (g * Rotation.from_rotvec(pose_b)).as_rotvec()
    before, _ = mpjae(_pair(template, pose_a, pose_b), template)
    after, _ = mpjae(_pair(template, rot_a, rot_b), template)
    assert np.allclose(before, after, atol=1e-9)


def test_per_axis_mode_reports_euler_component_mean(template):
    pose_a = np.zeros((NUM_ARTICULATED, 3))
    pose_b = np.zeros((NUM_ARTICULATED, 3))
    pose_b[2] = np.array([np.radians(10.0), 0.0, 0.0])
    per_axis = rotation_angles_deg(pose_a, pose_b, mode="per_axis")
    geodesic = rotation_angles_deg(pose_a, pose_b, mode="geodesic")
    assert per_axis[2] == pytest.approx(10.0 / 3.0, abs=1e-9)
    assert geodesic[2] == pytest.approx(10.0, abs=1e-9)


def test_unknown_angle_mode_rejected():
    with pytest.raises(ValueError, match="mode"):
        rotation_angles_deg(np.zeros((15, 3)), np.zeros((15, 3)), mode="chordal")


# ---------------------------------------------------------------------------
# Procrustes-aligned position error


def _random_cloud(seed, n=21, scale=0.05):
    return np.random.default_rng(seed).uniform(-scale, scale, (n, 3))


def test_pa_mpjpe_zero_on_similarity_copy():
    gt = _random_cloud(10)
    rot = Rotation.from_rotvec([0.3, 0.5, -0.2]).as_matrix()
    pred = 1.7 * gt @ rot.T + np.array([0.4, -0.1, 0.25])
    assert pa_mpjpe(pred, gt) == pytest.approx(0.0, abs=1e-9)


def test_pa_mpjpe_invariant_under_similarity_of_prediction():
    gt = _random_cloud(11)
    pred = gt + np.random.default_rng(12).normal(0.0, 2e-3, gt.shape)
    rot = Rotation.from_rotvec([-0.7, 0.2, 0.4]).as_matrix()
    moved = 0.6 * pred @ rot.T + np.array([-0.2, 0.3, 0.1])
    assert pa_mpjpe(moved, gt) == pytest.approx(pa_mpjpe(pred, gt), abs=1e-9)


def test_pa_mpjpe_no_worse_than_unaligned():
    gt = _random_cloud(13)
    pred = gt + np.random.default_rng(14).normal(0.0, 3e-3, gt.shape)
    unaligned = float(np.linalg.norm(pred - gt, axis=1).mean() * 1000.0)
    assert pa_mpjpe(pred, gt) <= unaligned + 1e-12


def test_pa_mpjpe_single_point_perturbation_matches_oracle():
    gt = _random_cloud(15)
    pred = gt.copy()
    pred[9] += np.array([0.0, 0.003, 0.0])      # 3 mm on one of 21 points
    unaligned = float(np.linalg.norm(pred - gt, axis=1).mean() * 1000.0)
    assert unaligned == pytest.approx(3.0 / 21.0, rel=1e-12)
    value = pa_mpjpe(pred, gt)
    assert value == pytest.approx(similarity_align_error_mm(pred, gt), abs=1e-9)
    # the alignment minimizes the squared error, so the root-mean-square
    # error can only go down (the plain mean of norms carries no such
    # guarantee: spreading one large residual over many points raises it)
    def rms(a, b):
        return float(np.sqrt(np.mean(np.sum((a - b) ** 2, axis=1))) * 1000.0)

    scale, rot, trans = similarity_align(pred, gt)
    aligned = scale * pred @ rot.T + trans
    assert rms(aligned, gt) <= rms(pred, gt) + 1e-12


def test_pa_mpjpe_reflection_cannot_be_absorbed():
    gt = _random_cloud(77)
    pred = gt * np.array([-1.0, 1.0, 1.0])
    assert pa_mpjpe(pred, gt) > 1.0             # proper rotations only


def test_similarity_align_degenerate_inputs():
    line = np.outer(np.linspace(0.0, 1.0, 8), np.array([1.0, 2.0, 3.0]))
    with pytest.raises(ValueError, match="collinear"):
        similarity_align(line, line + 0.01)
    same = np.tile([0.1, 0.2, 0.3], (5, 1))
    with pytest.raises(ValueError, match="coincident"):
        similarity_align(same, same)
    with pytest.raises(ValueError, match="3 points"):
        similarity_align(np.zeros((2, 3)), np.zeros((2, 3)))
    with pytest.raises(ValueError, match=r"\(N, 3\)"):
        similarity_align(np.zeros((5, 3)), np.zeros((6, 3)))


# ---------------------------------------------------------------------------
# keypoint/pose consistency loss


def test_consistency_loss_zero_for_identical_pair(template):
    pose = random_articulated_state(template, seed=8).pose
    kp = _random_cloud(8)
    pair = _pair(template, pose, pose,
                 predicted_keypoints=kp, ground_truth_keypoints=kp.copy())
    assert pose_consistency_loss(pair) == 0.0


def test_consistency_loss_one_millimetre_keypoint(template):
    pose = np.zeros((NUM_ARTICULATED, 3))
    kp = _random_cloud(9)
    moved = kp.copy()
    moved[4, 0] += 0.001
    pair = _pair(template, pose, pose,
                 predicted_keypoints=moved, ground_truth_keypoints=kp)
    assert pose_consistency_loss(pair) == pytest.approx(0.001, rel=1e-12)


def test_consistency_loss_tenth_radian_pose(template):
    pose_a = np.zeros((NUM_ARTICULATED, 3))
    pose_b = np.zeros((NUM_ARTICULATED, 3))
    pose_b[6, 1] = 0.1
    kp = _random_cloud(16)
    pair = _pair(template, pose_a, pose_b,
                 predicted_keypoints=kp, ground_truth_keypoints=kp.copy())
    assert pose_consistency_loss(pair) == pytest.approx(0.01, rel=1e-12)


def test_consistency_loss_requires_keypoints(template):
    pose = np.zeros((NUM_ARTICULATED, 3))
    with pytest.raises(ValueError, match="keypoint"):
        pose_consistency_loss(_pair(template, pose, pose))


def test_consistency_loss_non_negative(template):
    rng = np.random.default_rng(20)
    pose_a = random_articulated_state(template, seed=21).pose
    pose_b = random_articulated_state(template, seed=22).pose
    pair = _pair(template, pose_a, pose_b,
                 predicted_keypoints=rng.normal(size=(21, 3)),
                 ground_truth_keypoints=rng.normal(size=(21, 3)))
    assert pose_consistency_loss(pair) > 0.0


# ---------------------------------------------------------------------------
# report bundle


def test_metric_report_names_and_bounds(template):
    pose_a = random_articulated_state(template, seed=30).pose
    pose_b = random_articulated_state(template, seed=31).pose
    kp = _random_cloud(30)
    report = metric_report(
        _pair(template, pose_a, pose_b,
              predicted_keypoints=kp + 1e-3, ground_truth_keypoints=kp),
        template)
    assert isinstance(report, MetricReport)
    assert list(report.mpjae_per_joint) == per_joint_names(template)
    assert all(v >= 0.0 for v in report.mpjae_per_joint.values())
    assert report.mpjae_deg >= 0.0
    assert report.pa_mpjpe_mm is not None and report.pa_mpjpe_mm >= 0.0


def test_metric_report_without_keypoints(template):
    pose = random_articulated_state(template, seed=32).pose
    report = metric_report(_pair(template, pose, pose), template)
    assert report.pa_mpjpe_mm is None
    assert report.mpjae_deg == 0.0


# ---------------------------------------------------------------------------
# tap angle series


def _flexion_states(template, degrees, finger="index"):
    from handkit.hand_model import mcp_joint_index
    idx = mcp_joint_index(template, finger)
    states = []
    for value in degrees:
        s = HandState.neutral(template.shape_rank)
        s.pose[idx, 0] = np.radians(value)
        states.append(s)
    return states


def test_tap_series_identical_zero_rmse(template):
    states = _flexion_states(template, [0.0, 15.0, 40.0, 15.0, 0.0])
    series = tap_angle_series(states, states, template, "index")
    assert series.rmse_deg == pytest.approx(0.0, abs=1e-12)
    assert np.allclose(series.predicted_deg, [0.0, 15.0, 40.0, 15.0, 0.0],
                       atol=1e-9)


def test_tap_series_constant_offset(template):
    truth = [0.0, 10.0, 25.0, 10.0]
    series = tap_angle_series(
        _flexion_states(template, [v + 5.0 for v in truth], "middle"),
        _flexion_states(template, truth, "middle"), template, "middle")
    assert series.rmse_deg == pytest.approx(5.0, abs=1e-9)


def test_tap_series_sinusoid_phase_shift_closed_form(template):
    n, amplitude, phase = 32, 20.0, np.pi / 3.0
    u = 2.0 * np.pi * np.arange(n) / n
    truth = amplitude * np.sin(u)
    shifted = amplitude * np.sin(u + phase)
    series = tap_angle_series(
        _flexion_states(template, shifted, "ring"),
        _flexion_states(template, truth, "ring"), template, "ring")
    # difference = 2A sin(phase/2) cos(u + phase/2); sampled over whole
    # periods the squared cosine averages to exactly 1/2
    expected = np.sqrt(2.0) * amplitude * np.sin(phase / 2.0)
    assert series.rmse_deg == pytest.approx(expected, abs=1e-9)


def test_tap_series_validation(template):
    states = _flexion_states(template, [0.0, 5.0])
    with pytest.raises(ValueError, match="equal-length"):
        tap_angle_series(states, states[:1], template, "index")
    with pytest.raises(ValueError, match="equal-length"):
        tap_angle_series([], [], template, "index")
    with pytest.raises(ValueError, match="long fingers"):
        tap_angle_series(states, states, template, "thumb")


# ---------------------------------------------------------------------------
# pinch distance series


def _mesh_with_tips(template, thumb_tip, finger_tip, finger="index"):
    mesh = pose_mesh(template, HandState.neutral(template.shape_rank))
    kp = mesh.keypoints21.copy()
    kp[TIP_KEYPOINTS["thumb"]] = thumb_tip
    kp[TIP_KEYPOINTS[finger]] = finger_tip
    return HandMesh(vertices=mesh.vertices, faces=mesh.faces,
                    joints=mesh.joints, keypoints21=kp)


def test_fingertip_distance_hand_placed(template):
    mesh = _mesh_with_tips(template, [0.0, 0.0, 0.0], [0.04, 0.0, 0.0])
    assert fingertip_thumb_distance(mesh, "index") == pytest.approx(40.0, abs=1e-9)
    touching = _mesh_with_tips(template, [0.01, 0.02, 0.03], [0.01, 0.02, 0.03])
    assert fingertip_thumb_distance(touching, "index") == pytest.approx(0.0, abs=1e-12)


def test_pinch_series_values_and_rmse(template):
    far = _mesh_with_tips(template, [0.0, 0.0, 0.0], [0.0, 0.04, 0.0])
    near = _mesh_with_tips(template, [0.0, 0.0, 0.0], [0.006, 0.0, 0.008])
    series = pinch_distance_series([far, near], [far, near], "index")
    assert np.allclose(series.predicted_mm, [40.0, 10.0], atol=1e-9)
    assert series.rmse_mm == pytest.approx(0.0, abs=1e-12)

    swapped = pinch_distance_series([far, near], [near, far], "index")
    assert swapped.rmse_mm == pytest.approx(30.0, abs=1e-9)


def test_pinch_series_validation(template):
    mesh = _mesh_with_tips(template, [0.0, 0.0, 0.0], [0.04, 0.0, 0.0])
    with pytest.raises(ValueError, match="equal-length"):
        pinch_distance_series([mesh], [], "index")
    with pytest.raises(ValueError, match="long fingers"):
        fingertip_thumb_distance(mesh, "thumb")
    with pytest.raises(ValueError, match="long fingers"):
        fingertip_thumb_distance(mesh, "palm")
