"""Shared fixtures: the synthetic hand, a camera that frames it, and a
small on-disk dataset (template + calibration + annotated frames) used by
the batch-pipeline and acceptance tests."""

from __future__ import annotations

import json

import numpy as np
import pytest

from handkit.camera import CameraRig, save_calibration
from handkit.hand_model import HandState, pose_mesh, save_template
from handkit.pgm import write_pgm
from handkit.synthetic import build_synthetic_hand

# Camera chosen so every fixture pose projects fully inside the frame.
RIG_KW = dict(fx=500.0, fy=500.0, cx=320.0, cy=320.0, width=640, height=640)

#: translation placing the hand comfortably in front of the camera
HAND_OFFSET = (0.02, -0.01, 0.28)

# Per-axis articulation ranges (degrees) for randomly generated poses:
# strong flexion with modest spread/twist at the knuckle row, and mostly
# pure flexion at the two interphalangeal rows.
KNUCKLE_RANGE_DEG = (60.0, 15.0, 25.0)
INTERPHALANGEAL_RANGE_DEG = (60.0, 10.0, 10.0)


@pytest.fixture(scope="session")
def template():
    return build_synthetic_hand()


@pytest.fixture(scope="session")
def rig():
    return CameraRig(**RIG_KW)


def base_state(template) -> HandState:
    state = HandState.neutral(template.shape_rank)
    state.translation = np.array(HAND_OFFSET)
    return state


def fist_state(template) -> HandState:
    """All fingers curled toward the camera-facing palm: fingers hidden."""
    state = base_state(template)
    pose = np.zeros((15, 3))
    for finger in range(5):
        row = 3 * finger
        pose[row, 0] = 1.3
        pose[row + 1, 0] = 1.4
        pose[row + 2, 0] = 1.0
    state.pose = pose
    return state


def curl_state(template) -> HandState:
    """Middle and ring curled, the rest flat: exactly two hidden fingers."""
    state = base_state(template)
    pose = np.zeros((15, 3))
    for finger in (2, 3):
        row = 3 * finger
        pose[row, 0] = 1.5
        pose[row + 1, 0] = 1.5
        pose[row + 2, 0] = 1.2
    state.pose = pose
    return state


def flipped_state(template) -> HandState:
    """Back of the hand squarely facing the camera."""
    state = base_state(template)
    state.global_orient = np.array([np.pi, 0.0, 0.0])
    state.translation = np.array([0.02, 0.06, 0.30])
    return state


def random_articulated_state(template, seed) -> HandState:
    """A reproducible in-range pose with mild global orientation."""
    rng = np.random.default_rng(seed)
    pose = np.zeros((15, 3))
    knuckle = np.deg2rad(KNUCKLE_RANGE_DEG)
    inter = np.deg2rad(INTERPHALANGEAL_RANGE_DEG)
    for finger in range(5):
        row = 3 * finger
        pose[row] = rng.uniform(-1.0, 1.0, 3) * knuckle
        pose[row + 1] = rng.uniform(-1.0, 1.0, 3) * inter
        pose[row + 2] = rng.uniform(-1.0, 1.0, 3) * inter
    state = HandState(
        pose=pose,
        shape=np.zeros(template.shape_rank),
        global_orient=rng.uniform(-0.5, 0.5, 3),
        translation=np.array(HAND_OFFSET),
    )
    return state


def state_to_json(state: HandState) -> dict:
    return {
        "pose": state.pose.tolist(),
        "shape": state.shape.tolist(),
        "global_orient": state.global_orient.tolist(),
        "translation": state.translation.tolist(),
    }


def _test_image(seed: int, size: int = 640) -> np.ndarray:
    """Textured grayscale frame the size of the camera image."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size]
    img = (xx * 2 + yy + rng.integers(0, 40, (size, size))) % 256
    return img.astype(np.uint8)


def fixture_frames(template) -> list[dict]:
    """The six standard fixture frames: id, subject, gesture, tone, state."""
    mild = base_state(template)
    mild.pose = np.zeros((15, 3))
    mild.pose[3, 0] = 0.4            # index knuckle slightly flexed
    mild.global_orient = np.array([0.1, -0.05, 0.0])

    resty = base_state(template)
    resty.global_orient = np.array([0.1, 0.1, 0.0])

    return [
        {"frame_id": "f1", "subject_id": "alice", "gesture_label": "flat",
         "skin_tone_level": 3, "state": base_state(template)},
        {"frame_id": "f2", "subject_id": "alice", "gesture_label": "curl",
         "skin_tone_level": 3, "state": curl_state(template)},
        {"frame_id": "f3", "subject_id": "bob", "gesture_label": "fist",
         "skin_tone_level": 6, "state": fist_state(template)},
        {"frame_id": "f4", "subject_id": "bob", "gesture_label": "flat",
         "skin_tone_level": 6, "state": flipped_state(template)},
        {"frame_id": "f5", "subject_id": "carol", "gesture_label": "curl",
         "skin_tone_level": 8, "state": mild},
        {"frame_id": "f6", "subject_id": "carol", "gesture_label": "flat",
         "skin_tone_level": 8, "state": resty},
    ]


def write_fixture_dataset(root, template, raster=192, seed=7):
    """A complete batch-pipeline dataset under ``root``; returns the paths.

    Layout: template + calibration, one annotation file with six frames
    (five with keypoint targets, one marker-only), camera-sized grayscale
    images per frame, a clean manifest, plus a manifest whose annotation
    file has one malformed entry among ten and a manifest with zero frames.
    """
    root.mkdir(parents=True, exist_ok=True)
    save_template(template, root / "template.json")
    save_calibration(CameraRig(**RIG_KW), root / "calibration.json")

    frames = []
    for spec in fixture_frames(template):
        state = spec["state"]
        mesh = pose_mesh(template, state)
        entry = {
            "frame_id": spec["frame_id"],
            "subject_id": spec["subject_id"],
            "gesture_label": spec["gesture_label"],
            "skin_tone_level": spec["skin_tone_level"],
            "gt_state": state_to_json(state),
        }
        if spec["frame_id"] == "f6":
            vertex_ids = [0, 6, 17, 33, 49, 65, 81, 97, 113]
            entry["markers3d"] = {
                "points": mesh.vertices[vertex_ids].tolist(),
                "vertex_ids": vertex_ids,
            }
        else:
            entry["keypoints3d"] = mesh.keypoints21.tolist()
        frames.append(entry)
    (root / "frames.json").write_text(json.dumps(
        {"schema": "hand-frames/1", "frames": frames}, indent=1))

    images = root / "images"
    images.mkdir(exist_ok=True)
    for index, spec in enumerate(fixture_frames(template)):
        write_pgm(images / f"{spec['frame_id']}.pgm", _test_image(index))

    manifest = {
        "schema": "run-manifest/1",
        "template": "template.json",
        "calibration": "calibration.json",
        "annotations": ["frames.json"],
        "seed": seed,
        "config": {"raster_width": raster, "raster_height": raster},
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1))

    dirty = [dict(frames[0], frame_id=f"d{i}") for i in range(9)]
    dirty.insert(4, {"subject_id": "nobody"})            # no frame_id: malformed
    (root / "dirty_frames.json").write_text(json.dumps(
        {"schema": "hand-frames/1", "frames": dirty}, indent=1))
    (root / "dirty_manifest.json").write_text(json.dumps(
        dict(manifest, annotations=["dirty_frames.json"],
             config={"raster_width": 64, "raster_height": 64}), indent=1))

    (root / "empty_frames.json").write_text(json.dumps(
        {"schema": "hand-frames/1", "frames": []}, indent=1))
    (root / "empty_manifest.json").write_text(json.dumps(
        dict(manifest, annotations=["empty_frames.json"]), indent=1))
    return root


@pytest.fixture(scope="session")
def fixture_dataset(tmp_path_factory, template):
    root = tmp_path_factory.mktemp("dataset")
    return write_fixture_dataset(root, template)
