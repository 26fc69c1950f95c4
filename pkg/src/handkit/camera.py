"""Pinhole camera rig: world-to-camera transform and projection.

Conventions: camera space is right-handed with +z forward (into the scene);
pixel coordinates follow u = fx * x / z + cx, v = fy * y / z + cy.
Calibration files are JSON (schema ``camera-calibration/1``); lens
distortion coefficients, if present, are accepted but ignored with a
warning — all geometry downstream assumes rectified images.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CALIBRATION_SCHEMA = "camera-calibration/1"

#: points with camera-space depth at or below this are unprojectable
Z_NEAR = 1e-6

_ROT_TOL = 1e-9


class CalibrationError(ValueError):
    """A calibration file violates its format or invariants."""


@dataclass(eq=False)
class CameraRig:
    """Intrinsics (fx, fy, cx, cy), extrinsics (rotation, translation), image size.

    Extrinsics map world points into camera space: x_cam = R @ x_world + t.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    width: int = 1280
    height: int = 720

    def __post_init__(self) -> None:
        self.rotation = np.asarray(self.rotation, dtype=float)
        self.translation = np.asarray(self.translation, dtype=float).reshape(-1)
        if self.fx <= 0 or self.fy <= 0:
            raise CalibrationError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise CalibrationError("image size must be positive")
        if self.rotation.shape != (3, 3) or self.translation.shape != (3,):
            raise CalibrationError("extrinsics must be a 3x3 rotation and 3-vector")
        err = np.max(np.abs(self.rotation @ self.rotation.T - np.eye(3)))
        if err > 1e-6 or abs(np.linalg.det(self.rotation) - 1.0) > 1e-6:
            raise CalibrationError("rotation must be orthonormal with determinant +1")


def world_to_camera(rig: CameraRig, points: np.ndarray) -> np.ndarray:
    """Map (N, 3) world points into camera space."""
    pts = np.asarray(points, dtype=float)
    return pts @ rig.rotation.T + rig.translation


def project(rig: CameraRig, points_cam: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Project camera-space points to pixels.

    Returns (uv (N, 2), valid (N,)).  A point is invalid when its depth is
    at or behind the near plane (z <= Z_NEAR); its uv entries are NaN.
    """
    pts = np.asarray(points_cam, dtype=float)
    z = pts[:, 2]
    valid = z > Z_NEAR
    uv = np.full((pts.shape[0], 2), np.nan)
    zz = np.where(valid, z, 1.0)
    uv[:, 0] = np.where(valid, rig.fx * pts[:, 0] / zz + rig.cx, np.nan)
    uv[:, 1] = np.where(valid, rig.fy * pts[:, 1] / zz + rig.cy, np.nan)
    return uv, valid


def save_calibration(rig: CameraRig, path) -> None:
    doc = {
        "schema": CALIBRATION_SCHEMA,
        "intrinsics": {"fx": rig.fx, "fy": rig.fy, "cx": rig.cx, "cy": rig.cy},
        "extrinsics": {
            "rotation": rig.rotation.tolist(),
            "translation": rig.translation.tolist(),
        },
        "image_size": {"width": rig.width, "height": rig.height},
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def load_calibration(path) -> CameraRig:
    """Read and validate a camera-calibration/1 JSON document."""
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CalibrationError(f"cannot read calibration {path}: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("schema") != CALIBRATION_SCHEMA:
        raise CalibrationError(f"unsupported calibration schema in {path}")
    try:
        intr = doc["intrinsics"]
        extr = doc.get("extrinsics", {})
        size = doc["image_size"]
        rig = CameraRig(
            fx=float(intr["fx"]), fy=float(intr["fy"]),
            cx=float(intr["cx"]), cy=float(intr["cy"]),
            rotation=np.asarray(extr.get("rotation", np.eye(3).tolist()), dtype=float),
            translation=np.asarray(extr.get("translation", [0.0, 0.0, 0.0]), dtype=float),
            width=int(size["width"]), height=int(size["height"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise CalibrationError(f"malformed calibration {path}: {exc}") from exc
    dist = doc.get("distortion")
    if dist and any(abs(float(k)) > 0 for k in dist):
        warnings.warn(
            "calibration carries lens distortion coefficients; they are ignored "
            "(geometry assumes rectified images)",
            stacklevel=2,
        )
    return rig
