"""Linear-blend-skinned hand model.

A rigged hand template is a watertight-ish triangle mesh with 16 joints
(wrist root + 15 articulated), a shape basis, a joint regressor, per-face
part labels and a fixed 21-keypoint layout.  Posing follows the usual
pipeline: shape blend -> joint regression -> forward kinematics over the
joint tree -> linear blend skinning -> global translation.  Joints and
keypoints of a posed mesh are always regressed from the posed vertices so
that downstream consumers see one consistent convention.

Templates are stored as versioned JSON documents (schema ``hand-template/1``)
with decimal floats and row-major nested arrays, so any rigged hand of this
family can be exported to the format (see README for the field list).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

TEMPLATE_SCHEMA = "hand-template/1"

NUM_JOINTS = 16
NUM_ARTICULATED = 15
NUM_KEYPOINTS = 21

#: the seven surface part labels every face must carry
PART_LABELS = ("index", "middle", "ring", "pinky", "thumb", "dorsum", "palm")
#: finger parts in keypoint-layout order
FINGERS = ("thumb", "index", "middle", "ring", "pinky")

#: fixed 21-keypoint layout: wrist, then 4 keypoints per finger
KEYPOINT_NAMES = (
    "wrist",
    "thumb_cmc", "thumb_mcp", "thumb_ip", "thumb_tip",
    "index_mcp", "index_pip", "index_dip", "index_tip",
    "middle_mcp", "middle_pip", "middle_dip", "middle_tip",
    "ring_mcp", "ring_pip", "ring_dip", "ring_tip",
    "pinky_mcp", "pinky_pip", "pinky_dip", "pinky_tip",
)
WRIST_KEYPOINT = 0
#: wrist + the five knuckles: the rigid-ish dorsal subset used for alignment
DORSAL_KEYPOINTS = (0, 2, 5, 9, 13, 17)
TIP_KEYPOINTS = {"thumb": 4, "index": 8, "middle": 12, "ring": 16, "pinky": 20}
MCP_KEYPOINTS = {"thumb": 2, "index": 5, "middle": 9, "ring": 13, "pinky": 17}

_WEIGHT_TOL = 1e-6


class TemplateError(ValueError):
    """A rigged-hand template file or object violates its contract."""


@dataclass
class HandState:
    """Pose parameters for one hand.

    pose: (15, 3) axis-angle per articulated joint, radians.
    shape: (K,) shape coefficients; K at most the template's basis rank.
    global_orient: (3,) axis-angle of the root.
    translation: (3,) metres.
    """

    pose: np.ndarray
    shape: np.ndarray
    global_orient: np.ndarray
    translation: np.ndarray

    def __post_init__(self) -> None:
        self.pose = np.asarray(self.pose, dtype=float)
        self.shape = np.asarray(self.shape, dtype=float).reshape(-1)
        self.global_orient = np.asarray(self.global_orient, dtype=float).reshape(-1)
        self.translation = np.asarray(self.translation, dtype=float).reshape(-1)
        if self.pose.shape != (NUM_ARTICULATED, 3):
            raise ValueError(
                f"pose must have exactly {NUM_ARTICULATED} entries of 3 components, "
                f"got shape {self.pose.shape}"
            )
        if self.global_orient.shape != (3,):
            raise ValueError("global_orient must have 3 components")
        if self.translation.shape != (3,):
            raise ValueError("translation must have 3 components")

    @classmethod
    def neutral(cls, shape_dim: int = 0) -> "HandState":
        """Zero pose, zero shape, identity orientation at the origin."""
        return cls(
            pose=np.zeros((NUM_ARTICULATED, 3)),
            shape=np.zeros(shape_dim),
            global_orient=np.zeros(3),
            translation=np.zeros(3),
        )

    def copy(self) -> "HandState":
        return HandState(
            pose=self.pose.copy(),
            shape=self.shape.copy(),
            global_orient=self.global_orient.copy(),
            translation=self.translation.copy(),
        )


@dataclass
class HandMesh:
    """A posed hand: world-space vertices plus regressed joints/keypoints."""

    vertices: np.ndarray      # (V, 3) metres, world frame
    faces: np.ndarray         # (F, 3) vertex indices
    joints: np.ndarray        # (16, 3) regressed from posed vertices
    keypoints21: np.ndarray   # (21, 3) fixed layout


@dataclass
class RiggedHandTemplate:
    """Rest-pose hand rig; see the module docstring for conventions."""

    rest_vertices: np.ndarray        # (V, 3)
    faces: np.ndarray                # (F, 3) int
    parent_of: np.ndarray            # (16,) int, -1 for the root
    rest_joints: np.ndarray          # (16, 3)
    skinning_weights: np.ndarray     # (V, 16) rows non-negative, sum to 1
    shape_basis: np.ndarray          # (K, V, 3) per-vertex displacement directions
    joint_regressor: np.ndarray      # (16, V)
    keypoint_map: list               # 21 entries: {"joint": j} | {"vertices": [...], "weights": [...]}
    part_labels: list                # (F,) strings from PART_LABELS
    euler_convention: str = "XYZ"

    def __post_init__(self) -> None:
        self.rest_vertices = np.asarray(self.rest_vertices, dtype=float)
        self.faces = np.asarray(self.faces, dtype=int)
        self.parent_of = np.asarray(self.parent_of, dtype=int).reshape(-1)
        self.rest_joints = np.asarray(self.rest_joints, dtype=float)
        self.skinning_weights = np.asarray(self.skinning_weights, dtype=float)
        self.shape_basis = np.asarray(self.shape_basis, dtype=float)
        self.joint_regressor = np.asarray(self.joint_regressor, dtype=float)
        self.part_labels = list(self.part_labels)

    @property
    def num_vertices(self) -> int:
        return self.rest_vertices.shape[0]

    @property
    def num_faces(self) -> int:
        return self.faces.shape[0]

    @property
    def shape_rank(self) -> int:
        return self.shape_basis.shape[0]

    @cached_property
    def topo_order(self) -> np.ndarray:
        """Joint indices ordered root-first (each joint after its parent)."""
        order: list[int] = []
        remaining = set(range(NUM_JOINTS))
        placed: set[int] = set()
        while remaining:
            progny = [j for j in sorted(remaining)
                      if self.parent_of[j] < 0 or self.parent_of[j] in placed]
            if not progny:
                raise TemplateError("joint hierarchy is not a tree (cycle detected)")
            for j in progny:
                order.append(j)
                placed.add(j)
                remaining.discard(j)
        return np.asarray(order, dtype=int)

    @cached_property
    def keypoint_matrix(self) -> np.ndarray:
        """(21, V) linear map from posed vertices to the 21 keypoints."""
        mat = np.zeros((NUM_KEYPOINTS, self.num_vertices))
        for row, entry in enumerate(self.keypoint_map):
            if "joint" in entry:
                mat[row] = self.joint_regressor[int(entry["joint"])]
            else:
                idx = np.asarray(entry["vertices"], dtype=int)
                wts = np.asarray(entry["weights"], dtype=float)
                mat[row, idx] = wts
        return mat

    def validate(self) -> None:
        """Check every structural invariant; raise TemplateError with the violation."""
        v, f = self.num_vertices, self.num_faces
        if self.rest_vertices.ndim != 2 or self.rest_vertices.shape[1] != 3:
            raise TemplateError("rest_vertices must be (V, 3)")
        if self.faces.ndim != 2 or self.faces.shape[1] != 3:
            raise TemplateError("faces must be (F, 3)")
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= v):
            raise TemplateError("face indices out of vertex range")
        if self.parent_of.shape != (NUM_JOINTS,):
            raise TemplateError(f"parent_of must list {NUM_JOINTS} joints")
        roots = np.nonzero(self.parent_of < 0)[0]
        if len(roots) != 1 or roots[0] != 0:
            raise TemplateError("hierarchy must have exactly one root at joint 0")
        if np.any(self.parent_of >= NUM_JOINTS):
            raise TemplateError("parent index out of range")
        self.topo_order  # raises on cycles
        if self.rest_joints.shape != (NUM_JOINTS, 3):
            raise TemplateError("rest_joints must be (16, 3)")
        if self.skinning_weights.shape != (v, NUM_JOINTS):
            raise TemplateError("skinning_weights must be (V, 16)")
        if np.any(self.skinning_weights < -_WEIGHT_TOL):
            raise TemplateError("skinning weights must be non-negative")
        row_sums = self.skinning_weights.sum(axis=1)
        if np.any(np.abs(row_sums - 1.0) > _WEIGHT_TOL):
            raise TemplateError("skinning weight rows must sum to 1 within 1e-6")
        if self.shape_basis.ndim != 3 or self.shape_basis.shape[1:] != (v, 3):
            raise TemplateError("shape_basis must be (K, V, 3)")
        if not np.all(np.isfinite(self.shape_basis)):
            raise TemplateError("shape_basis must be finite")
        if self.joint_regressor.shape != (NUM_JOINTS, v):
            raise TemplateError("joint_regressor must be (16, V)")
        if len(self.keypoint_map) != NUM_KEYPOINTS:
            raise TemplateError(f"keypoint_map must have exactly {NUM_KEYPOINTS} entries")
        for row, entry in enumerate(self.keypoint_map):
            if "joint" in entry:
                j = int(entry["joint"])
                if not 0 <= j < NUM_JOINTS:
                    raise TemplateError(f"keypoint {row}: joint index {j} out of range")
            elif "vertices" in entry and "weights" in entry:
                idx = np.asarray(entry["vertices"], dtype=int)
                wts = np.asarray(entry["weights"], dtype=float)
                if idx.shape != wts.shape or idx.ndim != 1 or idx.size == 0:
                    raise TemplateError(f"keypoint {row}: vertices/weights mismatch")
                if idx.min() < 0 or idx.max() >= v:
                    raise TemplateError(f"keypoint {row}: vertex index out of range")
            else:
                raise TemplateError(
                    f"keypoint {row}: entry must reference a joint or weighted vertices"
                )
        if len(self.part_labels) != f:
            raise TemplateError("every face needs a part label")
        bad = sorted({lab for lab in self.part_labels} - set(PART_LABELS))
        if bad:
            raise TemplateError(f"unknown part labels: {bad}")
        regressed = self.joint_regressor @ self.rest_vertices
        if np.max(np.abs(regressed - self.rest_joints)) > 1e-6:
            raise TemplateError("joint_regressor applied to rest vertices must "
                                "reproduce rest_joints")


def _rotations(global_orient: np.ndarray, pose: np.ndarray) -> np.ndarray:
    """(16, 3, 3) local rotation matrices: root first, then the 15 joints."""
    aa = np.vstack([global_orient.reshape(1, 3), pose])
    return Rotation.from_rotvec(aa).as_matrix()


def forward_kinematics(
    template: RiggedHandTemplate,
    shaped_joints: np.ndarray,
    global_orient: np.ndarray,
    pose: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """World rotation and position of every joint.

    Returns (rot (16, 3, 3), pos (16, 3)).  Each joint rotates about its own
    shaped rest location; children inherit the parent's world transform.
    """
    local = _rotations(global_orient, pose)
    rot = np.empty((NUM_JOINTS, 3, 3))
    pos = np.empty((NUM_JOINTS, 3))
    for j in template.topo_order:
        p = template.parent_of[j]
        if p < 0:
            rot[j] = local[j]
            pos[j] = shaped_joints[j]
        else:
            rot[j] = rot[p] @ local[j]
            pos[j] = rot[p] @ (shaped_joints[j] - shaped_joints[p]) + pos[p]
    return rot, pos


def shape_vertices(template: RiggedHandTemplate, shape: np.ndarray) -> np.ndarray:
    """Rest vertices displaced along the shape basis by the coefficients."""
    shape = np.asarray(shape, dtype=float).reshape(-1)
    if shape.size > template.shape_rank:
        raise ValueError(
            f"shape has {shape.size} coefficients but the basis rank is "
            f"{template.shape_rank}"
        )
    shaped = template.rest_vertices.copy()
    for k, beta in enumerate(shape):
        if beta != 0.0:
            shaped += beta * template.shape_basis[k]
    return shaped


def pose_mesh(template: RiggedHandTemplate, state: HandState) -> HandMesh:
    """Pose the template: shape blend, FK, linear blend skinning, translation.

    The returned joints and 21 keypoints are regressed from the posed
    vertices, so they may deviate a little from the kinematic joint centres —
    that is a property of the rig, not an error.
    """
    if not (np.all(np.isfinite(state.pose))
            and np.all(np.isfinite(state.shape))
            and np.all(np.isfinite(state.global_orient))
            and np.all(np.isfinite(state.translation))):
        raise ValueError("hand state parameters must be finite")
    shaped = shape_vertices(template, state.shape)
    shaped_joints = template.joint_regressor @ shaped
    rot, pos = forward_kinematics(template, shaped_joints, state.global_orient, state.pose)
    verts = np.zeros_like(shaped)
    w = template.skinning_weights
    for j in range(NUM_JOINTS):
        wj = w[:, j]
        if not np.any(wj):
            continue
        transformed = (shaped - shaped_joints[j]) @ rot[j].T + pos[j]
        verts += wj[:, None] * transformed
    verts = verts + state.translation
    joints = template.joint_regressor @ verts
    kp = template.keypoint_matrix @ verts
    return HandMesh(vertices=verts, faces=template.faces, joints=joints, keypoints21=kp)


def keypoints(mesh: HandMesh) -> np.ndarray:
    """The mesh's 21 keypoints in the fixed layout, (21, 3) metres."""
    return mesh.keypoints21


def triangle_areas(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Per-face 3D area; degenerate (zero-area) triangles contribute 0."""
    v0 = vertices[faces[:, 0]]
    v1 = vertices[faces[:, 1]]
    v2 = vertices[faces[:, 2]]
    return 0.5 * np.linalg.norm(np.cross(v1 - v0, v2 - v0), axis=1)


def part_areas(mesh: HandMesh, template: RiggedHandTemplate) -> dict:
    """Total surface area per part label, square metres.

    Every face contributes to exactly one part, so the values sum to the
    whole mesh area.
    """
    areas = triangle_areas(mesh.vertices, mesh.faces)
    labels = np.asarray(template.part_labels)
    out = {}
    for part in PART_LABELS:
        out[part] = float(areas[labels == part].sum())
    return out


def joint_names(template: RiggedHandTemplate) -> list[str]:
    """Names for the 15 articulated joints, ordered by joint index 1..15.

    An articulated joint referenced by the keypoint map inherits that
    keypoint's layout name.  A keypoint bound to mesh vertices names the
    deepest joint that carries a substantial share of those vertices'
    skinning weight: a keypoint straddling a hinge marks that hinge's
    crease, so it names the hinge's child joint.  Remaining joints are
    named by walking each finger chain: the child of a joint named by
    layout position p takes position p+1's name (tips excluded).
    """
    names = {j: f"joint{j}" for j in range(1, NUM_JOINTS)}
    depth = {0: 0}
    for j in template.topo_order:
        if j > 0:
            depth[j] = depth[template.parent_of[j]] + 1
    tip_rows = set(TIP_KEYPOINTS.values())
    row_of: dict[int, int] = {}

    def assign(j: int, row: int) -> None:
        if j > 0 and j not in row_of and row not in row_of.values():
            names[j] = KEYPOINT_NAMES[row]
            row_of[j] = row

    for row, entry in enumerate(template.keypoint_map):
        if "joint" in entry:
            assign(int(entry["joint"]), row)
    for row, entry in enumerate(template.keypoint_map):
        if "joint" in entry or row in tip_rows or row == 0:
            continue
        weights = np.asarray(entry.get("weights", []), dtype=float)
        vertex_ids = list(entry.get("vertices", []))
        pull = np.zeros(NUM_JOINTS)
        for vid, w in zip(vertex_ids, weights):
            pull += w * template.skinning_weights[int(vid)]
        candidates = [j for j in range(1, NUM_JOINTS) if pull[j] > 0.25]
        if candidates:
            assign(max(candidates, key=lambda j: (depth[j], pull[j], -j)), row)
    for j in template.topo_order:
        p = template.parent_of[j]
        if j <= 0 or p <= 0 or j in row_of:
            continue
        parent_row = row_of.get(p)
        if parent_row is None or parent_row + 1 in tip_rows or parent_row == 0:
            continue
        assign(j, parent_row + 1)
    return [names[j] for j in range(1, NUM_JOINTS)]


def mcp_joint_index(template: RiggedHandTemplate, finger: str) -> int:
    """Articulated-joint index (0-based into pose) of a finger's knuckle joint.

    Resolved by name: the joint carrying the finger's knuckle layout name,
    directly keypoint-bound or named through the chain walk.
    """
    if finger not in MCP_KEYPOINTS:
        raise ValueError(f"unknown finger {finger!r}")
    target = KEYPOINT_NAMES[MCP_KEYPOINTS[finger]]
    names = joint_names(template)
    if target not in names:
        raise TemplateError(
            f"keypoint map does not identify the {finger} knuckle joint")
    return names.index(target)


def _template_to_dict(template: RiggedHandTemplate) -> dict:
    return {
        "schema": TEMPLATE_SCHEMA,
        "vertices": template.rest_vertices.tolist(),
        "faces": template.faces.tolist(),
        "parent_of": template.parent_of.tolist(),
        "rest_joints": template.rest_joints.tolist(),
        "skinning_weights": template.skinning_weights.tolist(),
        "shape_basis": template.shape_basis.tolist(),
        "joint_regressor": template.joint_regressor.tolist(),
        "keypoint_map": template.keypoint_map,
        "part_labels": template.part_labels,
        "euler_convention": template.euler_convention,
    }


def save_template(template: RiggedHandTemplate, path) -> None:
    """Write a template as a hand-template/1 JSON document."""
    template.validate()
    Path(path).write_text(json.dumps(_template_to_dict(template)) + "\n")


def load_template(path) -> RiggedHandTemplate:
    """Read and fully validate a hand-template/1 JSON document."""
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise TemplateError(f"cannot read template {path}: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("schema") != TEMPLATE_SCHEMA:
        raise TemplateError(
            f"unsupported template schema {doc.get('schema')!r} "
            f"(expected {TEMPLATE_SCHEMA!r})" if isinstance(doc, dict)
            else "template document must be a JSON object"
        )
    required = ("vertices", "faces", "parent_of", "rest_joints", "skinning_weights",
                "shape_basis", "joint_regressor", "keypoint_map", "part_labels")
    missing = [k for k in required if k not in doc]
    if missing:
        raise TemplateError(f"template missing fields: {missing}")
    try:
        template = RiggedHandTemplate(
            rest_vertices=np.asarray(doc["vertices"], dtype=float),
            faces=np.asarray(doc["faces"], dtype=int),
            parent_of=np.asarray(doc["parent_of"], dtype=int),
            rest_joints=np.asarray(doc["rest_joints"], dtype=float),
            skinning_weights=np.asarray(doc["skinning_weights"], dtype=float),
            shape_basis=np.asarray(doc["shape_basis"], dtype=float),
            joint_regressor=np.asarray(doc["joint_regressor"], dtype=float),
            keypoint_map=doc["keypoint_map"],
            part_labels=doc["part_labels"],
            euler_convention=doc.get("euler_convention", "XYZ"),
        )
    except (TypeError, ValueError) as exc:
        raise TemplateError(f"malformed template arrays: {exc}") from exc
    template.validate()
    return template
