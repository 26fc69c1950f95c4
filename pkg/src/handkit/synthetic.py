"""Built-in synthetic rigged hand.

A compact, fully self-consistent test hand: a box palm plus five fingers of
three box segments each (8 vertices per segment), 16 joints, 21 keypoints,
a 2-vector shape basis and the full 7-label part map.  Small enough for
exhaustive oracle checks (128 vertices, 192 faces) yet exercising every
template feature.

Design notes:

* Adjacent segments are separated by 1 mm gaps so no two faces are ever
  coplanar; depth resolution between parts is therefore unambiguous.
* Hinge joints sit midway inside the gaps.  Their regressor rows blend the
  parent segment's far corners with the child segment's base corners using
  asymmetric weights, which places each regressed joint a couple of
  millimetres off the bone axis, mirroring production rigs whose internal
  joint locations deviate slightly from mesh centerlines.
* Every finger keypoint (knuckle included) is bound to box corners, and
  the four keypoints of a finger sit in four different cross-section
  quadrants.  Each keypoint therefore carries a millimetre-scale lever arm
  off the bone axis in a direction no other keypoint of that finger
  shares, so twist about any bone is strongly observable.  Binding the
  knuckle keypoint to the mesh (rather than to the joint) also gives each
  finger 12 scalar keypoint observations for its 9 rotational degrees of
  freedom; the overdetermination removes the spurious exact inverse-
  kinematics solutions a square 9-vs-9 system would admit.
* The length shape mode displaces finger vertices along the bone with a
  positive axial offset at the knuckle, so both shape coefficients move
  the knuckle keypoints and are observable without bending any finger.
* The dorsal surface (+z at rest) is one part, the palmar surface and palm
  box sides another, so a camera looking down +z sees dorsum ~ 1 and palm
  ~ 0 visibility.
"""

from __future__ import annotations

import numpy as np

from .hand_model import (
    FINGERS,
    NUM_JOINTS,
    RiggedHandTemplate,
)

#: proximal/middle/distal segment lengths, metres
SEGMENT_LENGTHS = (0.035, 0.025, 0.020)
THUMB_SEGMENT_LENGTHS = (0.030, 0.025, 0.020)
#: half cross-section of finger segments (square profile)
FINGER_HALF = 0.008
#: gap between consecutive segments along the bone
SEGMENT_GAP = 0.001

PALM_HALF_WIDTH = 0.04
PALM_LENGTH = 0.09
PALM_HALF_THICK = 0.01

#: child-corner regressor weights for hinge joints (asymmetric, sum 0.5)
_HINGE_CHILD_WEIGHTS = (0.28, 0.08, 0.07, 0.07)
#: parent-corner regressor weights for hinge joints (asymmetric, sum 0.5);
#: the asymmetry gives every observed hinge point a lever arm off the bone
#: axis on BOTH sides, so twisting a bone against a counter-twist of the
#: next joint always displaces some regressed point
_HINGE_PARENT_WEIGHTS = (0.3, 0.1, 0.05, 0.05)

#: relative displacement per unit shape coefficient
_SHAPE_LENGTH_GAIN = 0.10
_SHAPE_WIDTH_GAIN = 0.10
#: axial origin shift for the length mode: the whole finger (knuckle
#: included) slides outward with the length coefficient, so the coefficient
#: is observable from knuckle keypoints, not just fingertip ones
_SHAPE_AXIAL_OFFSET = 0.015


def _box(base_center, axis, e1, e2, length, half1, half2):
    """Vertices and outward-wound faces of a box segment.

    Returns (verts (8, 3), faces (12, 3) local indices).  Vertices 0-3 are
    the base cross-section corners in the order (+e1+e2, -e1+e2, -e1-e2,
    +e1-e2); vertices 4-7 are the far corners in the same order.
    """
    base_center = np.asarray(base_center, dtype=float)
    axis = np.asarray(axis, dtype=float)
    e1 = np.asarray(e1, dtype=float) * half1
    e2 = np.asarray(e2, dtype=float) * half2
    far_center = base_center + length * axis
    corners = []
    for c in (base_center, far_center):
        corners.extend([c + e1 + e2, c - e1 + e2, c - e1 - e2, c + e1 - e2])
    verts = np.asarray(corners)
    quads = [
        (0, 1, 2, 3), (4, 5, 6, 7),
        (0, 1, 5, 4), (1, 2, 6, 5), (2, 3, 7, 6), (3, 0, 4, 7),
    ]
    center = verts.mean(axis=0)
    faces = []
    for a, b, c, d in quads:
        for tri in ((a, b, c), (a, c, d)):
            v0, v1, v2 = verts[list(tri)]
            normal = np.cross(v1 - v0, v2 - v0)
            outward = (v0 + v1 + v2) / 3.0 - center
            faces.append(tri if normal @ outward > 0 else (tri[0], tri[2], tri[1]))
    return verts, np.asarray(faces, dtype=int)


def build_synthetic_hand() -> RiggedHandTemplate:
    """Construct the synthetic test hand; always passes template validation."""
    verts_blocks: list[np.ndarray] = []
    face_blocks: list[np.ndarray] = []
    labels: list[str] = []
    vert_count = 0

    def add_box(*args, label: str | None = None, part_by_normal: bool = False):
        nonlocal vert_count
        v, f = _box(*args)
        verts_blocks.append(v)
        face_blocks.append(f + vert_count)
        if part_by_normal:
            # dorsal (+z) faces form the dorsum part, the rest the palm part
            for tri in f:
                v0, v1, v2 = v[tri]
                n = np.cross(v1 - v0, v2 - v0)
                labels.append("dorsum" if n[2] > 1e-12 else "palm")
        else:
            labels.extend([label] * len(f))
        base_ids = vert_count + np.arange(4)
        far_ids = vert_count + 4 + np.arange(4)
        vert_count += len(v)
        return base_ids, far_ids

    z_hat = np.array([0.0, 0.0, 1.0])

    palm_base, _palm_far = add_box(
        (0.0, 0.0, 0.0), (0.0, 1.0, 0.0), (1.0, 0.0, 0.0), z_hat,
        PALM_LENGTH, PALM_HALF_WIDTH, PALM_HALF_THICK,
        part_by_normal=True,
    )

    finger_axes = {
        "thumb": np.array([0.8, 0.6, 0.0]),
        "index": np.array([0.0, 1.0, 0.0]),
        "middle": np.array([0.0, 1.0, 0.0]),
        "ring": np.array([0.0, 1.0, 0.0]),
        "pinky": np.array([0.0, 1.0, 0.0]),
    }
    finger_attach = {
        "thumb": np.array([0.040, 0.030, 0.0]),
        "index": np.array([0.030, 0.090, 0.0]),
        "middle": np.array([0.010, 0.090, 0.0]),
        "ring": np.array([-0.010, 0.090, 0.0]),
        "pinky": np.array([-0.030, 0.090, 0.0]),
    }

    # per finger: list of (base_ids, far_ids) for the three segments
    segment_ids: dict[str, list[tuple[np.ndarray, np.ndarray]]] = {}
    finger_base_centers: dict[str, np.ndarray] = {}
    for finger in FINGERS:
        axis = finger_axes[finger]
        axis = axis / np.linalg.norm(axis)
        e1 = np.cross(z_hat, axis)
        e1 = e1 / np.linalg.norm(e1)
        lengths = THUMB_SEGMENT_LENGTHS if finger == "thumb" else SEGMENT_LENGTHS
        cursor = finger_attach[finger] + SEGMENT_GAP * axis
        finger_base_centers[finger] = cursor.copy()
        segs = []
        for length in lengths:
            segs.append(add_box(cursor, axis, e1, z_hat, length,
                                FINGER_HALF, FINGER_HALF, label=finger))
            cursor = cursor + (length + SEGMENT_GAP) * axis
        segment_ids[finger] = segs

    vertices = np.vstack(verts_blocks)
    faces = np.vstack(face_blocks)
    n_verts = vertices.shape[0]

    parent_of = np.full(NUM_JOINTS, -1, dtype=int)
    skinning = np.zeros((n_verts, NUM_JOINTS))
    regressor = np.zeros((NUM_JOINTS, n_verts))

    regressor[0, palm_base] = 0.25
    skinning[0:8, 0] = 1.0

    keypoint_map: list[dict] = [{"joint": 0}]
    for fi, finger in enumerate(FINGERS):
        j_root, j_mid, j_tip = 1 + 3 * fi, 2 + 3 * fi, 3 + 3 * fi
        parent_of[j_root] = 0
        parent_of[j_mid] = j_root
        parent_of[j_tip] = j_mid
        (b0, f0), (b1, f1), (b2, f2) = segment_ids[finger]
        for seg_base, joint in ((b0, j_root), (b1, j_mid), (b2, j_tip)):
            block_start = seg_base[0]
            skinning[block_start:block_start + 8, joint] = 1.0
        regressor[j_root, b0] = 0.25
        regressor[j_mid, f0] = _HINGE_PARENT_WEIGHTS
        regressor[j_mid, b1] = _HINGE_CHILD_WEIGHTS
        regressor[j_tip, f1] = _HINGE_PARENT_WEIGHTS
        regressor[j_tip, b2] = _HINGE_CHILD_WEIGHTS
        keypoint_map.append({"vertices": [int(b0[0])], "weights": [1.0]})
        keypoint_map.append({"vertices": [int(f0[1]), int(b1[1])],
                             "weights": [0.5, 0.5]})
        keypoint_map.append({"vertices": [int(f1[2]), int(b2[2])],
                             "weights": [0.5, 0.5]})
        keypoint_map.append({"vertices": [int(f2[3])], "weights": [1.0]})

    rest_joints = regressor @ vertices

    basis = np.zeros((2, n_verts, 3))
    for finger in FINGERS:
        axis = finger_axes[finger] / np.linalg.norm(finger_axes[finger])
        base = finger_base_centers[finger]
        ids = np.concatenate([np.concatenate(pair) for pair in segment_ids[finger]])
        axial = (vertices[ids] - base) @ axis + _SHAPE_AXIAL_OFFSET
        basis[0, ids] = _SHAPE_LENGTH_GAIN * axial[:, None] * axis
    basis[1, :, 0] = _SHAPE_WIDTH_GAIN * vertices[:, 0]

    template = RiggedHandTemplate(
        rest_vertices=vertices,
        faces=faces,
        parent_of=parent_of,
        rest_joints=rest_joints,
        skinning_weights=skinning,
        shape_basis=basis,
        joint_regressor=regressor,
        keypoint_map=keypoint_map,
        part_labels=labels,
        euler_convention="XYZ",
    )
    template.validate()
    return template
