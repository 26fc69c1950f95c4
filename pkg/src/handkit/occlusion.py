"""Self-occlusion measurement by backface filtering and z-buffering.

Visibility of a surface part is the fraction of its area front-facing the
camera and winning the depth test, measured on a pixel grid laid over the
mesh's projected bounding box clipped to the image rectangle (so geometry
outside the frame counts as not visible).  A face's visible area is its 3D
area scaled by the ratio of depth-winning pixels to covered pixels.

Depth at a pixel is the perspective-correct value: reciprocal depth is
interpolated with screen-space barycentric weights and inverted, which is
exact for planar triangles, then compared in metres against the buffer with
a small epsilon.

Finger visibility fractions are rescaled by the one-sided-surface factor:
at most about half of a finger's surface can ever face the camera, so the
raw fraction is divided by 0.5 and clamped to 1 before thresholding.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .camera import Z_NEAR, CameraRig, project, world_to_camera
from .hand_model import (
    FINGERS,
    PART_LABELS,
    HandMesh,
    RiggedHandTemplate,
    triangle_areas,
)

#: scaled finger visibility at or below this counts as fully occluded
OCCLUDED_THRESHOLD = 0.10
#: scaled finger visibility at or above this counts as fully visible
VISIBLE_THRESHOLD = 0.90
#: one-sided-surface rescale divisor for finger parts
FINGER_VISIBILITY_SCALE = 0.5


@dataclass(frozen=True)
class RasterConfig:
    """Raster geometry for the depth test.

    The grid has raster_width x raster_height cells over the projected
    bounding box of the rendered faces, intersected with the image
    rectangle [0, W] x [0, H]; sample points are cell centres.
    """

    raster_width: int = 1024
    raster_height: int = 1024
    depth_epsilon: float = 1e-5

    def __post_init__(self) -> None:
        if self.raster_width <= 0 or self.raster_height <= 0:
            raise ValueError("raster dimensions must be positive")
        if self.depth_epsilon <= 0:
            raise ValueError("depth epsilon must be positive")


@dataclass
class RasterResult:
    """Per-face pixel counts from one depth-buffered rasterization."""

    covered: np.ndarray   # (F,) cells whose centre falls inside the face
                          # (sub-cell faces: 1 when their centroid was tested)
    won: np.ndarray       # (F,) covered cells where the face wins the depth test
    rendered: np.ndarray  # (F,) bool, face was in the rendered subset and projectable


@dataclass
class VisibilityReport:
    """Per-part visibility of one posed hand seen by one camera."""

    per_face_visible_area: np.ndarray          # (F,) square metres
    per_part_visibility: dict                  # part -> fraction (fingers rescaled)
    per_part_raw_visibility: dict              # part -> unscaled area fraction
    mean_finger_visibility: float
    fully_occluded: dict                       # finger -> bool
    fully_visible: dict                        # finger -> bool


def backface_filter(verts_cam: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Indices of faces whose outward normal points toward the camera.

    A face is front-facing when normal . centroid < 0 (camera at the
    origin looking along +z).  Degenerate faces have zero normals and are
    filtered out here as well.
    """
    v0 = verts_cam[faces[:, 0]]
    v1 = verts_cam[faces[:, 1]]
    v2 = verts_cam[faces[:, 2]]
    normals = np.cross(v1 - v0, v2 - v0)
    centroids = (v0 + v1 + v2) / 3.0
    front = np.einsum("ij,ij->i", normals, centroids) < 0.0
    return np.nonzero(front)[0]


def _raster_grid(uv: np.ndarray, keep: np.ndarray, rig: CameraRig, cfg: RasterConfig):
    """Grid origin and cell size, or None when nothing projects into frame."""
    if not np.any(keep):
        return None
    pts = uv[keep]
    x0 = max(float(pts[:, 0].min()), 0.0)
    x1 = min(float(pts[:, 0].max()), float(rig.width))
    y0 = max(float(pts[:, 1].min()), 0.0)
    y1 = min(float(pts[:, 1].max()), float(rig.height))
    if not (x1 > x0 and y1 > y0):
        return None
    dx = (x1 - x0) / cfg.raster_width
    dy = (y1 - y0) / cfg.raster_height
    return x0, y0, dx, dy


def rasterize_zbuffer(
    verts_cam: np.ndarray,
    faces: np.ndarray,
    rig: CameraRig,
    cfg: RasterConfig = RasterConfig(),
    face_ids: np.ndarray | None = None,
) -> RasterResult:
    """Count covered and depth-winning pixels per face.

    face_ids selects the faces to render (normally the output of
    backface_filter); all other faces report zero counts.  Faces with any
    vertex at or behind the near plane are skipped.
    """
    verts_cam = np.asarray(verts_cam, dtype=float)
    faces = np.asarray(faces, dtype=int)
    n_faces = faces.shape[0]
    covered = np.zeros(n_faces, dtype=np.int64)
    won = np.zeros(n_faces, dtype=np.int64)
    rendered = np.zeros(n_faces, dtype=bool)
    if face_ids is None:
        face_ids = np.arange(n_faces)
    face_ids = np.asarray(face_ids, dtype=int)
    if face_ids.size == 0:
        return RasterResult(covered, won, rendered)

    uv, valid = project(rig, verts_cam)
    usable = valid[faces[face_ids]].all(axis=1)
    face_ids = face_ids[usable]
    if face_ids.size == 0:
        return RasterResult(covered, won, rendered)
    rendered[face_ids] = True
    degenerate: set[int] = set()

    used_verts = np.zeros(verts_cam.shape[0], dtype=bool)
    used_verts[faces[face_ids].ravel()] = True
    grid = _raster_grid(uv, used_verts, rig, cfg)
    if grid is None:
        return RasterResult(covered, won, rendered)
    gx0, gy0, dx, dy = grid
    rw, rh = cfg.raster_width, cfg.raster_height
    xs = gx0 + (np.arange(rw) + 0.5) * dx
    ys = gy0 + (np.arange(rh) + 0.5) * dy

    zbuf = np.full(rw * rh, np.inf)
    # per rendered face: flat pixel indices and perspective-correct depths
    pending: list[tuple[int, np.ndarray, np.ndarray]] = []
    for fid in face_ids:
        tri = faces[fid]
        pu = uv[tri, 0]
        pv = uv[tri, 1]
        iq = 1.0 / verts_cam[tri, 2]
        ix0 = max(0, int(np.floor((pu.min() - gx0) / dx)) - 1)
        ix1 = min(rw - 1, int(np.ceil((pu.max() - gx0) / dx)) + 1)
        iy0 = max(0, int(np.floor((pv.min() - gy0) / dy)) - 1)
        iy1 = min(rh - 1, int(np.ceil((pv.max() - gy0) / dy)) + 1)
        if ix1 < ix0 or iy1 < iy0:
            continue
        px = xs[ix0:ix1 + 1]
        py = ys[iy0:iy1 + 1]
        denom = ((pv[1] - pv[2]) * (pu[0] - pu[2])
                 + (pu[2] - pu[1]) * (pv[0] - pv[2]))
        if denom == 0.0:
            degenerate.add(int(fid))
            continue  # degenerate in projection: covers no area
        gx = px[None, :] - pu[2]
        gy = py[:, None] - pv[2]
        l0 = ((pv[1] - pv[2]) * gx + (pu[2] - pu[1]) * gy) / denom
        l1 = ((pv[2] - pv[0]) * gx + (pu[0] - pu[2]) * gy) / denom
        l2 = 1.0 - l0 - l1
        inside = (l0 >= 0.0) & (l1 >= 0.0) & (l2 >= 0.0)
        if not inside.any():
            continue
        rows, cols = np.nonzero(inside)
        flat = (rows + iy0) * rw + (cols + ix0)
        inv_depth = (l0[inside] * iq[0] + l1[inside] * iq[1] + l2[inside] * iq[2])
        depth = 1.0 / inv_depth
        covered[fid] = flat.size
        pending.append((int(fid), flat, depth))
        np.minimum.at(zbuf, flat, depth)

    eps = cfg.depth_epsilon
    for fid, flat, depth in pending:
        won[fid] = int(np.count_nonzero(depth <= zbuf[flat] + eps))

    # Faces projecting thinner than a grid cell catch no cell centre, which
    # would make their whole area flip in and out of the visible total as
    # the raster resolution changes.  Depth-test such faces once, at their
    # centroid, against the finished buffer: unoccluded sub-cell faces count
    # fully visible (reported as covered = won = 1), occluded ones stay out.
    for fid in face_ids:
        if covered[fid] > 0 or int(fid) in degenerate:
            continue
        centroid = verts_cam[faces[fid]].mean(axis=0)
        cu = rig.fx * centroid[0] / centroid[2] + rig.cx
        cv = rig.fy * centroid[1] / centroid[2] + rig.cy
        ix = int(np.floor((cu - gx0) / dx))
        iy = int(np.floor((cv - gy0) / dy))
        if 0 <= ix < rw and 0 <= iy < rh:
            if centroid[2] <= zbuf[iy * rw + ix] + eps:
                covered[fid] = 1
                won[fid] = 1
    return RasterResult(covered, won, rendered)


def face_visible_areas(
    verts_cam: np.ndarray,
    faces: np.ndarray,
    rig: CameraRig,
    cfg: RasterConfig = RasterConfig(),
) -> tuple[np.ndarray, RasterResult]:
    """Visible 3D area per face: backface filter, depth test, area scaling."""
    front = backface_filter(verts_cam, faces)
    raster = rasterize_zbuffer(verts_cam, faces, rig, cfg, face_ids=front)
    areas = triangle_areas(verts_cam, faces)
    visible = np.zeros(faces.shape[0])
    has_pixels = raster.covered > 0
    visible[has_pixels] = (areas[has_pixels] * raster.won[has_pixels]
                           / raster.covered[has_pixels])
    return visible, raster


def visibility_report(
    mesh: HandMesh,
    template: RiggedHandTemplate,
    rig: CameraRig,
    cfg: RasterConfig = RasterConfig(),
    occluded_threshold: float = OCCLUDED_THRESHOLD,
    visible_threshold: float = VISIBLE_THRESHOLD,
    threshold_on_scaled: bool = True,
) -> VisibilityReport:
    """Per-part visibility of a posed hand.

    Finger fractions are rescaled (raw / 0.5, clamped to 1) before the
    fully-occluded / fully-visible thresholds are applied; pass
    threshold_on_scaled=False to threshold raw fractions instead.  A part
    with zero total area reports visibility 0 with a warning.
    """
    verts_cam = world_to_camera(rig, mesh.vertices)
    visible_area, _ = face_visible_areas(verts_cam, mesh.faces, rig, cfg)
    areas = triangle_areas(verts_cam, mesh.faces)
    labels = np.asarray(template.part_labels)

    raw: dict[str, float] = {}
    scaled: dict[str, float] = {}
    for part in PART_LABELS:
        sel = labels == part
        total = float(areas[sel].sum())
        if total <= 0.0:
            warnings.warn(f"part {part!r} has zero total area; visibility set to 0",
                          stacklevel=2)
            raw[part] = 0.0
            scaled[part] = 0.0
            continue
        fraction = float(visible_area[sel].sum() / total)
        raw[part] = fraction
        if part in FINGERS:
            scaled[part] = min(fraction / FINGER_VISIBILITY_SCALE, 1.0)
        else:
            scaled[part] = min(fraction, 1.0)

    basis = scaled if threshold_on_scaled else raw
    fully_occluded = {f: basis[f] <= occluded_threshold for f in FINGERS}
    fully_visible = {f: basis[f] >= visible_threshold for f in FINGERS}
    mean_finger = float(np.mean([scaled[f] for f in FINGERS]))
    return VisibilityReport(
        per_face_visible_area=visible_area,
        per_part_visibility=scaled,
        per_part_raw_visibility=raw,
        mean_finger_visibility=mean_finger,
        fully_occluded=fully_occluded,
        fully_visible=fully_visible,
    )


@dataclass
class OcclusionStats:
    """Aggregates over a sequence of visibility reports."""

    n_frames: int
    visible_finger_histogram: list    # index k: frames with exactly k fully visible fingers
    visible_finger_fractions: list    # histogram normalized by n_frames
    occluded_frame_fraction: float    # frames with at least one fully occluded finger
    dorsum_percentiles: dict | None   # min/p25/median/p75/max of dorsum visibility
                                      # over frames with >= 1 fully occluded finger


def dataset_occlusion_stats(reports: list) -> OcclusionStats:
    """Summarize visibility reports across a dataset.

    The dorsum percentile summary is restricted to frames with at least one
    fully occluded finger (None when no such frame exists).  Raises on an
    empty input.
    """
    if not reports:
        raise ValueError("cannot aggregate an empty set of visibility reports")
    histogram = [0] * (len(FINGERS) + 1)
    occluded_frames = 0
    dorsum_on_occluded: list[float] = []
    for rep in reports:
        n_vis = sum(bool(v) for v in rep.fully_visible.values())
        histogram[n_vis] += 1
        if any(rep.fully_occluded.values()):
            occluded_frames += 1
            dorsum_on_occluded.append(rep.per_part_visibility["dorsum"])
    n = len(reports)
    if dorsum_on_occluded:
        arr = np.asarray(dorsum_on_occluded)
        percentiles = {
            "min": float(arr.min()),
            "p25": float(np.percentile(arr, 25)),
            "median": float(np.percentile(arr, 50)),
            "p75": float(np.percentile(arr, 75)),
            "max": float(arr.max()),
        }
    else:
        percentiles = None
    return OcclusionStats(
        n_frames=n,
        visible_finger_histogram=histogram,
        visible_finger_fractions=[c / n for c in histogram],
        occluded_frame_fraction=occluded_frames / n,
        dorsum_percentiles=percentiles,
    )
