"""Backface filtering, z-buffer rasterization, visibility reports, aggregates."""

from types import SimpleNamespace

import numpy as np
import pytest

from handkit.camera import CameraRig, world_to_camera
from handkit.hand_model import HandMesh, HandState, pose_mesh, triangle_areas
from handkit.occlusion import (
    FINGER_VISIBILITY_SCALE,
    OCCLUDED_THRESHOLD,
    VISIBLE_THRESHOLD,
    RasterConfig,
    VisibilityReport,
    backface_filter,
    dataset_occlusion_stats,
    face_visible_areas,
    rasterize_zbuffer,
    visibility_report,
)

from conftest import fist_state, flipped_state
from oracles import raycast_visibility

SCENE_RIG = CameraRig(fx=256.0, fy=256.0, cx=128.0, cy=128.0, width=256, height=256)
FAST = RasterConfig(raster_width=256, raster_height=256)


def _quad(x0, x1, y0, y1, z, flip=False):
    """Two triangles spanning [x0,x1]x[y0,y1] at depth z, front-facing unless flipped."""
    verts = np.array([
        [x0, y0, z], [x1, y0, z], [x1, y1, z], [x0, y1, z],
    ])
    faces = np.array([[0, 2, 1], [0, 3, 2]])
    if flip:
        faces = faces[:, ::-1]
    return verts, faces


def _merge(*plane_list):
    verts = []
    faces = []
    offset = 0
    for v, f in plane_list:
        verts.append(v)
        faces.append(f + offset)
        offset += v.shape[0]
    return np.vstack(verts), np.vstack(faces)


def _scene_mesh(verts, faces):
    return HandMesh(vertices=verts, faces=faces, joints=np.zeros((16, 3)),
                    keypoints21=np.zeros((21, 3)))


# ---------------------------------------------------------------------------
# backface filtering


def test_facing_triangle_kept_reversed_removed():
    verts = np.array([[0.0, 0.0, 1.0], [0.1, 0.0, 1.0], [0.0, 0.1, 1.0]])
    toward = np.array([[0, 2, 1]])       # outward normal toward the camera
    away = np.array([[0, 1, 2]])
    assert list(backface_filter(verts, toward)) == [0]
    assert list(backface_filter(verts, away)) == []


def test_cube_front_faces_match_sign_oracle():
    # unit cube centered at (0, 0, 2), twelve triangles
    c = np.array([0.0, 0.0, 2.0])
    corners = np.array([[x, y, z] for x in (-0.5, 0.5)
                        for y in (-0.5, 0.5) for z in (-0.5, 0.5)]) + c
    quads = [
        (0, 1, 3, 2), (4, 6, 7, 5),       # x faces
        (0, 4, 5, 1), (2, 3, 7, 6),       # y faces
        (0, 2, 6, 4), (1, 5, 7, 3),       # z faces
    ]
    faces = []
    for a, b, cc, d in quads:
        faces.append([a, b, cc])
        faces.append([a, cc, d])
    faces = np.array(faces)
    # orient every face outward from the cube centre
    v = corners
    for i, (i0, i1, i2) in enumerate(faces):
        n = np.cross(v[i1] - v[i0], v[i2] - v[i0])
        if n @ (v[[i0, i1, i2]].mean(axis=0) - c) < 0:
            faces[i] = faces[i, ::-1]

    kept = set(backface_filter(corners, faces))
    for i, (i0, i1, i2) in enumerate(faces):
        n = np.cross(v[i1] - v[i0], v[i2] - v[i0])
        centroid = v[[i0, i1, i2]].mean(axis=0)
        assert (i in kept) == (n @ centroid < 0)
    assert 0 < len(kept) < len(faces)


# ---------------------------------------------------------------------------
# rasterization


def test_single_triangle_coverage_matches_scan():
    verts = np.array([[-0.2, -0.1, 1.0], [0.3, 0.0, 1.0], [0.0, 0.35, 1.0]])
    faces = np.array([[0, 2, 1]])
    cfg = RasterConfig(raster_width=200, raster_height=160)
    result = rasterize_zbuffer(verts, faces, SCENE_RIG, cfg)
    assert result.rendered[0]
    assert result.won[0] == result.covered[0] > 0

    # independent scan: project, rebuild the documented sample grid, and
    # count cell centres inside the triangle via 2D half-plane sign tests
    uvs = np.stack([SCENE_RIG.fx * verts[:, 0] / verts[:, 2] + SCENE_RIG.cx,
                    SCENE_RIG.fy * verts[:, 1] / verts[:, 2] + SCENE_RIG.cy], axis=1)
    x0, x1 = max(uvs[:, 0].min(), 0), min(uvs[:, 0].max(), SCENE_RIG.width)
    y0, y1 = max(uvs[:, 1].min(), 0), min(uvs[:, 1].max(), SCENE_RIG.height)
    xs = x0 + (np.arange(cfg.raster_width) + 0.5) * (x1 - x0) / cfg.raster_width
    ys = y0 + (np.arange(cfg.raster_height) + 0.5) * (y1 - y0) / cfg.raster_height
    gx, gy = np.meshgrid(xs, ys)
    pts = np.stack([gx.ravel(), gy.ravel()], axis=1)

    def side(a, b):
        return ((b[0] - a[0]) * (pts[:, 1] - a[1])
                - (b[1] - a[1]) * (pts[:, 0] - a[0]))

    a, b, c = uvs[0], uvs[2], uvs[1]      # face winding 0, 2, 1
    s0, s1, s2 = side(a, b), side(b, c), side(c, a)
    inside = ((s0 >= 0) & (s1 >= 0) & (s2 >= 0)) | ((s0 <= 0) & (s1 <= 0) & (s2 <= 0))
    assert result.covered[0] == int(inside.sum())


def test_near_face_hides_far_face():
    far = _quad(-0.3, 0.3, -0.3, 0.3, 1.0)
    near = _quad(-0.4, 0.4, -0.4, 0.4, 0.8)     # covers all of far's projection
    verts, faces = _merge(far, near)
    areas, raster = face_visible_areas(verts, faces, SCENE_RIG, FAST)
    assert raster.won[0] == 0 and raster.won[1] == 0      # far quad fully hidden
    assert areas[0] == 0.0 and areas[1] == 0.0
    tri = triangle_areas(verts, faces)
    np.testing.assert_allclose(areas[2:], tri[2:], rtol=1e-12)  # near fully visible


def test_outside_frustum_invisible():
    verts = np.array([[5.0, 5.0, 1.0], [5.2, 5.0, 1.0], [5.0, 5.2, 1.0]])
    faces = np.array([[0, 2, 1]])
    result = rasterize_zbuffer(verts, faces, SCENE_RIG, FAST)
    assert result.covered[0] == 0 and result.won[0] == 0

    behind = np.array([[0.0, 0.0, -1.0], [0.1, 0.0, -1.0], [0.0, 0.1, -1.0]])
    result = rasterize_zbuffer(behind, faces, SCENE_RIG, FAST)
    assert not result.rendered[0]
    assert result.covered[0] == 0


def test_visible_area_never_exceeds_face_area(template, rig):
    mesh = pose_mesh(template, fist_state(template))
    verts_cam = world_to_camera(rig, mesh.vertices)
    areas, _ = face_visible_areas(verts_cam, mesh.faces, rig, FAST)
    tri = triangle_areas(verts_cam, mesh.faces)
    assert np.all(areas <= tri + 1e-12)
    assert np.all(areas >= 0)


# ---------------------------------------------------------------------------
# visibility reports


def _plane_template(labels):
    return SimpleNamespace(part_labels=list(labels))


def test_flat_hand_dorsum_fully_visible(template, rig):
    mesh = pose_mesh(template, flipped_state(template))
    report = visibility_report(mesh, template, rig, FAST)
    assert report.per_part_visibility["dorsum"] == pytest.approx(1.0, abs=1e-6)
    assert report.per_part_visibility["palm"] == pytest.approx(0.0, abs=1e-6)


def test_partial_cover_half_visibility_with_raycast_crosscheck():
    """An occluder over exactly half of a plane leaves visibility 0.5."""
    z_far, z_near_plane = 0.5, 0.4
    far = _quad(-0.10, 0.10, -0.10, 0.10, z_far)
    # same projected y-extent, left half of the projected x-extent
    scalef = z_near_plane / z_far
    near = _quad(-0.10 * scalef, 0.0, -0.12 * scalef, 0.12 * scalef, z_near_plane)
    verts, faces = _merge(far, near)
    labels = ["index", "index", "palm", "palm"]
    with pytest.warns(UserWarning, match="zero total area"):
        report = visibility_report(_scene_mesh(verts, faces),
                                   _plane_template(labels), SCENE_RIG, FAST)
    raw = report.per_part_raw_visibility["index"]
    assert raw == pytest.approx(0.5, abs=0.01)
    assert report.per_part_visibility["index"] == pytest.approx(
        raw / FINGER_VISIBILITY_SCALE, abs=1e-12)

    verts_cam = verts        # camera at the origin already
    oracle_area, _, _ = raycast_visibility(verts_cam, faces, SCENE_RIG, 256, 256)
    tri = triangle_areas(verts, faces)
    oracle_raw = oracle_area[:2].sum() / tri[:2].sum()
    assert raw == pytest.approx(oracle_raw, abs=0.01)


def test_eight_percent_visible_finger_flags():
    """A finger at 8% raw visibility: the scaled fraction is 0.16, so the
    occlusion flag depends on whether thresholds apply to scaled or raw."""
    z_far, z_cover = 0.5, 0.4
    far = _quad(-0.10, 0.10, -0.10, 0.10, z_far)
    scalef = z_cover / z_far
    # cover 92% of the projected x-extent
    x_cover = (-0.10 + 0.92 * 0.20) * scalef
    near = _quad(-0.11 * scalef, x_cover, -0.12 * scalef, 0.12 * scalef, z_cover)
    verts, faces = _merge(far, near)
    labels = ["index", "index", "palm", "palm"]

    with pytest.warns(UserWarning):
        scaled_rule = visibility_report(_scene_mesh(verts, faces),
                                        _plane_template(labels), SCENE_RIG, FAST)
    with pytest.warns(UserWarning):
        raw_rule = visibility_report(_scene_mesh(verts, faces),
                                     _plane_template(labels), SCENE_RIG, FAST,
                                     threshold_on_scaled=False)
    raw = scaled_rule.per_part_raw_visibility["index"]
    assert raw == pytest.approx(0.08, abs=0.01)
    assert scaled_rule.per_part_visibility["index"] == pytest.approx(0.16, abs=0.02)
    # scaled 0.16 clears the 0.10 cutoff; the raw fraction does not
    assert not scaled_rule.fully_occluded["index"]
    assert raw_rule.fully_occluded["index"]


def test_zero_area_part_reports_zero_with_warning(template, rig):
    mesh = pose_mesh(template, HandState.neutral(template.shape_rank))
    mesh = HandMesh(vertices=mesh.vertices + np.array([0.0, 0.0, 0.3]),
                    faces=mesh.faces, joints=mesh.joints,
                    keypoints21=mesh.keypoints21)
    labels = ["palm" if lab == "pinky" else lab for lab in template.part_labels]
    with pytest.warns(UserWarning, match="pinky"):
        report = visibility_report(mesh, _plane_template(labels), rig, FAST)
    assert report.per_part_visibility["pinky"] == 0.0


def test_fist_hides_fingers(template, rig):
    mesh = pose_mesh(template, fist_state(template))
    report = visibility_report(
        mesh, template, rig,
        RasterConfig(raster_width=512, raster_height=512))
    occluded = [f for f, flag in report.fully_occluded.items() if flag]
    assert set(occluded) == {"index", "middle", "ring", "pinky"}
    assert not report.fully_occluded["thumb"]
    assert report.mean_finger_visibility < 0.5


# ---------------------------------------------------------------------------
# invariants


def test_zbuffer_matches_raycast_oracle_on_hand(template, rig):
    mesh = pose_mesh(template, fist_state(template))
    verts_cam = world_to_camera(rig, mesh.vertices)
    z_areas, raster = face_visible_areas(
        verts_cam, mesh.faces, rig,
        RasterConfig(raster_width=1024, raster_height=1024))
    o_areas, _, o_won = raycast_visibility(verts_cam, mesh.faces, rig, 1024, 1024)

    front = backface_filter(verts_cam, mesh.faces)
    agree = np.mean((z_areas[front] > 0) == (o_areas[front] > 0))
    assert agree >= 0.98

    labels = np.asarray(template.part_labels)
    tri = triangle_areas(verts_cam, mesh.faces)
    for part in np.unique(labels):
        sel = labels == part
        z_frac = z_areas[sel].sum() / tri[sel].sum()
        o_frac = o_areas[sel].sum() / tri[sel].sum()
        assert z_frac == pytest.approx(o_frac, abs=0.02), part


def test_occluder_never_increases_visibility(template, rig):
    mesh = pose_mesh(template, HandState.neutral(template.shape_rank))
    mesh = HandMesh(vertices=mesh.vertices + np.array([0.02, -0.01, 0.28]),
                    faces=mesh.faces, joints=mesh.joints, keypoints21=mesh.keypoints21)
    base = visibility_report(mesh, template, rig, FAST)

    # a card between the camera and the hand, over part of the view; its
    # projection stays inside the hand's, so the raster grid (which adapts
    # to the scene's projected bounding box) is identical in both runs and
    # the comparison is cell-for-cell
    card_v, card_f = _quad(0.0, 0.05, 0.01, 0.06, 0.18)
    verts = np.vstack([mesh.vertices, card_v])
    faces = np.vstack([mesh.faces, card_f + mesh.vertices.shape[0]])
    labels = list(template.part_labels) + ["palm", "palm"]
    blocked = visibility_report(_scene_mesh(verts, faces),
                                _plane_template(labels), rig, FAST)
    for part in base.per_part_visibility:
        if part == "palm":
            continue          # the card itself is labelled palm
        assert (blocked.per_part_visibility[part]
                <= base.per_part_visibility[part] + 1e-9), part


def test_resolution_convergence(template, rig):
    for state in (HandState.neutral(template.shape_rank), fist_state(template)):
        state.translation = np.array([0.02, -0.01, 0.28])
        mesh = pose_mesh(template, state)
        r512 = visibility_report(mesh, template, rig,
                                 RasterConfig(raster_width=512, raster_height=512))
        r1024 = visibility_report(mesh, template, rig,
                                  RasterConfig(raster_width=1024, raster_height=1024))
        for part, value in r1024.per_part_raw_visibility.items():
            assert r512.per_part_raw_visibility[part] == pytest.approx(
                value, abs=0.02), part


def test_isolated_part_visibility_bounds(template, rig):
    """A convex part seen alone shows exactly its camera-facing share; a
    non-convex part alone shows at most that share but never less than it
    shows inside the full hand."""
    mesh = pose_mesh(template, HandState.neutral(template.shape_rank))
    mesh = HandMesh(vertices=mesh.vertices + np.array([0.02, -0.01, 0.28]),
                    faces=mesh.faces, joints=mesh.joints, keypoints21=mesh.keypoints21)
    labels = np.asarray(template.part_labels)
    verts_cam = world_to_camera(rig, mesh.vertices)
    full_areas, _ = face_visible_areas(verts_cam, mesh.faces, rig, FAST)

    def alone_and_share(sel):
        sub_faces = mesh.faces[sel]
        tri = triangle_areas(verts_cam, sub_faces)
        front = backface_filter(verts_cam, sub_faces)
        areas, _ = face_visible_areas(verts_cam, sub_faces, rig, FAST)
        return areas.sum() / tri.sum(), tri[front].sum() / tri.sum(), tri.sum()

    # the palm block is one convex box (its top face carries the dorsum
    # label), so alone it has no self-occlusion at all
    box = (labels == "palm") | (labels == "dorsum")
    alone, share, _ = alone_and_share(box)
    assert alone == pytest.approx(share, abs=1e-3)

    # a finger is three boxes in a row: its segments shadow each other a
    # little even alone, and the rest of the hand can only hide more
    sel = labels == "index"
    alone, share, total = alone_and_share(sel)
    in_hand = full_areas[sel].sum() / total
    assert in_hand <= alone + 1e-9
    assert alone <= share + 1e-9
    assert alone < share - 0.01          # the self-shadowing is real


# ---------------------------------------------------------------------------
# aggregates


def _fake_report(visible_fingers=(), occluded_fingers=(), dorsum=1.0):
    fingers = ("thumb", "index", "middle", "ring", "pinky")
    vis = {f: (1.0 if f in visible_fingers else 0.5) for f in fingers}
    vis.update({f: 0.05 for f in occluded_fingers})
    vis["dorsum"] = dorsum
    vis["palm"] = 0.3
    return VisibilityReport(
        per_face_visible_area=np.zeros(1),
        per_part_visibility=vis,
        per_part_raw_visibility=dict(vis),
        mean_finger_visibility=float(np.mean([vis[f] for f in fingers])),
        fully_occluded={f: f in occluded_fingers for f in fingers},
        fully_visible={f: f in visible_fingers for f in fingers},
    )


def test_all_visible_dataset():
    fingers = ("thumb", "index", "middle", "ring", "pinky")
    reports = [_fake_report(visible_fingers=fingers) for _ in range(4)]
    stats = dataset_occlusion_stats(reports)
    assert stats.visible_finger_histogram == [0, 0, 0, 0, 0, 4]
    assert stats.visible_finger_fractions[5] == 1.0
    assert stats.occluded_frame_fraction == 0.0
    assert stats.dorsum_percentiles is None


def test_manual_tally_of_ten_reports():
    reports = (
        [_fake_report(visible_fingers=("thumb", "index"))] * 3
        + [_fake_report(occluded_fingers=("pinky",), dorsum=0.2)]
        + [_fake_report(occluded_fingers=("ring", "pinky"), dorsum=0.4)]
        + [_fake_report(occluded_fingers=("middle",), dorsum=0.6)]
        + [_fake_report(visible_fingers=("thumb",))] * 4
    )
    stats = dataset_occlusion_stats(reports)
    assert stats.n_frames == 10
    assert stats.visible_finger_histogram == [3, 4, 3, 0, 0, 0]
    assert stats.occluded_frame_fraction == pytest.approx(0.3)
    pct = stats.dorsum_percentiles
    assert pct["min"] == pytest.approx(0.2)
    assert pct["median"] == pytest.approx(0.4)
    assert pct["max"] == pytest.approx(0.6)


def test_empty_dataset_rejected():
    with pytest.raises(ValueError, match="empty"):
        dataset_occlusion_stats([])


def test_threshold_constants():
    assert OCCLUDED_THRESHOLD == 0.10
    assert VISIBLE_THRESHOLD == 0.90
    assert FINGER_VISIBILITY_SCALE == 0.5
