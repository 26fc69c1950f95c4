"""Dorsal alignment: planar homographies and the fixed-size dorsal crop.

The back of the hand is treated as near-planar, so a reference view can be
aligned to a target view by a homography estimated from the dorsal
keypoint subset (wrist + knuckles) under RANSAC.  Estimation uses the
normalized 4-point direct linear transform, symmetric transfer error for
inlier classification, and a final refit on all inliers of the best
hypothesis.  Sampling is driven by a seeded generator, so results are
deterministic per seed.

Crops are square resamples of the dorsal bounding box (default 384 x 384)
with a margin proportional to the box diagonal; the crop transform is
returned as a homography so image-space points can be carried along.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .hand_model import DORSAL_KEYPOINTS

#: side length of the square dorsal crop, pixels
CROP_SIZE = 384
#: default margin added around the dorsal bounding box, fraction of its diagonal
CROP_MARGIN = 0.15

_DEGENERATE_AREA = 1e-9


class AlignmentError(ValueError):
    """Raised when a homography cannot be estimated or applied."""


@dataclass
class RansacConfig:
    inlier_threshold: float = 3.0   # pixels of symmetric transfer error
    max_iterations: int = 2000
    confidence: float = 0.999
    seed: int = 0

    def __post_init__(self) -> None:
        if self.inlier_threshold <= 0:
            raise ValueError("inlier threshold must be positive")
        if not 0 < self.confidence < 1:
            raise ValueError("confidence must be in (0, 1)")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")


@dataclass
class Homography:
    """A 3x3 projective transform, normalized so the last entry is 1."""

    matrix: np.ndarray

    def __post_init__(self) -> None:
        m = np.asarray(self.matrix, dtype=float)
        if m.shape != (3, 3):
            raise AlignmentError("homography matrix must be 3x3")
        if abs(np.linalg.det(m)) < 1e-12:
            raise AlignmentError("homography must be invertible")
        if m[2, 2] != 0.0:
            m = m / m[2, 2]
        self.matrix = m

    def inverse(self) -> "Homography":
        return Homography(np.linalg.inv(self.matrix))

    def compose(self, other: "Homography") -> "Homography":
        """The transform applying ``other`` first, then this one."""
        return Homography(self.matrix @ other.matrix)


def warp_points(h: Homography, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Apply a homography to (N, 2) points.

    Returns (warped (N, 2), valid (N,)); a point whose image lies on the
    line at infinity (w ~ 0) is flagged invalid and set to NaN.
    """
    pts = np.asarray(points, dtype=float)
    ones = np.ones((pts.shape[0], 1))
    hom = np.hstack([pts, ones]) @ h.matrix.T
    w = hom[:, 2]
    valid = np.abs(w) > 1e-12
    out = np.full_like(pts, np.nan)
    out[valid] = hom[valid, :2] / w[valid, None]
    return out, valid


def _normalization(points: np.ndarray) -> np.ndarray:
    """Similarity that moves the centroid to the origin, mean radius sqrt(2)."""
    centroid = points.mean(axis=0)
    mean_dist = np.mean(np.linalg.norm(points - centroid, axis=1))
    scale = np.sqrt(2.0) / mean_dist if mean_dist > 0 else 1.0
    t = np.array([
        [scale, 0.0, -scale * centroid[0]],
        [0.0, scale, -scale * centroid[1]],
        [0.0, 0.0, 1.0],
    ])
    return t


def _dlt(src: np.ndarray, dst: np.ndarray) -> np.ndarray | None:
    """Normalized direct linear transform; None when the system is degenerate."""
    ts = _normalization(src)
    td = _normalization(dst)
    sh = np.hstack([src, np.ones((len(src), 1))]) @ ts.T
    dh = np.hstack([dst, np.ones((len(dst), 1))]) @ td.T
    rows = []
    for (x, y, _), (u, v, _) in zip(sh, dh):
        rows.append([0, 0, 0, -x, -y, -1, v * x, v * y, v])
        rows.append([x, y, 1, 0, 0, 0, -u * x, -u * y, -u])
    a = np.asarray(rows)
    _, sv, vt = np.linalg.svd(a)
    h_norm = vt[-1].reshape(3, 3)
    if sv[-2] < 1e-12:  # solution not unique: degenerate configuration
        return None
    h = np.linalg.inv(td) @ h_norm @ ts
    if abs(np.linalg.det(h)) < 1e-12 or abs(h[2, 2]) < 1e-12:
        return None
    return h / h[2, 2]


def symmetric_transfer_error(h: Homography, src: np.ndarray,
                             dst: np.ndarray) -> np.ndarray:
    """Per-correspondence error: sqrt of forward plus backward squared error."""
    fwd, fwd_ok = warp_points(h, src)
    bwd, bwd_ok = warp_points(h.inverse(), dst)
    err = np.full(len(src), np.inf)
    ok = fwd_ok & bwd_ok
    d1 = np.sum((fwd[ok] - dst[ok]) ** 2, axis=1)
    d2 = np.sum((bwd[ok] - src[ok]) ** 2, axis=1)
    err[ok] = np.sqrt(d1 + d2)
    return err


def _sample_degenerate(pts: np.ndarray) -> bool:
    """True when any 3 of the 4 sampled points are (nearly) collinear."""
    scale = max(float(np.ptp(pts)), 1.0)
    for skip in range(4):
        tri = np.delete(pts, skip, axis=0)
        area = abs((tri[1, 0] - tri[0, 0]) * (tri[2, 1] - tri[0, 1])
                   - (tri[2, 0] - tri[0, 0]) * (tri[1, 1] - tri[0, 1]))
        if area < _DEGENERATE_AREA * scale * scale:
            return True
    return False


def estimate_homography(src: np.ndarray, dst: np.ndarray,
                        config: RansacConfig = RansacConfig()
                        ) -> tuple[Homography, np.ndarray]:
    """RANSAC homography from (N, 2) correspondences.

    Returns the refit model and its inlier mask.  The best hypothesis is
    the one with the most inliers (first found wins ties); the final model
    is a normalized DLT refit on that hypothesis's inliers, and the
    returned mask is re-evaluated under the refit model.  The iteration
    count adapts to the observed inlier ratio under the configured
    confidence.  Raises AlignmentError for fewer than 4 correspondences or
    when every sample within the budget is degenerate.
    """
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 2:
        raise AlignmentError("correspondence arrays must both be (N, 2)")
    n = src.shape[0]
    if n < 4:
        raise AlignmentError("homography estimation needs at least 4 correspondences")
    if not (np.all(np.isfinite(src)) and np.all(np.isfinite(dst))):
        raise AlignmentError("correspondences must be finite")

    rng = np.random.default_rng(config.seed)
    best_mask: np.ndarray | None = None
    best_count = -1
    needed = config.max_iterations
    trial = 0
    while trial < min(needed, config.max_iterations):
        trial += 1
        pick = rng.choice(n, size=4, replace=False)
        if _sample_degenerate(src[pick]) or _sample_degenerate(dst[pick]):
            continue
        h_arr = _dlt(src[pick], dst[pick])
        if h_arr is None:
            continue
        try:
            hyp = Homography(h_arr)
        except AlignmentError:
            continue
        err = symmetric_transfer_error(hyp, src, dst)
        mask = err < config.inlier_threshold
        count = int(mask.sum())
        if count > best_count:
            best_count = count
            best_mask = mask
            ratio = count / n
            if 0 < ratio < 1:
                denom = np.log1p(-min(ratio ** 4, 1 - 1e-12))
                needed = int(np.ceil(np.log(1 - config.confidence) / denom))
            elif ratio >= 1:
                break
    if best_mask is None or best_count < 4:
        raise AlignmentError(
            "no valid homography hypothesis found (degenerate or inconsistent "
            "correspondences)"
        )
    refit = _dlt(src[best_mask], dst[best_mask])
    if refit is None:
        raise AlignmentError("inlier set is degenerate; cannot refit homography")
    model = Homography(refit)
    final_err = symmetric_transfer_error(model, src, dst)
    return model, final_err < config.inlier_threshold


def warp_grid(h: Homography, grid: np.ndarray, out_size: tuple[int, int]) -> np.ndarray:
    """Resample a raster through a homography.

    grid is (H, W) or (H, W, C); out_size is (height, width).  Each output
    pixel centre is mapped through the inverse transform and sampled
    bilinearly; samples outside the source are zero.  Pixel (row r, col c)
    has centre coordinates (x, y) = (c, r).
    """
    grid = np.asarray(grid)
    squeeze = grid.ndim == 2
    if squeeze:
        grid = grid[:, :, None]
    src_h, src_w, channels = grid.shape
    out_h, out_w = out_size
    if out_h <= 0 or out_w <= 0:
        raise AlignmentError("output size must be positive")
    inv = h.inverse()
    cols, rows = np.meshgrid(np.arange(out_w, dtype=float),
                             np.arange(out_h, dtype=float))
    pts = np.stack([cols.ravel(), rows.ravel()], axis=1)
    mapped, valid = warp_points(inv, pts)
    x = mapped[:, 0]
    y = mapped[:, 1]
    inside = valid & (x >= 0) & (x <= src_w - 1) & (y >= 0) & (y <= src_h - 1)
    out = np.zeros((out_h * out_w, channels), dtype=float)
    if np.any(inside):
        xi = x[inside]
        yi = y[inside]
        x0 = np.clip(np.floor(xi).astype(int), 0, src_w - 1)
        y0 = np.clip(np.floor(yi).astype(int), 0, src_h - 1)
        x1 = np.minimum(x0 + 1, src_w - 1)
        y1 = np.minimum(y0 + 1, src_h - 1)
        fx = xi - x0
        fy = yi - y0
        flat = grid.reshape(-1, channels).astype(float)
        p00 = flat[y0 * src_w + x0]
        p01 = flat[y0 * src_w + x1]
        p10 = flat[y1 * src_w + x0]
        p11 = flat[y1 * src_w + x1]
        top = p00 * (1 - fx)[:, None] + p01 * fx[:, None]
        bot = p10 * (1 - fx)[:, None] + p11 * fx[:, None]
        out[inside] = top * (1 - fy)[:, None] + bot * fy[:, None]
    out = out.reshape(out_h, out_w, channels)
    return out[:, :, 0] if squeeze else out


def dorsal_crop_transform(keypoints2d: np.ndarray, image_shape: tuple[int, int],
                          margin: float = CROP_MARGIN,
                          out_size: int = CROP_SIZE) -> Homography:
    """Image-to-crop transform for the dorsal region (an affine homography).

    keypoints2d is the full (21, 2) pixel layout; the crop box is the
    bounding box of the dorsal subset (wrist + knuckles) expanded on every
    side by margin x diagonal, mapped onto the square output with the
    pixel-centre convention.  Raises when the dorsal points fall outside
    the image or the box is degenerate.
    """
    kp = np.asarray(keypoints2d, dtype=float)
    if kp.shape != (21, 2):
        raise AlignmentError("expected the full (21, 2) keypoint layout")
    dorsal = kp[list(DORSAL_KEYPOINTS)]
    if not np.all(np.isfinite(dorsal)):
        raise AlignmentError("dorsal keypoints must be finite")
    src_h, src_w = image_shape
    if (dorsal[:, 0].min() < 0 or dorsal[:, 0].max() > src_w - 1
            or dorsal[:, 1].min() < 0 or dorsal[:, 1].max() > src_h - 1):
        raise AlignmentError("dorsal keypoints must lie within the image")
    x0, y0 = dorsal.min(axis=0)
    x1, y1 = dorsal.max(axis=0)
    diag = float(np.hypot(x1 - x0, y1 - y0))
    if diag <= 0 or x1 <= x0 or y1 <= y0:
        raise AlignmentError("dorsal bounding box is degenerate")
    pad = margin * diag
    x0, x1 = x0 - pad, x1 + pad
    y0, y1 = y0 - pad, y1 + pad
    sx = (out_size - 1) / (x1 - x0)
    sy = (out_size - 1) / (y1 - y0)
    return Homography(np.array([
        [sx, 0.0, -sx * x0],
        [0.0, sy, -sy * y0],
        [0.0, 0.0, 1.0],
    ]))


def dorsal_crop(keypoints2d: np.ndarray, grid: np.ndarray,
                margin: float = CROP_MARGIN,
                out_size: int = CROP_SIZE) -> tuple[np.ndarray, Homography]:
    """Square crop of the dorsal region, resampled to out_size x out_size.

    Returns (crop, image-to-crop transform); see dorsal_crop_transform for
    the box construction.  With keypoints spanning exactly the full frame
    and margin 0, the crop is a whole-frame resample.
    """
    grid = np.asarray(grid)
    transform = dorsal_crop_transform(keypoints2d, grid.shape[:2],
                                      margin=margin, out_size=out_size)
    crop = warp_grid(transform, grid, (out_size, out_size))
    return crop, transform
