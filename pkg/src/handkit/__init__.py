"""handkit: hand-mesh occlusion measurement, pose fitting and evaluation.

Library layout:

* hand_model — rigged template, posing (LBS), keypoints, part areas
* synthetic — built-in synthetic test hand
* camera — pinhole rig, projection, calibration I/O
* occlusion — backface + z-buffer visibility, dataset occlusion stats
* fitting — damped Gauss-Newton keypoint / marker fitting
* alignment — RANSAC homographies, warping, dorsal crops
* features — patch feature grids, change features, FGRID I/O
* metrics — MPJAE, PA-MPJPE, consistency loss, tap / pinch series
* stats — regression, ANOVA, percentiles, click labeling, scoring
* pgm — binary PGM image I/O
* pipeline / cli — deterministic batch runs over capture manifests
"""

from .hand_model import (
    DORSAL_KEYPOINTS,
    FINGERS,
    KEYPOINT_NAMES,
    MCP_KEYPOINTS,
    PART_LABELS,
    TIP_KEYPOINTS,
    HandMesh,
    HandState,
    RiggedHandTemplate,
    TemplateError,
    keypoints,
    load_template,
    part_areas,
    pose_mesh,
    save_template,
)
from .synthetic import build_synthetic_hand
from .camera import CameraRig, load_calibration, project, save_calibration, world_to_camera
from .occlusion import (
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
from .fitting import (
    FitConfig,
    FitResult,
    FittingError,
    KeypointTargets,
    MarkerTargets,
    fit,
    keypoint_objective,
    marker_objective,
)
from .alignment import (
    CROP_MARGIN,
    CROP_SIZE,
    AlignmentError,
    Homography,
    RansacConfig,
    dorsal_crop,
    dorsal_crop_transform,
    estimate_homography,
    symmetric_transfer_error,
    warp_grid,
    warp_points,
)
from .features import (
    FeatureGrid,
    SimilarityMap,
    cosine_map,
    delta_grid,
    fuse_change_tensor,
    load_grid,
    save_grid,
    similarity_to_image,
)
from .metrics import (
    MetricReport,
    PosePair,
    fingertip_thumb_distance,
    flexion_angle_series,
    metric_report,
    mpjae,
    pa_mpjpe,
    pinch_distance_series,
    pose_consistency_loss,
    similarity_align,
    tap_angle_series,
)
from .stats import (
    CLICK_THRESHOLD,
    AnovaResult,
    ClickLabels,
    ForceTrace,
    RegressionFit,
    classification_report,
    label_clicks,
    linear_regression,
    load_force_trace,
    one_way_anova,
    per_click_majority,
    percentile_summary,
)
from .pgm import read_pgm, write_pgm

__version__ = "0.1.0"
