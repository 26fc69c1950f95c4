"""Deterministic batch pipeline over capture manifests.

A run manifest (JSON, schema ``run-manifest/1``) points at a hand template,
a camera calibration and one or more frame annotation files, and carries a
seed plus optional configuration overrides.  Each pipeline entry point
ingests the manifest, processes frames independently (optionally across a
process pool) and writes a report directory.

Determinism contract: report bytes depend only on the manifest contents,
the referenced files and the effective configuration — never on worker
count, wall clock or filesystem iteration order.  Frames are processed in
manifest order, floats are rendered with 6 significant digits in CSVs, and
JSON is emitted with a fixed key order.  Per-frame failures are collected
and reported; they mark the run as partial rather than aborting it.
"""

from __future__ import annotations

import csv
import functools
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .alignment import (
    CROP_MARGIN,
    CROP_SIZE,
    AlignmentError,
    Homography,
    RansacConfig,
    dorsal_crop,
    dorsal_crop_transform,
    estimate_homography,
    warp_grid,
)
from .camera import CameraRig, load_calibration, project, world_to_camera
from .features import FeatureGrid, cosine_map, delta_grid, fuse_change_tensor, load_grid, save_grid, similarity_to_image
from .fitting import FitConfig, KeypointTargets, MarkerTargets, fit
from .hand_model import (
    DORSAL_KEYPOINTS,
    FINGERS,
    NUM_KEYPOINTS,
    HandState,
    RiggedHandTemplate,
    joint_names,
    load_template,
    pose_mesh,
)
from .metrics import mpjae, pa_mpjpe, PosePair
from .occlusion import (
    FINGER_VISIBILITY_SCALE,
    OCCLUDED_THRESHOLD,
    VISIBLE_THRESHOLD,
    RasterConfig,
    dataset_occlusion_stats,
    visibility_report,
)
from .pgm import read_pgm, write_pgm
from .stats import (
    CLICK_THRESHOLD,
    classification_report,
    label_clicks,
    linear_regression,
    load_force_trace,
    one_way_anova,
    per_click_majority,
)

MANIFEST_SCHEMA = "run-manifest/1"
FRAMES_SCHEMA = "hand-frames/1"
PREDICTIONS_SCHEMA = "hand-predictions/1"

#: frames with mean finger visibility at or below this form the low-visibility stratum
LOW_VISIBILITY_THRESHOLD = 0.50


class PipelineError(ValueError):
    """Fatal pipeline setup problem (bad manifest, unreadable inputs)."""


# --------------------------------------------------------------------------
# configuration


@dataclass
class PipelineConfig:
    """Effective settings for a run; manifest config then CLI flags override."""

    raster_width: int = 1024
    raster_height: int = 1024
    depth_epsilon: float = 1e-5
    occluded_threshold: float = OCCLUDED_THRESHOLD
    visible_threshold: float = VISIBLE_THRESHOLD
    threshold_on_scaled: bool = True
    low_visibility_threshold: float = LOW_VISIBILITY_THRESHOLD
    lambda_pose: float = 1e-3
    lambda_shape: float = 1e-3
    max_fit_iterations: int = 100
    angle_mode: str = "geodesic"
    ransac_inlier_threshold: float = 3.0
    ransac_max_iterations: int = 2000
    ransac_confidence: float = 0.999
    crop_size: int = CROP_SIZE
    crop_margin: float = CROP_MARGIN
    click_threshold: float = CLICK_THRESHOLD
    reference_frame: str | None = None
    images_dir: str | None = None

    @classmethod
    def from_mapping(cls, mapping: dict | None) -> "PipelineConfig":
        cfg = cls()
        if not mapping:
            return cfg
        known = set(cfg.__dataclass_fields__)
        unknown = sorted(set(mapping) - known)
        if unknown:
            raise PipelineError(f"unknown config keys: {unknown}")
        for key, value in mapping.items():
            setattr(cfg, key, value)
        return cfg

    def raster(self) -> RasterConfig:
        return RasterConfig(raster_width=int(self.raster_width),
                            raster_height=int(self.raster_height),
                            depth_epsilon=float(self.depth_epsilon))

    def fitting(self) -> FitConfig:
        return FitConfig(lambda_pose=float(self.lambda_pose),
                         lambda_shape=float(self.lambda_shape),
                         max_iterations=int(self.max_fit_iterations))

    def ransac(self, seed: int) -> RansacConfig:
        return RansacConfig(inlier_threshold=float(self.ransac_inlier_threshold),
                            max_iterations=int(self.ransac_max_iterations),
                            confidence=float(self.ransac_confidence),
                            seed=int(seed))


@dataclass
class RunManifest:
    path: Path
    template_path: Path
    calibration_path: Path
    annotation_paths: list
    seed: int
    config: PipelineConfig


def load_manifest(path) -> RunManifest:
    """Read a run-manifest/1 document; all referenced files must exist."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise PipelineError(f"cannot read manifest {path}: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("schema") != MANIFEST_SCHEMA:
        raise PipelineError(f"{path}: expected schema {MANIFEST_SCHEMA!r}")
    for key in ("template", "calibration", "annotations"):
        if key not in doc:
            raise PipelineError(f"{path}: manifest missing {key!r}")
    base = path.parent
    template_path = (base / doc["template"]).resolve()
    calibration_path = (base / doc["calibration"]).resolve()
    annotations = [(base / p).resolve() for p in doc["annotations"]]
    if not annotations:
        raise PipelineError(f"{path}: manifest lists no annotation files")
    for ref in [template_path, calibration_path, *annotations]:
        if not ref.is_file():
            raise PipelineError(f"{path}: referenced file missing: {ref}")
    config = PipelineConfig.from_mapping(doc.get("config"))
    if config.images_dir is not None:
        config.images_dir = str((base / config.images_dir).resolve())
    return RunManifest(
        path=path,
        template_path=template_path,
        calibration_path=calibration_path,
        annotation_paths=annotations,
        seed=int(doc.get("seed", 0)),
        config=config,
    )


# --------------------------------------------------------------------------
# frame ingestion


@dataclass
class FrameAnnotation:
    frame_id: str
    subject_id: str = ""
    gesture_label: str = ""
    skin_tone_level: int | None = None
    keypoints3d: np.ndarray | None = None          # (21, 3)
    keypoint_confidence: np.ndarray | None = None  # (21,)
    marker_points: np.ndarray | None = None        # (M, 3)
    marker_vertex_ids: np.ndarray | None = None    # (M,)
    gt_state: HandState | None = None


@dataclass
class IngestResult:
    frames: list                 # list[FrameAnnotation], manifest order
    skipped: int
    errors: list                 # list[str], one message per skipped frame


def _parse_state(doc: dict) -> HandState:
    return HandState(
        pose=np.asarray(doc["pose"], dtype=float),
        shape=np.asarray(doc.get("shape", []), dtype=float),
        global_orient=np.asarray(doc.get("global_orient", [0.0, 0.0, 0.0]), dtype=float),
        translation=np.asarray(doc.get("translation", [0.0, 0.0, 0.0]), dtype=float),
    )


def _state_to_dict(state: HandState) -> dict:
    return {
        "pose": state.pose.tolist(),
        "shape": state.shape.tolist(),
        "global_orient": state.global_orient.tolist(),
        "translation": state.translation.tolist(),
    }


def _parse_frame(doc: dict) -> FrameAnnotation:
    if not isinstance(doc, dict):
        raise ValueError("frame entry is not an object")
    frame_id = doc.get("frame_id")
    if not isinstance(frame_id, str) or not frame_id:
        raise ValueError("frame_id missing or empty")
    frame = FrameAnnotation(
        frame_id=frame_id,
        subject_id=str(doc.get("subject_id", "")),
        gesture_label=str(doc.get("gesture_label", "")),
        skin_tone_level=(int(doc["skin_tone_level"])
                         if doc.get("skin_tone_level") is not None else None),
    )
    if doc.get("keypoints3d") is not None:
        kp = np.asarray(doc["keypoints3d"], dtype=float)
        if kp.shape != (NUM_KEYPOINTS, 3) or not np.all(np.isfinite(kp)):
            raise ValueError("keypoints3d must be finite with shape (21, 3)")
        frame.keypoints3d = kp
        if doc.get("keypoint_confidence") is not None:
            conf = np.asarray(doc["keypoint_confidence"], dtype=float)
            if conf.shape != (NUM_KEYPOINTS,):
                raise ValueError("keypoint_confidence must have 21 entries")
            frame.keypoint_confidence = conf
    if doc.get("markers3d") is not None:
        markers = doc["markers3d"]
        pts = np.asarray(markers["points"], dtype=float)
        ids = np.asarray(markers["vertex_ids"], dtype=int)
        if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] != ids.shape[0]:
            raise ValueError("markers3d points and vertex_ids are inconsistent")
        frame.marker_points = pts
        frame.marker_vertex_ids = ids
    if doc.get("gt_state") is not None:
        frame.gt_state = _parse_state(doc["gt_state"])
    return frame


def load_annotations(path) -> tuple[list, list]:
    """Read one hand-frames/1 file; returns (frames, error messages)."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise PipelineError(f"cannot read annotations {path}: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("schema") != FRAMES_SCHEMA:
        raise PipelineError(f"{path}: expected schema {FRAMES_SCHEMA!r}")
    frames: list[FrameAnnotation] = []
    errors: list[str] = []
    for index, entry in enumerate(doc.get("frames", [])):
        try:
            frames.append(_parse_frame(entry))
        except (ValueError, KeyError, TypeError) as exc:
            errors.append(f"{path.name}[{index}]: {exc}")
    return frames, errors


def ingest(manifest: RunManifest) -> IngestResult:
    """Frames from every annotation file, validated, manifest order.

    Malformed frames and duplicate frame ids are skipped and reported.
    """
    frames: list[FrameAnnotation] = []
    errors: list[str] = []
    seen: set[str] = set()
    for ann_path in manifest.annotation_paths:
        file_frames, file_errors = load_annotations(ann_path)
        errors.extend(file_errors)
        for frame in file_frames:
            if frame.frame_id in seen:
                errors.append(f"{ann_path.name}: duplicate frame_id {frame.frame_id!r}")
                continue
            seen.add(frame.frame_id)
            frames.append(frame)
    return IngestResult(frames=frames, skipped=len(errors), errors=errors)


def load_predictions(path) -> dict:
    """Read hand-predictions/1: frame_id -> HandState."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise PipelineError(f"cannot read predictions {path}: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("schema") != PREDICTIONS_SCHEMA:
        raise PipelineError(f"{path}: expected schema {PREDICTIONS_SCHEMA!r}")
    out: dict[str, HandState] = {}
    for index, entry in enumerate(doc.get("states", [])):
        try:
            out[str(entry["frame_id"])] = _parse_state(entry)
        except (ValueError, KeyError, TypeError) as exc:
            raise PipelineError(f"{path}: malformed state entry {index}: {exc}") from exc
    return out


# --------------------------------------------------------------------------
# deterministic emission helpers


def format_value(value) -> str:
    """Render a cell: floats at 6 significant digits, bools as 0/1."""
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, float):
        return format(value, ".6g")
    return str(value)


def write_csv(path, columns: list, rows: list, header_comments: list | None = None) -> None:
    """Write a CSV with optional leading ``# key: value`` comment lines."""
    with Path(path).open("w", newline="") as fh:
        for line in header_comments or []:
            fh.write(f"# {line}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([format_value(v) for v in row])


def write_json(path, doc: dict) -> None:
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def config_header_lines(cfg: PipelineConfig, keys: list) -> list:
    """Stable ``name: value`` echo lines for report headers."""
    lines = []
    for key in keys:
        lines.append(f"{key}: {format_value(getattr(cfg, key))}")
    return lines


def _mean_sd(values: list) -> tuple[float, float]:
    arr = np.asarray(values, dtype=float)
    if arr.size == 0:
        return float("nan"), float("nan")
    mean = float(arr.mean())
    sd = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return mean, sd


def _map_frames(worker, items: list, workers: int) -> list:
    """Order-preserving map, optionally over a process pool."""
    if workers <= 1 or len(items) <= 1:
        return [worker(item) for item in items]
    chunk = max(1, len(items) // (workers * 4))
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(worker, items, chunksize=chunk))


@dataclass
class RunCounts:
    total: int = 0
    processed: int = 0
    failed: int = 0
    skipped: int = 0

    @property
    def partial(self) -> bool:
        return self.failed > 0 or self.skipped > 0


def write_run_summary(out_dir: Path, command: str, seed: int,
                      cfg: PipelineConfig, cfg_keys: list,
                      counts: RunCounts, failures: list) -> None:
    doc = {
        "schema": "run-summary/1",
        "command": command,
        "seed": seed,
        "config": {k: getattr(cfg, k) for k in cfg_keys},
        "counts": {
            "total": counts.total,
            "processed": counts.processed,
            "failed": counts.failed,
            "skipped": counts.skipped,
        },
        "failures": failures,
    }
    write_json(out_dir / "run_summary.json", doc)


# --------------------------------------------------------------------------
# shared per-frame helpers (top level for process-pool pickling)


def _frame_state(frame: FrameAnnotation, template: RiggedHandTemplate,
                 fit_cfg: FitConfig) -> HandState:
    """The frame's hand state: ground truth if present, otherwise a fit."""
    if frame.gt_state is not None:
        return frame.gt_state
    if frame.keypoints3d is not None:
        targets = KeypointTargets(points=frame.keypoints3d,
                                  confidence=frame.keypoint_confidence)
        return fit(template, targets, config=fit_cfg).state
    if frame.marker_points is not None:
        targets = MarkerTargets(points=frame.marker_points,
                                vertex_ids=frame.marker_vertex_ids)
        return fit(template, targets, config=fit_cfg).state
    raise ValueError("frame has no pose source (gt_state, keypoints3d or markers3d)")


def _audit_worker(frame: FrameAnnotation, template: RiggedHandTemplate,
                  rig: CameraRig, cfg: PipelineConfig) -> tuple:
    try:
        state = _frame_state(frame, template, cfg.fitting())
        mesh = pose_mesh(template, state)
        report = visibility_report(
            mesh, template, rig, cfg.raster(),
            occluded_threshold=cfg.occluded_threshold,
            visible_threshold=cfg.visible_threshold,
            threshold_on_scaled=cfg.threshold_on_scaled,
        )
        return ("ok", frame.frame_id, report)
    except (ValueError, KeyError) as exc:
        return ("error", frame.frame_id, str(exc))


_AUDIT_CONFIG_KEYS = [
    "raster_width", "raster_height", "depth_epsilon",
    "occluded_threshold", "visible_threshold", "threshold_on_scaled",
]


def run_occlusion_audit(manifest: RunManifest, out_dir, workers: int = 1,
                        seed: int | None = None) -> RunCounts:
    """Per-frame part visibility plus dataset occlusion aggregates."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    template = load_template(manifest.template_path)
    rig = load_calibration(manifest.calibration_path)
    cfg = manifest.config
    seed = manifest.seed if seed is None else seed
    ingested = ingest(manifest)
    counts = RunCounts(total=len(ingested.frames) + ingested.skipped,
                       skipped=ingested.skipped)
    failures = [{"frame_id": "", "message": msg} for msg in ingested.errors]

    worker = functools.partial(_audit_worker, template=template, rig=rig, cfg=cfg)
    results = _map_frames(worker, ingested.frames, workers)

    header = config_header_lines(cfg, _AUDIT_CONFIG_KEYS)
    header.append(f"finger_visibility_scale: {format_value(FINGER_VISIBILITY_SCALE)}")
    rows = []
    reports = []
    for frame, result in zip(ingested.frames, results):
        if result[0] == "error":
            counts.failed += 1
            failures.append({"frame_id": result[1], "message": result[2]})
            continue
        counts.processed += 1
        report = result[2]
        reports.append(report)
        vis = report.per_part_visibility
        rows.append([
            frame.frame_id, frame.subject_id, frame.gesture_label,
            *(vis[f] for f in FINGERS), vis["dorsum"], vis["palm"],
            report.mean_finger_visibility,
            sum(report.fully_visible.values()),
            sum(report.fully_occluded.values()),
            any(report.fully_occluded.values()),
        ])
    write_csv(
        out_dir / "visibility.csv",
        ["frame_id", "subject_id", "gesture_label", *FINGERS,
         "dorsum", "palm", "mean_finger_visibility",
         "n_fully_visible", "n_fully_occluded", "any_fully_occluded"],
        rows, header_comments=header,
    )
    summary: dict = {
        "schema": "occlusion-summary/1",
        "config": {**{k: getattr(cfg, k) for k in _AUDIT_CONFIG_KEYS},
                   "finger_visibility_scale": FINGER_VISIBILITY_SCALE},
        "n_frames": len(reports),
    }
    if reports:
        agg = dataset_occlusion_stats(reports)
        summary.update({
            "visible_finger_histogram": agg.visible_finger_histogram,
            "visible_finger_fractions": agg.visible_finger_fractions,
            "occluded_frame_fraction": agg.occluded_frame_fraction,
            "dorsum_percentiles": agg.dorsum_percentiles,
        })
    else:
        summary.update({
            "visible_finger_histogram": None,
            "visible_finger_fractions": None,
            "occluded_frame_fraction": None,
            "dorsum_percentiles": None,
        })
    write_json(out_dir / "occlusion_summary.json", summary)
    write_run_summary(out_dir, "audit", seed, cfg, _AUDIT_CONFIG_KEYS,
                      counts, failures)
    return counts


# --------------------------------------------------------------------------
# batch fitting


def _fit_worker(item: tuple, template: RiggedHandTemplate,
                cfg: PipelineConfig, log: bool) -> tuple:
    frame = item
    try:
        trace: list | None = [] if log else None
        if frame.keypoints3d is not None:
            targets = KeypointTargets(points=frame.keypoints3d,
                                      confidence=frame.keypoint_confidence)
            route = "keypoints"
        elif frame.marker_points is not None:
            targets = MarkerTargets(points=frame.marker_points,
                                    vertex_ids=frame.marker_vertex_ids)
            route = "markers"
        else:
            return ("error", frame.frame_id, "frame has no fitting targets")
        init = None
        if route == "markers" and frame.gt_state is not None:
            # markers cannot constrain shape; borrow it from the annotation
            init = HandState.neutral(template.shape_rank)
            init.shape = frame.gt_state.shape.copy()
        result = fit(template, targets, init=init, config=cfg.fitting(), trace=trace)
        return ("ok", frame.frame_id, route, result, trace)
    except (ValueError, KeyError) as exc:
        return ("error", frame.frame_id, str(exc))


_FIT_CONFIG_KEYS = ["lambda_pose", "lambda_shape", "max_fit_iterations"]


def run_fit_batch(manifest: RunManifest, out_dir, workers: int = 1,
                  seed: int | None = None, log_fits: bool = False) -> RunCounts:
    """Fit every frame's targets; emits fitted states consumable by eval."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    template = load_template(manifest.template_path)
    cfg = manifest.config
    seed = manifest.seed if seed is None else seed
    ingested = ingest(manifest)
    counts = RunCounts(total=len(ingested.frames) + ingested.skipped,
                       skipped=ingested.skipped)
    failures = [{"frame_id": "", "message": msg} for msg in ingested.errors]

    worker = functools.partial(_fit_worker, template=template, cfg=cfg, log=log_fits)
    results = _map_frames(worker, ingested.frames, workers)

    states = []
    rows = []
    trace_rows = []
    for frame, result in zip(ingested.frames, results):
        if result[0] == "error":
            counts.failed += 1
            failures.append({"frame_id": result[1], "message": result[2]})
            continue
        counts.processed += 1
        _, frame_id, route, fit_result, trace = result
        entry = {"frame_id": frame_id, **_state_to_dict(fit_result.state),
                 "objective": fit_result.objective,
                 "iterations": fit_result.iterations,
                 "converged": fit_result.converged}
        states.append(entry)
        rows.append([frame_id, route, fit_result.objective,
                     fit_result.iterations, fit_result.converged])
        if trace:
            trace_rows.extend([[frame_id, it, obj, damping]
                               for it, obj, damping in trace])
    write_json(out_dir / "fitted_states.json",
               {"schema": PREDICTIONS_SCHEMA, "states": states})
    write_csv(out_dir / "fit_report.csv",
              ["frame_id", "route", "objective", "iterations", "converged"],
              rows, header_comments=config_header_lines(cfg, _FIT_CONFIG_KEYS))
    if log_fits:
        write_csv(out_dir / "fit_trace.csv",
                  ["frame_id", "iteration", "objective", "damping"], trace_rows)
    write_run_summary(out_dir, "fit", seed, cfg, _FIT_CONFIG_KEYS, counts, failures)
    return counts


# --------------------------------------------------------------------------
# metric join (eval)


def _eval_worker(item: tuple, template: RiggedHandTemplate, rig: CameraRig,
                 cfg: PipelineConfig) -> tuple:
    frame, pred_state = item
    try:
        gt_state = frame.gt_state
        if gt_state is None:
            return ("error", frame.frame_id, "frame has no ground-truth state")
        gt_mesh = pose_mesh(template, gt_state)
        pred_mesh = pose_mesh(template, pred_state)
        pair = PosePair(predicted=pred_state, ground_truth=gt_state,
                        predicted_keypoints=pred_mesh.keypoints21,
                        ground_truth_keypoints=gt_mesh.keypoints21)
        per_joint, mean_deg = mpjae(pair, template, mode=cfg.angle_mode)
        pa = pa_mpjpe(pred_mesh.keypoints21, gt_mesh.keypoints21)
        report = visibility_report(
            gt_mesh, template, rig, cfg.raster(),
            occluded_threshold=cfg.occluded_threshold,
            visible_threshold=cfg.visible_threshold,
            threshold_on_scaled=cfg.threshold_on_scaled,
        )
        return ("ok", frame.frame_id, per_joint, mean_deg, pa,
                report.mean_finger_visibility)
    except (ValueError, KeyError) as exc:
        return ("error", frame.frame_id, str(exc))


_EVAL_CONFIG_KEYS = _AUDIT_CONFIG_KEYS + ["low_visibility_threshold", "angle_mode"]


def _grouped_mean_sd(frames_rows: list, key_index: int, subject_index: int,
                     metric_indices: tuple) -> list:
    """Across-subject mean +- SD per group: per-subject means first."""
    groups: dict = {}
    for row in frames_rows:
        groups.setdefault(row[key_index], []).append(row)
    out = []
    for group_key in sorted(groups):
        rows = groups[group_key]
        by_subject: dict = {}
        for row in rows:
            by_subject.setdefault(row[subject_index], []).append(row)
        stats_cells = []
        for mi in metric_indices:
            subject_means = [float(np.mean([r[mi] for r in srows]))
                             for _, srows in sorted(by_subject.items())]
            mean, sd = _mean_sd(subject_means)
            stats_cells.extend([mean, sd])
        out.append([group_key, len(rows), len(by_subject), *stats_cells])
    return out


def run_metric_join(manifest: RunManifest, predictions_path, out_dir,
                    workers: int = 1, seed: int | None = None) -> RunCounts:
    """Join predictions with ground truth: metric tables and regressions."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    template = load_template(manifest.template_path)
    rig = load_calibration(manifest.calibration_path)
    cfg = manifest.config
    seed = manifest.seed if seed is None else seed
    predictions = load_predictions(predictions_path)
    ingested = ingest(manifest)
    counts = RunCounts(total=len(ingested.frames) + ingested.skipped,
                       skipped=ingested.skipped)
    failures = [{"frame_id": "", "message": msg} for msg in ingested.errors]

    paired = []
    for frame in ingested.frames:
        if frame.frame_id not in predictions:
            counts.failed += 1
            failures.append({"frame_id": frame.frame_id,
                             "message": "no prediction for frame"})
            continue
        paired.append((frame, predictions[frame.frame_id]))
    for extra in sorted(set(predictions) - {f.frame_id for f in ingested.frames}):
        counts.skipped += 1
        counts.total += 1
        failures.append({"frame_id": extra,
                         "message": "prediction without matching frame"})

    worker = functools.partial(_eval_worker, template=template, rig=rig, cfg=cfg)
    results = _map_frames(worker, paired, workers)

    names = joint_names(template)
    frame_rows = []       # frame_id, subject, gesture, tone, mpjae, pa, vis, low
    joint_values: dict = {name: [] for name in names}
    for (frame, _), result in zip(paired, results):
        if result[0] == "error":
            counts.failed += 1
            failures.append({"frame_id": result[1], "message": result[2]})
            continue
        counts.processed += 1
        _, frame_id, per_joint, mean_deg, pa, visibility = result
        for name, value in zip(names, per_joint):
            joint_values[name].append(float(value))
        frame_rows.append([
            frame_id, frame.subject_id, frame.gesture_label,
            frame.skin_tone_level if frame.skin_tone_level is not None else "",
            float(mean_deg), float(pa), float(visibility),
            visibility <= cfg.low_visibility_threshold,
        ])

    header = config_header_lines(cfg, _EVAL_CONFIG_KEYS)
    write_csv(
        out_dir / "metrics_per_frame.csv",
        ["frame_id", "subject_id", "gesture_label", "skin_tone_level",
         "mpjae_deg", "pa_mpjpe_mm", "mean_finger_visibility", "low_visibility"],
        frame_rows, header_comments=header,
    )

    def overall_rows(rows: list) -> list:
        out = []
        mpjae_vals = [r[4] for r in rows]
        pa_vals = [r[5] for r in rows]
        fm, fs = _mean_sd(mpjae_vals)
        pm, ps = _mean_sd(pa_vals)
        out.append(["frames", len(rows), fm, fs, pm, ps])
        by_subject: dict = {}
        for r in rows:
            by_subject.setdefault(r[1], []).append(r)
        subj_mpjae = [float(np.mean([r[4] for r in srows]))
                      for _, srows in sorted(by_subject.items())]
        subj_pa = [float(np.mean([r[5] for r in srows]))
                   for _, srows in sorted(by_subject.items())]
        fm, fs = _mean_sd(subj_mpjae)
        pm, ps = _mean_sd(subj_pa)
        out.append(["subjects", len(by_subject), fm, fs, pm, ps])
        return out

    overall_columns = ["scope", "n", "mpjae_mean_deg", "mpjae_sd_deg",
                       "pa_mpjpe_mean_mm", "pa_mpjpe_sd_mm"]
    write_csv(out_dir / "metrics_overall.csv", overall_columns,
              overall_rows(frame_rows) if frame_rows else [],
              header_comments=header)

    low_rows = [r for r in frame_rows if r[7]]
    write_csv(out_dir / "metrics_low_visibility.csv", overall_columns,
              overall_rows(low_rows) if low_rows else [],
              header_comments=header + [
                  f"stratum: mean_finger_visibility <= "
                  f"{format_value(cfg.low_visibility_threshold)}"])

    gesture_rows = _grouped_mean_sd(frame_rows, key_index=2, subject_index=1,
                                    metric_indices=(4, 5))
    write_csv(out_dir / "metrics_per_gesture.csv",
              ["gesture_label", "n_frames", "n_subjects",
               "mpjae_mean_deg", "mpjae_sd_deg",
               "pa_mpjpe_mean_mm", "pa_mpjpe_sd_mm"],
              gesture_rows, header_comments=header)

    joint_rows = []
    for name in names:
        values = joint_values[name]
        mean, sd = _mean_sd(values) if values else (float("nan"), float("nan"))
        joint_rows.append([name, len(values), mean, sd])
    write_csv(out_dir / "metrics_per_joint.csv",
              ["joint", "n", "mpjae_mean_deg", "mpjae_sd_deg"], joint_rows,
              header_comments=header)

    write_csv(out_dir / "visibility_scatter.csv",
              ["frame_id", "mean_finger_visibility", "mpjae_deg"],
              [[r[0], r[6], r[4]] for r in frame_rows], header_comments=header)

    regression_doc: dict = {"schema": "visibility-regression/1", "n": len(frame_rows)}
    xs = [r[6] for r in frame_rows]
    ys = [r[4] for r in frame_rows]
    if len(frame_rows) >= 2 and len(set(xs)) > 1:
        fit_res = linear_regression(xs, ys)
        regression_doc.update({
            "slope_deg_per_unit_visibility": fit_res.slope,
            "intercept_deg": fit_res.intercept,
            "r_squared": fit_res.r_squared,
        })
    else:
        regression_doc.update({
            "slope_deg_per_unit_visibility": None,
            "intercept_deg": None,
            "r_squared": None,
            "note": "regression undefined (fewer than 2 frames or constant visibility)",
        })
    write_json(out_dir / "visibility_regression.json", regression_doc)

    tones: dict = {}
    for r in frame_rows:
        if r[3] != "":
            tones.setdefault(r[3], []).append(r[4])
    anova_doc: dict = {"schema": "anova/1", "factor": "skin_tone_level",
                       "n_groups": len(tones)}
    groups = [tones[k] for k in sorted(tones)]
    if len(groups) >= 2 and sum(len(g) for g in groups) > len(groups):
        result = one_way_anova(groups)
        anova_doc.update({
            "f_statistic": result.f_statistic,
            "eta_squared": result.eta_squared,
            "df_between": result.df_between,
            "df_within": result.df_within,
            "n_total": result.n_total,
        })
        write_json(out_dir / "anova_skin_tone.json", anova_doc)

    write_run_summary(out_dir, "eval", seed, cfg, _EVAL_CONFIG_KEYS, counts, failures)
    return counts


# --------------------------------------------------------------------------
# dorsal alignment


def _frame_keypoints2d(frame: FrameAnnotation, template: RiggedHandTemplate,
                       rig: CameraRig, fit_cfg: FitConfig) -> np.ndarray:
    """Project the frame's 21 keypoints to pixels; all must be in front."""
    state = _frame_state(frame, template, fit_cfg)
    mesh = pose_mesh(template, state)
    uv, valid = project(rig, world_to_camera(rig, mesh.keypoints21))
    if not np.all(valid):
        raise ValueError("keypoints behind the camera; cannot project")
    return uv


def _align_worker(item: tuple, template: RiggedHandTemplate, rig: CameraRig,
                  cfg: PipelineConfig, reference_uv: np.ndarray,
                  reference_image: np.ndarray | None) -> tuple:
    frame, frame_seed = item
    try:
        uv = _frame_keypoints2d(frame, template, rig, cfg.fitting())
        src = reference_uv[list(DORSAL_KEYPOINTS)]
        dst = uv[list(DORSAL_KEYPOINTS)]
        model, inliers = estimate_homography(src, dst, cfg.ransac(frame_seed))
        crop_img = None
        aligned_img = None
        if cfg.images_dir is not None:
            image_path = Path(cfg.images_dir) / f"{frame.frame_id}.pgm"
            if not image_path.is_file():
                raise ValueError(f"image missing: {image_path.name}")
            image = read_pgm(image_path).astype(float)
            crop, transform = dorsal_crop(uv, image, margin=cfg.crop_margin,
                                          out_size=int(cfg.crop_size))
            crop_img = np.clip(np.rint(crop), 0, 255).astype(np.uint8)
            if reference_image is not None:
                # reference pixels -> frame pixels (model) -> crop pixels
                ref_to_crop = transform.compose(model)
                aligned = warp_grid(ref_to_crop, reference_image,
                                    (int(cfg.crop_size), int(cfg.crop_size)))
                aligned_img = np.clip(np.rint(aligned), 0, 255).astype(np.uint8)
        else:
            transform = dorsal_crop_transform(uv, (rig.height, rig.width),
                                              margin=cfg.crop_margin,
                                              out_size=int(cfg.crop_size))
        return ("ok", frame.frame_id, model, int(inliers.sum()), len(src),
                transform, crop_img, aligned_img)
    except (ValueError, KeyError) as exc:
        return ("error", frame.frame_id, str(exc))


_ALIGN_CONFIG_KEYS = ["ransac_inlier_threshold", "ransac_max_iterations",
                      "ransac_confidence", "crop_size", "crop_margin"]


def run_alignment(manifest: RunManifest, out_dir, workers: int = 1,
                  seed: int | None = None) -> RunCounts:
    """Homographies from a reference frame's dorsal keypoints to every frame.

    With an images directory configured, also writes the dorsal crops and
    the reference image warped into each frame ("aligned") as PGM files.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    template = load_template(manifest.template_path)
    rig = load_calibration(manifest.calibration_path)
    cfg = manifest.config
    seed = manifest.seed if seed is None else seed
    ingested = ingest(manifest)
    counts = RunCounts(total=len(ingested.frames) + ingested.skipped,
                       skipped=ingested.skipped)
    failures = [{"frame_id": "", "message": msg} for msg in ingested.errors]
    if not ingested.frames:
        raise PipelineError("alignment needs at least one usable frame")

    if cfg.reference_frame is not None:
        candidates = [f for f in ingested.frames if f.frame_id == cfg.reference_frame]
        if not candidates:
            raise PipelineError(
                f"reference frame {cfg.reference_frame!r} not found in the dataset")
        reference = candidates[0]
    else:
        reference = ingested.frames[0]
    try:
        reference_uv = _frame_keypoints2d(reference, template, rig, cfg.fitting())
    except ValueError as exc:
        raise PipelineError(f"reference frame unusable: {exc}") from exc
    reference_image = None
    if cfg.images_dir is not None:
        ref_path = Path(cfg.images_dir) / f"{reference.frame_id}.pgm"
        if not ref_path.is_file():
            raise PipelineError(f"reference image missing: {ref_path}")
        reference_image = read_pgm(ref_path).astype(float)

    items = [(frame, seed + index) for index, frame in enumerate(ingested.frames)]
    worker = functools.partial(_align_worker, template=template, rig=rig, cfg=cfg,
                               reference_uv=reference_uv,
                               reference_image=reference_image)
    results = _map_frames(worker, items, workers)

    header = config_header_lines(cfg, _ALIGN_CONFIG_KEYS)
    header.append(f"reference_frame: {reference.frame_id}")
    hom_rows = []
    crop_rows = []
    if cfg.images_dir is not None:
        (out_dir / "crops").mkdir(exist_ok=True)
        (out_dir / "aligned").mkdir(exist_ok=True)
    for (frame, _), result in zip(items, results):
        if result[0] == "error":
            counts.failed += 1
            failures.append({"frame_id": result[1], "message": result[2]})
            continue
        counts.processed += 1
        _, frame_id, model, n_inliers, n_points, transform, crop_img, aligned_img = result
        hom_rows.append([frame_id, reference.frame_id,
                         *model.matrix.ravel().tolist(), n_inliers, n_points])
        if transform is not None:
            crop_rows.append([frame_id, *transform.matrix.ravel().tolist()])
        if crop_img is not None:
            write_pgm(out_dir / "crops" / f"{frame_id}.pgm", crop_img)
        if aligned_img is not None:
            write_pgm(out_dir / "aligned" / f"{frame_id}.pgm", aligned_img)
    write_csv(out_dir / "homographies.csv",
              ["frame_id", "reference_id",
               "h00", "h01", "h02", "h10", "h11", "h12", "h20", "h21", "h22",
               "n_inliers", "n_points"],
              hom_rows, header_comments=header)
    write_csv(out_dir / "crops.csv",
              ["frame_id", "t00", "t01", "t02", "t10", "t11", "t12",
               "t20", "t21", "t22"],
              crop_rows, header_comments=header)
    write_run_summary(out_dir, "align", seed, cfg, _ALIGN_CONFIG_KEYS,
                      counts, failures)
    return counts


# --------------------------------------------------------------------------
# change features and click scoring (file-level commands)


def run_delta(reference_path, target_path, out_dir) -> None:
    """Change features between two stored grids: delta, cosine, fused."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    reference = load_grid(reference_path, source_tag="reference")
    target = load_grid(target_path, source_tag="target")
    delta = delta_grid(reference, target)
    cos = cosine_map(reference, target)
    fused = fuse_change_tensor(reference, target)
    save_grid(delta, out_dir / "delta.fgrid")
    save_grid(FeatureGrid(data=cos.values[:, :, None], patch_size=cos.patch_size,
                          source_tag="target"),
              out_dir / "cosine.fgrid")
    save_grid(fused, out_dir / "fused.fgrid")
    write_pgm(out_dir / "similarity.pgm", similarity_to_image(cos))
    write_json(out_dir / "delta_summary.json", {
        "schema": "delta-summary/1",
        "grid": {"height": reference.height, "width": reference.width,
                 "channels": reference.channels,
                 "patch_size": reference.patch_size},
        "fused_channels": fused.channels,
        "cosine_min": float(cos.values.min()),
        "cosine_mean": float(cos.values.mean()),
        "cosine_max": float(cos.values.max()),
        "delta_mean_l2": float(np.mean(np.linalg.norm(delta.data, axis=2))),
    })


def run_clicks(force_path, out_dir, threshold: float = CLICK_THRESHOLD,
               predictions_path=None) -> None:
    """Label clicks on a force trace; score per-frame predictions if given."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    trace = load_force_trace(force_path)
    labels = label_clicks(trace, threshold=threshold)
    header = [f"click_threshold: {format_value(float(threshold))}",
              f"trial_max: {format_value(trace.trial_max)}",
              f"threshold_value: {format_value(labels.threshold_value)}"]
    write_csv(out_dir / "click_frames.csv",
              ["frame_index", "timestamp_s", "reading", "click"],
              [[i, float(trace.timestamps[i]), float(trace.samples[i]),
                bool(labels.frame_labels[i])]
               for i in range(trace.samples.size)],
              header_comments=header)
    write_csv(out_dir / "click_segments.csv",
              ["click_id", "start", "end", "t_start", "t_end", "n_frames"],
              [[k, seg.start, seg.end,
                float(trace.timestamps[seg.start]),
                float(trace.timestamps[seg.end - 1]),
                seg.end - seg.start]
               for k, seg in enumerate(labels.segments)],
              header_comments=header)
    summary = {
        "schema": "clicks-summary/1",
        "click_threshold": float(threshold),
        "trial_max": trace.trial_max,
        "threshold_value": labels.threshold_value,
        "n_frames": int(trace.samples.size),
        "n_click_frames": int(labels.frame_labels.sum()),
        "n_clicks": len(labels.segments),
    }
    write_json(out_dir / "clicks_summary.json", summary)
    if predictions_path is None:
        return
    preds = _load_frame_predictions(predictions_path, trace.samples.size)
    report = classification_report(preds, labels.frame_labels)
    votes = per_click_majority(preds, labels)
    scores = {
        "schema": "click-scores/1",
        "frame_level": {
            "accuracy": report.accuracy,
            "precision_weighted": report.precision_weighted,
            "recall_weighted": report.recall_weighted,
            "f1_weighted": report.f1_weighted,
            "confusion": report.confusion.tolist(),
            "support": report.support,
        },
        "per_click": {
            "n_clicks": len(votes),
            "detected": int(sum(votes)),
            "detection_rate": (float(sum(votes)) / len(votes)) if votes else None,
        },
    }
    write_json(out_dir / "scores.json", scores)


def _load_frame_predictions(path, expected_length: int) -> np.ndarray:
    """CSV with a ``predicted`` column of 0/1 per frame, trace-aligned."""
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(row for row in fh if not row.startswith("#"))
        if reader.fieldnames is None or "predicted" not in reader.fieldnames:
            raise PipelineError(f"{path}: expected a 'predicted' column")
        values = [int(record["predicted"]) for record in reader]
    if len(values) != expected_length:
        raise PipelineError(
            f"{path}: {len(values)} predictions for {expected_length} trace frames")
    return np.asarray(values, dtype=bool)
