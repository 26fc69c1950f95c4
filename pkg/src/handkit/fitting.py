"""Hand pose fitting by damped Gauss-Newton (Levenberg-Marquardt style).

Two data terms are supported:

* keypoint fitting — squared distance from the 21 regressed keypoints to
  confidence-weighted 3D targets, with L2 regularizers on the articulated
  pose and the shape coefficients; optimizes global orientation,
  translation, pose and shape.
* marker fitting — squared distance from selected mesh vertices to motion
  capture marker positions, with the pose regularizer only; shape stays
  fixed and is not optimized.

Jacobians are central finite differences, evaluated in batch.  The damping
factor multiplies an identity added to the normal equations and is
increased tenfold on a rejected step and decreased tenfold on an accepted
one.

Both target types are linear functions of the posed vertices, so residuals
are evaluated through a precomputed per-joint decomposition instead of
skinning the full mesh; the equivalence with the mesh path is exact and
covered by tests.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, replace

import numpy as np
from scipy.spatial.transform import Rotation

from .hand_model import (
    NUM_ARTICULATED,
    NUM_JOINTS,
    NUM_KEYPOINTS,
    HandState,
    RiggedHandTemplate,
    forward_kinematics,
)

_MIN_KEYPOINTS = 3
# A rigid pose has 6 degrees of freedom; fewer markers cannot pin it down.
_MIN_MARKERS = 6
_DAMPING_CEIL = 1e12
_DAMPING_FLOOR = 1e-12


class FittingError(ValueError):
    """Raised when a fit cannot be set up or evaluated."""


@dataclass
class KeypointTargets:
    """21 target keypoints with per-point confidence weights in [0, 1].

    Zero-confidence entries are ignored (use them for missing detections).
    """

    points: np.ndarray                  # (21, 3) metres
    confidence: np.ndarray | None = None  # (21,), defaults to all ones

    def __post_init__(self) -> None:
        self.points = np.asarray(self.points, dtype=float)
        if self.points.shape != (NUM_KEYPOINTS, 3):
            raise FittingError(f"keypoint targets must be ({NUM_KEYPOINTS}, 3)")
        if self.confidence is None:
            self.confidence = np.ones(NUM_KEYPOINTS)
        self.confidence = np.asarray(self.confidence, dtype=float).reshape(-1)
        if self.confidence.shape != (NUM_KEYPOINTS,):
            raise FittingError("confidence must have one entry per keypoint")
        if np.any(self.confidence < 0) or np.any(self.confidence > 1):
            raise FittingError("confidence weights must lie in [0, 1]")
        active = self.confidence > 0
        if np.count_nonzero(active) < _MIN_KEYPOINTS:
            raise FittingError(
                f"need at least {_MIN_KEYPOINTS} keypoints with positive confidence"
            )
        if not np.all(np.isfinite(self.points[active])):
            raise FittingError("target keypoints with positive confidence must be finite")


@dataclass
class MarkerTargets:
    """Motion-capture marker positions bound to template vertex indices."""

    points: np.ndarray      # (M, 3) metres
    vertex_ids: np.ndarray  # (M,) indices into the template vertices

    def __post_init__(self) -> None:
        self.points = np.asarray(self.points, dtype=float)
        self.vertex_ids = np.asarray(self.vertex_ids, dtype=int).reshape(-1)
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise FittingError("marker points must be (M, 3)")
        if self.points.shape[0] != self.vertex_ids.shape[0]:
            raise FittingError("one vertex index per marker required")
        if self.points.shape[0] < _MIN_MARKERS:
            raise FittingError(f"need at least {_MIN_MARKERS} markers")
        if not np.all(np.isfinite(self.points)):
            raise FittingError("marker targets must be finite")


@dataclass
class FitConfig:
    """Optimizer settings; the regularizer defaults favour stability."""

    lambda_pose: float = 1e-3
    lambda_shape: float = 1e-3
    max_iterations: int = 100
    damping_init: float = 1e-3
    damping_increase: float = 10.0
    damping_decrease: float = 0.1
    fd_step: float = 1e-6
    step_tolerance: float = 1e-10
    objective_tolerance: float = 1e-15
    #: when set, a converged fit whose objective still exceeds this value
    #: retries the worst-fitting digit chains from a fixed list of
    #: alternative articulations (mirrored, straightened, flexed); useful
    #: with near-noiseless targets where a bad basin is detectable from
    #: the residual.  None disables restarts.
    restart_threshold: float | None = None
    max_restart_rounds: int = 6
    restart_tries: int = 4
    #: keypoint fits optimize shape coefficients by default; disable to fit
    #: pose against a template whose shape is already known
    optimize_shape: bool = True


@dataclass
class FitResult:
    state: HandState
    objective: float
    iterations: int
    converged: bool


def _fk_batch(template: RiggedHandTemplate, shaped_joints: np.ndarray,
              global_orient: np.ndarray, pose: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """forward_kinematics over a batch: (B,16,3), (B,3), (B,15,3) inputs."""
    b = pose.shape[0]
    aa = np.concatenate([global_orient[:, None, :], pose], axis=1).reshape(-1, 3)
    local = Rotation.from_rotvec(aa).as_matrix().reshape(b, NUM_JOINTS, 3, 3)
    rot = np.empty((b, NUM_JOINTS, 3, 3))
    pos = np.empty((b, NUM_JOINTS, 3))
    for j in template.topo_order:
        p = template.parent_of[j]
        if p < 0:
            rot[:, j] = local[:, j]
            pos[:, j] = shaped_joints[:, j]
        else:
            rot[:, j] = rot[:, p] @ local[:, j]
            delta = shaped_joints[:, j] - shaped_joints[:, p]
            pos[:, j] = np.einsum("bij,bj->bi", rot[:, p], delta) + pos[:, p]
    return rot, pos


class PosedPointEvaluator:
    """Evaluates ``selector @ posed_vertices`` for a fixed (M, V) selector.

    Posed vertices are linear in the shaped rest vertices per joint, so the
    selector can be pushed through the skinning sum at construction time;
    each evaluation then only runs forward kinematics plus 16 small
    matrix products.  ``evaluate_batch`` does the same for a whole batch of
    states at once, which is what makes finite-difference Jacobians cheap.
    """

    def __init__(self, template: RiggedHandTemplate, selector: np.ndarray) -> None:
        selector = np.asarray(selector, dtype=float)
        if selector.ndim != 2 or selector.shape[1] != template.num_vertices:
            raise FittingError("selector must be (M, V)")
        self.template = template
        w = template.skinning_weights
        k = template.shape_rank
        m = selector.shape[0]
        self.joint_sums = selector @ w                       # (M, 16)
        self.rest_parts = np.zeros((NUM_JOINTS, m, 3))
        self.basis_parts = np.zeros((k, NUM_JOINTS, m, 3))
        self.active = np.zeros(NUM_JOINTS, dtype=bool)
        for j in range(NUM_JOINTS):
            weighted = selector * w[:, j][None, :]
            if not np.any(weighted):
                continue
            self.active[j] = True
            self.rest_parts[j] = weighted @ template.rest_vertices
            for kk in range(k):
                self.basis_parts[kk, j] = weighted @ template.shape_basis[kk]
        self.basis_joints = np.stack(
            [template.joint_regressor @ template.shape_basis[kk] for kk in range(k)]
        ) if k else np.zeros((0, NUM_JOINTS, 3))

    def evaluate(self, state: HandState) -> np.ndarray:
        shaped_joints = self.template.rest_joints
        parts = self.rest_parts
        shape = state.shape
        if shape.size:
            shaped_joints = shaped_joints + np.tensordot(shape, self.basis_joints[:shape.size], axes=1)
            parts = parts + np.tensordot(shape, self.basis_parts[:shape.size], axes=1)
        rot, pos = forward_kinematics(
            self.template, shaped_joints, state.global_orient, state.pose
        )
        out = np.zeros((self.joint_sums.shape[0], 3))
        for j in range(NUM_JOINTS):
            if not self.active[j]:
                continue
            s = self.joint_sums[:, j][:, None]
            out += (parts[j] - s * shaped_joints[j]) @ rot[j].T + s * pos[j]
        return out + state.translation

    def evaluate_batch(self, global_orient: np.ndarray, translation: np.ndarray,
                       pose: np.ndarray, shape: np.ndarray) -> np.ndarray:
        """Model points for B states at once; returns (B, M, 3)."""
        b = pose.shape[0]
        if shape.size:
            k = shape.shape[1]
            sj = self.template.rest_joints + np.einsum(
                "bk,kjc->bjc", shape, self.basis_joints[:k])
            parts = self.rest_parts + np.einsum(
                "bk,kjmc->bjmc", shape, self.basis_parts[:k])
        else:
            sj = np.broadcast_to(self.template.rest_joints, (b, NUM_JOINTS, 3))
            parts = np.broadcast_to(self.rest_parts, (b,) + self.rest_parts.shape)
        rot, pos = _fk_batch(self.template, sj, global_orient, pose)
        out = np.zeros((b, self.joint_sums.shape[0], 3))
        for j in range(NUM_JOINTS):
            if not self.active[j]:
                continue
            s = self.joint_sums[:, j][None, :, None]
            centered = parts[:, j] - s * sj[:, j][:, None, :]
            out += np.einsum("bmk,bik->bmi", centered, rot[:, j]) + s * pos[:, j][:, None, :]
        return out + translation[:, None, :]


def _pack(state: HandState, with_shape: bool, shape_dim: int) -> np.ndarray:
    parts = [state.global_orient, state.translation, state.pose.ravel()]
    if with_shape:
        shape = np.zeros(shape_dim)
        shape[:state.shape.size] = state.shape[:shape_dim]
        parts.append(shape)
    return np.concatenate(parts)


def _unpack(x: np.ndarray, with_shape: bool, frozen_shape: np.ndarray) -> HandState:
    pose = x[6:6 + 3 * NUM_ARTICULATED].reshape(NUM_ARTICULATED, 3)
    shape = x[6 + 3 * NUM_ARTICULATED:] if with_shape else frozen_shape
    return HandState(pose=pose, shape=np.asarray(shape, dtype=float),
                     global_orient=x[:3], translation=x[3:6])


class _KeypointResidual:
    """Residual vector for keypoint fitting over packed parameters.

    With frozen_shape given, the packed vector carries no shape columns and
    the shape coefficients enter as constants.
    """

    def __init__(self, template: RiggedHandTemplate, targets: KeypointTargets,
                 config: FitConfig, frozen_shape: np.ndarray | None = None) -> None:
        self.evaluator = PosedPointEvaluator(template, template.keypoint_matrix)
        self.mask = targets.confidence > 0
        self.weights = np.sqrt(targets.confidence[self.mask])[:, None]
        self.goal = targets.points[self.mask]
        self.sqrt_lambda_pose = np.sqrt(config.lambda_pose)
        self.sqrt_lambda_shape = np.sqrt(config.lambda_shape)
        self.shape_dim = template.shape_rank
        self.frozen_shape = (None if frozen_shape is None
                             else np.asarray(frozen_shape, dtype=float).reshape(-1))

    def many(self, x_batch: np.ndarray) -> np.ndarray:
        b = x_batch.shape[0]
        pose = x_batch[:, 6:6 + 3 * NUM_ARTICULATED].reshape(b, NUM_ARTICULATED, 3)
        if self.frozen_shape is None:
            shape = x_batch[:, 6 + 3 * NUM_ARTICULATED:]
        else:
            shape = np.broadcast_to(self.frozen_shape, (b, self.frozen_shape.size))
        points = self.evaluator.evaluate_batch(
            x_batch[:, :3], x_batch[:, 3:6], pose, shape)[:, self.mask]
        data = (self.weights[None] * (points - self.goal[None])).reshape(b, -1)
        reg_pose = self.sqrt_lambda_pose * x_batch[:, 6:6 + 3 * NUM_ARTICULATED]
        reg_shape = self.sqrt_lambda_shape * shape
        return np.concatenate([data, reg_pose, reg_shape], axis=1)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.many(np.asarray(x, dtype=float)[None, :])[0]


class _MarkerResidual:
    """Residual vector for marker fitting; shape is frozen."""

    def __init__(self, template: RiggedHandTemplate, targets: MarkerTargets,
                 config: FitConfig, frozen_shape: np.ndarray) -> None:
        if targets.vertex_ids.min() < 0 or targets.vertex_ids.max() >= template.num_vertices:
            raise FittingError("marker vertex index out of range for this template")
        selector = np.zeros((targets.points.shape[0], template.num_vertices))
        selector[np.arange(targets.points.shape[0]), targets.vertex_ids] = 1.0
        self.evaluator = PosedPointEvaluator(template, selector)
        self.goal = targets.points.copy()
        self.sqrt_lambda_pose = np.sqrt(config.lambda_pose)
        self.frozen_shape = np.asarray(frozen_shape, dtype=float).reshape(-1)

    def many(self, x_batch: np.ndarray) -> np.ndarray:
        b = x_batch.shape[0]
        pose = x_batch[:, 6:6 + 3 * NUM_ARTICULATED].reshape(b, NUM_ARTICULATED, 3)
        shape = np.broadcast_to(self.frozen_shape, (b, self.frozen_shape.size))
        points = self.evaluator.evaluate_batch(
            x_batch[:, :3], x_batch[:, 3:6], pose, shape)
        data = (points - self.goal[None]).reshape(b, -1)
        reg_pose = self.sqrt_lambda_pose * x_batch[:, 6:6 + 3 * NUM_ARTICULATED]
        return np.concatenate([data, reg_pose], axis=1)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.many(np.asarray(x, dtype=float)[None, :])[0]


def numerical_jacobian(fn, x: np.ndarray, step: float = 1e-6) -> np.ndarray:
    """Central-difference Jacobian of a vector function at x."""
    r0 = np.asarray(fn(x))
    jac = np.empty((r0.size, x.size))
    for k in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp[k] += step
        xm[k] -= step
        jac[:, k] = (np.asarray(fn(xp)) - np.asarray(fn(xm))) / (2.0 * step)
    return jac


def _fd_jacobian(residual_fn, x: np.ndarray, step: float) -> np.ndarray:
    """Central differences; one batched evaluation when the residual supports it."""
    if not hasattr(residual_fn, "many"):
        return numerical_jacobian(residual_fn, x, step)
    p = x.size
    probes = np.tile(x, (2 * p, 1))
    idx = np.arange(p)
    probes[idx, idx] += step
    probes[p + idx, idx] -= step
    values = residual_fn.many(probes)
    return (values[:p] - values[p:]).T / (2.0 * step)


def keypoint_objective(template, state: HandState, targets: KeypointTargets,
                       config: FitConfig = FitConfig()) -> float:
    """Confidence-weighted keypoint distance plus pose and shape regularizers."""
    residual = _KeypointResidual(template, targets, config)
    r = residual(_pack(state, True, residual.shape_dim))
    return float(r @ r)


def marker_objective(template, state: HandState, targets: MarkerTargets,
                     config: FitConfig = FitConfig()) -> float:
    """Marker distance plus the pose regularizer (shape enters fixed)."""
    residual = _MarkerResidual(template, targets, config, state.shape)
    r = residual(_pack(state, False, 0))
    return float(r @ r)


def _minimize(residual_fn, x0: np.ndarray, config: FitConfig,
              trace: list | None) -> tuple[np.ndarray, float, int, bool]:
    x = x0.copy()
    r = np.asarray(residual_fn(x))
    if not np.all(np.isfinite(r)):
        raise FittingError("objective is not finite at the initialization")
    cost = float(r @ r)
    lam = config.damping_init
    iterations = 0
    converged = False
    jtj = jtr = None
    need_jacobian = True
    eye = np.eye(x.size)
    while iterations < config.max_iterations:
        if need_jacobian:
            jac = _fd_jacobian(residual_fn, x, config.fd_step)
            jtj = jac.T @ jac
            jtr = jac.T @ r
            need_jacobian = False
        iterations += 1
        try:
            step = np.linalg.solve(jtj + lam * eye, -jtr)
        except np.linalg.LinAlgError:
            lam *= config.damping_increase
            if lam > _DAMPING_CEIL:
                break
            continue
        x_try = x + step
        r_try = np.asarray(residual_fn(x_try))
        cost_try = float(r_try @ r_try) if np.all(np.isfinite(r_try)) else np.inf
        if cost_try < cost:
            improvement = cost - cost_try
            x, r, cost = x_try, r_try, cost_try
            lam = max(lam * config.damping_decrease, _DAMPING_FLOOR)
            need_jacobian = True
            if trace is not None:
                trace.append((iterations, cost, lam))
            if (np.linalg.norm(step) < config.step_tolerance
                    or improvement < config.objective_tolerance):
                converged = True
                break
        else:
            if np.linalg.norm(step) < config.step_tolerance:
                # the solver cannot move: a rejected step this small means
                # we are already at a local minimum
                converged = True
                if trace is not None:
                    trace.append((iterations, cost, lam))
                break
            lam *= config.damping_increase
            if trace is not None:
                trace.append((iterations, cost, lam))
            if lam > _DAMPING_CEIL:
                break
    return x, cost, iterations, converged


class _RestrictedResidual:
    """The full residual as a function of a subset of the parameters."""

    def __init__(self, inner, x_full: np.ndarray, free: np.ndarray) -> None:
        self.inner = inner
        self.base = np.asarray(x_full, dtype=float).copy()
        self.free = np.asarray(free, dtype=int)

    def many(self, x_batch: np.ndarray) -> np.ndarray:
        full = np.tile(self.base, (x_batch.shape[0], 1))
        full[:, self.free] = x_batch
        return self.inner.many(full)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.many(np.asarray(x, dtype=float)[None, :])[0]


def _digit_roots(template) -> np.ndarray:
    """Per joint, the child-of-root joint heading its chain (-1 for the root)."""
    out = np.full(NUM_JOINTS, -1, dtype=int)
    for j in template.topo_order:
        p = template.parent_of[j]
        if p < 0:
            out[j] = -1
        elif out[p] == -1:
            out[j] = j
        else:
            out[j] = out[p]
    return out


def _digit_param_groups(template) -> dict[int, np.ndarray]:
    """Packed-parameter indices of each digit chain's pose coefficients."""
    digit_of = _digit_roots(template)
    groups: dict[int, list[int]] = {}
    for j in range(1, NUM_JOINTS):
        d = int(digit_of[j])
        if d <= 0:
            continue
        a = 6 + 3 * (j - 1)
        groups.setdefault(d, []).extend((a, a + 1, a + 2))
    return {d: np.asarray(ix, dtype=int) for d, ix in groups.items()}


def _attribute_joint(template, entry: dict) -> int:
    """The joint a keypoint-map entry rides on (dominant skinning pull)."""
    if "joint" in entry:
        return int(entry["joint"])
    pull = np.zeros(NUM_JOINTS)
    for vid, w in zip(entry["vertices"], entry["weights"]):
        pull += float(w) * template.skinning_weights[int(vid)]
    return int(np.argmax(pull))


def _digit_seeds(sub: np.ndarray) -> list[np.ndarray]:
    """Deterministic starting articulations for one digit chain.

    Combines variants of the current articulation (straightened,
    de-twisted, fully negated, per-joint flexion sign flips) with a fixed
    grid over pure flexion, which covers the classic hinge ambiguities.
    """
    js = sub.reshape(-1, 3)
    n = js.shape[0]
    variants = [np.zeros_like(js), js * (1.0, 0.0, 0.0), -js]
    if n <= 4:
        for bits in range(1, 2 ** n):
            v = js.copy()
            for k in range(n):
                if bits >> k & 1:
                    v[k, 0] = -v[k, 0]
            variants.append(v)
    else:
        variants.append(js * (-1.0, 1.0, 1.0))
    values = (-0.9, -0.45, 0.0, 0.45, 0.9) if 5 ** n <= 200 else (-0.7, 0.0, 0.7)
    for combo in itertools.product(values, repeat=n):
        v = np.zeros_like(js)
        v[:, 0] = combo
        variants.append(v)
    return [v.ravel() for v in variants]


def _enumerate_digit_roots(residual, x: np.ndarray, idx: np.ndarray,
                           config: FitConfig) -> tuple[list[tuple[float, np.ndarray]], int]:
    """Distinct local minima of one digit's sub-problem, best first.

    The digit's parameters are minimized with everything else frozen,
    starting from each seed articulation; seeds are first ranked by a
    single batched residual evaluation and only the most promising are
    refined.  Minima are deduplicated by rounded articulation.
    """
    seeds = _digit_seeds(x[idx])
    probes = np.tile(x, (len(seeds), 1))
    for i, seed in enumerate(seeds):
        probes[i, idx] = seed
    scores = (residual.many(probes) ** 2).sum(axis=1)
    shallow = replace(config, max_iterations=40)
    minima: dict[bytes, tuple[float, np.ndarray]] = {}
    iterations = 0
    for i in np.argsort(scores, kind="stable")[:40]:
        sub = _RestrictedResidual(residual, probes[i], idx)
        x_sub, cost_sub, iters_sub, _ = _minimize(sub, probes[i][idx].copy(),
                                                  shallow, None)
        iterations += iters_sub
        key = np.round(x_sub, 2).tobytes()
        if key not in minima or cost_sub < minima[key][0]:
            minima[key] = (cost_sub, x_sub)
    ranked = sorted(minima.values(), key=lambda item: item[0])
    return ranked, iterations


def _repair(residual, template, x, cost, iterations, config, trace,
            point_digits: np.ndarray) -> tuple[np.ndarray, float, int]:
    """Deterministic digit-wise restarts for detectably bad basins.

    While the objective stays above restart_threshold, the digit chains
    carrying the largest data residual are kicked to each candidate
    articulation.  All kicked states are scored with one batched residual
    evaluation, and the most promising few are polished with a full
    re-minimization (every parameter free, so the rest of the hand can
    adapt to the kicked digit).  Everything is deterministic, so repeated
    runs produce identical results.
    """
    digit_params = _digit_param_groups(template)
    threshold = config.restart_threshold
    for _ in range(config.max_restart_rounds):
        if cost <= threshold or not digit_params:
            break
        data = np.asarray(residual(x))[:3 * point_digits.size].reshape(-1, 3)
        digit_cost = {d: float((data[point_digits == d] ** 2).sum())
                      for d in digit_params}
        ranked = sorted(digit_params, key=lambda d: (-digit_cost[d], d))
        best_x, best_cost = x, cost
        for d in ranked[:2]:
            idx = digit_params[d]
            roots, iters_enum = _enumerate_digit_roots(residual, x, idx, config)
            iterations += iters_enum
            for _, digit_pose in roots[:config.restart_tries]:
                x_kick = x.copy()
                x_kick[idx] = digit_pose
                x_kick, cost_kick, iters_kick, _ = _minimize(
                    residual, x_kick, config, None)
                iterations += iters_kick
                if cost_kick < best_cost:
                    best_x, best_cost = x_kick, cost_kick
                if best_cost <= threshold:
                    break
            if best_cost <= threshold:
                break
        if best_cost >= cost:
            break
        x, cost = best_x, best_cost
        if trace is not None:
            trace.append((iterations, cost, 0.0))
    return x, cost, iterations


def fit(template, targets, init: HandState | None = None,
        config: FitConfig = FitConfig(), trace: list | None = None) -> FitResult:
    """Fit the hand state to keypoint or marker targets.

    init defaults to the neutral state.  trace, when given, collects
    (iteration, objective, damping) rows for debugging.  Keypoint targets
    optimize shape as well; marker targets keep the initialization's shape.
    With restart_threshold set, a converged fit that still exceeds it is
    repaired digit by digit from deterministic alternative articulations.
    """
    if init is None:
        init = HandState.neutral(template.shape_rank)
    if isinstance(targets, KeypointTargets):
        optimize_shape = config.optimize_shape and template.shape_rank > 0
        frozen = None if optimize_shape else init.shape.copy()
        residual = _KeypointResidual(template, targets, config, frozen)
        x0 = _pack(init, optimize_shape, residual.shape_dim)
        x, cost, iters, converged = _minimize(residual, x0, config, trace)
        if config.restart_threshold is not None and cost > config.restart_threshold:
            digit_of = _digit_roots(template)
            point_digits = np.asarray(
                [digit_of[_attribute_joint(template, template.keypoint_map[row])]
                 for row in np.flatnonzero(residual.mask)])
            x, cost, iters = _repair(residual, template, x, cost, iters,
                                     config, trace, point_digits)
        state = _unpack(x, optimize_shape,
                        np.zeros(0) if frozen is None else frozen)
    elif isinstance(targets, MarkerTargets):
        frozen = init.shape.copy()
        residual = _MarkerResidual(template, targets, config, frozen)
        x0 = _pack(init, False, 0)
        x, cost, iters, converged = _minimize(residual, x0, config, trace)
        if config.restart_threshold is not None and cost > config.restart_threshold:
            digit_of = _digit_roots(template)
            point_digits = np.asarray(
                [digit_of[int(np.argmax(template.skinning_weights[int(v)]))]
                 for v in targets.vertex_ids])
            x, cost, iters = _repair(residual, template, x, cost, iters,
                                     config, trace, point_digits)
        state = _unpack(x, False, frozen)
    else:
        raise FittingError(f"unsupported target type {type(targets).__name__}")
    converged = converged or (config.restart_threshold is not None
                              and cost <= config.restart_threshold)
    return FitResult(state=state, objective=cost, iterations=iters, converged=converged)
