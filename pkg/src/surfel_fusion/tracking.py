"""
Sparse-to-dense camera tracking.

A frame is first registered against the landmark map by robust reprojection
(Huber-weighted Levenberg-Marquardt over 2D-3D matches), then refined against a
render of the surfel map by coarse-to-fine point-to-plane ICP plus a photometric
term.  Whichever stage fails, the tracker still returns a finite pose: dense
rejection keeps the sparse pose, sparse failure keeps the constant-velocity
prediction.
"""

__all__ = [
    "CorrespondenceSet",
    "Landmark",
    "LandmarkMap",
    "ModelLevel",
    "ModelPyramid",
    "SparseResult",
    "TrackResult",
    "Tracker",
    "convergence_check",
    "dense_align",
    "gauss_newton_step",
    "keyframe_decision",
    "match_2d3d",
    "model_pyramid",
    "sparse_pose_init",
    "update_landmarks",
]

import dataclasses
import logging
import math
import time
import typing

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy import ndimage
from scipy.spatial import cKDTree

from .config import TrackingConfig
from .errors import DenseTrackingFailure, SparseTrackingFailure
from .features import DESCRIPTOR_BYTES, FeatureFrontend, Keypoints, frontends, hamming
from .frame_pipeline import (
    ProcessedFrame,
    PyramidLevel,
    compute_normal_map,
    compute_vertex_map,
    downsample_depth,
    downsample_intensity,
)
from .geometry import (
    FloatArray,
    Intrinsics,
    Pose,
    Twist,
    backproject,
    exp_se3,
    hat,
    log_se3,
)
from .rasterizer import RenderOptions, RenderOutput, render
from .surfel_map import SurfelArrays

logger = logging.getLogger(__name__)

BoolArray = NDArray[np.bool_]
IntArray = NDArray[np.int64]

_LUMA = np.array([0.299, 0.587, 0.114])


def gauss_newton_step(
    jacobian: FloatArray, residual: FloatArray, damping: float = 0.0
) -> FloatArray:
    """
    Solves the damped normal equations ``δ = −(JᵀJ + λI)⁻¹ Jᵀ r``.

    Args:
        jacobian:
            ``(M, P)`` derivative of the residual vector.
        residual:
            ``(M,)`` residual vector.
        damping:
            Levenberg damping ``λ``; 0 gives the plain Gauss-Newton step.
    """
    j = np.asarray(jacobian, dtype=np.float64)
    r = np.asarray(residual, dtype=np.float64)
    return _solve(j.T @ j, j.T @ r, damping)


def _solve(hessian: FloatArray, gradient: FloatArray, damping: float) -> FloatArray:
    system = hessian + damping * np.eye(len(gradient))
    try:
        return typing.cast(FloatArray, -np.linalg.solve(system, gradient))
    except np.linalg.LinAlgError:
        solution = np.linalg.lstsq(system, gradient, rcond=None)[0]
        return typing.cast(FloatArray, -solution)


def _marquardt_step(
    hessian: FloatArray, gradient: FloatArray, lam: float
) -> FloatArray:
    # λ is relative to the curvature of each parameter
    scale = np.maximum(np.diag(hessian), 1e-12)
    return _solve(hessian + lam * np.diag(scale), gradient, 0.0)


# --------------------------------------------------------------------------------
# Landmarks and correspondences


@dataclasses.dataclass(frozen=True, eq=False)
class Landmark:
    position: FloatArray
    descriptor: NDArray[np.uint8]
    observations: int


class LandmarkMap:
    """
    World-frame 3D points with binary descriptors, stored as parallel arrays.

    When the map grows beyond ``cap`` the landmarks observed least recently are
    evicted first.
    """

    def __init__(self, cap: int = 5000) -> None:
        self.cap = cap
        self.positions = np.zeros((0, 3))
        self.descriptors = np.zeros((0, DESCRIPTOR_BYTES), dtype=np.uint8)
        self.observations = np.zeros(0, dtype=np.int64)
        self.last_seen = np.zeros(0, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.positions)

    def landmark(self, index: int) -> Landmark:
        return Landmark(
            self.positions[index].copy(),
            self.descriptors[index].copy(),
            int(self.observations[index]),
        )

    def add(
        self, positions: ArrayLike, descriptors: ArrayLike, frame_id: int
    ) -> int:
        """
        Inserts new landmarks, then enforces the cap.

        Returns:
            Number of inserted landmarks that survived eviction.
        """
        p = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        d = np.asarray(descriptors, dtype=np.uint8).reshape(-1, DESCRIPTOR_BYTES)
        finite = np.all(np.isfinite(p), axis=1)
        p, d = p[finite], d[finite]

        before = len(self)
        self.positions = np.concatenate([self.positions, p])
        self.descriptors = np.concatenate([self.descriptors, d])
        self.observations = np.concatenate(
            [self.observations, np.ones(len(p), dtype=np.int64)]
        )
        self.last_seen = np.concatenate(
            [self.last_seen, np.full(len(p), frame_id, dtype=np.int64)]
        )
        kept = self._evict()
        return int(np.count_nonzero(kept >= before))

    def observe(self, indices: ArrayLike, frame_id: int) -> None:
        idx = np.unique(np.asarray(indices, dtype=np.int64))
        self.observations[idx] += 1
        self.last_seen[idx] = frame_id

    def _evict(self) -> IntArray:
        n = len(self)
        if n <= self.cap:
            return np.arange(n)

        # Oldest last observation first; ties broken by insertion order.
        order = np.lexsort((np.arange(n), self.last_seen))
        kept = np.sort(order[n - self.cap :])
        self.positions = self.positions[kept]
        self.descriptors = self.descriptors[kept]
        self.observations = self.observations[kept]
        self.last_seen = self.last_seen[kept]
        return kept


@dataclasses.dataclass(frozen=True, eq=False)
class CorrespondenceSet:
    """
    2D-3D matches ``(pixel, world point)`` with their Hamming scores.
    """

    pixels: FloatArray
    points: FloatArray
    scores: IntArray
    keypoint_index: IntArray
    landmark_index: IntArray

    @classmethod
    def empty(cls) -> "CorrespondenceSet":
        return cls(
            np.zeros((0, 2)),
            np.zeros((0, 3)),
            np.zeros(0, dtype=np.int64),
            np.zeros(0, dtype=np.int64),
            np.zeros(0, dtype=np.int64),
        )

    def __len__(self) -> int:
        return len(self.pixels)

    def take(self, index: ArrayLike) -> "CorrespondenceSet":
        idx = np.asarray(index)
        return CorrespondenceSet(
            self.pixels[idx],
            self.points[idx],
            self.scores[idx],
            self.keypoint_index[idx],
            self.landmark_index[idx],
        )


def match_2d3d(
    keypoints: Keypoints,
    landmarks: LandmarkMap,
    prior: Pose,
    k: Intrinsics,
    radius: float = 15.0,
    ratio: float = 0.8,
    max_hamming: int = 64,
) -> CorrespondenceSet:
    """
    Projects every landmark with ``prior`` and matches it to the keypoint with the
    smallest Hamming distance inside ``radius`` pixels.

    A match is kept when its distance is at most ``max_hamming`` and strictly below
    ``ratio`` times the runner-up; each keypoint keeps only its best landmark.
    """
    if not len(keypoints) or not len(landmarks):
        return CorrespondenceSet.empty()

    cam = prior.inverse().transform_points(landmarks.positions)
    front = np.nonzero(cam[:, 2] > 0)[0]
    z = cam[front, 2]
    uv = np.stack(
        [k.fx * cam[front, 0] / z + k.cx, k.fy * cam[front, 1] / z + k.cy], axis=1
    )
    inside = (
        (uv[:, 0] >= -0.5)
        & (uv[:, 0] < k.width - 0.5)
        & (uv[:, 1] >= -0.5)
        & (uv[:, 1] < k.height - 0.5)
    )
    front, uv = front[inside], uv[inside]
    if not len(front):
        return CorrespondenceSet.empty()

    tree = cKDTree(keypoints.points)
    best: dict[int, tuple[int, int]] = {}
    for landmark, candidates in zip(front, tree.query_ball_point(uv, r=radius)):
        if not candidates:
            continue
        cands = np.array(sorted(candidates), dtype=np.int64)
        dist = hamming(landmarks.descriptors[landmark], keypoints.descriptors[cands])
        order = np.argsort(dist, kind="stable")
        top = int(dist[order[0]])
        if top > max_hamming:
            continue
        if len(order) > 1 and not top < ratio * dist[order[1]]:
            continue

        keypoint = int(cands[order[0]])
        previous = best.get(keypoint)
        if previous is None or top < previous[0]:
            best[keypoint] = (top, int(landmark))

    if not best:
        return CorrespondenceSet.empty()

    kp_idx = np.array(sorted(best), dtype=np.int64)
    lm_idx = np.array([best[i][1] for i in kp_idx], dtype=np.int64)
    return CorrespondenceSet(
        pixels=keypoints.points[kp_idx].copy(),
        points=landmarks.positions[lm_idx].copy(),
        scores=np.array([best[i][0] for i in kp_idx], dtype=np.int64),
        keypoint_index=kp_idx,
        landmark_index=lm_idx,
    )


# --------------------------------------------------------------------------------
# Sparse stage


@dataclasses.dataclass(frozen=True, eq=False)
class SparseResult:
    pose: Pose
    inliers: BoolArray
    rms: float
    iterations: int

    @property
    def inlier_count(self) -> int:
        return int(np.count_nonzero(self.inliers))


def _reprojection(
    pose: Pose, points: FloatArray, pixels: FloatArray, k: Intrinsics
) -> tuple[FloatArray, FloatArray, BoolArray]:
    """
    Residuals ``u − π(T⁻¹X)`` with their derivative under a left perturbation of
    ``T``; points behind the camera are flagged.
    """
    r_wc = pose.rotation
    cam = (points - pose.translation) @ r_wc
    z = cam[:, 2]
    front = z > 1e-9
    zs = np.where(front, z, 1.0)

    x, y = cam[:, 0] / zs, cam[:, 1] / zs
    predicted = np.stack([k.fx * x + k.cx, k.fy * y + k.cy], axis=1)
    residual = pixels - predicted

    d_proj = np.zeros((len(points), 2, 3))
    d_proj[:, 0, 0] = k.fx / zs
    d_proj[:, 0, 2] = -k.fx * x / zs
    d_proj[:, 1, 1] = k.fy / zs
    d_proj[:, 1, 2] = -k.fy * y / zs

    d_cam = np.empty((len(points), 3, 6))
    d_cam[:, :, :3] = -r_wc.T
    d_cam[:, :, 3:] = r_wc.T @ hat(points)
    jacobian = -(d_proj @ d_cam)
    return residual, jacobian, front


def _huber_cost(errors: FloatArray, front: BoolArray, delta: float) -> float:
    # Points that fall behind the camera pay a large constant penalty.
    e = np.where(front, errors, 1e3)
    return float(np.sum(np.where(e <= delta, e * e, 2.0 * delta * e - delta * delta)))


def _levenberg_marquardt(
    pose: Pose,
    points: FloatArray,
    pixels: FloatArray,
    k: Intrinsics,
    delta: float,
    iterations: int,
    damping: float,
) -> tuple[Pose, int]:
    residual, jacobian, front = _reprojection(pose, points, pixels, k)
    errors = np.linalg.norm(residual, axis=1)
    cost = _huber_cost(errors, front, delta)
    lam = damping

    done = 0
    for done in range(1, iterations + 1):
        weights = np.where(errors <= delta, 1.0, delta / np.maximum(errors, 1e-12))
        weights = np.where(front, weights, 0.0)
        hessian = np.einsum("m,mij,mik->jk", weights, jacobian, jacobian)
        gradient = np.einsum("m,mij,mi->j", weights, jacobian, residual)
        step = _marquardt_step(hessian, gradient, lam)
        if not np.any(step):
            break

        candidate = exp_se3(step) @ pose
        c_res, c_jac, c_front = _reprojection(candidate, points, pixels, k)
        c_err = np.linalg.norm(c_res, axis=1)
        c_cost = _huber_cost(c_err, c_front, delta)
        if c_cost < cost:
            pose, residual, jacobian, front, errors = (
                candidate,
                c_res,
                c_jac,
                c_front,
                c_err,
            )
            cost = c_cost
            lam = max(lam / 10.0, 1e-12)
        else:
            lam *= 10.0

        logger.debug("Sparse LM iteration %d: cost %.6g, lambda %.1e", done, cost, lam)
        if np.linalg.norm(step) < 1e-12:
            break

    return pose, done


def sparse_pose_init(
    correspondences: CorrespondenceSet,
    prior: Pose,
    k: Intrinsics,
    config: typing.Optional[TrackingConfig] = None,
) -> SparseResult:
    """
    Robust reprojection-error pose estimate from 2D-3D matches.

    A Huber-weighted solve from ``prior`` classifies inliers (reprojection error
    below ``config.inlier_threshold``); the pose is then refined on inliers alone.

    Raises:
        SparseTrackingFailure: with fewer than ``min_correspondences`` matches or
            fewer than ``min_inliers`` inliers.
    """
    config = config or TrackingConfig()
    n = len(correspondences)
    if n < config.min_correspondences:
        raise SparseTrackingFailure(
            f"{n} correspondences, need at least {config.min_correspondences}"
        )

    points, pixels = correspondences.points, correspondences.pixels
    pose, iterations = _levenberg_marquardt(
        prior, points, pixels, k, config.huber, config.sparse_iterations, config.damping
    )

    def _inliers(candidate: Pose) -> tuple[BoolArray, FloatArray]:
        residual, _, front = _reprojection(candidate, points, pixels, k)
        errors = np.linalg.norm(residual, axis=1)
        return front & (errors < config.inlier_threshold), errors

    inliers, _ = _inliers(pose)
    count = int(np.count_nonzero(inliers))
    if count < config.min_inliers or count < 4:
        raise SparseTrackingFailure(
            f"{count} reprojection inliers, need at least {config.min_inliers}"
        )

    if count < n:
        pose, extra = _levenberg_marquardt(
            pose,
            points[inliers],
            pixels[inliers],
            k,
            config.inlier_threshold,
            config.sparse_iterations,
            config.damping,
        )
        iterations += extra
        inliers, _ = _inliers(pose)

    _, errors = _inliers(pose)
    rms = float(np.sqrt(np.mean(errors[inliers] ** 2))) if np.any(inliers) else math.nan
    logger.debug("Sparse stage: %d/%d inliers, rms %.3f px", inliers.sum(), n, rms)
    return SparseResult(pose, inliers, rms, iterations)


# --------------------------------------------------------------------------------
# Dense stage


@dataclasses.dataclass(frozen=True, eq=False)
class ModelLevel:
    """
    Model maps at one pyramid level: world-frame vertices and normals plus the
    rendered intensity and its image gradients.
    """

    intrinsics: Intrinsics
    vertices: FloatArray
    normals: FloatArray
    intensity: FloatArray
    valid: BoolArray
    gradient_x: FloatArray
    gradient_y: FloatArray

    @classmethod
    def build(
        cls,
        k: Intrinsics,
        pose: Pose,
        depth: FloatArray,
        intensity: FloatArray,
        normals: typing.Optional[FloatArray] = None,
    ) -> "ModelLevel":
        vertex_map = compute_vertex_map(depth, k)
        normal_map = compute_normal_map(vertex_map) if normals is None else normals
        valid = (depth > 0) & np.any(normal_map != 0, axis=-1)
        gy, gx = np.gradient(intensity)
        return cls(
            intrinsics=k,
            vertices=np.where(valid[..., None], pose.transform_points(vertex_map), 0.0),
            normals=np.where(valid[..., None], pose.rotate(normal_map), 0.0),
            intensity=intensity,
            valid=valid,
            gradient_x=gx,
            gradient_y=gy,
        )


@dataclasses.dataclass(frozen=True, eq=False)
class ModelPyramid:
    """
    Model maps for every level, all seen from ``pose``.
    """

    pose: Pose
    levels: tuple[ModelLevel, ...]

    @classmethod
    def from_frame(cls, frame: ProcessedFrame, pose: Pose) -> "ModelPyramid":
        """
        Uses a processed frame's own pyramid as the model, as seen from ``pose``.
        """

        def _level(level: PyramidLevel) -> ModelLevel:
            return ModelLevel.build(
                level.intrinsics,
                pose,
                np.where(level.valid_mask, level.depth, 0.0),
                level.intensity,
                level.normal_map,
            )

        return cls(pose, tuple(_level(level) for level in frame.pyramid))


def model_pyramid(model: RenderOutput, levels: int) -> ModelPyramid:
    """
    Model maps from one render, downsampled the same way frames are.
    """
    k = model.intrinsics
    depth = model.depth
    intensity = model.color @ _LUMA
    out = [ModelLevel.build(k, model.pose, depth, intensity, model.normal)]
    for level in range(1, levels):
        depth = downsample_depth(depth)
        intensity = downsample_intensity(intensity)
        out.append(ModelLevel.build(k.scaled(level), model.pose, depth, intensity))
    return ModelPyramid(model.pose, tuple(out))


@dataclasses.dataclass(frozen=True)
class _DenseSystem:
    hessian: FloatArray
    gradient: FloatArray
    error: float
    count: int
    icp: float
    photo: float


def _dense_system(
    frame: PyramidLevel,
    model: ModelLevel,
    model_pose: Pose,
    pose: Pose,
    config: TrackingConfig,
) -> _DenseSystem:
    """
    Projective data association plus the ICP and photometric normal equations at
    ``pose``, with residuals ``n_G·(T v − v_G)`` and ``I_G(u') − I(u)``.
    """
    valid = frame.valid_mask
    q = pose.transform_points(frame.vertex_map[valid])
    nq = pose.rotate(frame.normal_map[valid])
    intensity = frame.intensity[valid]

    k = model.intrinsics
    r_mw = model_pose.rotation
    xm = (q - model_pose.translation) @ r_mw
    z = xm[:, 2]
    front = z > 1e-9
    zs = np.where(front, z, 1.0)
    u = k.fx * xm[:, 0] / zs + k.cx
    v = k.fy * xm[:, 1] / zs + k.cy
    ui = np.rint(u).astype(np.int64)
    vi = np.rint(v).astype(np.int64)
    inside = front & (ui >= 0) & (ui < k.width) & (vi >= 0) & (vi < k.height)
    ui = np.clip(ui, 0, k.width - 1)
    vi = np.clip(vi, 0, k.height - 1)

    vg = model.vertices[vi, ui]
    ng = model.normals[vi, ui]
    cos_limit = math.cos(math.radians(config.max_angle_deg))
    assoc = (
        inside
        & model.valid[vi, ui]
        & (np.linalg.norm(q - vg, axis=1) < config.max_distance)
        & (np.sum(nq * ng, axis=1) > cos_limit)
    )
    count = int(np.count_nonzero(assoc))
    if count == 0:
        return _DenseSystem(
            np.zeros((6, 6)), np.zeros(6), math.inf, 0, math.nan, math.nan
        )

    q, vg, ng = q[assoc], vg[assoc], ng[assoc]
    r_icp = np.sum(ng * (q - vg), axis=1)
    j_icp = np.concatenate([ng, np.cross(q, ng)], axis=1)
    hessian = j_icp.T @ j_icp
    gradient = j_icp.T @ r_icp
    cost = float(r_icp @ r_icp)
    photo = math.nan

    if config.lambda_photo > 0:
        u, v, zs, xm = u[assoc], v[assoc], zs[assoc], xm[assoc]
        coords = np.stack([v, u])
        sampled = ndimage.map_coordinates(
            model.intensity, coords, order=1, mode="nearest"
        )
        gx = ndimage.map_coordinates(model.gradient_x, coords, order=1, mode="nearest")
        gy = ndimage.map_coordinates(model.gradient_y, coords, order=1, mode="nearest")
        r_photo = sampled - intensity[assoc]

        # d r / d Xm, then into the world-frame twist of the tracked pose.
        a = np.stack(
            [
                gx * k.fx / zs,
                gy * k.fy / zs,
                -(gx * k.fx * xm[:, 0] + gy * k.fy * xm[:, 1]) / (zs * zs),
            ],
            axis=1,
        )
        b = a @ r_mw.T
        j_photo = np.concatenate([b, np.cross(q, b)], axis=1)
        w = config.lambda_photo
        hessian = hessian + w * (j_photo.T @ j_photo)
        gradient = gradient + w * (j_photo.T @ r_photo)
        cost += w * float(r_photo @ r_photo)
        photo = float(np.sqrt(np.mean(r_photo**2)))

    return _DenseSystem(
        hessian,
        gradient,
        cost / count,
        count,
        float(np.sqrt(np.mean(r_icp**2))),
        photo,
    )


@dataclasses.dataclass(frozen=True, eq=False)
class TrackResult:
    """
    Outcome of tracking one frame.

    ``twist`` is the dense-stage correction, left-multiplied onto the pose the
    dense stage started from.  ``residuals`` holds the RMS residual of each stage
    that ran (``sparse`` in pixels, ``icp`` in meters, ``photo`` in intensity).
    """

    pose: Pose
    twist: Twist
    inliers: int = 0
    residuals: typing.Mapping[str, float] = dataclasses.field(default_factory=dict)
    accepted: bool = False
    stage: str = "dense"
    associations: int = 0
    keyframe: bool = False
    residual_trajectory: tuple[float, ...] = ()
    update_norms: tuple[float, ...] = ()
    timings: typing.Mapping[str, float] = dataclasses.field(default_factory=dict)


def convergence_check(
    residuals: typing.Sequence[float],
    update_norms: typing.Sequence[float],
    associations: int,
    tau_step: float = 1e-5,
    floor: int = 100,
) -> bool:
    """
    Accepts a dense solve when the finest-level residual did not grow, the last
    step was below ``tau_step`` and enough pixels were associated.
    """
    if not residuals or not update_norms:
        return False
    return (
        residuals[-1] <= residuals[0]
        and update_norms[-1] < tau_step
        and associations >= floor
    )


def dense_align(
    frame: ProcessedFrame,
    model: ModelPyramid,
    init: Pose,
    config: typing.Optional[TrackingConfig] = None,
) -> TrackResult:
    """
    Coarse-to-fine Levenberg-Marquardt refinement of the camera pose on
    ``E_icp + λ_photo · E_photo``.

    Coarse levels run ``pyramid_iterations`` steps; the finest level continues up
    to ``finest_iterations`` until the step norm drops below ``tau_step``.

    Raises:
        DenseTrackingFailure: when fewer than ``association_floor`` pixels are
            associated at the finest level.
    """
    config = config or TrackingConfig()
    levels = min(len(frame.pyramid), len(model.levels))
    if levels == 0:
        raise DenseTrackingFailure("Frame or model has no pyramid levels")

    pose = init
    lam = config.damping
    residuals: list[float] = []
    norms: list[float] = []
    system: typing.Optional[_DenseSystem] = None

    for level in reversed(range(levels)):
        frame_level = frame.level(level)
        model_level = model.levels[level]
        system = _dense_system(frame_level, model_level, model.pose, pose, config)

        if level == 0:
            if system.count < config.association_floor:
                raise DenseTrackingFailure(
                    f"{system.count} associations at the finest level, "
                    f"need {config.association_floor}"
                )
            residuals.append(system.error)
        elif system.count < 6:
            logger.debug("Skipping level %d: %d associations", level, system.count)
            continue

        budget = config.finest_iterations if level == 0 else config.pyramid_iterations
        for iteration in range(budget):
            step = _marquardt_step(system.hessian, system.gradient, lam)
            norm = float(np.linalg.norm(step))
            candidate_pose = exp_se3(step) @ pose if norm > 0 else pose
            candidate = _dense_system(
                frame_level, model_level, model.pose, candidate_pose, config
            )
            applied = candidate.count >= 6 and candidate.error <= system.error
            if applied:
                pose, system = candidate_pose, candidate
                lam = max(lam / 10.0, 1e-12)
            else:
                lam *= 10.0

            logger.debug(
                "Dense level %d iteration %d: error %.6g, |step| %.3g%s, %d pairs",
                level,
                iteration,
                system.error,
                norm,
                "" if applied else " (rejected)",
                system.count,
            )
            # A rejected step only counts once damping has shrunk it below tau_step.
            converged = norm < config.tau_step
            if level == 0 and (applied or converged):
                residuals.append(system.error)
                norms.append(norm)
            if converged:
                break

    assert system is not None
    accepted = convergence_check(
        residuals, norms, system.count, config.tau_step, config.association_floor
    )
    return TrackResult(
        pose=pose,
        twist=log_se3(pose @ init.inverse()),
        residuals={"icp": system.icp, "photo": system.photo},
        accepted=accepted,
        stage="dense",
        associations=system.count,
        residual_trajectory=tuple(residuals),
        update_norms=tuple(norms),
    )


# --------------------------------------------------------------------------------
# Keyframes and the tracker


def keyframe_decision(
    pose: Pose,
    last_keyframe_pose: typing.Optional[Pose],
    t_k: float = 0.3,
    theta_k_deg: float = 20.0,
) -> bool:
    """
    True when the camera moved more than ``t_k`` meters or turned more than
    ``theta_k_deg`` degrees since the last keyframe; the first frame always is one.
    """
    if last_keyframe_pose is None:
        return True
    relative = last_keyframe_pose.inverse() @ pose
    return bool(
        np.linalg.norm(relative.translation) > t_k
        or math.degrees(relative.angle) > theta_k_deg
    )


def update_landmarks(
    keyframe: ProcessedFrame,
    keypoints: Keypoints,
    pose: Pose,
    landmarks: LandmarkMap,
    correspondences: typing.Optional[CorrespondenceSet] = None,
    config: typing.Optional[TrackingConfig] = None,
) -> tuple[int, int]:
    """
    Counts re-observed landmarks and inserts unmatched keypoints that have a valid
    depth.  Without ``correspondences`` the keypoints are matched at ``pose``.

    Returns:
        ``(added, observed)``.
    """
    config = config or TrackingConfig()
    k = keyframe.intrinsics
    if correspondences is None:
        correspondences = match_2d3d(
            keypoints,
            landmarks,
            pose,
            k,
            config.match_radius,
            config.match_ratio,
            config.max_hamming,
        )

    landmarks.observe(correspondences.landmark_index, keyframe.frame_id)
    unmatched = np.ones(len(keypoints), dtype=bool)
    unmatched[correspondences.keypoint_index] = False

    px = np.clip(np.rint(keypoints.points[:, 0]).astype(np.int64), 0, k.width - 1)
    py = np.clip(np.rint(keypoints.points[:, 1]).astype(np.int64), 0, k.height - 1)
    depth = keyframe.depth[py, px]
    fresh = unmatched & (depth > 0)
    if np.any(fresh):
        world = pose.transform_points(
            backproject(k, keypoints.points[fresh], depth[fresh])
        )
        added = landmarks.add(world, keypoints.descriptors[fresh], keyframe.frame_id)
    else:
        added = 0

    return added, len(correspondences)


class Tracker:
    """
    Frame-to-model tracker owning the landmark map and the pose history.
    """

    def __init__(
        self,
        k: Intrinsics,
        config: typing.Optional[TrackingConfig] = None,
        render_options: typing.Optional[RenderOptions] = None,
        pyramid_levels: int = 3,
        seed: int = 0,
    ) -> None:
        self.intrinsics = k
        self.config = config or TrackingConfig()
        self.render_options = render_options or RenderOptions()
        self.pyramid_levels = pyramid_levels
        self.frontend = typing.cast(
            FeatureFrontend,
            frontends.get(self.config.frontend, self.config.max_keypoints, seed),
        )
        self.landmarks = LandmarkMap(self.config.landmark_cap)
        self.poses: list[Pose] = []
        self.last_keyframe_pose: typing.Optional[Pose] = None

    def predict(self) -> Pose:
        """
        Constant-velocity prediction from the last two poses.
        """
        if not self.poses:
            return Pose.identity()
        if len(self.poses) == 1:
            return self.poses[-1]
        previous, last = self.poses[-2], self.poses[-1]
        return last @ (previous.inverse() @ last)

    def detect(self, frame: ProcessedFrame) -> Keypoints:
        return self.frontend.detect_and_describe(frame.intensity)

    def track(
        self,
        frame: ProcessedFrame,
        model: typing.Optional[SurfelArrays] = None,
        keypoints: typing.Optional[Keypoints] = None,
    ) -> TrackResult:
        """
        Tracks ``frame`` against the landmark map and a render of ``model``.

        Args:
            frame:
                The frame to register.
            model:
                Snapshot of the surfel map; without one (or when empty) the dense
                stage is skipped.
            keypoints:
                Precomputed keypoints for ``frame``.
        """
        config = self.config
        started = time.perf_counter()
        if keypoints is None:
            keypoints = self.detect(frame)

        timings = {"sparse": 0.0, "dense": 0.0}
        residuals: dict[str, float] = {}
        correspondences: typing.Optional[CorrespondenceSet] = None

        if not self.poses:
            result = TrackResult(
                Pose.identity(), Twist.zero(), accepted=True, stage="initial"
            )
        else:
            prior = self.predict()
            init, stage, inliers = prior, "prediction", 0

            if config.use_sparse:
                correspondences = match_2d3d(
                    keypoints,
                    self.landmarks,
                    prior,
                    self.intrinsics,
                    config.match_radius,
                    config.match_ratio,
                    config.max_hamming,
                )
                try:
                    sparse = sparse_pose_init(
                        correspondences, prior, self.intrinsics, config
                    )
                except SparseTrackingFailure as exc:
                    logger.warning(
                        "Frame %d: sparse stage failed (%s); using the "
                        "constant-velocity prediction",
                        frame.frame_id,
                        exc,
                    )
                    correspondences = None
                else:
                    init, stage = sparse.pose, "sparse"
                    inliers = sparse.inlier_count
                    residuals["sparse"] = sparse.rms
                    correspondences = correspondences.take(
                        np.nonzero(sparse.inliers)[0]
                    )
            timings["sparse"] = time.perf_counter() - started

            result = TrackResult(
                init, Twist.zero(), inliers, residuals, False, stage
            )
            if model is not None and len(model):
                dense_started = time.perf_counter()
                result = self._dense(
                    frame, model, prior, init, stage, inliers, residuals
                )
                timings["dense"] = time.perf_counter() - dense_started

        is_keyframe = keyframe_decision(
            result.pose, self.last_keyframe_pose, config.t_k, config.theta_k_deg
        )
        if is_keyframe:
            update_landmarks(
                frame, keypoints, result.pose, self.landmarks, correspondences, config
            )
            self.last_keyframe_pose = result.pose

        self.poses.append(result.pose)
        timings["total"] = time.perf_counter() - started
        return dataclasses.replace(result, keyframe=is_keyframe, timings=timings)

    def _dense(
        self,
        frame: ProcessedFrame,
        model: SurfelArrays,
        prior: Pose,
        init: Pose,
        stage: str,
        inliers: int,
        residuals: dict[str, float],
    ) -> TrackResult:
        fallback = TrackResult(init, Twist.zero(), inliers, residuals, False, stage)
        levels = min(self.pyramid_levels, len(frame.pyramid))
        pyramid = model_pyramid(
            render(model, prior, self.intrinsics, self.render_options), levels
        )
        try:
            dense = dense_align(frame, pyramid, init, self.config)
        except DenseTrackingFailure as exc:
            logger.warning(
                "Frame %d: dense stage failed (%s); keeping the %s pose",
                frame.frame_id,
                exc,
                stage,
            )
            return fallback

        merged = {**residuals, **dense.residuals}
        if not dense.accepted:
            logger.warning(
                "Frame %d: dense alignment did not converge; keeping the %s pose",
                frame.frame_id,
                stage,
            )
            return dataclasses.replace(
                fallback, residuals=merged, associations=dense.associations
            )

        return dataclasses.replace(dense, inliers=inliers, residuals=merged)
