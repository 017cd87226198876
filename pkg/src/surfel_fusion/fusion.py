__all__ = [
    "FusionStats",
    "Measurement",
    "NoiseParams",
    "apply_state",
    "apply_states",
    "fuse_frame",
    "info_update",
    "info_update_dense",
    "noise_covariance",
    "observation_matrix",
]

import dataclasses
import logging
import typing

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.spatial.transform import Rotation

from .errors import (
    DegenerateInputError,
    DegenerateStateError,
    InvalidDepthError,
    UninitializedStateError,
)
from .frame_pipeline import ProcessedFrame
from .geometry import (
    FloatArray,
    Pose,
    rotation_between_normals,
    rotation_matrices,
)
from .noise import NoiseParams, noise_covariance
from .surfel_map import Surfel, SurfelArrays, SurfelMap, select_surface, select_visible

if typing.TYPE_CHECKING:
    from .rasterizer import RenderOutput

logger = logging.getLogger(__name__)


@dataclasses.dataclass(frozen=True, eq=False)
class Measurement:
    """
    Camera-frame vertex and normal observed at pixel ``u`` with depth ``d``.
    """

    z: FloatArray
    u: FloatArray
    d: float

    def __post_init__(self) -> None:
        z = np.asarray(self.z, dtype=np.float64).reshape(6)
        if abs(np.linalg.norm(z[3:]) - 1.0) > 1e-6:
            raise ValueError("Measurement normal must be a unit vector")
        if not self.d > 0:
            raise InvalidDepthError(f"Measurement depth must be positive, got {self.d}")
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "u", np.asarray(self.u, dtype=np.float64).reshape(2))

    @classmethod
    def from_frame(cls, frame: ProcessedFrame, pixel: tuple[int, int]) -> "Measurement":
        """
        Measurement at integer pixel ``(x, y)`` of a processed frame.
        """
        x, y = pixel
        z = np.concatenate([frame.vertex_map[y, x], frame.normal_map[y, x]])
        u = np.array([x, y], dtype=np.float64)
        return cls(z=z, u=u, d=float(frame.depth[y, x]))


@dataclasses.dataclass(frozen=True)
class FusionStats:
    fused: int = 0
    skipped_invalid: int = 0
    skipped_occluded: int = 0
    degenerate: int = 0
    mean_position_change: float = 0.0


def observation_matrix(pose: Pose) -> tuple[FloatArray, FloatArray]:
    """
    Linear observation model ``z = H·x + t̄`` for a camera-to-world ``pose``.

    Returns:
        ``H = blockdiag(R_wc, R_wc)`` and ``t̄ = [t_wc; 0]``, where ``[R_wc | t_wc]``
        is the world-to-camera transform.
    """
    world_to_camera = pose.inverse()
    h = np.zeros((6, 6))
    h[:3, :3] = world_to_camera.rotation
    h[3:, 3:] = world_to_camera.rotation
    t_bar = np.concatenate([world_to_camera.translation, np.zeros(3)])
    return h, t_bar


def info_update(
    lam: ArrayLike,
    eta: ArrayLike,
    z: ArrayLike,
    h: ArrayLike,
    t_bar: ArrayLike,
    sigma_z: ArrayLike,
) -> tuple[FloatArray, FloatArray, FloatArray, FloatArray]:
    """
    Information-filter update for diagonal states, broadcast over leading axes.

    With per-block isotropic ``Σ_z`` and a block-rotation ``H`` the information
    increment ``Hᵀ Λ_z H`` equals ``Λ_z`` exactly, so the state stays diagonal:
    ``Λ' = Λ + Λ_z`` and ``η' = η + Hᵀ Λ_z (z − t̄)``.

    Args:
        lam:
            Diagonal of Λ, ``(..., 6)``.
        eta:
            Information vector η, ``(..., 6)``.
        z:
            Measurements ``[V; N]``, ``(..., 6)``.
        h:
            Observation matrices, ``(6, 6)`` or ``(..., 6, 6)``.
        t_bar:
            Observation offsets, ``(6,)`` or ``(..., 6)``.
        sigma_z:
            Measurement variances (see :py:func:`noise_covariance`), ``(..., 6)``.

    Returns:
        ``(Λ', η', x̂, Σ̂)`` with ``Σ̂ = 1 / Λ'``.

    Raises:
        DegenerateInputError: if ``Σ_z`` is not isotropic per block.
        UninitializedStateError: if a component of ``Λ'`` is zero.
    """
    lam = np.asarray(lam, dtype=np.float64)
    eta = np.asarray(eta, dtype=np.float64)
    sigma = np.asarray(sigma_z, dtype=np.float64)
    if np.any(~(sigma > 0)):
        raise DegenerateInputError("Measurement variances must be positive")
    for block in (sigma[..., :3], sigma[..., 3:]):
        if not np.allclose(block, block[..., :1], rtol=1e-12, atol=0.0):
            raise DegenerateInputError(
                "Diagonal update needs per-block isotropic noise; use info_update_dense"
            )

    lam_z = 1.0 / sigma
    residual = np.asarray(z, dtype=np.float64) - np.asarray(t_bar, dtype=np.float64)
    lam_new = lam + lam_z
    eta_new = eta + np.einsum("...i,...ij->...j", lam_z * residual, np.asarray(h))

    if np.any(lam_new == 0):
        raise UninitializedStateError("Information matrix has a zero component")
    return lam_new, eta_new, eta_new / lam_new, 1.0 / lam_new


def info_update_dense(
    lam: ArrayLike,
    eta: ArrayLike,
    z: ArrayLike,
    h: ArrayLike,
    t_bar: ArrayLike,
    sigma_z: ArrayLike,
) -> tuple[FloatArray, FloatArray, FloatArray, FloatArray]:
    """
    General single-state update:
    ``Λ' = Λ + Hᵀ Λ_z H`` and ``η' = η + Hᵀ Λ_z (z − t̄)``.

    Args:
        lam:
            Full ``6×6`` information matrix (a 6-vector is taken as its diagonal).
        sigma_z:
            Measurement covariance, ``6×6`` or its diagonal.

    Returns:
        ``(Λ', η', x̂, Σ̂)`` as full matrices / vectors.

    Raises:
        UninitializedStateError: if ``Λ'`` is singular.
    """
    lam_m = np.asarray(lam, dtype=np.float64)
    if lam_m.ndim == 1:
        lam_m = np.diag(lam_m)
    sigma_m = np.asarray(sigma_z, dtype=np.float64)
    if sigma_m.ndim == 1:
        sigma_m = np.diag(sigma_m)
    h_m = np.asarray(h, dtype=np.float64)

    lam_z = np.linalg.inv(sigma_m)
    residual = np.asarray(z, dtype=np.float64) - np.asarray(t_bar, dtype=np.float64)
    lam_new = lam_m + h_m.T @ lam_z @ h_m
    eta_new = np.asarray(eta, dtype=np.float64) + h_m.T @ lam_z @ residual

    try:
        sigma_hat = np.linalg.inv(lam_new)
    except np.linalg.LinAlgError:
        raise UninitializedStateError("Information matrix is singular")
    return lam_new, eta_new, sigma_hat @ eta_new, sigma_hat


def _rotate_towards(rotations: FloatArray, targets: FloatArray) -> FloatArray:
    """
    Applies the minimal rotation taking each current disk normal onto its target.
    Quaternions whose normal already matches are returned bitwise unchanged.
    """
    out = rotations.copy()
    if not len(rotations):
        return out

    current = rotation_matrices(rotations)[:, :, 2]
    current /= np.linalg.norm(current, axis=1, keepdims=True)
    delta = rotation_between_normals(current, targets)
    moved = np.any(delta != np.eye(3), axis=(1, 2))
    if np.any(moved):
        out[moved] = (
            Rotation.from_matrix(delta[moved]) * Rotation.from_quat(rotations[moved])
        ).as_quat()
    return out


def apply_states(
    arrays: SurfelArrays, ids: NDArray[np.int64], x_hat: FloatArray
) -> NDArray[np.bool_]:
    """
    Writes posterior states back into the map arrays, in place.

    Positions take ``x̂[:3]``; rotations turn onto ``normalize(x̂[3:])`` without
    in-plane spin; the normal block of η is rescaled to ``λ_n·n̂`` so the filter
    state stays on the unit sphere.

    Returns:
        Boolean mask over ``ids``; ``False`` marks degenerate (zero normal block)
        states, which are left untouched.
    """
    norms = np.linalg.norm(x_hat[:, 3:], axis=1)
    ok = norms > 0
    if not np.all(ok):
        logger.warning("Skipping %d surfels with a zero normal state", int((~ok).sum()))

    good = ids[ok]
    normals = x_hat[ok, 3:] / norms[ok, None]
    arrays.positions[good] = x_hat[ok, :3]
    arrays.rotations[good] = _rotate_towards(arrays.rotations[good], normals)
    arrays.eta[good, 3:] = arrays.lam[good, 3:] * normals
    return ok


def apply_state(surfel: Surfel, x_hat: ArrayLike) -> Surfel:
    """
    Single-surfel form of :py:func:`apply_states`.

    Raises:
        DegenerateStateError: if the normal block of ``x_hat`` is zero.
    """
    x = np.asarray(x_hat, dtype=np.float64).reshape(6)
    norm = np.linalg.norm(x[3:])
    if not (np.isfinite(norm) and norm > 0):
        raise DegenerateStateError("Cannot apply a state with a zero normal block")

    normal = x[3:] / norm
    eta = surfel.eta.copy()
    eta[3:] = surfel.lam[3:] * normal
    return dataclasses.replace(
        surfel,
        p=x[:3].copy(),
        r=_rotate_towards(surfel.r.reshape(1, 4), normal.reshape(1, 3))[0],
        eta=eta,
    )


def fuse_frame(
    surfel_map: SurfelMap,
    frame: ProcessedFrame,
    pose: Pose,
    render: "RenderOutput",
    noise: NoiseParams,
    delta_s: float = 0.03,
    dense_update: bool = False,
) -> FusionStats:
    """
    Fuses one frame's vertex/normal measurements into the re-measured surface
    surfels.

    A surface surfel is re-measured when its rounded pixel has valid depth and
    normal and that depth agrees with its camera-frame depth within ``delta_s``.
    """
    arrays = surfel_map.arrays
    k = frame.intrinsics
    surface = select_surface(
        arrays, select_visible(arrays, pose, k), render.depth, pose, k, delta_s
    )
    if not len(surface):
        return FusionStats()

    camera = pose.inverse().transform_points(arrays.positions[surface])
    px = np.clip(np.rint(k.fx * camera[:, 0] / camera[:, 2] + k.cx), 0, k.width - 1)
    py = np.clip(np.rint(k.fy * camera[:, 1] / camera[:, 2] + k.cy), 0, k.height - 1)
    px, py = px.astype(np.int64), py.astype(np.int64)

    valid = frame.valid_mask[py, px]
    depth = frame.depth[py, px]
    remeasured = valid & (np.abs(depth - camera[:, 2]) < delta_s)
    skipped_invalid = int((~valid).sum())
    skipped_occluded = int((valid & ~remeasured).sum())

    ids = surface[remeasured]
    px, py, depth = px[remeasured], py[remeasured], depth[remeasured]
    if not len(ids):
        return FusionStats(0, skipped_invalid, skipped_occluded)

    # The optimiser may have moved surfels since their last fusion.
    old_positions = arrays.positions[ids].copy()
    lam = arrays.lam[ids]
    eta = lam * np.concatenate([old_positions, arrays.normals[ids]], axis=1)

    z = np.concatenate([frame.vertex_map[py, px], frame.normal_map[py, px]], axis=1)
    h, t_bar = observation_matrix(pose)
    sigma = noise_covariance(depth, noise)

    if dense_update:
        lam_new = np.empty_like(lam)
        eta_new = np.empty_like(eta)
        x_hat = np.empty_like(eta)
        for i in range(len(ids)):
            full, eta_new[i], x_hat[i], _ = info_update_dense(
                lam[i], eta[i], z[i], h, t_bar, sigma[i]
            )
            lam_new[i] = np.diag(full)
    else:
        lam_new, eta_new, x_hat, _ = info_update(lam, eta, z, h, t_bar, sigma)

    arrays.lam[ids] = lam_new
    arrays.eta[ids] = eta_new
    ok = apply_states(arrays, ids, x_hat)
    arrays.lam[ids[~ok]] = lam[~ok]
    arrays.eta[ids[~ok]] = eta[~ok]
    arrays.last_observed[ids[ok]] = frame.frame_id
    surfel_map.reindex()

    change = np.linalg.norm(arrays.positions[ids[ok]] - old_positions[ok], axis=1)
    stats = FusionStats(
        fused=int(ok.sum()),
        skipped_invalid=skipped_invalid,
        skipped_occluded=skipped_occluded,
        degenerate=int((~ok).sum()),
        mean_position_change=float(change.mean()) if len(change) else 0.0,
    )
    logger.debug("Frame %d: %s", frame.frame_id, stats)
    return stats
