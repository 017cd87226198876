__all__ = [
    "Intrinsics",
    "Pose",
    "Twist",
    "backproject",
    "exp_se3",
    "hat",
    "log_se3",
    "project",
    "rodrigues",
    "rotation_between_normals",
    "rotation_from_normal",
    "rotation_matrices",
    "tangent_frame",
]

import dataclasses
import math
import typing

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.spatial.transform import Rotation

from .errors import BehindCameraError, DegenerateInputError, InvalidDepthError

FloatArray = NDArray[np.float64]

# Identity shortcut for rotation_between_normals.
EPS_PARALLEL = 1e-8

# exp/log are undefined (non-unique) at π.
LOG_ANGLE_LIMIT = math.pi - 1e-6


@dataclasses.dataclass(frozen=True)
class Intrinsics:
    """
    Pinhole camera model.  Integer pixel coordinates address pixel centres.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    depth_scale: float = 5000.0

    def __post_init__(self) -> None:
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(
                f"Focal lengths must be positive, got {self.fx}, {self.fy}"
            )
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError(
                f"Principal point ({self.cx}, {self.cy}) outside "
                f"{self.width}x{self.height} image"
            )
        if not self.depth_scale > 0:
            raise ValueError(f"depth_scale must be positive, got {self.depth_scale}")

    @property
    def matrix(self) -> FloatArray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )

    @property
    def shape(self) -> tuple[int, int]:
        return self.height, self.width

    def scaled(self, level: int = 1) -> "Intrinsics":
        """
        Intrinsics of pyramid level ``level`` (each level halves both dimensions).

        A level-(l+1) pixel centre sits halfway between two level-l centres, hence the
        half-pixel shift of the principal point.
        """
        k = self
        for _ in range(level):
            k = Intrinsics(
                fx=k.fx / 2,
                fy=k.fy / 2,
                cx=(k.cx - 0.5) / 2,
                cy=(k.cy - 0.5) / 2,
                width=k.width // 2,
                height=k.height // 2,
                depth_scale=k.depth_scale,
            )
        return k

    def pixel_grid(self) -> tuple[FloatArray, FloatArray]:
        """
        Returns ``(x, y)`` pixel-centre coordinates, each ``height x width``.
        """
        y, x = np.mgrid[0 : self.height, 0 : self.width]
        return x.astype(np.float64), y.astype(np.float64)

    def rays(self) -> FloatArray:
        """
        Per-pixel rays ``K⁻¹ [u, 1]`` (unit z), ``height x width x 3``.
        """
        x, y = self.pixel_grid()
        return np.stack(
            [(x - self.cx) / self.fx, (y - self.cy) / self.fy, np.ones_like(x)], axis=-1
        )


def hat(v: ArrayLike) -> FloatArray:
    """
    Skew-symmetric cross-product matrix(es) of ``v`` (shape ``(..., 3)``).
    """
    v = np.asarray(v, dtype=np.float64)
    zero = np.zeros(v.shape[:-1])
    return np.stack(
        [
            np.stack([zero, -v[..., 2], v[..., 1]], axis=-1),
            np.stack([v[..., 2], zero, -v[..., 0]], axis=-1),
            np.stack([-v[..., 1], v[..., 0], zero], axis=-1),
        ],
        axis=-2,
    )


@dataclasses.dataclass(frozen=True, eq=False)
class Pose:
    """
    Rigid transform (camera-to-world unless stated otherwise).

    Stored as a unit quaternion in scalar-last ``(x, y, z, w)`` order plus a
    translation; the quaternion is renormalised on construction so that repeated
    composition does not drift off SO(3).
    """

    quaternion: FloatArray
    translation: FloatArray

    def __post_init__(self) -> None:
        q = np.asarray(self.quaternion, dtype=np.float64).reshape(4)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        norm = np.linalg.norm(q)
        if not (np.isfinite(norm) and norm > 0):
            raise DegenerateInputError(f"Invalid quaternion {q}")
        object.__setattr__(self, "quaternion", q / norm)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.array([0.0, 0.0, 0.0, 1.0]), np.zeros(3))

    @classmethod
    def from_matrix(cls, rotation: ArrayLike, translation: ArrayLike) -> "Pose":
        quaternion = Rotation.from_matrix(np.asarray(rotation)).as_quat()
        return cls(quaternion, np.asarray(translation))

    @classmethod
    def from_matrix4(cls, matrix: ArrayLike) -> "Pose":
        m = np.asarray(matrix, dtype=np.float64)
        return cls.from_matrix(m[:3, :3], m[:3, 3])

    @property
    def rotation(self) -> FloatArray:
        return typing.cast(FloatArray, Rotation.from_quat(self.quaternion).as_matrix())

    @property
    def matrix(self) -> FloatArray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def inverse(self) -> "Pose":
        r = Rotation.from_quat(self.quaternion).inv()
        return Pose(r.as_quat(), -r.apply(self.translation))

    def __matmul__(self, other: "Pose") -> "Pose":
        r_a = Rotation.from_quat(self.quaternion)
        return Pose(
            (r_a * Rotation.from_quat(other.quaternion)).as_quat(),
            r_a.apply(other.translation) + self.translation,
        )

    def transform_points(self, points: ArrayLike) -> FloatArray:
        """
        Applies ``R·x + t`` over the last axis.
        """
        p = np.asarray(points, dtype=np.float64)
        return typing.cast(FloatArray, p @ self.rotation.T + self.translation)

    def rotate(self, vectors: ArrayLike) -> FloatArray:
        v = np.asarray(vectors, dtype=np.float64)
        return typing.cast(FloatArray, v @ self.rotation.T)

    @property
    def angle(self) -> float:
        """
        Rotation angle in radians, in ``[0, π]``.
        """
        w = min(1.0, abs(float(self.quaternion[3])))
        xyz = float(np.linalg.norm(self.quaternion[:3]))
        return 2.0 * math.atan2(xyz, w)

    def __repr__(self) -> str:
        return f"Pose(q={self.quaternion.tolist()}, t={self.translation.tolist()})"


@dataclasses.dataclass(frozen=True, eq=False)
class Twist:
    """
    se(3) coordinates ``(ρ, ω)``: translation part first, rotation part last.
    """

    vector: FloatArray

    def __post_init__(self) -> None:
        object.__setattr__(
            self, "vector", np.asarray(self.vector, dtype=np.float64).reshape(6)
        )

    @classmethod
    def zero(cls) -> "Twist":
        return cls(np.zeros(6))

    @property
    def translation(self) -> FloatArray:
        return self.vector[:3]

    @property
    def rotation(self) -> FloatArray:
        return self.vector[3:]

    def __repr__(self) -> str:
        return f"Twist({self.vector.tolist()})"


def _se3_coefficients(theta: float) -> tuple[float, float]:
    """
    ``(1 - cos θ)/θ²`` and ``(θ - sin θ)/θ³``, with series expansions near 0.
    """
    if theta < 1e-4:
        t2 = theta * theta
        a = 0.5 - t2 / 24.0 + t2 * t2 / 720.0
        b = 1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0
        return a, b

    return (1.0 - math.cos(theta)) / theta**2, (theta - math.sin(theta)) / theta**3


def exp_se3(xi: typing.Union[Twist, ArrayLike]) -> Pose:
    """
    Exponential map se(3) → SE(3).
    """
    v = xi.vector if isinstance(xi, Twist) else np.asarray(xi, dtype=np.float64)
    rho, omega = v[:3], v[3:]
    theta = float(np.linalg.norm(omega))
    a, b = _se3_coefficients(theta)
    w = hat(omega)
    jacobian = np.eye(3) + a * w + b * (w @ w)
    return Pose(Rotation.from_rotvec(omega).as_quat(), jacobian @ rho)


def log_se3(pose: Pose) -> Twist:
    """
    Logarithm map SE(3) → se(3).

    Raises:
        DegenerateInputError: if the rotation angle is within 1e-6 of π.
    """
    omega = Rotation.from_quat(pose.quaternion).as_rotvec()
    theta = float(np.linalg.norm(omega))
    if theta >= LOG_ANGLE_LIMIT:
        raise DegenerateInputError(
            f"log_se3 is undefined at rotation angle {theta:.9f} (≈ π)"
        )

    w = hat(omega)
    if theta < 1e-4:
        t2 = theta * theta
        c = 1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0
    else:
        c = (1.0 - theta * math.sin(theta) / (2.0 * (1.0 - math.cos(theta)))) / theta**2
    inverse_jacobian = np.eye(3) - 0.5 * w + c * (w @ w)
    return Twist(np.concatenate([inverse_jacobian @ pose.translation, omega]))


def project(k: Intrinsics, x_cam: ArrayLike) -> FloatArray:
    """
    Pinhole projection of camera-frame points (``(..., 3)`` → ``(..., 2)``).

    Raises:
        BehindCameraError: if any point has ``z <= 0``.
    """
    x = np.asarray(x_cam, dtype=np.float64)
    z = x[..., 2]
    if np.any(~(z > 0)):
        raise BehindCameraError("Cannot project points with z <= 0")

    return np.stack([k.fx * x[..., 0] / z + k.cx, k.fy * x[..., 1] / z + k.cy], axis=-1)


def backproject(k: Intrinsics, u: ArrayLike, d: ArrayLike) -> FloatArray:
    """
    ``d · K⁻¹ [u, 1]`` for pixels ``u`` (``(..., 2)``) and depths ``d`` (``(...)``).

    Raises:
        InvalidDepthError: if any depth is non-positive or not finite.
    """
    uv = np.asarray(u, dtype=np.float64)
    depth = np.asarray(d, dtype=np.float64)
    if np.any(~(np.isfinite(depth) & (depth > 0))):
        raise InvalidDepthError("Depth must be finite and positive")

    return np.stack(
        [
            (uv[..., 0] - k.cx) / k.fx * depth,
            (uv[..., 1] - k.cy) / k.fy * depth,
            depth * np.ones_like(uv[..., 0]),
        ],
        axis=-1,
    )


def rodrigues(axis: ArrayLike, theta: ArrayLike) -> FloatArray:
    """
    ``cos θ·I + (1 - cos θ)·n nᵀ + sin θ·[n]ₓ``, broadcast over leading axes.

    Raises:
        DegenerateInputError: if an axis is not unit within 1e-9 or θ is outside
            ``[0, π]``.
    """
    n = np.asarray(axis, dtype=np.float64)
    th = np.asarray(theta, dtype=np.float64)
    if np.any(np.abs(np.linalg.norm(n, axis=-1) - 1.0) > 1e-9):
        raise DegenerateInputError("Rodrigues axis must be a unit vector")
    if np.any((th < 0) | (th > math.pi)):
        raise DegenerateInputError("Rodrigues angle must be in [0, π]")

    c = np.cos(th)[..., None, None]
    s = np.sin(th)[..., None, None]
    outer = n[..., :, None] * n[..., None, :]
    return typing.cast(FloatArray, c * np.eye(3) + (1.0 - c) * outer + s * hat(n))


def tangent_frame(normal: ArrayLike) -> FloatArray:
    """
    Right-handed frame ``[t1 t2 n]`` (columns) for unit normals ``(..., 3)``.

    ``t1`` is the canonical axis of smallest ``|n_k|`` (first one on ties) with its
    normal component removed; ``t2 = n × t1``.
    """
    n = np.asarray(normal, dtype=np.float64)
    axis = np.argmin(np.abs(n), axis=-1)
    e = np.eye(3)[axis]
    t1 = e - np.sum(e * n, axis=-1, keepdims=True) * n
    t1 /= np.linalg.norm(t1, axis=-1, keepdims=True)
    t2 = np.cross(n, t1)
    return np.stack([t1, t2, n], axis=-1)


def rotation_from_normal(normal: ArrayLike) -> FloatArray:
    """
    Unit quaternion(s) ``(x, y, z, w)`` whose rotation maps ``(0, 0, 1)`` to ``n``.
    """
    n = np.asarray(normal, dtype=np.float64)
    norms = np.linalg.norm(n, axis=-1)
    if np.any(np.abs(norms - 1.0) > 1e-6):
        raise DegenerateInputError("Surfel normals must be unit vectors")

    frame = tangent_frame(n).reshape(-1, 3, 3)
    if not len(frame):
        return np.zeros(n.shape[:-1] + (4,))
    quaternions = Rotation.from_matrix(frame).as_quat()
    return typing.cast(FloatArray, quaternions.reshape(n.shape[:-1] + (4,)))


def rotation_between_normals(n_g: ArrayLike, n_t: ArrayLike) -> FloatArray:
    """
    Minimal rotation(s) taking unit ``n_g`` onto unit ``n_t``.

    The axis is ``n_g × n_t`` and the angle ``atan2(|n_g × n_t|, n_g · n_t)``.  Pairs
    closer than ``EPS_PARALLEL`` yield the identity; antipodal pairs rotate by π about
    ``t1`` of :py:func:`tangent_frame` (``n_g``).
    """
    a = np.asarray(n_g, dtype=np.float64)
    b = np.asarray(n_t, dtype=np.float64)
    if np.any(np.abs(np.linalg.norm(a, axis=-1) - 1.0) > 1e-6) or np.any(
        np.abs(np.linalg.norm(b, axis=-1) - 1.0) > 1e-6
    ):
        raise DegenerateInputError("rotation_between_normals expects unit vectors")

    a, b = np.broadcast_arrays(a, b)
    cross = np.cross(a, b)
    sin = np.linalg.norm(cross, axis=-1)
    cos = np.sum(a * b, axis=-1)
    theta = np.arctan2(sin, cos)

    parallel = theta < EPS_PARALLEL
    antipodal = (math.pi - theta) < EPS_PARALLEL
    regular = ~(parallel | antipodal)

    axis = np.zeros_like(a)
    axis[..., 2] = 1.0
    axis[regular] = cross[regular] / sin[regular][..., None]
    if np.any(antipodal):
        axis[antipodal] = tangent_frame(a[antipodal])[..., 0]
    theta = np.where(antipodal, math.pi, np.where(parallel, 0.0, theta))

    result = rodrigues(axis, theta)
    result[parallel] = np.eye(3)
    return result


def rotation_matrices(quaternions: ArrayLike) -> FloatArray:
    """
    Rotation matrices ``(..., 3, 3)`` of unit quaternions ``(..., 4)`` in
    ``(x, y, z, w)`` order.  Unlike :py:class:`Rotation` this accepts empty batches.
    """
    q = np.asarray(quaternions, dtype=np.float64)
    x, y, z, w = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    rows = [
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ]
    return np.stack([np.stack(row, axis=-1) for row in rows], axis=-2)
