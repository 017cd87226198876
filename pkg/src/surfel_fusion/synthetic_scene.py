"""
Procedural RGB-D scenes with analytic ground truth.

A :py:class:`SceneSpec` bundles primitives, lights, a camera trajectory and a sensor
noise model.  Frames are produced by exact ray casting, so depth, pose and the
tessellated surface all agree to floating-point precision.
"""

__all__ = [
    "Box",
    "CameraTrajectory",
    "Checker",
    "DEFAULT_INTRINSICS",
    "NoiseSpec",
    "OrbitTrajectory",
    "PointLight",
    "Primitive",
    "Product",
    "Quad",
    "SceneFactory",
    "SceneSpec",
    "Solid",
    "Sphere",
    "SplineTrajectory",
    "Texture",
    "ValueNoise",
    "corrupt",
    "ground_truth_mesh",
    "look_at",
    "make_scene",
    "render_ground_truth",
    "scene_from_dataset",
    "scenes",
    "write_tum_sequence",
]

import dataclasses
import logging
import math
import typing
from abc import ABC, abstractmethod as abstract_method
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.interpolate import CubicSpline

from .errors import ConfigurationError, DatasetFormatError
from .evaluation import Trajectory
from .export import export_trajectory, write_color_png, write_depth_png
from .frame_pipeline import RawFrame
from .geometry import FloatArray, Intrinsics, Pose
from .meshing import TriangleMesh
from .registry import AutoRegister, ComponentRegistry

logger = logging.getLogger(__name__)

IntArray = NDArray[np.int64]

DEFAULT_INTRINSICS = Intrinsics(
    fx=262.5, fy=262.5, cx=159.5, cy=119.5, width=320, height=240
)

# Ray hits closer than this are ignored.
T_MIN = 1e-6

# Textures are sampled this far behind the surface so that faces lying exactly on a
# texture cell boundary get one consistent cell.
TEXTURE_OFFSET = 1e-4

WORLD_UP = np.array([0.0, 0.0, 1.0])


def _vec3(value: ArrayLike) -> FloatArray:
    return np.asarray(value, dtype=np.float64).reshape(3)


# --------------------------------------------------------------------------------
# Textures


class Texture(ABC):
    """
    Solid (3D) texture: maps world points ``(N, 3)`` to RGB in ``[0, 1]``.
    """

    @abstract_method
    def __call__(self, points: FloatArray) -> FloatArray:
        raise NotImplementedError()


@dataclasses.dataclass(frozen=True)
class Solid(Texture):
    color: tuple[float, float, float] = (0.7, 0.7, 0.7)

    def __call__(self, points: FloatArray) -> FloatArray:
        return np.broadcast_to(np.asarray(self.color), points.shape).copy()


@dataclasses.dataclass(frozen=True)
class Checker(Texture):
    """
    3D checkerboard with cubic cells of edge ``size``.
    """

    size: float = 0.1
    colors: tuple[tuple[float, float, float], tuple[float, float, float]] = (
        (0.9, 0.9, 0.9),
        (0.2, 0.2, 0.2),
    )

    def __call__(self, points: FloatArray) -> FloatArray:
        parity = np.floor(points / self.size).astype(np.int64).sum(axis=1) % 2
        palette = np.asarray(self.colors, dtype=np.float64)
        return typing.cast(FloatArray, palette[parity])


@dataclasses.dataclass(frozen=True)
class ValueNoise(Texture):
    """
    Fractal lattice value noise blending between two colours.
    """

    scale: float = 0.2
    seed: int = 0
    octaves: int = 3
    colors: tuple[tuple[float, float, float], tuple[float, float, float]] = (
        (0.5, 0.5, 0.5),
        (1.0, 1.0, 1.0),
    )

    def _tables(self) -> tuple[IntArray, FloatArray]:
        rng = np.random.default_rng(self.seed)
        return rng.permutation(256).astype(np.int64), rng.random(256)

    def _lattice(self, q: FloatArray, perm: IntArray, table: FloatArray) -> FloatArray:
        base = np.floor(q).astype(np.int64)
        f = q - base
        s = f * f * (3.0 - 2.0 * f)

        out = np.zeros(len(q))
        for corner in range(8):
            offset = np.array([(corner >> axis) & 1 for axis in range(3)])
            idx = (base + offset) & 255
            h = perm[(perm[(perm[idx[:, 0]] + idx[:, 1]) & 255] + idx[:, 2]) & 255]
            weight = np.prod(np.where(offset == 1, s, 1.0 - s), axis=1)
            out += weight * table[h]
        return out

    def __call__(self, points: FloatArray) -> FloatArray:
        perm, table = self._tables()
        q = points / self.scale

        total = np.zeros(len(points))
        norm = 0.0
        for octave in range(self.octaves):
            amplitude = 0.5**octave
            total += amplitude * self._lattice(q * 2.0**octave, perm, table)
            norm += amplitude
        n = (total / norm)[:, None]

        a, b = (np.asarray(c, dtype=np.float64) for c in self.colors)
        return typing.cast(FloatArray, a * (1.0 - n) + b * n)


@dataclasses.dataclass(frozen=True)
class Product(Texture):
    """
    Channel-wise product of two textures.
    """

    first: Texture
    second: Texture

    def __call__(self, points: FloatArray) -> FloatArray:
        return self.first(points) * self.second(points)


# --------------------------------------------------------------------------------
# Primitives


class Primitive(ABC):
    """
    Analytic surface that can be ray cast and tessellated.

    ``first_frame`` is the first frame in which the primitive exists.
    """

    albedo: Texture
    first_frame: int

    @abstract_method
    def intersect(
        self, origin: FloatArray, directions: FloatArray
    ) -> tuple[FloatArray, FloatArray]:
        """
        Args:
            origin:
                Ray origin ``(3,)``.
            directions:
                Ray directions ``(N, 3)``; need not be unit length.

        Returns:
            ``(t, normals)``: ray parameter of the first hit (``inf`` on a miss) and
            the outward geometric normal there.
        """
        raise NotImplementedError()

    @abstract_method
    def triangles(self) -> tuple[FloatArray, IntArray]:
        """
        Tessellation as ``(vertices, faces)`` with outward winding.
        """
        raise NotImplementedError()

    def contains(self, point: FloatArray) -> bool:
        return False


@dataclasses.dataclass(frozen=True, eq=False)
class Quad(Primitive):
    """
    Rectangle ``center + a·u + b·v`` for ``a, b ∈ [-1, 1]``; ``u`` and ``v`` are the
    (perpendicular) half-edge vectors.
    """

    center: FloatArray
    u: FloatArray
    v: FloatArray
    albedo: Texture = Solid()
    first_frame: int = 0

    def __post_init__(self) -> None:
        for name in ("center", "u", "v"):
            object.__setattr__(self, name, _vec3(getattr(self, name)))
        lu, lv = np.linalg.norm(self.u), np.linalg.norm(self.v)
        if not (lu > 0 and lv > 0) or abs(self.u @ self.v) > 1e-9 * lu * lv:
            raise ValueError("Quad edges must be non-zero and perpendicular")

    @property
    def normal(self) -> FloatArray:
        n = np.cross(self.u, self.v)
        return typing.cast(FloatArray, n / np.linalg.norm(n))

    def intersect(
        self, origin: FloatArray, directions: FloatArray
    ) -> tuple[FloatArray, FloatArray]:
        n = self.normal
        with np.errstate(divide="ignore", invalid="ignore"):
            t = ((self.center - origin) @ n) / (directions @ n)
        rel = origin + t[:, None] * directions - self.center
        a = rel @ self.u / (self.u @ self.u)
        b = rel @ self.v / (self.v @ self.v)
        hit = np.isfinite(t) & (t > T_MIN) & (np.abs(a) <= 1) & (np.abs(b) <= 1)
        return np.where(hit, t, np.inf), np.broadcast_to(n, directions.shape)

    def triangles(self) -> tuple[FloatArray, IntArray]:
        c, u, v = self.center, self.u, self.v
        vertices = np.stack([c - u - v, c + u - v, c + u + v, c - u + v])
        return vertices, np.array([[0, 1, 2], [0, 2, 3]], dtype=np.int64)


# Corners are indexed by bits (x, y, z); each face is an outward-wound quad.
_BOX_FACES = np.array(
    [
        [0, 4, 6, 2],
        [1, 3, 7, 5],
        [0, 1, 5, 4],
        [2, 6, 7, 3],
        [0, 2, 3, 1],
        [4, 5, 7, 6],
    ],
    dtype=np.int64,
)


@dataclasses.dataclass(frozen=True, eq=False)
class Box(Primitive):
    """
    Axis-aligned box.
    """

    center: FloatArray
    half_extents: FloatArray
    albedo: Texture = Solid()
    first_frame: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "center", _vec3(self.center))
        object.__setattr__(self, "half_extents", _vec3(self.half_extents))
        if np.any(self.half_extents <= 0):
            raise ValueError(f"Box half extents must be positive: {self.half_extents}")

    def intersect(
        self, origin: FloatArray, directions: FloatArray
    ) -> tuple[FloatArray, FloatArray]:
        lo = self.center - self.half_extents - origin
        hi = self.center + self.half_extents - origin
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = lo / directions
            t2 = hi / directions
        t_enter = np.minimum(t1, t2)
        near = t_enter.max(axis=1)
        far = np.maximum(t1, t2).min(axis=1)
        axis = t_enter.argmax(axis=1)

        hit = (near <= far) & (near > T_MIN)
        rows = np.arange(len(directions))
        normals = np.zeros_like(directions)
        normals[rows, axis] = -np.sign(directions[rows, axis])
        return np.where(hit, near, np.inf), normals

    def triangles(self) -> tuple[FloatArray, IntArray]:
        bits = np.array([[(i >> a) & 1 for a in range(3)] for i in range(8)])
        vertices = self.center + (2.0 * bits - 1.0) * self.half_extents
        quads = _BOX_FACES
        faces = np.concatenate([quads[:, [0, 1, 2]], quads[:, [0, 2, 3]]])
        return vertices, faces

    def contains(self, point: FloatArray) -> bool:
        return bool(np.all(np.abs(point - self.center) < self.half_extents))


_GOLDEN = (1.0 + math.sqrt(5.0)) / 2.0

_ICOSAHEDRON_VERTICES = np.array(
    [
        [-1, _GOLDEN, 0],
        [1, _GOLDEN, 0],
        [-1, -_GOLDEN, 0],
        [1, -_GOLDEN, 0],
        [0, -1, _GOLDEN],
        [0, 1, _GOLDEN],
        [0, -1, -_GOLDEN],
        [0, 1, -_GOLDEN],
        [_GOLDEN, 0, -1],
        [_GOLDEN, 0, 1],
        [-_GOLDEN, 0, -1],
        [-_GOLDEN, 0, 1],
    ]
)

_ICOSAHEDRON_FACES = np.array(
    [
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ],
    dtype=np.int64,
)  # fmt: skip


def icosphere(subdivisions: int) -> tuple[FloatArray, IntArray]:
    """
    Unit icosphere; every vertex lies exactly on the sphere.
    """
    vertices = _ICOSAHEDRON_VERTICES / np.linalg.norm(
        _ICOSAHEDRON_VERTICES, axis=1, keepdims=True
    )
    faces = _ICOSAHEDRON_FACES
    for _ in range(subdivisions):
        edges = np.sort(
            np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]]),
            axis=1,
        )
        unique, inverse = np.unique(edges, axis=0, return_inverse=True)
        inverse = inverse.reshape(-1)
        mid = vertices[unique[:, 0]] + vertices[unique[:, 1]]
        mid /= np.linalg.norm(mid, axis=1, keepdims=True)

        f = len(faces)
        ab, bc, ca = (len(vertices) + inverse[i * f : (i + 1) * f] for i in range(3))
        a, b, c = faces[:, 0], faces[:, 1], faces[:, 2]
        faces = np.concatenate(
            [
                np.stack([a, ab, ca], axis=1),
                np.stack([b, bc, ab], axis=1),
                np.stack([c, ca, bc], axis=1),
                np.stack([ab, bc, ca], axis=1),
            ]
        )
        vertices = np.concatenate([vertices, mid])
    return vertices, faces


@dataclasses.dataclass(frozen=True, eq=False)
class Sphere(Primitive):
    center: FloatArray
    radius: float
    albedo: Texture = Solid()
    first_frame: int = 0
    subdivisions: int = 4

    def __post_init__(self) -> None:
        object.__setattr__(self, "center", _vec3(self.center))
        if not self.radius > 0:
            raise ValueError(f"Sphere radius must be positive, got {self.radius}")
        if self.subdivisions < 0:
            raise ValueError("Sphere subdivisions must be >= 0")

    def intersect(
        self, origin: FloatArray, directions: FloatArray
    ) -> tuple[FloatArray, FloatArray]:
        oc = origin - self.center
        a = np.einsum("ij,ij->i", directions, directions)
        b = 2.0 * directions @ oc
        c = oc @ oc - self.radius**2
        disc = b * b - 4.0 * a * c
        t = (-b - np.sqrt(np.maximum(disc, 0.0))) / (2.0 * a)

        hit = (disc >= 0) & (t > T_MIN)
        t = np.where(hit, t, np.inf)
        points = origin + np.where(hit, t, 0.0)[:, None] * directions
        return t, (points - self.center) / self.radius

    def triangles(self) -> tuple[FloatArray, IntArray]:
        vertices, faces = icosphere(self.subdivisions)
        return self.center + self.radius * vertices, faces

    def contains(self, point: FloatArray) -> bool:
        return bool(np.linalg.norm(point - self.center) < self.radius)


@dataclasses.dataclass(frozen=True)
class PointLight:
    position: tuple[float, float, float]
    intensity: float = 0.5


# --------------------------------------------------------------------------------
# Trajectories


def look_at(eye: ArrayLike, target: ArrayLike, up: ArrayLike = WORLD_UP) -> Pose:
    """
    Camera-to-world pose at ``eye`` whose optical axis points at ``target``.

    The camera frame is x right, y down, z forward; ``up`` is the world up vector.
    """
    e, g, u = _vec3(eye), _vec3(target), _vec3(up)
    forward = g - e
    right = np.cross(forward, u)
    if not (np.linalg.norm(forward) > 0 and np.linalg.norm(right) > 1e-12):
        raise ConfigurationError(f"Degenerate look-at from {e} to {g}")

    z = forward / np.linalg.norm(forward)
    x = right / np.linalg.norm(right)
    y = np.cross(z, x)
    return Pose.from_matrix(np.stack([x, y, z], axis=1), e)


class CameraTrajectory(ABC):
    """
    Camera path sampled at ``frames`` instants, ``fps`` frames per second.
    """

    frames: int
    fps: float

    @abstract_method
    def eye_and_target(self, index: int) -> tuple[FloatArray, FloatArray]:
        raise NotImplementedError()

    def pose(self, index: int) -> Pose:
        return look_at(*self.eye_and_target(index))

    def timestamp(self, index: int) -> float:
        # Microsecond resolution, so that text round trips are exact.
        return round(index / self.fps, 6)

    def ground_truth(self) -> Trajectory:
        return Trajectory(
            np.array([self.timestamp(i) for i in range(self.frames)]),
            tuple(self.pose(i) for i in range(self.frames)),
        )


@dataclasses.dataclass(frozen=True, eq=False)
class OrbitTrajectory(CameraTrajectory):
    """
    Horizontal circle of ``radius`` around ``center`` at ``height``, advancing
    ``arc / frames`` radians per frame.

    Looking inward the camera aims at the circle's axis at ``target_height``; looking
    outward it aims one meter radially outwards at that height.
    """

    center: tuple[float, float]
    radius: float
    height: float
    frames: int
    fps: float = 30.0
    arc: float = 2.0 * math.pi
    start_angle: float = 0.0
    inward: bool = True
    target_height: typing.Optional[float] = None

    def __post_init__(self) -> None:
        if not self.radius > 0:
            raise ConfigurationError("Orbit radius must be positive")
        if not self.fps > 0:
            raise ConfigurationError("Trajectory fps must be positive")

    @property
    def step(self) -> float:
        return self.arc / self.frames

    def eye_and_target(self, index: int) -> tuple[FloatArray, FloatArray]:
        angle = self.start_angle + self.step * index
        radial = np.array([math.cos(angle), math.sin(angle), 0.0])
        axis = np.array([self.center[0], self.center[1], self.height])
        eye = axis + self.radius * radial

        z = self.height if self.target_height is None else self.target_height
        if self.inward:
            target = np.array([self.center[0], self.center[1], z])
        else:
            target = eye + radial
            target[2] = z
        return eye, target


@dataclasses.dataclass(frozen=True, eq=False)
class SplineTrajectory(CameraTrajectory):
    """
    Cubic-spline interpolation of eye and target key positions, uniformly in frame
    index from the first key (frame 0) to the last (frame ``frames - 1``).
    """

    eyes: FloatArray
    targets: FloatArray
    frames: int
    fps: float = 30.0

    def __post_init__(self) -> None:
        eyes = np.asarray(self.eyes, dtype=np.float64).reshape(-1, 3)
        targets = np.asarray(self.targets, dtype=np.float64).reshape(-1, 3)
        if len(eyes) < 2 or eyes.shape != targets.shape:
            raise ConfigurationError(
                "Spline trajectories need >= 2 matching eye/target keys"
            )
        if not self.fps > 0:
            raise ConfigurationError("Trajectory fps must be positive")
        object.__setattr__(self, "eyes", eyes)
        object.__setattr__(self, "targets", targets)

    def eye_and_target(self, index: int) -> tuple[FloatArray, FloatArray]:
        knots = np.linspace(0.0, 1.0, len(self.eyes))
        s = index / max(1, self.frames - 1)
        eye = CubicSpline(knots, self.eyes, axis=0, bc_type="natural")(s)
        target = CubicSpline(knots, self.targets, axis=0, bc_type="natural")(s)
        return np.asarray(eye), np.asarray(target)


# --------------------------------------------------------------------------------
# Scene specification


@dataclasses.dataclass(frozen=True)
class NoiseSpec:
    """
    Depth sensor model: ``N(0, (kappa·d²)²)`` noise, per-pixel ``dropout``
    probability and ``quantization`` step (meters, 0 = none).
    """

    kappa: float = 0.0
    dropout: float = 0.0
    quantization: float = 0.0

    def __post_init__(self) -> None:
        if self.kappa < 0:
            raise ConfigurationError("noise kappa must be >= 0")
        if not 0 <= self.dropout <= 1:
            raise ConfigurationError("noise dropout must be in [0, 1]")
        if self.quantization < 0:
            raise ConfigurationError("noise quantization must be >= 0")

    @property
    def is_zero(self) -> bool:
        return self.kappa == 0 and self.dropout == 0 and self.quantization == 0


@dataclasses.dataclass(frozen=True, eq=False)
class SceneSpec:
    name: str
    primitives: tuple[Primitive, ...]
    trajectory: CameraTrajectory
    intrinsics: Intrinsics = DEFAULT_INTRINSICS
    noise: NoiseSpec = NoiseSpec()
    lights: tuple[PointLight, ...] = (
        PointLight((1.5, 1.0, 3.0), 0.5),
        PointLight((-1.0, -1.5, 2.5), 0.4),
    )
    ambient: float = 0.35
    resolution_divisor: int = 1

    def __post_init__(self) -> None:
        if self.trajectory.frames < 2:
            raise ConfigurationError(
                f"Scene {self.name!r} needs >= 2 frames, got {self.trajectory.frames}"
            )
        for index in range(self.trajectory.frames):
            eye = self.trajectory.pose(index).translation
            for primitive in self.primitives:
                if primitive.contains(eye):
                    raise ConfigurationError(
                        f"Scene {self.name!r}: camera at frame {index} is inside "
                        f"{type(primitive).__name__}"
                    )

    @property
    def frames(self) -> int:
        return self.trajectory.frames


def _trace(
    primitives: typing.Sequence[Primitive],
    origin: FloatArray,
    directions: FloatArray,
) -> tuple[FloatArray, FloatArray, IntArray]:
    depth = np.full(len(directions), np.inf)
    normals = np.zeros_like(directions)
    owner = np.full(len(directions), -1, dtype=np.int64)
    for index, primitive in enumerate(primitives):
        t, n = primitive.intersect(origin, directions)
        closer = t < depth
        depth[closer] = t[closer]
        normals[closer] = n[closer]
        owner[closer] = index
    return depth, normals, owner


def _shade(
    spec: SceneSpec,
    primitives: typing.Sequence[Primitive],
    origin: FloatArray,
    directions: FloatArray,
) -> tuple[FloatArray, FloatArray]:
    depth, normals, owner = _trace(primitives, origin, directions)
    color = np.zeros_like(directions)
    points = origin + np.where(owner >= 0, depth, 0.0)[:, None] * directions

    for index, primitive in enumerate(primitives):
        rows = owner == index
        if np.any(rows):
            color[rows] = primitive.albedo(
                points[rows] - TEXTURE_OFFSET * normals[rows]
            )

    # Two-sided: light the side facing the camera.
    facing = np.where(
        np.einsum("ij,ij->i", normals, directions)[:, None] > 0, -normals, normals
    )
    light = np.full(len(directions), spec.ambient)
    for lamp in spec.lights:
        to_light = np.asarray(lamp.position) - points
        to_light /= np.maximum(np.linalg.norm(to_light, axis=1, keepdims=True), 1e-12)
        light += lamp.intensity * np.maximum(
            np.einsum("ij,ij->i", facing, to_light), 0.0
        )

    color = np.where(owner[:, None] >= 0, color * light[:, None], 0.0)
    return np.where(owner >= 0, depth, 0.0), np.clip(color, 0.0, 1.0)


def render_ground_truth(
    spec: SceneSpec, index: int, threads: int = 1
) -> tuple[RawFrame, Pose]:
    """
    Ray casts frame ``index`` of ``spec``.

    Returns:
        The exact frame (depth equals the analytic ray parameter because every pixel
        ray has unit camera-z) and its ground-truth camera-to-world pose.
    """
    if not 0 <= index < spec.frames:
        raise IndexError(f"Frame {index} outside 0..{spec.frames - 1}")

    pose = spec.trajectory.pose(index)
    k = spec.intrinsics
    directions = k.rays().reshape(-1, 3) @ pose.rotation.T
    visible = [p for p in spec.primitives if p.first_frame <= index]

    chunks = np.array_split(np.arange(len(directions)), max(1, threads))
    depth = np.zeros(len(directions))
    color = np.zeros_like(directions)

    def _work(rows: IntArray) -> None:
        depth[rows], color[rows] = _shade(
            spec, visible, pose.translation, directions[rows]
        )

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(_work, chunks))
    else:
        for rows in chunks:
            _work(rows)

    frame = RawFrame(
        color=np.rint(color * 255.0).astype(np.uint8).reshape(k.height, k.width, 3),
        depth=depth.reshape(k.height, k.width),
        timestamp=spec.trajectory.timestamp(index),
        frame_id=index,
    )
    return frame, pose


def corrupt(frame: RawFrame, noise: NoiseSpec, seed: int = 0) -> RawFrame:
    """
    Applies the depth noise model; deterministic for a given ``(seed, frame_id)``.
    """
    if noise.is_zero:
        return frame

    rng = np.random.default_rng([seed, frame.frame_id])
    gaussian = rng.standard_normal(frame.depth.shape)
    drop = rng.random(frame.depth.shape) < noise.dropout

    depth = frame.depth
    valid = depth > 0
    noisy = depth + gaussian * noise.kappa * depth**2
    if noise.quantization > 0:
        noisy = np.rint(noisy / noise.quantization) * noise.quantization
    noisy = np.where(valid & ~drop, noisy, 0.0)

    return RawFrame(frame.color, noisy, frame.timestamp, frame.frame_id)


def ground_truth_mesh(spec: SceneSpec) -> TriangleMesh:
    """
    Tessellation of every primitive (including ones appearing late).
    """
    vertices, faces = [], []
    offset = 0
    for primitive in spec.primitives:
        v, f = primitive.triangles()
        vertices.append(v)
        faces.append(f + offset)
        offset += len(v)
    if not vertices:
        return TriangleMesh.empty()
    return TriangleMesh(np.concatenate(vertices), np.concatenate(faces))


# --------------------------------------------------------------------------------
# Canonical scenes

scenes = ComponentRegistry["SceneFactory"](
    attr_name="scene_name", group="surfel_fusion.scenes"
)


class SceneFactory(AutoRegister(scenes), ABC):  # type: ignore
    """
    Builds a named canonical scene.
    """

    scene_name: str
    default_frames: int

    def __init__(
        self, frames: typing.Optional[int] = None, resolution_divisor: int = 1
    ) -> None:
        if resolution_divisor < 1 or resolution_divisor & (resolution_divisor - 1):
            raise ConfigurationError(
                f"resolution_divisor must be a power of two, got {resolution_divisor}"
            )
        self.frames = self.default_frames if frames is None else frames
        self.resolution_divisor = resolution_divisor

    @property
    def intrinsics(self) -> Intrinsics:
        return DEFAULT_INTRINSICS.scaled(int(math.log2(self.resolution_divisor)))

    @abstract_method
    def build(self) -> SceneSpec:
        raise NotImplementedError()


def _textured(size: float, seed: int, dark: float = 0.25) -> Texture:
    return Product(
        Checker(size, ((0.95, 0.92, 0.85), (dark, dark, dark + 0.05))),
        ValueNoise(scale=0.3, seed=seed, colors=((0.45, 0.5, 0.55), (1.0, 1.0, 1.0))),
    )


class PlaneBoxScene(SceneFactory):
    """
    Floor, back wall and a textured box seen from an inward-looking arc.
    """

    scene_name = "plane-box"
    default_frames = 30

    def box_first_frame(self) -> int:
        return 0

    def primitives(self) -> tuple[Primitive, ...]:
        return (
            Quad((0.0, 0.0, 0.0), (4.0, 0.0, 0.0), (0.0, 4.0, 0.0), _textured(0.1, 1)),
            Quad(
                (-1.5, 0.0, 1.5), (0.0, 4.0, 0.0), (0.0, 0.0, 1.5), _textured(0.15, 2)
            ),
            Box(
                (0.0, 0.0, 0.25),
                (0.25, 0.25, 0.25),
                _textured(0.05, 3, dark=0.15),
                first_frame=self.box_first_frame(),
            ),
        )

    def build(self) -> SceneSpec:
        trajectory = OrbitTrajectory(
            center=(0.0, 0.0),
            radius=2.0,
            height=1.2,
            frames=self.frames,
            arc=math.pi / 4,
            inward=True,
            target_height=0.3,
        )
        return SceneSpec(
            name=self.scene_name,
            primitives=self.primitives(),
            trajectory=trajectory,
            intrinsics=self.intrinsics,
            resolution_divisor=self.resolution_divisor,
        )


class TwoStageScene(PlaneBoxScene):
    """
    The plane-box scene, with the box appearing halfway through the sequence.
    """

    scene_name = "two-stage"

    def box_first_frame(self) -> int:
        return self.frames // 2


class RoomScene(SceneFactory):
    """
    Closed room with furniture, seen from an outward-looking full orbit.
    """

    scene_name = "room"
    default_frames = 200

    def build(self) -> SceneSpec:
        h = 1.25
        walls = (
            Quad((2.0, 0.0, h), (0.0, 2.0, 0.0), (0.0, 0.0, h), _textured(0.1, 11)),
            Quad((-2.0, 0.0, h), (0.0, 2.0, 0.0), (0.0, 0.0, h), _textured(0.1, 12)),
            Quad((0.0, 2.0, h), (2.0, 0.0, 0.0), (0.0, 0.0, h), _textured(0.1, 13)),
            Quad((0.0, -2.0, h), (2.0, 0.0, 0.0), (0.0, 0.0, h), _textured(0.1, 14)),
            Quad((0.0, 0.0, 0.0), (2.0, 0.0, 0.0), (0.0, 2.0, 0.0), _textured(0.1, 15)),
            Quad(
                (0.0, 0.0, 2 * h), (2.0, 0.0, 0.0), (0.0, 2.0, 0.0), _textured(0.2, 16)
            ),
        )
        furniture = (
            Box((1.2, 0.8, 0.375), (0.4, 0.3, 0.375), _textured(0.05, 21, 0.15)),
            Box((-1.5, -1.2, 0.6), (0.3, 0.5, 0.6), _textured(0.07, 22, 0.2)),
            Sphere((1.0, -1.1, 0.35), 0.35, _textured(0.05, 23, 0.15)),
        )
        trajectory = OrbitTrajectory(
            center=(0.0, 0.0),
            radius=0.5,
            height=1.3,
            frames=self.frames,
            inward=False,
            target_height=0.9,
        )
        return SceneSpec(
            name=self.scene_name,
            primitives=walls + furniture,
            trajectory=trajectory,
            intrinsics=self.intrinsics,
            noise=NoiseSpec(kappa=0.002, quantization=1.0 / 5000.0),
            lights=(
                PointLight((1.0, 1.0, 2.2), 0.45),
                PointLight((-1.0, -1.0, 2.2), 0.4),
            ),
            resolution_divisor=self.resolution_divisor,
        )


def make_scene(
    name: str, frames: typing.Optional[int] = None, resolution_divisor: int = 1
) -> SceneSpec:
    factory = typing.cast(SceneFactory, scenes.get(name, frames, resolution_divisor))
    return factory.build()


# --------------------------------------------------------------------------------
# On-disk sequences


def write_tum_sequence(
    spec: SceneSpec, root: typing.Union[str, Path], seed: int = 0, threads: int = 1
) -> Path:
    """
    Renders every frame of ``spec`` (with its noise model applied) to a TUM-layout
    directory, plus ``calibration.txt`` and ``scene.txt``.
    """
    root = Path(root)
    (root / "rgb").mkdir(parents=True, exist_ok=True)
    (root / "depth").mkdir(parents=True, exist_ok=True)

    rgb_lines = ["# color images", f"# scene: '{spec.name}'", "# timestamp filename"]
    depth_lines = ["# depth maps", f"# scene: '{spec.name}'", "# timestamp filename"]
    k = spec.intrinsics

    for index in range(spec.frames):
        frame, _ = render_ground_truth(spec, index, threads=threads)
        frame = corrupt(frame, spec.noise, seed)
        stamp = f"{frame.timestamp:.6f}"
        write_color_png(root / "rgb" / f"{stamp}.png", frame.color)
        write_depth_png(root / "depth" / f"{stamp}.png", frame.depth, k.depth_scale)
        rgb_lines.append(f"{stamp} rgb/{stamp}.png")
        depth_lines.append(f"{stamp} depth/{stamp}.png")
        logger.debug("Wrote synthetic frame %d/%d", index + 1, spec.frames)

    (root / "rgb.txt").write_text("\n".join(rgb_lines) + "\n")
    (root / "depth.txt").write_text("\n".join(depth_lines) + "\n")
    export_trajectory(spec.trajectory.ground_truth(), root / "groundtruth.txt")
    (root / "calibration.txt").write_text(
        f"{k.fx!r} {k.fy!r} {k.cx!r} {k.cy!r} {k.width} {k.height}\n"
    )
    (root / "scene.txt").write_text(
        f"{spec.name} {spec.frames} {spec.resolution_divisor}\n"
    )

    logger.info("Wrote %d frames of scene %r to %s", spec.frames, spec.name, root)
    return root


def scene_from_dataset(root: typing.Union[str, Path]) -> SceneSpec:
    """
    Rebuilds the scene a synthetic sequence was generated from.

    Raises:
        DatasetFormatError: if ``root`` has no (valid) ``scene.txt``.
    """
    path = Path(root) / "scene.txt"
    try:
        fields = path.read_text().split()
    except OSError as exc:
        raise DatasetFormatError(f"Not a synthetic sequence: {path}: {exc}") from exc
    if len(fields) != 3:
        raise DatasetFormatError(f"{path}: expected 'name frames divisor'")

    try:
        frames, divisor = int(fields[1]), int(fields[2])
    except ValueError as exc:
        raise DatasetFormatError(f"{path}: {exc}") from exc
    return make_scene(fields[0], frames=frames, resolution_divisor=divisor)
