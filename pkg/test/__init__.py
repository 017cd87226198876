"""
Shared builders for the test suite: small cameras, analytic depth maps, hand-made
surfel batches and a few pluggable components for the registry tests.
"""

import math
import typing

import numpy as np

from surfel_fusion import sh
from surfel_fusion.config import FrameConfig
from surfel_fusion.frame_pipeline import ProcessedFrame, RawFrame, process_frame
from surfel_fusion.geometry import (
    FloatArray,
    Intrinsics,
    Pose,
    exp_se3,
    rotation_from_normal,
)
from surfel_fusion.surfel_map import SurfelArrays


def random_unit_vectors(rng: np.random.Generator, n: int) -> FloatArray:
    v = rng.normal(size=(n, 3))
    return typing.cast(FloatArray, v / np.linalg.norm(v, axis=1, keepdims=True))


def random_twists(
    rng: np.random.Generator,
    n: int,
    max_angle: float = math.pi / 2,
    max_translation: float = 1.0,
) -> FloatArray:
    """
    Twists with rotation angle uniform in ``[0, max_angle)``.
    """
    axes = random_unit_vectors(rng, n)
    angles = rng.uniform(0.0, max_angle, n)
    rho = rng.uniform(-max_translation, max_translation, (n, 3))
    return np.concatenate([rho, axes * angles[:, None]], axis=1)


def random_poses(
    rng: np.random.Generator,
    n: int,
    max_angle: float = math.pi / 2,
    max_translation: float = 1.0,
) -> list[Pose]:
    return [
        exp_se3(xi) for xi in random_twists(rng, n, max_angle, max_translation)
    ]


def small_intrinsics(width: int, height: int, focal: float = 0.0) -> Intrinsics:
    """
    Pinhole camera with the principal point in the image centre; the focal length
    defaults to the width (about 53° horizontal field of view).
    """
    f = focal or float(width)
    return Intrinsics(
        fx=f,
        fy=f,
        cx=(width - 1) / 2.0,
        cy=(height - 1) / 2.0,
        width=width,
        height=height,
    )


def make_raw_frame(
    depth: FloatArray,
    color: typing.Optional[np.ndarray] = None,
    frame_id: int = 0,
    timestamp: float = 0.0,
) -> RawFrame:
    """
    Wraps a depth map; colour defaults to uniform mid-grey.
    """
    if color is None:
        color = np.full(depth.shape + (3,), 128, dtype=np.uint8)
    return RawFrame(color, depth, timestamp, frame_id)


def processed(
    depth: FloatArray,
    k: Intrinsics,
    color: typing.Optional[np.ndarray] = None,
    frame_id: int = 0,
    levels: int = 1,
) -> ProcessedFrame:
    return process_frame(
        make_raw_frame(depth, color, frame_id, timestamp=frame_id / 30.0),
        k,
        FrameConfig(pyramid_levels=levels),
    )


def sphere_depth(k: Intrinsics, center: FloatArray, radius: float) -> FloatArray:
    """
    Depth map of a sphere seen from the identity pose; misses are ``0``.
    """
    rays = k.rays()
    c = np.asarray(center, dtype=np.float64)
    a = np.sum(rays * rays, axis=-1)
    b = np.sum(rays * c, axis=-1)
    disc = b * b - a * (c @ c - radius * radius)
    hit = disc > 0
    t = np.where(hit, (b - np.sqrt(np.where(hit, disc, 0.0))) / a, 0.0)
    return typing.cast(FloatArray, np.where(hit & (t > 0), t, 0.0))


def plane_depth(
    k: Intrinsics, normal: FloatArray, offset: float, pose: typing.Optional[Pose] = None
) -> FloatArray:
    """
    Depth map of the world plane ``n·x = offset`` seen from ``pose``; misses and
    grazing rays are ``0``.
    """
    pose = pose or Pose.identity()
    n = np.asarray(normal, dtype=np.float64)
    rays = k.rays() @ pose.rotation.T
    den = rays @ n
    safe = np.where(np.abs(den) > 1e-9, den, 1.0)
    t = (offset - pose.translation @ n) / safe
    return typing.cast(FloatArray, np.where((np.abs(den) > 1e-9) & (t > 0), t, 0.0))


def surfel_arrays(
    positions: typing.Any,
    normals: typing.Any,
    scales: typing.Any = 0.05,
    opacities: typing.Any = 1.0,
    rgb: typing.Any = (0.5, 0.5, 0.5),
    sh_coefficients: int = 4,
    lam: typing.Any = 1e4,
    frame_id: int = 0,
) -> SurfelArrays:
    """
    Builds a consistent batch: ``η = Λ·[p; n]`` and rotations from the normals.
    """
    p = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    n = np.asarray(normals, dtype=np.float64).reshape(-1, 3)
    n = n / np.linalg.norm(n, axis=1, keepdims=True)
    count = len(p)

    colors = np.zeros((count, sh_coefficients, 3))
    colors[:, 0] = sh.rgb_to_sh(np.broadcast_to(np.asarray(rgb, float), (count, 3)))
    information = np.broadcast_to(np.asarray(lam, dtype=np.float64), (count, 6)).copy()
    frames = np.full(count, frame_id, dtype=np.int64)
    return SurfelArrays(
        positions=p.copy(),
        scales=np.broadcast_to(np.asarray(scales, float), (count, 2)).copy(),
        rotations=rotation_from_normal(n),
        opacities=np.broadcast_to(np.asarray(opacities, float), (count,)).copy(),
        colors=colors,
        lam=information,
        eta=information * np.concatenate([p, n], axis=1),
        created=frames,
        last_observed=frames.copy(),
    )


def grid_surfels(
    k: Intrinsics,
    depth: float,
    stride: int = 2,
    alpha_s: float = 2.0,
    rgb: typing.Any = (0.5, 0.5, 0.5),
) -> SurfelArrays:
    """
    Fronto-parallel surfels at ``depth`` on every ``stride``-th pixel of the identity
    camera, sized like freshly spawned ones.
    """
    x, y = k.pixel_grid()
    x, y = x[::stride, ::stride].ravel(), y[::stride, ::stride].ravel()
    points = np.stack(
        [(x - k.cx) / k.fx * depth, (y - k.cy) / k.fy * depth, np.full(len(x), depth)],
        axis=1,
    )
    normals = np.tile([0.0, 0.0, -1.0], (len(points), 1))
    scale = [alpha_s * depth / k.fx, alpha_s * depth / k.fy]
    return surfel_arrays(points, normals, scales=scale, rgb=rgb)


# Pluggable components for the registry tests.
class DepthFilter:
    """
    Smooths a depth map.
    """

    kind: str

    def __init__(self, radius: int = 2) -> None:
        super().__init__()
        self.radius = radius


class BilateralFilter(DepthFilter):
    kind = "bilateral"


class JointBilateralFilter(DepthFilter):
    kind = "bilateral"


class MedianFilter(DepthFilter):
    kind = "median"


class WeightedMedianFilter(DepthFilter):
    kind = "median"


class GaussianFilter(DepthFilter):
    kind = "gaussian"


class BoxFilter(DepthFilter):
    kind = "box"


class FilterFactory:
    """
    Registered in place of a class, to check that any callable works as a factory.
    """

    @classmethod
    def create_box_filter(cls, radius: int = 1) -> BoxFilter:
        return BoxFilter(radius)
