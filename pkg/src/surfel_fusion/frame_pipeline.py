__all__ = [
    "ProcessedFrame",
    "PyramidLevel",
    "RawFrame",
    "build_pyramid",
    "compute_normal_map",
    "compute_vertex_map",
    "downsample_depth",
    "downsample_intensity",
    "filter_depth",
    "process_frame",
    "to_intensity",
    "transform_to_world",
]

import dataclasses
import logging
import math
import typing

import numpy as np
from numpy.typing import NDArray

from .config import FrameConfig
from .errors import ConfigurationError
from .geometry import FloatArray, Intrinsics, Pose

logger = logging.getLogger(__name__)

BoolArray = NDArray[np.bool_]


@dataclasses.dataclass(frozen=True, eq=False)
class RawFrame:
    """
    One RGB-D observation.  Depth is in meters; ``0`` marks a missing measurement.
    """

    color: NDArray[np.uint8]
    depth: FloatArray
    timestamp: float
    frame_id: int

    def __post_init__(self) -> None:
        color = np.asarray(self.color)
        depth = np.asarray(self.depth, dtype=np.float64)
        if color.ndim != 3 or color.shape[2] != 3:
            raise ValueError(f"Color must be HxWx3, got {color.shape}")
        if depth.shape != color.shape[:2]:
            raise ValueError(
                f"Color {color.shape[:2]} and depth {depth.shape} dimensions differ"
            )

        # Anything that is not a finite positive depth becomes the sentinel.
        depth = np.where(np.isfinite(depth) & (depth > 0), depth, 0.0)
        object.__setattr__(self, "color", color.astype(np.uint8, copy=False))
        object.__setattr__(self, "depth", depth)

    @property
    def shape(self) -> tuple[int, int]:
        return typing.cast(tuple[int, int], self.depth.shape)


@dataclasses.dataclass(frozen=True, eq=False)
class PyramidLevel:
    intrinsics: Intrinsics
    intensity: FloatArray
    depth: FloatArray
    vertex_map: FloatArray
    normal_map: FloatArray
    valid_mask: BoolArray


@dataclasses.dataclass(frozen=True, eq=False)
class ProcessedFrame:
    """
    A raw frame plus every derived per-pixel map.  Immutable once built; all maps
    are in the camera frame and zero wherever ``valid_mask`` (or the map's own
    validity) is false.
    """

    raw: RawFrame
    intrinsics: Intrinsics
    depth: FloatArray
    intensity: FloatArray
    vertex_map: FloatArray
    normal_map: FloatArray
    valid_mask: BoolArray
    pyramid: tuple[PyramidLevel, ...] = ()

    @property
    def frame_id(self) -> int:
        return self.raw.frame_id

    @property
    def timestamp(self) -> float:
        return self.raw.timestamp

    @property
    def color(self) -> FloatArray:
        """
        Color in ``[0, 1]``.
        """
        return self.raw.color.astype(np.float64) / 255.0

    @property
    def depth_valid(self) -> BoolArray:
        return typing.cast(BoolArray, self.depth > 0)

    @property
    def normal_valid(self) -> BoolArray:
        return typing.cast(BoolArray, np.any(self.normal_map != 0, axis=-1))

    def level(self, index: int) -> PyramidLevel:
        return self.pyramid[index]


def to_intensity(color: NDArray[np.uint8]) -> FloatArray:
    """
    ITU-R 601 luma in ``[0, 1]``.
    """
    c = color.astype(np.float64) / 255.0
    return typing.cast(FloatArray, c @ np.array([0.299, 0.587, 0.114]))


def filter_depth(
    depth: FloatArray,
    radius: int = 2,
    sigma_spatial: float = 2.0,
    sigma_range: float = 0.03,
) -> FloatArray:
    """
    Edge-preserving bilateral filter over a ``(2r+1)²`` window.

    Invalid pixels neither receive nor contribute values, so holes are never filled.
    """
    valid = depth > 0
    h, w = depth.shape
    padded = np.pad(np.where(valid, depth, 0.0), radius)

    num = np.zeros_like(depth)
    den = np.zeros_like(depth)
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            nb = padded[radius + dy : radius + dy + h, radius + dx : radius + dx + w]
            spatial = math.exp(-(dx * dx + dy * dy) / (2.0 * sigma_spatial**2))
            weight = spatial * np.exp(-((nb - depth) ** 2) / (2.0 * sigma_range**2))
            weight = np.where(nb > 0, weight, 0.0)
            num += weight * nb
            den += weight

    out = np.zeros_like(depth)
    np.divide(num, den, out=out, where=valid & (den > 0))
    return out


def compute_vertex_map(depth: FloatArray, k: Intrinsics) -> FloatArray:
    """
    Per-pixel back-projection ``D(u)·K⁻¹[u, 1]``; zero where depth is invalid.
    """
    valid = depth > 0
    d = np.where(valid, depth, 0.0)
    x, y = k.pixel_grid()
    return np.stack([(x - k.cx) / k.fx * d, (y - k.cy) / k.fy * d, d], axis=-1)


def compute_normal_map(vertex_map: FloatArray) -> FloatArray:
    """
    ``normalize(∇x V × ∇y V)`` from central differences, flipped to face the
    camera.

    A pixel needs itself and its four direct neighbours valid; border pixels and
    degenerate (zero cross product) pixels come out as zero vectors.
    """
    h, w = vertex_map.shape[:2]
    normals = np.zeros_like(vertex_map)
    if h < 3 or w < 3:
        return normals

    valid = vertex_map[..., 2] > 0
    ok = (
        valid[1:-1, 1:-1]
        & valid[1:-1, 2:]
        & valid[1:-1, :-2]
        & valid[2:, 1:-1]
        & valid[:-2, 1:-1]
    )

    dx = vertex_map[1:-1, 2:] - vertex_map[1:-1, :-2]
    dy = vertex_map[2:, 1:-1] - vertex_map[:-2, 1:-1]
    cross = np.cross(dx, dy)
    norm = np.linalg.norm(cross, axis=-1)
    ok &= norm > 1e-15

    n = np.zeros_like(cross)
    n[ok] = cross[ok] / norm[ok][:, None]

    facing = np.sum(n * vertex_map[1:-1, 1:-1], axis=-1)
    n[facing > 0] *= -1.0

    normals[1:-1, 1:-1] = n
    return normals


def _blocks(image: FloatArray) -> FloatArray:
    h2, w2 = image.shape[0] // 2, image.shape[1] // 2
    cropped = image[: 2 * h2, : 2 * w2]
    return cropped.reshape(h2, 2, w2, 2).transpose(0, 2, 1, 3).reshape(h2, w2, 4)


def downsample_depth(depth: FloatArray) -> FloatArray:
    """
    Lower median of the valid samples of each 2×2 block.  Always an actual sample,
    never an average, so depth edges are not smeared.
    """
    blocks = _blocks(depth)
    valid = blocks > 0
    count = valid.sum(axis=-1)
    ordered = np.sort(np.where(valid, blocks, np.inf), axis=-1)
    index = np.maximum(count - 1, 0) // 2
    out = np.take_along_axis(ordered, index[..., None], axis=-1)[..., 0]
    return np.where(count > 0, out, 0.0)


def downsample_intensity(intensity: FloatArray) -> FloatArray:
    return typing.cast(FloatArray, _blocks(intensity).mean(axis=-1))


def _level(
    k: Intrinsics, intensity: FloatArray, depth: FloatArray
) -> PyramidLevel:
    vertex_map = compute_vertex_map(depth, k)
    normal_map = compute_normal_map(vertex_map)
    valid = (depth > 0) & np.any(normal_map != 0, axis=-1)
    return PyramidLevel(k, intensity, depth, vertex_map, normal_map, valid)


def build_pyramid(frame: ProcessedFrame, levels: int) -> tuple[PyramidLevel, ...]:
    """
    Coarse-to-fine pyramid; level 0 wraps the frame's own maps.

    Raises:
        ConfigurationError: if ``levels`` < 1 or exceeds ``log2`` of the smaller image
            side.
    """
    h, w = frame.depth.shape
    if levels < 1 or levels > math.log2(min(h, w)):
        raise ConfigurationError(
            f"Cannot build {levels} pyramid levels for a {w}x{h} frame"
        )

    pyramid = [
        PyramidLevel(
            frame.intrinsics,
            frame.intensity,
            frame.depth,
            frame.vertex_map,
            frame.normal_map,
            frame.valid_mask,
        )
    ]
    for level in range(1, levels):
        prev = pyramid[-1]
        pyramid.append(
            _level(
                frame.intrinsics.scaled(level),
                downsample_intensity(prev.intensity),
                downsample_depth(prev.depth),
            )
        )

    return tuple(pyramid)


def transform_to_world(
    frame: ProcessedFrame, pose: Pose
) -> tuple[FloatArray, FloatArray]:
    """
    Returns ``(V^w, N^w)``; invalid pixels stay zero.
    """
    v_valid = frame.vertex_map[..., 2] > 0
    n_valid = frame.normal_valid
    world = pose.transform_points(frame.vertex_map)
    vertices = np.where(v_valid[..., None], world, 0.0)
    normals = np.where(n_valid[..., None], pose.rotate(frame.normal_map), 0.0)
    return vertices, normals


def process_frame(
    raw: RawFrame, k: Intrinsics, config: typing.Optional[FrameConfig] = None
) -> ProcessedFrame:
    """
    Filters depth and derives vertex/normal maps and the image pyramid.
    """
    config = config or FrameConfig()
    if raw.shape != k.shape:
        raise ConfigurationError(
            f"Frame {raw.frame_id} is {raw.shape[1]}x{raw.shape[0]}, "
            f"intrinsics expect {k.width}x{k.height}"
        )

    depth = filter_depth(
        raw.depth, config.bilateral_radius, config.sigma_spatial, config.sigma_range
    )
    level = _level(k, to_intensity(raw.color), depth)
    frame = ProcessedFrame(
        raw=raw,
        intrinsics=k,
        depth=depth,
        intensity=level.intensity,
        vertex_map=level.vertex_map,
        normal_map=level.normal_map,
        valid_mask=level.valid_mask,
    )
    logger.debug(
        "Frame %d: %d valid pixels of %d",
        raw.frame_id,
        int(frame.valid_mask.sum()),
        frame.valid_mask.size,
    )
    pyramid = build_pyramid(frame, config.pyramid_levels)
    return dataclasses.replace(frame, pyramid=pyramid)
