__all__ = [
    "AdaptiveScale",
    "FixedScale",
    "ScaleInitializer",
    "Surfel",
    "SurfelArrays",
    "SurfelMap",
    "adaptive_scale",
    "extract_confident",
    "initialize_surfels",
    "rotation_from_normal",
    "scale_initializers",
    "select_surface",
    "select_visible",
]

import dataclasses
import logging
import typing
from abc import ABC, abstractmethod as abstract_method

import numpy as np
from numpy.typing import ArrayLike, NDArray

from . import sh
from .config import SurfelConfig
from .errors import InvalidDepthError
from .frame_pipeline import ProcessedFrame
from .geometry import (
    FloatArray,
    Intrinsics,
    Pose,
    rotation_from_normal,
    rotation_matrices,
)
from .noise import NoiseParams, noise_covariance
from .registry import AutoRegister, ComponentRegistry

if typing.TYPE_CHECKING:
    from .rasterizer import RenderOutput

logger = logging.getLogger(__name__)

IntArray = NDArray[np.int64]

# Cell coordinates are packed into one int64 key, 21 bits per axis.
_CELL_BITS = 21
_CELL_OFFSET = 1 << (_CELL_BITS - 1)


@dataclasses.dataclass(frozen=True, eq=False)
class Surfel:
    """
    A single Gaussian surfel, copied out of a :py:class:`SurfelArrays` row.
    """

    p: FloatArray
    s: FloatArray
    r: FloatArray
    o: float
    c: FloatArray
    lam: FloatArray
    eta: FloatArray
    created_frame: int
    last_observed: int

    @property
    def normal(self) -> FloatArray:
        return typing.cast(FloatArray, rotation_matrices(self.r)[:, 2])

    @property
    def confidence(self) -> float:
        return float(self.lam.sum())


@dataclasses.dataclass(eq=False)
class SurfelArrays:
    """
    Struct-of-arrays storage for a batch of surfels; row ``i`` is surfel ``i``.

    Rotations are unit quaternions ``(x, y, z, w)`` whose local z-axis is the disk
    normal; ``colors`` holds SH coefficients ``(N, k, 3)``; ``lam`` and ``eta`` are the
    diagonal information matrix and information vector over ``[p; n]``.
    """

    positions: FloatArray
    scales: FloatArray
    rotations: FloatArray
    opacities: FloatArray
    colors: FloatArray
    lam: FloatArray
    eta: FloatArray
    created: IntArray
    last_observed: IntArray

    @classmethod
    def empty(cls, sh_coefficients: int = 4) -> "SurfelArrays":
        return cls(
            positions=np.zeros((0, 3)),
            scales=np.zeros((0, 2)),
            rotations=np.zeros((0, 4)),
            opacities=np.zeros(0),
            colors=np.zeros((0, sh_coefficients, 3)),
            lam=np.zeros((0, 6)),
            eta=np.zeros((0, 6)),
            created=np.zeros(0, dtype=np.int64),
            last_observed=np.zeros(0, dtype=np.int64),
        )

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def sh_coefficients(self) -> int:
        return int(self.colors.shape[1])

    @property
    def rotation_matrices(self) -> FloatArray:
        return rotation_matrices(self.rotations)

    @property
    def normals(self) -> FloatArray:
        return self.rotation_matrices[:, :, 2]

    @property
    def confidence(self) -> FloatArray:
        """
        ``tr(Λ)`` per surfel.
        """
        return typing.cast(FloatArray, self.lam.sum(axis=1))

    def take(self, index: ArrayLike) -> "SurfelArrays":
        idx = np.asarray(index)
        return SurfelArrays(
            **{
                f.name: getattr(self, f.name)[idx].copy()
                for f in dataclasses.fields(self)
            }
        )

    def copy(self) -> "SurfelArrays":
        return self.take(np.arange(len(self)))

    def concat(self, other: "SurfelArrays") -> "SurfelArrays":
        return SurfelArrays(
            **{
                f.name: np.concatenate([getattr(self, f.name), getattr(other, f.name)])
                for f in dataclasses.fields(self)
            }
        )

    def surfel(self, index: int) -> Surfel:
        return Surfel(
            p=self.positions[index].copy(),
            s=self.scales[index].copy(),
            r=self.rotations[index].copy(),
            o=float(self.opacities[index]),
            c=self.colors[index].copy(),
            lam=self.lam[index].copy(),
            eta=self.eta[index].copy(),
            created_frame=int(self.created[index]),
            last_observed=int(self.last_observed[index]),
        )


class SurfelMap:
    """
    The global surfel collection plus a uniform-grid spatial index.

    Surfel ids are row indices and never change (surfels are never deleted).  The
    single mapping thread mutates :py:attr:`arrays` in place and calls
    :py:meth:`reindex` after each batch; other threads work on :py:meth:`snapshot`
    copies.
    """

    def __init__(self, sh_order: int = 1, cell_size: float = 0.1) -> None:
        self.cell_size = cell_size
        self.arrays = SurfelArrays.empty(sh.coefficient_count(sh_order))

        self._keys: IntArray = np.zeros(0, dtype=np.int64)
        self._order: IntArray = np.zeros(0, dtype=np.int64)

    @classmethod
    def from_arrays(cls, arrays: SurfelArrays, cell_size: float = 0.1) -> "SurfelMap":
        result = cls(cell_size=cell_size)
        result.arrays = arrays
        result.reindex()
        return result

    def __len__(self) -> int:
        return len(self.arrays)

    def __repr__(self) -> str:
        name = type(self).__name__
        return f"{name}({len(self)} surfels, cell_size={self.cell_size!r})"

    @property
    def next_id(self) -> int:
        return len(self)

    def add(self, batch: SurfelArrays) -> IntArray:
        """
        Appends a batch and returns the ids assigned to it.
        """
        ids = np.arange(len(self), len(self) + len(batch), dtype=np.int64)
        if len(batch):
            self.arrays = self.arrays.concat(batch)
            self.reindex()
        return ids

    def surfel(self, surfel_id: int) -> Surfel:
        return self.arrays.surfel(surfel_id)

    def snapshot(self) -> SurfelArrays:
        """
        Deep copy, safe to hand to other threads.
        """
        return self.arrays.copy()

    def cell_of(self, points: ArrayLike) -> IntArray:
        return np.floor(np.asarray(points, dtype=np.float64) / self.cell_size).astype(
            np.int64
        )

    @staticmethod
    def _encode(cells: IntArray) -> IntArray:
        shifted = cells + _CELL_OFFSET
        return typing.cast(
            IntArray,
            (shifted[..., 0] << (2 * _CELL_BITS))
            | (shifted[..., 1] << _CELL_BITS)
            | shifted[..., 2],
        )

    def reindex(self) -> None:
        """
        Rebuilds the cell → ids index from the current positions.
        """
        keys = self._encode(self.cell_of(self.arrays.positions))
        self._order = np.argsort(keys, kind="stable")
        self._keys = keys[self._order]

    def query_cell(self, cell: ArrayLike) -> IntArray:
        """
        Ids of the surfels whose centre lies in ``cell`` (integer cell coordinates).
        """
        key = self._encode(np.asarray(cell, dtype=np.int64).reshape(1, 3))[0]
        lo, hi = np.searchsorted(self._keys, [key, key + 1])
        return np.sort(self._order[lo:hi])

    def occupied_cells(self) -> IntArray:
        """
        Distinct occupied cells, ``(M, 3)``.
        """
        if not len(self):
            return np.zeros((0, 3), dtype=np.int64)
        cells = self.cell_of(self.arrays.positions)
        return typing.cast(IntArray, np.unique(cells, axis=0))


def adaptive_scale(d: ArrayLike, k: Intrinsics, alpha_s: float = 2.0) -> FloatArray:
    """
    Depth-aware tangent scales ``[α_s·d/fx, α_s·d/fy]``: a fronto-parallel surfel
    spawned at depth ``d`` projects to a σ of ``α_s`` pixels.

    Raises:
        InvalidDepthError: if any depth is non-positive.
    """
    depth = np.asarray(d, dtype=np.float64)
    if np.any(~(depth > 0)):
        raise InvalidDepthError("adaptive_scale needs positive depths")

    return np.stack([alpha_s * depth / k.fx, alpha_s * depth / k.fy], axis=-1)


scale_initializers = ComponentRegistry["ScaleInitializer"](
    attr_name="scale_name", group="surfel_fusion.scale_initializers"
)


class ScaleInitializer(AutoRegister(scale_initializers), ABC):  # type: ignore
    """
    Chooses the initial tangent scales of newly spawned surfels.
    """

    scale_name: str

    def __init__(self, config: SurfelConfig) -> None:
        self.config = config

    @abstract_method
    def __call__(self, depth: FloatArray, k: Intrinsics) -> FloatArray:
        raise NotImplementedError()


class AdaptiveScale(ScaleInitializer):
    """
    Scale proportional to depth (footprint of ``alpha_s`` pixels).
    """

    scale_name = "adaptive"

    def __call__(self, depth: FloatArray, k: Intrinsics) -> FloatArray:
        return adaptive_scale(depth, k, self.config.alpha_s)


class FixedScale(ScaleInitializer):
    """
    Constant metric scale (``fixed_scale`` meters) regardless of depth.
    """

    scale_name = "fixed"

    def __call__(self, depth: FloatArray, k: Intrinsics) -> FloatArray:
        return np.full(depth.shape + (2,), self.config.fixed_scale)


def initialize_surfels(
    frame: ProcessedFrame,
    pose: Pose,
    render: "RenderOutput",
    config: SurfelConfig,
    noise: NoiseParams,
) -> SurfelArrays:
    """
    Spawns surfels where the map is missing or behind the observation.

    Every ``stride``-th valid pixel is a candidate; it spawns when the rendered
    accumulated opacity is below ``tau_o`` or the rendered depth lies more than
    ``tau_d`` behind the measured depth.
    """
    k = frame.intrinsics
    sampled = np.zeros(frame.depth.shape, dtype=bool)
    sampled[:: config.stride, :: config.stride] = True

    low_opacity = render.alpha_acc < config.tau_o
    in_front = render.depth_valid & (render.depth - frame.depth > config.tau_d)
    ys, xs = np.nonzero(sampled & frame.valid_mask & (low_opacity | in_front))

    n_coeff = sh.coefficient_count(config.sh_order)
    if not len(ys):
        return SurfelArrays.empty(n_coeff)

    depth = frame.depth[ys, xs]
    positions = pose.transform_points(frame.vertex_map[ys, xs])
    normals = pose.rotate(frame.normal_map[ys, xs])
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)

    colors = np.zeros((len(ys), n_coeff, 3))
    colors[:, 0, :] = sh.rgb_to_sh(frame.color[ys, xs])

    # The first observation is the prior.
    lam = 1.0 / noise_covariance(depth, noise)
    eta = lam * np.concatenate([positions, normals], axis=1)

    frame_ids = np.full(len(ys), frame.frame_id, dtype=np.int64)
    batch = SurfelArrays(
        positions=positions,
        scales=scale_initializers.get(config.scale_init, config)(depth, k),
        rotations=rotation_from_normal(normals),
        opacities=np.full(len(ys), config.o_init),
        colors=colors,
        lam=lam,
        eta=eta,
        created=frame_ids,
        last_observed=frame_ids.copy(),
    )
    logger.debug(
        "Frame %d: spawning %d surfels (%d low-opacity, %d in front)",
        frame.frame_id,
        len(batch),
        int((low_opacity[ys, xs]).sum()),
        int((in_front[ys, xs]).sum()),
    )
    return batch


def _camera_points(arrays: SurfelArrays, ids: IntArray, pose: Pose) -> FloatArray:
    return pose.inverse().transform_points(arrays.positions[ids])


def _pixels(k: Intrinsics, points: FloatArray) -> tuple[FloatArray, FloatArray]:
    z = np.where(points[:, 2] > 0, points[:, 2], 1.0)
    return k.fx * points[:, 0] / z + k.cx, k.fy * points[:, 1] / z + k.cy


def select_visible(arrays: SurfelArrays, pose: Pose, k: Intrinsics) -> IntArray:
    """
    Ids of surfels in front of the camera, projecting inside the image and facing
    the camera (``n · R_z < 0``, strictly).
    """
    ids = np.arange(len(arrays), dtype=np.int64)
    points = _camera_points(arrays, ids, pose)
    u, v = _pixels(k, points)

    inside = (u >= -0.5) & (u < k.width - 0.5) & (v >= -0.5) & (v < k.height - 0.5)
    facing = arrays.normals @ pose.rotation[:, 2] < 0
    return ids[(points[:, 2] > 0) & inside & facing]


def select_surface(
    arrays: SurfelArrays,
    visible: IntArray,
    render_depth: FloatArray,
    pose: Pose,
    k: Intrinsics,
    delta_s: float,
) -> IntArray:
    """
    Subset of ``visible`` whose camera-frame depth is within ``delta_s`` of the
    rendered depth at its (rounded) pixel.
    """
    if not len(visible):
        return visible

    points = _camera_points(arrays, visible, pose)
    u, v = _pixels(k, points)
    px = np.clip(np.rint(u).astype(np.int64), 0, k.width - 1)
    py = np.clip(np.rint(v).astype(np.int64), 0, k.height - 1)

    rendered = render_depth[py, px]
    keep = (rendered > 0) & (np.abs(points[:, 2] - rendered) < delta_s)
    return visible[keep]


def extract_confident(arrays: SurfelArrays, tau_conf: float) -> SurfelArrays:
    """
    Surfels with ``tr(Λ) >= tau_conf``.
    """
    return arrays.take(np.nonzero(arrays.confidence >= tau_conf)[0])
