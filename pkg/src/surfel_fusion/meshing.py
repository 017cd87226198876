"""
Voxel-masked TSDF fusion and marching-cubes surface extraction.

The volume is a sparse grid of ``8³`` voxel blocks allocated on first write.
Voxel ``i`` is centred at ``origin + i · voxel_size``.
"""

__all__ = [
    "BLOCK_SIZE",
    "OccupancyGrid",
    "TriangleMesh",
    "TsdfVolume",
    "build_occupancy",
    "integrate_depth",
    "marching_cubes",
    "mesh_from_map",
]

import dataclasses
import logging
import typing
from concurrent.futures import ThreadPoolExecutor

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy import ndimage
from skimage import measure

from .config import MeshingConfig
from .geometry import FloatArray, Intrinsics, Pose
from .rasterizer import RenderOptions, render
from .surfel_map import SurfelArrays, SurfelMap

logger = logging.getLogger(__name__)

BoolArray = NDArray[np.bool_]
IntArray = NDArray[np.int64]

BLOCK_SIZE = 8

_KEY_BITS = 21
_KEY_OFFSET = 1 << (_KEY_BITS - 1)
_KEY_MASK = (1 << _KEY_BITS) - 1

# The eight corners of a marching-cubes cell.
_CORNERS = [(i, j, k) for i in (0, 1) for j in (0, 1) for k in (0, 1)]


def _encode(voxels: IntArray) -> IntArray:
    v = voxels.astype(np.int64) + _KEY_OFFSET
    return typing.cast(
        IntArray, (v[:, 0] << (2 * _KEY_BITS)) | (v[:, 1] << _KEY_BITS) | v[:, 2]
    )


def _decode(keys: IntArray) -> IntArray:
    return np.stack(
        [
            (keys >> (2 * _KEY_BITS)) & _KEY_MASK,
            (keys >> _KEY_BITS) & _KEY_MASK,
            keys & _KEY_MASK,
        ],
        axis=1,
    ) - _KEY_OFFSET


@dataclasses.dataclass(eq=False)
class _Block:
    tsdf: FloatArray
    weight: FloatArray

    @classmethod
    def empty(cls) -> "_Block":
        shape = (BLOCK_SIZE,) * 3
        return cls(np.ones(shape), np.zeros(shape))


class TsdfVolume:
    """
    Truncated signed distance field on a sparse block grid.

    Stored values are normalised by the truncation distance, so ``|tsdf| <= 1``.
    Unobserved voxels read as ``tsdf = 1`` with zero weight.
    """

    def __init__(
        self,
        voxel_size: float = 0.01,
        truncation: float = 0.04,
        origin: ArrayLike = (0.0, 0.0, 0.0),
    ) -> None:
        self.voxel_size = float(voxel_size)
        self.truncation = float(truncation)
        self.origin = np.asarray(origin, dtype=np.float64)
        self.blocks: dict[tuple[int, int, int], _Block] = {}

    @classmethod
    def from_config(
        cls, config: MeshingConfig, origin: ArrayLike = (0.0, 0.0, 0.0)
    ) -> "TsdfVolume":
        return cls(config.voxel_size, config.truncation, origin)

    def __len__(self) -> int:
        return len(self.blocks)

    def voxel_of(self, points: ArrayLike) -> IntArray:
        p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        return np.floor((p - self.origin) / self.voxel_size + 0.5).astype(np.int64)

    def center_of(self, voxels: ArrayLike) -> FloatArray:
        v = np.asarray(voxels, dtype=np.float64).reshape(-1, 3)
        return typing.cast(FloatArray, self.origin + v * self.voxel_size)

    @property
    def dims(self) -> tuple[int, int, int]:
        """
        Voxel extent of the allocated blocks' bounding box.
        """
        if not self.blocks:
            return (0, 0, 0)
        keys = np.array(list(self.blocks))
        extent = (keys.max(axis=0) - keys.min(axis=0) + 1) * BLOCK_SIZE
        return typing.cast(tuple[int, int, int], tuple(int(e) for e in extent))

    def _grouped(
        self, voxels: IntArray
    ) -> typing.Iterator[tuple[tuple[int, int, int], IntArray, IntArray]]:
        """
        Yields ``(block key, row indices, local voxel coords)`` per touched block.
        """
        block = np.floor_divide(voxels, BLOCK_SIZE)
        local = voxels - block * BLOCK_SIZE
        keys, inverse = np.unique(block, axis=0, return_inverse=True)
        inverse = inverse.reshape(-1)
        order = np.argsort(inverse, kind="stable")
        bounds = np.searchsorted(inverse[order], np.arange(len(keys) + 1))
        for i, key in enumerate(keys):
            rows = order[bounds[i] : bounds[i + 1]]
            yield (int(key[0]), int(key[1]), int(key[2])), rows, local[rows]

    def gather(self, voxels: ArrayLike) -> tuple[FloatArray, FloatArray]:
        """
        Returns ``(tsdf, weight)`` for arbitrary voxel indices.
        """
        v = np.asarray(voxels, dtype=np.int64).reshape(-1, 3)
        tsdf = np.ones(len(v))
        weight = np.zeros(len(v))
        for key, rows, local in self._grouped(v):
            block = self.blocks.get(key)
            if block is None:
                continue
            x, y, z = local.T
            tsdf[rows] = block.tsdf[x, y, z]
            weight[rows] = block.weight[x, y, z]
        return tsdf, weight

    def set_voxels(self, voxels: ArrayLike, tsdf: ArrayLike, weight: ArrayLike) -> None:
        """
        Writes values directly, allocating blocks as needed.
        """
        v = np.asarray(voxels, dtype=np.int64).reshape(-1, 3)
        t = np.clip(np.broadcast_to(np.asarray(tsdf, dtype=np.float64), len(v)), -1, 1)
        w = np.broadcast_to(np.asarray(weight, dtype=np.float64), len(v))
        for key, rows, local in self._grouped(v):
            block = self.blocks.setdefault(key, _Block.empty())
            x, y, z = local.T
            block.tsdf[x, y, z] = t[rows]
            block.weight[x, y, z] = np.maximum(w[rows], 0.0)

    def observed(self) -> tuple[IntArray, FloatArray, FloatArray]:
        """
        Every voxel with positive weight as ``(voxels, tsdf, weight)``.
        """
        voxels, tsdf, weight = [], [], []
        for key, block in sorted(self.blocks.items()):
            idx = np.argwhere(block.weight > 0)
            if not len(idx):
                continue
            x, y, z = idx.T
            voxels.append(idx + np.array(key) * BLOCK_SIZE)
            tsdf.append(block.tsdf[x, y, z])
            weight.append(block.weight[x, y, z])
        if not voxels:
            return np.zeros((0, 3), dtype=np.int64), np.zeros(0), np.zeros(0)
        return np.concatenate(voxels), np.concatenate(tsdf), np.concatenate(weight)


@dataclasses.dataclass(frozen=True, eq=False)
class OccupancyGrid:
    """
    Occupied voxels on a volume's lattice, stored as sorted packed keys.
    """

    voxel_size: float
    origin: FloatArray
    dilation: int
    keys: IntArray

    def __len__(self) -> int:
        return len(self.keys)

    def voxels(self) -> IntArray:
        return _decode(self.keys)

    def contains(self, voxels: ArrayLike) -> BoolArray:
        v = np.asarray(voxels, dtype=np.int64).reshape(-1, 3)
        if not len(self.keys):
            return np.zeros(len(v), dtype=bool)
        keys = _encode(v)
        pos = np.minimum(np.searchsorted(self.keys, keys), len(self.keys) - 1)
        return typing.cast(BoolArray, self.keys[pos] == keys)


def build_occupancy(
    surfels: typing.Union[SurfelMap, SurfelArrays, ArrayLike],
    volume: TsdfVolume,
    dilation: int = 2,
) -> OccupancyGrid:
    """
    Marks every voxel of ``volume``'s lattice holding a surfel centre, then dilates
    by a ``(2r + 1)³`` cube.
    """
    if isinstance(surfels, SurfelMap):
        positions = surfels.arrays.positions
    elif isinstance(surfels, SurfelArrays):
        positions = surfels.positions
    else:
        positions = np.asarray(surfels, dtype=np.float64).reshape(-1, 3)

    def _grid(keys: IntArray) -> OccupancyGrid:
        return OccupancyGrid(volume.voxel_size, volume.origin.copy(), dilation, keys)

    if not len(positions):
        return _grid(np.zeros(0, dtype=np.int64))

    seeds = np.unique(volume.voxel_of(positions), axis=0)
    if dilation == 0:
        return _grid(np.sort(_encode(seeds)))

    lo = seeds.min(axis=0) - dilation
    dense = np.zeros(tuple(seeds.max(axis=0) + dilation - lo + 1), dtype=bool)
    dense[tuple((seeds - lo).T)] = True
    structure = np.ones((2 * dilation + 1,) * 3, dtype=bool)
    dense = ndimage.binary_dilation(dense, structure=structure)
    occupied = np.argwhere(dense) + lo
    logger.debug(
        "Occupancy: %d seed voxels, %d after dilation", len(seeds), len(occupied)
    )
    return _grid(np.sort(_encode(occupied)))


def integrate_depth(
    volume: TsdfVolume,
    depth: FloatArray,
    pose: Pose,
    k: Intrinsics,
    mask: typing.Optional[OccupancyGrid] = None,
    threads: int = 1,
) -> int:
    """
    Projective TSDF update with one unit-weight observation per voxel.

    Candidate voxels lie within the truncation band of some depth sample; each is
    projected into ``depth`` and updated with the ray distance to the surface, as
    long as that distance is at least ``-truncation``.  With a ``mask`` both the
    voxel and the observed surface point's voxel must be occupied.

    Returns:
        Number of updated voxels.
    """
    mu = volume.truncation
    valid = depth > 0
    if not np.any(valid):
        return 0

    rays = k.rays()[valid]
    norms = np.linalg.norm(rays, axis=1)
    d = depth[valid]
    offsets = np.arange(-mu, mu + 0.25 * volume.voxel_size, 0.5 * volume.voxel_size)
    z = d[:, None] + offsets[None, :] / norms[:, None]
    samples = rays[:, None, :] * np.where(z > 0, z, np.nan)[..., None]
    samples = samples.reshape(-1, 3)
    samples = pose.transform_points(samples[np.isfinite(samples[:, 2])])
    voxels = np.unique(volume.voxel_of(samples), axis=0)

    cam = pose.inverse().transform_points(volume.center_of(voxels))
    vz = cam[:, 2]
    front = vz > 0
    vzs = np.where(front, vz, 1.0)
    u = np.rint(k.fx * cam[:, 0] / vzs + k.cx).astype(np.int64)
    v = np.rint(k.fy * cam[:, 1] / vzs + k.cy).astype(np.int64)
    inside = front & (u >= 0) & (u < k.width) & (v >= 0) & (v < k.height)
    u = np.clip(u, 0, k.width - 1)
    v = np.clip(v, 0, k.height - 1)
    observed = np.where(inside, depth[v, u], 0.0)

    sdf = (observed - vz) * np.linalg.norm(cam, axis=1) / vzs
    update = inside & (observed > 0) & (sdf >= -mu)
    if mask is not None:
        surface = np.stack(
            [
                (u - k.cx) / k.fx * observed,
                (v - k.cy) / k.fy * observed,
                observed,
            ],
            axis=1,
        )
        update &= mask.contains(voxels)
        update &= mask.contains(volume.voxel_of(pose.transform_points(surface)))

    voxels = voxels[update]
    values = np.minimum(1.0, sdf[update] / mu)

    def _write(group: tuple[tuple[int, int, int], IntArray, IntArray]) -> None:
        key, rows, local = group
        block = volume.blocks[key]
        x, y, z = local.T
        w = block.weight[x, y, z]
        block.tsdf[x, y, z] = (w * block.tsdf[x, y, z] + values[rows]) / (w + 1.0)
        block.weight[x, y, z] = w + 1.0

    groups = list(volume._grouped(voxels))
    for key, _, _ in groups:
        volume.blocks.setdefault(key, _Block.empty())
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        list(pool.map(_write, groups))

    logger.debug("Integrated %d voxels over %d blocks", len(voxels), len(groups))
    return len(voxels)


@dataclasses.dataclass(frozen=True, eq=False)
class TriangleMesh:
    vertices: FloatArray
    faces: IntArray

    @classmethod
    def empty(cls) -> "TriangleMesh":
        return cls(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))

    def __len__(self) -> int:
        return len(self.faces)

    def edges(self) -> IntArray:
        """
        Unique undirected edges.
        """
        if not len(self.faces):
            return np.zeros((0, 2), dtype=np.int64)
        f = self.faces
        e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
        return typing.cast(IntArray, np.unique(np.sort(e, axis=1), axis=0))

    def euler_characteristic(self) -> int:
        used = np.unique(self.faces)
        return int(len(used) - len(self.edges()) + len(self.faces))

    def face_areas(self) -> FloatArray:
        a, b, c = (self.vertices[self.faces[:, i]] for i in range(3))
        area = 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)
        return typing.cast(FloatArray, area)


def _block_mesh(
    volume: TsdfVolume, key: tuple[int, int, int]
) -> typing.Optional[tuple[FloatArray, IntArray]]:
    base = np.array(key) * BLOCK_SIZE
    n = BLOCK_SIZE + 1
    grid = np.stack(np.meshgrid(*(np.arange(n),) * 3, indexing="ij"), axis=-1)
    tsdf, weight = volume.gather(grid.reshape(-1, 3) + base)
    tsdf = tsdf.reshape(n, n, n)
    observed = weight.reshape(n, n, n) > 0

    cells = np.ones((BLOCK_SIZE,) * 3, dtype=bool)
    for i, j, k in _CORNERS:
        cells &= observed[i : i + BLOCK_SIZE, j : j + BLOCK_SIZE, k : k + BLOCK_SIZE]
    if not np.any(cells):
        return None

    values = np.where(observed, tsdf, 1.0)
    corner_values = np.stack(
        [
            values[i : i + BLOCK_SIZE, j : j + BLOCK_SIZE, k : k + BLOCK_SIZE]
            for i, j, k in _CORNERS
        ]
    )
    crossing = (
        cells & (corner_values.min(axis=0) <= 0) & (corner_values.max(axis=0) > 0)
    )
    if not np.any(crossing):
        return None

    # skimage enables the cell whose upper corner carries the mask
    mask = np.zeros((n, n, n), dtype=bool)
    mask[1:, 1:, 1:] = cells
    try:
        verts, faces, _, _ = measure.marching_cubes(
            values, level=0.0, mask=mask, allow_degenerate=False
        )
    except (RuntimeError, ValueError):
        return None

    return volume.origin + (verts + base) * volume.voxel_size, faces.astype(np.int64)


def marching_cubes(volume: TsdfVolume, threads: int = 1) -> TriangleMesh:
    """
    Extracts the ``tsdf = 0`` isosurface.  Only cells whose eight corners all have
    positive weight are polygonised; per-block meshes are welded on shared edges.
    """
    keys = sorted(volume.blocks)
    if not keys:
        return TriangleMesh.empty()

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        parts = [p for p in pool.map(lambda key: _block_mesh(volume, key), keys) if p]
    if not parts:
        return TriangleMesh.empty()

    offsets = np.cumsum([0] + [len(v) for v, _ in parts[:-1]])
    vertices = np.concatenate([v for v, _ in parts])
    faces = np.concatenate([f + o for (_, f), o in zip(parts, offsets)])

    # Weld vertices that neighbouring blocks generated on the same edge.
    quantised = np.rint((vertices - volume.origin) / volume.voxel_size * 1e6).astype(
        np.int64
    )
    _, first, inverse = np.unique(
        quantised, axis=0, return_index=True, return_inverse=True
    )
    inverse = inverse.reshape(-1)
    faces = inverse[faces]
    keep = (
        (faces[:, 0] != faces[:, 1])
        & (faces[:, 1] != faces[:, 2])
        & (faces[:, 0] != faces[:, 2])
    )
    mesh = TriangleMesh(vertices[first], faces[keep])
    logger.info("Extracted mesh: %d vertices, %d faces", len(mesh.vertices), len(mesh))
    return mesh


def mesh_from_map(
    surfels: typing.Union[SurfelMap, SurfelArrays],
    poses: typing.Sequence[Pose],
    k: Intrinsics,
    config: typing.Optional[MeshingConfig] = None,
    depths: typing.Optional[typing.Sequence[FloatArray]] = None,
    render_options: typing.Optional[RenderOptions] = None,
    threads: int = 1,
) -> TriangleMesh:
    """
    Integrates depth at each pose (rendered from ``surfels`` unless ``depths`` is
    given) into a fresh volume and extracts its mesh.
    """
    config = config or MeshingConfig()
    volume = TsdfVolume.from_config(config)
    mask = None
    if config.use_mask:
        mask = build_occupancy(surfels, volume, config.dilation)

    for i, pose in enumerate(poses):
        if depths is not None:
            depth = depths[i]
        else:
            depth = render(surfels, pose, k, render_options).depth
        integrate_depth(volume, depth, pose, k, mask, threads)

    return marching_cubes(volume, threads)
