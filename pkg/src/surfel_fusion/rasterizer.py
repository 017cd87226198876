"""
Forward splatting of Gaussian surfels into color, depth, normal and opacity maps.

Every surfel is a planar disk.  A pixel's weight is the unnormalised Gaussian of
the point where the pixel ray meets the disk plane, expressed in units of the two
tangent scales; contributors are composited front to back along each ray.
"""

__all__ = [
    "Contributors",
    "PARALLEL_EPS",
    "RenderOptions",
    "RenderOutput",
    "SplatFootprint",
    "project_surfel",
    "project_surfels",
    "render",
    "render_tiled",
    "intersect_rays",
    "splat_weight",
]

import dataclasses
import logging
import typing
from concurrent.futures import ThreadPoolExecutor

import numpy as np
from numpy.typing import ArrayLike, NDArray

from . import sh
from .config import RasterizerConfig
from .errors import ConfigurationError
from .geometry import FloatArray, Intrinsics, Pose, rotation_matrices
from .surfel_map import Surfel, SurfelArrays, SurfelMap

logger = logging.getLogger(__name__)

IntArray = NDArray[np.int64]
BoolArray = NDArray[np.bool_]

# Gaussian support is cut at 3σ.
CUTOFF_SQ = 9.0
PARALLEL_EPS = 1e-12


@dataclasses.dataclass(frozen=True)
class RenderOptions:
    tile_size: int = 32
    near_plane: float = 0.01
    alpha_max: float = 0.999
    t_min: float = 1e-4
    eps_px: float = 1e-3
    keep_contributors: bool = False

    @classmethod
    def from_config(
        cls, config: RasterizerConfig, keep_contributors: bool = False
    ) -> "RenderOptions":
        return cls(
            tile_size=config.tile_size,
            near_plane=config.near_plane,
            alpha_max=config.alpha_max,
            t_min=config.t_min,
            eps_px=config.eps_px,
            keep_contributors=keep_contributors,
        )


@dataclasses.dataclass(frozen=True, eq=False)
class SplatFootprint:
    """
    Screen-space footprints of the surfels that survived culling, one row each.

    ``axes[i]`` holds the camera-frame tangent axes and normal as columns
    ``[t_u t_v n']``; ``bbox[i]`` is the inclusive pixel box ``(x0, y0, x1, y1)``
    covering the 3σ ellipse, clipped to the image.
    """

    ids: IntArray
    center: FloatArray
    axes: FloatArray
    scales: FloatArray
    opacity: FloatArray
    mean: FloatArray
    bbox: IntArray
    colors: FloatArray
    colors_raw: FloatArray
    view_dirs: FloatArray
    view_dist: FloatArray

    def __len__(self) -> int:
        return len(self.ids)

    def take(self, index: ArrayLike) -> "SplatFootprint":
        idx = np.asarray(index)
        return SplatFootprint(
            **{f.name: getattr(self, f.name)[idx] for f in dataclasses.fields(self)}
        )


@dataclasses.dataclass(frozen=True, eq=False)
class Contributors:
    """
    Every composited fragment, in pixel-major, front-to-back order.

    ``pixel`` is the flat index ``y·W + x``; ``footprint`` indexes the render's
    :py:class:`SplatFootprint`; ``transmittance`` is ``T`` before the fragment.
    """

    pixel: IntArray
    footprint: IntArray
    rank: IntArray
    alpha: FloatArray
    transmittance: FloatArray
    weight: FloatArray
    depth: FloatArray

    def __len__(self) -> int:
        return len(self.pixel)


@dataclasses.dataclass(frozen=True, eq=False)
class RenderOutput:
    """
    Composited maps for one view.  ``normal`` is in the camera frame; ``depth`` and
    ``normal`` are zero wherever ``valid`` is false.  ``covered`` marks pixels whose
    accumulated opacity reaches ``eps_px``.
    """

    color: FloatArray
    depth: FloatArray
    normal: FloatArray
    alpha_acc: FloatArray
    covered: BoolArray
    valid: BoolArray
    normal_sum: FloatArray
    pose: Pose
    intrinsics: Intrinsics
    footprints: SplatFootprint
    contributors: typing.Optional[Contributors] = None

    @property
    def depth_valid(self) -> BoolArray:
        return self.valid

    @property
    def transmittance(self) -> FloatArray:
        return 1.0 - self.alpha_acc

    @property
    def contributor_surfels(self) -> IntArray:
        if self.contributors is None:
            return np.zeros(0, dtype=np.int64)
        return self.footprints.ids[self.contributors.footprint]


def _as_arrays(surfels: typing.Union[SurfelMap, SurfelArrays]) -> SurfelArrays:
    return surfels.arrays if isinstance(surfels, SurfelMap) else surfels


def project_surfels(
    surfels: typing.Union[SurfelMap, SurfelArrays],
    pose: Pose,
    k: Intrinsics,
    near_plane: float = 0.01,
) -> SplatFootprint:
    """
    Projects all surfels, dropping those behind the near plane, back-facing, or
    whose 3σ footprint misses the image.

    The box comes from the dual conic ``C* = M·diag(1, 1, −1)·Mᵀ`` of the 3σ
    ellipse, ``M = K·[3s_u·t_u, 3s_v·t_v, p']``.
    """
    arrays = _as_arrays(surfels)
    world_to_camera = pose.inverse()
    r_wc = world_to_camera.rotation

    center = world_to_camera.transform_points(arrays.positions)
    axes = np.einsum("ij,njk->nik", r_wc, rotation_matrices(arrays.rotations))
    keep = (center[:, 2] > near_plane) & (axes[:, 2, 2] < 0)

    ids = np.nonzero(keep)[0].astype(np.int64)
    center, axes = center[keep], axes[keep]
    scales = arrays.scales[keep]

    m = np.stack(
        [
            3.0 * scales[:, :1] * axes[:, :, 0],
            3.0 * scales[:, 1:] * axes[:, :, 1],
            center,
        ],
        axis=-1,
    )
    m = np.einsum("ij,njk->nik", k.matrix, m)
    dual = np.einsum("nij,j,nkj->nik", m, np.array([1.0, 1.0, -1.0]), m)

    c22 = dual[:, 2, 2]
    proper = c22 < 0
    c22 = np.where(proper, c22, -1.0)
    mid_x = dual[:, 0, 2] / c22
    mid_y = dual[:, 1, 2] / c22
    half_x = np.sqrt(np.maximum(dual[:, 0, 2] ** 2 - dual[:, 0, 0] * c22, 0.0)) / -c22
    half_y = np.sqrt(np.maximum(dual[:, 1, 2] ** 2 - dual[:, 1, 1] * c22, 0.0)) / -c22

    bbox = np.stack(
        [
            np.ceil(mid_x - half_x),
            np.ceil(mid_y - half_y),
            np.floor(mid_x + half_x),
            np.floor(mid_y + half_y),
        ],
        axis=-1,
    )
    bbox = np.clip(
        bbox, -1, np.array([k.width, k.height, k.width, k.height])
    ).astype(np.int64)
    bbox[:, :2] = np.maximum(bbox[:, :2], 0)
    bbox[:, 2] = np.minimum(bbox[:, 2], k.width - 1)
    bbox[:, 3] = np.minimum(bbox[:, 3], k.height - 1)
    inside = proper & (bbox[:, 0] <= bbox[:, 2]) & (bbox[:, 1] <= bbox[:, 3])

    ids, center, axes, scales, bbox = (
        ids[inside],
        center[inside],
        axes[inside],
        scales[inside],
        bbox[inside],
    )

    offset = arrays.positions[ids] - pose.translation
    view_dist = np.linalg.norm(offset, axis=1)
    view_dirs = offset / np.where(view_dist > 0, view_dist, 1.0)[:, None]
    colors, colors_raw = sh.evaluate(arrays.colors[ids], view_dirs)

    z = center[:, 2]
    mean = np.stack(
        [k.fx * center[:, 0] / z + k.cx, k.fy * center[:, 1] / z + k.cy], axis=-1
    )
    return SplatFootprint(
        ids=ids,
        center=center,
        axes=axes,
        scales=scales,
        opacity=arrays.opacities[ids],
        mean=mean,
        bbox=bbox,
        colors=colors,
        colors_raw=colors_raw,
        view_dirs=view_dirs,
        view_dist=view_dist,
    )


def project_surfel(
    surfel: Surfel, pose: Pose, k: Intrinsics, near_plane: float = 0.01
) -> typing.Optional[SplatFootprint]:
    """
    Footprint of a single surfel, or ``None`` if it is culled.
    """
    arrays = SurfelArrays(
        positions=surfel.p.reshape(1, 3),
        scales=surfel.s.reshape(1, 2),
        rotations=surfel.r.reshape(1, 4),
        opacities=np.array([surfel.o]),
        colors=surfel.c.reshape(1, -1, 3),
        lam=surfel.lam.reshape(1, 6),
        eta=surfel.eta.reshape(1, 6),
        created=np.array([surfel.created_frame], dtype=np.int64),
        last_observed=np.array([surfel.last_observed], dtype=np.int64),
    )
    footprint = project_surfels(arrays, pose, k, near_plane)
    return footprint if len(footprint) else None


@dataclasses.dataclass(frozen=True, eq=False)
class _Fragments:
    footprint: IntArray
    x: IntArray
    y: IntArray
    weight: FloatArray
    depth: FloatArray


def intersect_rays(
    fp: SplatFootprint, index: IntArray, x: FloatArray, y: FloatArray, k: Intrinsics
) -> tuple[FloatArray, FloatArray, FloatArray, FloatArray]:
    """
    Ray/disk-plane intersection for fragments.

    Returns:
        ``(t, a, b, den)``: ray depth, tangent coordinates in scale units and
        ``n'·r``.
    """
    rays = np.stack(
        [(x - k.cx) / k.fx, (y - k.cy) / k.fy, np.ones_like(x, dtype=np.float64)],
        axis=-1,
    )
    center = fp.center[index]
    axes = fp.axes[index]
    normal = axes[:, :, 2]

    den = np.sum(normal * rays, axis=1)
    safe = np.where(np.abs(den) < PARALLEL_EPS, 1.0, den)
    t = np.sum(normal * center, axis=1) / safe
    delta = t[:, None] * rays - center
    a = np.sum(delta * axes[:, :, 0], axis=1) / fp.scales[index, 0]
    b = np.sum(delta * axes[:, :, 1], axis=1) / fp.scales[index, 1]
    return t, a, b, den


def _gaussian(
    t: FloatArray, a: FloatArray, b: FloatArray, den: FloatArray, near_plane: float
) -> FloatArray:
    rho_sq = a * a + b * b
    usable = (np.abs(den) >= PARALLEL_EPS) & (t > near_plane) & (rho_sq <= CUTOFF_SQ)
    return np.where(usable, np.exp(-0.5 * np.where(usable, rho_sq, 0.0)), 0.0)


def splat_weight(
    footprint: SplatFootprint,
    u: ArrayLike,
    k: Intrinsics,
    index: int = 0,
    near_plane: float = 0.01,
) -> tuple[FloatArray, FloatArray]:
    """
    Gaussian weight and ray depth of footprint row ``index`` at pixels ``u``
    (``(..., 2)``, ``(x, y)`` order).

    A ray parallel to the disk plane has weight 0.
    """
    uv = np.asarray(u, dtype=np.float64)
    shape = uv.shape[:-1]
    flat = uv.reshape(-1, 2)
    rows = np.full(len(flat), index, dtype=np.int64)
    t, a, b, den = intersect_rays(footprint, rows, flat[:, 0], flat[:, 1], k)
    weight = _gaussian(t, a, b, den, near_plane)
    return weight.reshape(shape), t.reshape(shape)


def _fragments(
    fp: SplatFootprint,
    region: tuple[int, int, int, int],
    k: Intrinsics,
    near_plane: float,
) -> _Fragments:
    rx0, ry0, rx1, ry1 = region
    x0 = np.maximum(fp.bbox[:, 0], rx0)
    y0 = np.maximum(fp.bbox[:, 1], ry0)
    x1 = np.minimum(fp.bbox[:, 2], rx1)
    y1 = np.minimum(fp.bbox[:, 3], ry1)
    w = np.maximum(x1 - x0 + 1, 0)
    h = np.maximum(y1 - y0 + 1, 0)

    counts = w * h
    index = np.repeat(np.arange(len(fp), dtype=np.int64), counts)
    offsets = np.arange(len(index), dtype=np.int64) - np.repeat(
        np.cumsum(counts) - counts, counts
    )
    xs = x0[index] + offsets % np.maximum(w[index], 1)
    ys = y0[index] + offsets // np.maximum(w[index], 1)

    t, a, b, den = intersect_rays(
        fp, index, xs.astype(np.float64), ys.astype(np.float64), k
    )
    weight = _gaussian(t, a, b, den, near_plane)
    keep = weight > 0
    return _Fragments(index[keep], xs[keep], ys[keep], weight[keep], t[keep])


@dataclasses.dataclass(frozen=True, eq=False)
class _Composite:
    color: FloatArray
    depth_sum: FloatArray
    normal_sum: FloatArray
    transmittance: FloatArray
    contributors: Contributors


def _accumulate(pixel: IntArray, values: FloatArray, n_pixels: int) -> FloatArray:
    # bincount returns integers for an empty index array, weights or not
    total = np.bincount(pixel, values, n_pixels)
    return total.astype(np.float64, copy=False)


def _composite(
    fp: SplatFootprint,
    region: tuple[int, int, int, int],
    k: Intrinsics,
    options: RenderOptions,
) -> _Composite:
    """
    Front-to-back compositing over an inclusive pixel region.
    """
    rx0, ry0, rx1, ry1 = region
    width = rx1 - rx0 + 1
    n_pixels = width * (ry1 - ry0 + 1)
    frags = _fragments(fp, region, k, options.near_plane)

    pixel = (frags.y - ry0) * width + (frags.x - rx0)
    order = np.lexsort((fp.ids[frags.footprint], frags.depth, pixel))
    pixel = pixel[order]
    footprint = frags.footprint[order]
    weight = frags.weight[order]
    depth = frags.depth[order]
    alpha = np.minimum(weight * fp.opacity[footprint], options.alpha_max)

    n = len(pixel)
    positions = np.arange(n, dtype=np.int64)
    starts = np.ones(n, dtype=bool)
    starts[1:] = pixel[1:] != pixel[:-1]
    rank = positions - np.maximum.accumulate(np.where(starts, positions, 0))

    transmittance = np.ones(n_pixels)
    before = np.zeros(n)
    included = np.zeros(n, dtype=bool)
    by_rank = np.argsort(rank, kind="stable")
    bounds = np.concatenate([[0], np.cumsum(np.bincount(rank))]) if n else np.zeros(1)
    for r in range(len(bounds) - 1):
        sel = by_rank[int(bounds[r]) : int(bounds[r + 1])]
        pix = pixel[sel]
        t_prev = transmittance[pix]
        alive = t_prev >= options.t_min
        before[sel] = t_prev
        included[sel] = alive
        transmittance[pix[alive]] = t_prev[alive] * (1.0 - alpha[sel][alive])

    pixel, footprint, rank = pixel[included], footprint[included], rank[included]
    alpha, weight, depth = alpha[included], weight[included], depth[included]
    before = before[included]
    contribution = before * alpha

    color = np.stack(
        [
            _accumulate(pixel, contribution * fp.colors[footprint, c], n_pixels)
            for c in range(3)
        ],
        axis=-1,
    )
    normals = fp.axes[footprint, :, 2]
    normal_sum = np.stack(
        [_accumulate(pixel, contribution * normals[:, c], n_pixels) for c in range(3)],
        axis=-1,
    )
    depth_sum = _accumulate(pixel, contribution * depth, n_pixels)

    return _Composite(
        color=color,
        depth_sum=depth_sum,
        normal_sum=normal_sum,
        transmittance=transmittance,
        contributors=Contributors(
            pixel=pixel,
            footprint=footprint,
            rank=rank,
            alpha=alpha,
            transmittance=before,
            weight=weight,
            depth=depth,
        ),
    )


def _resolve(
    depth_sum: FloatArray, normal_sum: FloatArray, alpha_acc: FloatArray, eps_px: float
) -> tuple[FloatArray, FloatArray, BoolArray]:
    norm = np.linalg.norm(normal_sum, axis=-1)
    valid = (alpha_acc >= eps_px) & (depth_sum > 0) & (norm > 0)
    depth = np.zeros(depth_sum.shape)
    np.divide(depth_sum, alpha_acc, out=depth, where=valid)
    normal = np.zeros(normal_sum.shape)
    np.divide(normal_sum, norm[..., None], out=normal, where=valid[..., None])
    return depth, normal, valid


def _check_options(options: RenderOptions) -> None:
    if options.tile_size < 8:
        raise ConfigurationError(f"Tile size must be >= 8, got {options.tile_size}")


def render(
    surfels: typing.Union[SurfelMap, SurfelArrays],
    pose: Pose,
    k: Intrinsics,
    options: typing.Optional[RenderOptions] = None,
) -> RenderOutput:
    """
    Renders ``surfels`` from camera-to-world ``pose`` in a single pass.
    """
    options = options or RenderOptions()
    _check_options(options)
    fp = project_surfels(surfels, pose, k, options.near_plane)
    out = _composite(fp, (0, 0, k.width - 1, k.height - 1), k, options)

    shape = k.shape
    alpha_acc = 1.0 - out.transmittance.reshape(shape)
    depth_sum = out.depth_sum.reshape(shape)
    normal_sum = out.normal_sum.reshape(shape + (3,))
    depth, normal, valid = _resolve(depth_sum, normal_sum, alpha_acc, options.eps_px)
    return RenderOutput(
        color=out.color.reshape(shape + (3,)),
        depth=depth,
        normal=normal,
        alpha_acc=alpha_acc,
        covered=alpha_acc >= options.eps_px,
        valid=valid,
        normal_sum=normal_sum,
        pose=pose,
        intrinsics=k,
        footprints=fp,
        contributors=out.contributors if options.keep_contributors else None,
    )


def render_tiled(
    surfels: typing.Union[SurfelMap, SurfelArrays],
    pose: Pose,
    k: Intrinsics,
    options: typing.Optional[RenderOptions] = None,
    tile_size: typing.Optional[int] = None,
    threads: int = 1,
) -> RenderOutput:
    """
    Same output as :py:func:`render`, bit for bit, with the image split into square
    tiles composited on a thread pool.  Contributors are not kept.
    """
    options = options or RenderOptions()
    if tile_size is not None:
        options = dataclasses.replace(options, tile_size=tile_size)
    _check_options(options)

    fp = project_surfels(surfels, pose, k, options.near_plane)
    h, w = k.shape
    size = options.tile_size

    color = np.zeros((h, w, 3))
    depth_sum = np.zeros((h, w))
    normal_sum = np.zeros((h, w, 3))
    transmittance = np.ones((h, w))

    regions = [
        (x, y, min(x + size, w) - 1, min(y + size, h) - 1)
        for y in range(0, h, size)
        for x in range(0, w, size)
    ]

    def _tile(region: tuple[int, int, int, int]) -> None:
        x0, y0, x1, y1 = region
        touching = np.nonzero(
            (fp.bbox[:, 0] <= x1)
            & (fp.bbox[:, 2] >= x0)
            & (fp.bbox[:, 1] <= y1)
            & (fp.bbox[:, 3] >= y0)
        )[0]
        out = _composite(fp.take(touching), region, k, options)
        tile_shape = (y1 - y0 + 1, x1 - x0 + 1)
        color[y0 : y1 + 1, x0 : x1 + 1] = out.color.reshape(tile_shape + (3,))
        depth_sum[y0 : y1 + 1, x0 : x1 + 1] = out.depth_sum.reshape(tile_shape)
        normal_sum[y0 : y1 + 1, x0 : x1 + 1] = out.normal_sum.reshape(tile_shape + (3,))
        transmittance[y0 : y1 + 1, x0 : x1 + 1] = out.transmittance.reshape(tile_shape)

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        # list() re-raises worker exceptions.
        list(pool.map(_tile, regions))

    alpha_acc = 1.0 - transmittance
    depth, normal, valid = _resolve(depth_sum, normal_sum, alpha_acc, options.eps_px)
    logger.debug("Rendered %d footprints over %d tiles", len(fp), len(regions))
    return RenderOutput(
        color=color,
        depth=depth,
        normal=normal,
        alpha_acc=alpha_acc,
        covered=alpha_acc >= options.eps_px,
        valid=valid,
        normal_sum=normal_sum,
        pose=pose,
        intrinsics=k,
        footprints=fp,
    )
