__all__ = [
    "Anchors",
    "Gradients",
    "Keyframe",
    "KeyframeWindow",
    "LossWeights",
    "OptStats",
    "OptimizerState",
    "backward",
    "loss_depth",
    "loss_normal",
    "loss_photometric",
    "loss_reg",
    "optimize_batch",
    "total_loss",
]

import collections
import dataclasses
import logging
import math
import typing

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.spatial.transform import Rotation

from . import sh
from .config import OptimizerConfig
from .errors import BookkeepingError, ConfigurationError, EmptyDomainError
from .frame_pipeline import ProcessedFrame
from .geometry import FloatArray, Pose, rotation_matrices
from .rasterizer import RenderOptions, RenderOutput, intersect_rays, render
from .surfel_map import SurfelArrays, SurfelMap

logger = logging.getLogger(__name__)

IntArray = NDArray[np.int64]
BoolArray = NDArray[np.bool_]

# Opacities are kept strictly inside (0, 1) so the logit stays finite.
OPACITY_EPS = 1e-6


@dataclasses.dataclass(frozen=True)
class LossWeights:
    w_d: float = 0.5
    w_n: float = 0.1
    w_reg: float = 1.0
    w_reg_n: float = 0.1

    def __post_init__(self) -> None:
        for field in dataclasses.fields(self):
            value = getattr(self, field.name)
            if not (math.isfinite(value) and value >= 0):
                raise ConfigurationError(f"Loss weight {field.name} must be >= 0")

    @classmethod
    def from_config(cls, config: OptimizerConfig) -> "LossWeights":
        return cls(config.w_d, config.w_n, config.w_reg, config.w_reg_n)


class Anchors:
    """
    Per-surfel position and normal recorded at the last fusion (or at spawn), the
    targets of the geometric regularisation term.
    """

    def __init__(self) -> None:
        self.positions = np.zeros((0, 3))
        self.normals = np.zeros((0, 3))
        self.present = np.zeros(0, dtype=bool)

    def __len__(self) -> int:
        return int(self.present.sum())

    def __contains__(self, surfel_id: int) -> bool:
        return 0 <= surfel_id < len(self.present) and bool(self.present[surfel_id])

    def _grow(self, size: int) -> None:
        extra = size - len(self.present)
        if extra > 0:
            self.positions = np.concatenate([self.positions, np.zeros((extra, 3))])
            self.normals = np.concatenate([self.normals, np.zeros((extra, 3))])
            self.present = np.concatenate([self.present, np.zeros(extra, dtype=bool)])

    def update(self, ids: ArrayLike, positions: ArrayLike, normals: ArrayLike) -> None:
        idx = np.asarray(ids, dtype=np.int64)
        if not len(idx):
            return
        self._grow(int(idx.max()) + 1)
        self.positions[idx] = positions
        self.normals[idx] = normals
        self.present[idx] = True

    def update_from(self, arrays: SurfelArrays, ids: ArrayLike) -> None:
        idx = np.asarray(ids, dtype=np.int64)
        self.update(idx, arrays.positions[idx], arrays.normals[idx])

    def lookup(self, ids: ArrayLike) -> tuple[FloatArray, FloatArray]:
        """
        Raises:
            BookkeepingError: if any id has no anchor.
        """
        idx = np.asarray(ids, dtype=np.int64)
        known = (idx >= 0) & (idx < len(self.present))
        known[known] = self.present[idx[known]]
        if not np.all(known):
            missing = idx[~known][:10].tolist()
            raise BookkeepingError(f"Missing anchors for surfels {missing}")
        return self.positions[idx], self.normals[idx]


@dataclasses.dataclass(frozen=True, eq=False)
class Keyframe:
    frame: ProcessedFrame
    pose: Pose


class KeyframeWindow:
    """
    The most recent ``capacity`` keyframes plus the regularisation anchors.
    """

    def __init__(self, capacity: int = 8, anchors: typing.Optional[Anchors] = None):
        if capacity < 1:
            raise ConfigurationError("Keyframe window needs a capacity >= 1")
        self.capacity = capacity
        self.anchors = anchors or Anchors()
        self.keyframes: typing.Deque[Keyframe] = collections.deque(maxlen=capacity)

    def __len__(self) -> int:
        return len(self.keyframes)

    def __iter__(self) -> typing.Iterator[Keyframe]:
        return iter(self.keyframes)

    def push(self, frame: ProcessedFrame, pose: Pose) -> None:
        self.keyframes.append(Keyframe(frame, pose))

    def sample(self, rng: np.random.Generator) -> Keyframe:
        return self.keyframes[int(rng.integers(len(self.keyframes)))]


def _require_domain(mask: BoolArray, name: str) -> int:
    count = int(mask.sum())
    if not count:
        raise EmptyDomainError(f"No valid pixels for the {name} loss")
    return count


def loss_photometric(render_out: RenderOutput, frame: ProcessedFrame) -> float:
    """
    Mean absolute color error over channels and covered pixels.
    """
    domain = render_out.covered
    count = _require_domain(domain, "photometric")
    diff = np.abs(render_out.color[domain] - frame.color[domain])
    return float(diff.sum() / (3 * count))


def loss_depth(render_out: RenderOutput, frame: ProcessedFrame) -> float:
    domain = frame.depth_valid & render_out.valid
    count = _require_domain(domain, "depth")
    return float(np.abs(render_out.depth[domain] - frame.depth[domain]).sum() / count)


def loss_normal(render_out: RenderOutput, frame: ProcessedFrame) -> float:
    """
    Mean ``1 − N·N̂`` over pixels with valid measured and rendered normals.
    """
    domain = frame.normal_valid & render_out.valid
    count = _require_domain(domain, "normal")
    cosine = np.sum(render_out.normal[domain] * frame.normal_map[domain], axis=-1)
    return float(np.abs(1.0 - cosine).sum() / count)


def loss_reg(
    arrays: SurfelArrays, ids: ArrayLike, anchors: Anchors, w_reg_n: float = 0.1
) -> float:
    """
    Mean over ``ids`` of ``‖p − p_f‖ + w_reg_n·|1 − n·n_f|``.

    Raises:
        BookkeepingError: if a surfel has no anchor.
        EmptyDomainError: if ``ids`` is empty.
    """
    idx = np.asarray(ids, dtype=np.int64)
    if not len(idx):
        raise EmptyDomainError("No surfels to regularise")
    p_f, n_f = anchors.lookup(idx)
    distance = np.linalg.norm(arrays.positions[idx] - p_f, axis=1)
    cosine = np.sum(arrays.normals[idx] * n_f, axis=1)
    return float(np.mean(distance + w_reg_n * np.abs(1.0 - cosine)))


def _regularised_ids(
    render_out: RenderOutput, ids: typing.Optional[ArrayLike]
) -> IntArray:
    if ids is None:
        return render_out.footprints.ids
    return np.asarray(ids, dtype=np.int64)


def total_loss(
    render_out: RenderOutput,
    frame: ProcessedFrame,
    arrays: SurfelArrays,
    anchors: Anchors,
    weights: LossWeights,
    ids: typing.Optional[ArrayLike] = None,
) -> float:
    """
    ``L_c + w_d·L_d + w_n·L_n + w_reg·L_reg``; terms with zero weight are skipped.

    ``ids`` selects the regularised surfels (default: every surfel projected into
    the view).
    """
    loss = loss_photometric(render_out, frame)
    if weights.w_d > 0:
        loss += weights.w_d * loss_depth(render_out, frame)
    if weights.w_n > 0:
        loss += weights.w_n * loss_normal(render_out, frame)
    if weights.w_reg > 0:
        loss += weights.w_reg * loss_reg(
            arrays, _regularised_ids(render_out, ids), anchors, weights.w_reg_n
        )
    return loss


def _loss_or_zero(fn: typing.Callable[[], float]) -> float:
    try:
        return fn()
    except EmptyDomainError:
        return 0.0


def _batch_loss(
    render_out: RenderOutput,
    frame: ProcessedFrame,
    arrays: SurfelArrays,
    anchors: Anchors,
    weights: LossWeights,
) -> float:
    loss = _loss_or_zero(lambda: loss_photometric(render_out, frame))
    if weights.w_d > 0:
        loss += weights.w_d * _loss_or_zero(lambda: loss_depth(render_out, frame))
    if weights.w_n > 0:
        loss += weights.w_n * _loss_or_zero(lambda: loss_normal(render_out, frame))
    if weights.w_reg > 0 and len(render_out.footprints):
        loss += weights.w_reg * loss_reg(
            arrays, render_out.footprints.ids, anchors, weights.w_reg_n
        )
    return loss


@dataclasses.dataclass(frozen=True, eq=False)
class Gradients:
    """
    Loss gradients for every surfel of the map.

    Scales and opacities are differentiated in their optimisation parameterisation
    (log scale, logit opacity); ``rotations`` is the gradient with respect to a
    world-frame rotation vector applied on the left of the current rotation.
    """

    positions: FloatArray
    log_scales: FloatArray
    rotations: FloatArray
    logit_opacities: FloatArray
    colors: FloatArray
    touched: BoolArray

    @classmethod
    def zeros(cls, n: int, sh_coefficients: int) -> "Gradients":
        return cls(
            positions=np.zeros((n, 3)),
            log_scales=np.zeros((n, 2)),
            rotations=np.zeros((n, 3)),
            logit_opacities=np.zeros(n),
            colors=np.zeros((n, sh_coefficients, 3)),
            touched=np.zeros(n, dtype=bool),
        )


def _row_sums(rows: IntArray, values: FloatArray, n_rows: int) -> FloatArray:
    """
    Deterministic scatter-add of per-fragment values into per-row totals.
    """
    flat = values.reshape(len(values), int(np.prod(values.shape[1:])))
    out = np.stack(
        [np.bincount(rows, flat[:, c], n_rows) for c in range(flat.shape[1])], axis=-1
    )
    return out.astype(np.float64, copy=False).reshape((n_rows,) + values.shape[1:])


def _suffix_sums(
    pixel: IntArray, rank: IntArray, values: FloatArray, n_pixels: int
) -> FloatArray:
    """
    For each fragment, the sum of ``values`` over the fragments behind it on the
    same pixel.
    """
    out = np.zeros_like(values)
    if not len(values):
        return out
    acc = np.zeros(n_pixels)
    by_rank = np.argsort(rank, kind="stable")
    bounds = np.concatenate([[0], np.cumsum(np.bincount(rank))])
    for r in reversed(range(len(bounds) - 1)):
        sel = by_rank[bounds[r] : bounds[r + 1]]
        pix = pixel[sel]
        out[sel] = acc[pix]
        acc[pix] += values[sel]
    return out


def backward(
    render_out: RenderOutput,
    frame: ProcessedFrame,
    arrays: SurfelArrays,
    anchors: Anchors,
    weights: LossWeights,
    ids: typing.Optional[ArrayLike] = None,
) -> Gradients:
    """
    Analytic gradients of :py:func:`total_loss` with respect to every surfel
    parameter.  Loss terms with an empty domain contribute nothing.

    Raises:
        ValueError: if ``render_out`` was produced without contributors.
    """
    con = render_out.contributors
    if con is None:
        raise ValueError("backward needs a render produced with keep_contributors")

    fp = render_out.footprints
    k = render_out.intrinsics
    h, w = k.shape
    n_pixels = h * w
    grads = Gradients.zeros(len(arrays), arrays.sh_coefficients)

    # Pixel-space upstream gradients.
    g_color = np.zeros((h, w, 3))
    g_depth_sum = np.zeros((h, w))
    g_normal_sum = np.zeros((h, w, 3))
    g_alpha_acc = np.zeros((h, w))

    covered = render_out.covered
    if covered.any():
        diff = render_out.color[covered] - frame.color[covered]
        g_color[covered] = np.sign(diff) / (3 * covered.sum())

    alpha_acc = render_out.alpha_acc
    domain = frame.depth_valid & render_out.valid
    if weights.w_d > 0 and domain.any():
        g_depth = weights.w_d * np.sign(render_out.depth - frame.depth) / domain.sum()
        g_depth_sum[domain] = g_depth[domain] / alpha_acc[domain]
        g_alpha_acc[domain] = (
            -g_depth[domain] * render_out.depth[domain] / alpha_acc[domain]
        )

    domain = frame.normal_valid & render_out.valid
    if weights.w_n > 0 and domain.any():
        g_hat = -weights.w_n * frame.normal_map[domain] / domain.sum()
        n_hat = render_out.normal[domain]
        norm = np.linalg.norm(render_out.normal_sum[domain], axis=-1)
        projected = g_hat - n_hat * np.sum(n_hat * g_hat, axis=-1, keepdims=True)
        g_normal_sum[domain] = projected / norm[:, None]

    # Per-fragment gradients through the compositing.
    pix = con.pixel
    j = con.footprint
    gc = g_color.reshape(-1, 3)[pix]
    gd = g_depth_sum.ravel()[pix]
    gn = g_normal_sum.reshape(-1, 3)[pix]
    axes = fp.axes[j]
    normals = axes[:, :, 2]

    contribution = con.transmittance * con.alpha
    value = (
        np.sum(gc * fp.colors[j], axis=1)
        + gd * con.depth
        + np.sum(gn * normals, axis=1)
    )
    behind = _suffix_sums(pix, con.rank, contribution * value, n_pixels)
    t_final = 1.0 - alpha_acc.ravel()[pix]
    g_alpha = (
        con.transmittance * value
        - behind / (1.0 - con.alpha)
        + g_alpha_acc.ravel()[pix] * t_final / (1.0 - con.alpha)
    )

    opacity = fp.opacity[j]
    unclamped = ~(con.weight * opacity > con.alpha)
    g_weight = np.where(unclamped, g_alpha * opacity, 0.0)
    g_opacity = np.where(unclamped, g_alpha * con.weight, 0.0)

    x = (pix % w).astype(np.float64)
    y = (pix // w).astype(np.float64)
    t, a, b, den = intersect_rays(fp, j, x, y, k)
    rays = np.stack([(x - k.cx) / k.fx, (y - k.cy) / k.fy, np.ones_like(x)], axis=-1)
    delta = t[:, None] * rays - fp.center[j]
    s_u = fp.scales[j, 0]
    s_v = fp.scales[j, 1]

    g_a = -g_weight * con.weight * a
    g_b = -g_weight * con.weight * b
    g_delta = (g_a / s_u)[:, None] * axes[:, :, 0]
    g_delta += (g_b / s_v)[:, None] * axes[:, :, 1]
    g_t = np.sum(g_delta * rays, axis=1) + contribution * gd
    g_center = -g_delta + (g_t / den)[:, None] * normals
    g_axes = np.stack(
        [
            (g_a / s_u)[:, None] * delta,
            (g_b / s_v)[:, None] * delta,
            -(g_t / den)[:, None] * delta + contribution[:, None] * gn,
        ],
        axis=-1,
    )
    g_log_scales = np.stack([-g_a * a, -g_b * b], axis=-1)
    g_frag_color = contribution[:, None] * gc

    # Per-footprint reduction, then camera → world.
    m = len(fp)
    g_center_f = _row_sums(j, g_center, m)
    g_axes_f = _row_sums(j, g_axes, m)
    g_log_scales_f = _row_sums(j, g_log_scales, m)
    g_opacity_f = _row_sums(j, g_opacity, m)
    g_color_f = _row_sums(j, g_frag_color, m)

    r_wc = render_out.pose.inverse().rotation
    ids_f = fp.ids
    g_positions = g_center_f @ r_wc
    world_axes = rotation_matrices(arrays.rotations[ids_f])
    g_world_axes = np.einsum("ij,nik->njk", r_wc, g_axes_f)
    g_rotations = np.sum(np.cross(world_axes, g_world_axes, axis=1), axis=2)

    coefficients = arrays.colors[ids_f]
    n_coeff = coefficients.shape[1]
    raw = fp.colors_raw
    g_raw = np.where((raw > 0) & (raw < 1), g_color_f, 0.0)
    g_coefficients = sh.basis(fp.view_dirs, n_coeff)[:, :, None] * g_raw[:, None, :]
    g_dir = np.einsum("nkc,nc,kd->nd", coefficients, g_raw, sh.basis_gradient(n_coeff))
    d = fp.view_dirs
    g_positions += (g_dir - d * np.sum(d * g_dir, axis=1, keepdims=True)) / np.where(
        fp.view_dist > 0, fp.view_dist, 1.0
    )[:, None]

    o = arrays.opacities[ids_f]
    grads.positions[ids_f] = g_positions
    grads.log_scales[ids_f] = g_log_scales_f
    grads.rotations[ids_f] = g_rotations
    grads.logit_opacities[ids_f] = g_opacity_f * o * (1.0 - o)
    grads.colors[ids_f] = g_coefficients
    grads.touched[ids_f] = True

    reg_ids = _regularised_ids(render_out, ids)
    if weights.w_reg > 0 and len(reg_ids):
        p_f, n_f = anchors.lookup(reg_ids)
        scale = weights.w_reg / len(reg_ids)
        offset = arrays.positions[reg_ids] - p_f
        distance = np.linalg.norm(offset, axis=1)
        g_p = scale * offset / np.where(distance > 0, distance, 1.0)[:, None]
        # Unit normals keep n·n_f <= 1, so |1 − n·n_f| is linear in n.
        g_n = -scale * weights.w_reg_n * n_f
        np.add.at(grads.positions, reg_ids, g_p)
        np.add.at(grads.rotations, reg_ids, np.cross(arrays.normals[reg_ids], g_n))
        grads.touched[reg_ids] = True

    return grads


@dataclasses.dataclass(frozen=True)
class OptStats:
    losses: tuple[float, ...] = ()

    @property
    def iterations(self) -> int:
        return len(self.losses)


_GROUPS = ("positions", "log_scales", "rotations", "logit_opacities", "colors")


class OptimizerState:
    """
    Adam moments per parameter group and per-surfel step counts.

    Only surfels touched by an iteration are stepped, so rows of surfels outside
    the current keyframe keep their moments.
    """

    def __init__(self, config: OptimizerConfig, sh_coefficients: int = 4) -> None:
        self.config = config
        self.sh_coefficients = sh_coefficients
        self.steps = np.zeros(0, dtype=np.int64)
        self.moments: dict[str, tuple[FloatArray, FloatArray]] = {}
        self._shapes = {
            "positions": (3,),
            "log_scales": (2,),
            "rotations": (3,),
            "logit_opacities": (),
            "colors": (sh_coefficients, 3),
        }
        for group in _GROUPS:
            shape = (0,) + self._shapes[group]
            self.moments[group] = (np.zeros(shape), np.zeros(shape))

    def __len__(self) -> int:
        return len(self.steps)

    @property
    def learning_rates(self) -> dict[str, float]:
        c = self.config
        return {
            "positions": c.lr_p,
            "log_scales": c.lr_s,
            "rotations": c.lr_r,
            "logit_opacities": c.lr_o,
            "colors": c.lr_c,
        }

    def resize(self, n: int) -> None:
        extra = n - len(self.steps)
        if extra <= 0:
            return
        self.steps = np.concatenate([self.steps, np.zeros(extra, dtype=np.int64)])
        for group in _GROUPS:
            shape = (extra,) + self._shapes[group]
            first, second = self.moments[group]
            self.moments[group] = (
                np.concatenate([first, np.zeros(shape)]),
                np.concatenate([second, np.zeros(shape)]),
            )

    def step(self, grads: Gradients) -> dict[str, FloatArray]:
        """
        Advances the moments of touched surfels.

        Returns:
            ``{group: update}`` for the touched rows (to be subtracted).
        """
        c = self.config
        rows = np.nonzero(grads.touched)[0]
        self.resize(len(grads.touched))
        self.steps[rows] += 1
        t = self.steps[rows].astype(np.float64)
        lrs = self.learning_rates

        updates = {}
        for group in _GROUPS:
            g = getattr(grads, group)[rows]
            first, second = self.moments[group]
            first[rows] = c.beta1 * first[rows] + (1.0 - c.beta1) * g
            second[rows] = c.beta2 * second[rows] + (1.0 - c.beta2) * g * g

            extra_dims = (1,) * (g.ndim - 1)
            bias1 = (1.0 - c.beta1**t).reshape((-1,) + extra_dims)
            bias2 = (1.0 - c.beta2**t).reshape((-1,) + extra_dims)
            m_hat = first[rows] / bias1
            v_hat = second[rows] / bias2
            updates[group] = lrs[group] * m_hat / (np.sqrt(v_hat) + c.epsilon)
        return updates


def _apply_updates(
    arrays: SurfelArrays, rows: IntArray, updates: dict[str, FloatArray]
) -> None:
    arrays.positions[rows] -= updates["positions"]
    arrays.scales[rows] = np.exp(np.log(arrays.scales[rows]) - updates["log_scales"])
    if len(rows):
        turn = Rotation.from_rotvec(-updates["rotations"])
        current = Rotation.from_quat(arrays.rotations[rows])
        arrays.rotations[rows] = (turn * current).as_quat()

    o = np.clip(arrays.opacities[rows], OPACITY_EPS, 1.0 - OPACITY_EPS)
    logit = np.log(o / (1.0 - o)) - updates["logit_opacities"]
    arrays.opacities[rows] = np.clip(1.0 / (1.0 + np.exp(-logit)), 0.0, 1.0)
    arrays.colors[rows] -= updates["colors"]


def optimize_batch(
    surfel_map: SurfelMap,
    window: KeyframeWindow,
    m: int,
    state: OptimizerState,
    weights: LossWeights,
    rng: np.random.Generator,
    options: typing.Optional[RenderOptions] = None,
) -> OptStats:
    """
    Runs ``m·capacity`` Adam iterations, each on a keyframe drawn uniformly from
    ``window``.

    Returns:
        The total loss seen by each iteration's forward pass.
    """
    if not len(window):
        logger.warning("optimize_batch called with an empty keyframe window")
        return OptStats()

    options = dataclasses.replace(options or RenderOptions(), keep_contributors=True)
    arrays = surfel_map.arrays
    state.resize(len(arrays))

    losses = []
    for _ in range(m * window.capacity):
        keyframe = window.sample(rng)
        render_out = render(arrays, keyframe.pose, keyframe.frame.intrinsics, options)
        losses.append(
            _batch_loss(render_out, keyframe.frame, arrays, window.anchors, weights)
        )

        grads = backward(render_out, keyframe.frame, arrays, window.anchors, weights)
        rows = np.nonzero(grads.touched)[0]
        _apply_updates(arrays, rows, state.step(grads))

    if losses:
        surfel_map.reindex()
        logger.debug(
            "Optimised %d iterations, loss %.6f -> %.6f",
            len(losses),
            losses[0],
            losses[-1],
        )
    return OptStats(tuple(losses))
