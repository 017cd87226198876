"""
Trajectory, reconstruction and rendering metrics.
"""

__all__ = [
    "MeshDistance",
    "ReconReport",
    "Trajectory",
    "associate",
    "ate_rmse",
    "closest_points_on_triangles",
    "format_report",
    "psnr",
    "recon_metrics",
    "sample_mesh_points",
    "sample_surfel_points",
    "ssim",
]

import dataclasses
import logging
import math
import typing

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation
from skimage.metrics import structural_similarity

from .errors import DatasetFormatError, EmptyDomainError, InsufficientDataError
from .geometry import FloatArray, Pose
from .meshing import TriangleMesh
from .surfel_map import SurfelArrays, SurfelMap

logger = logging.getLogger(__name__)

IntArray = NDArray[np.int64]


@dataclasses.dataclass(frozen=True, eq=False)
class Trajectory:
    """
    Timestamped camera-to-world poses with strictly increasing timestamps.
    """

    timestamps: FloatArray
    poses: tuple[Pose, ...]

    def __post_init__(self) -> None:
        ts = np.asarray(self.timestamps, dtype=np.float64).reshape(-1)
        if len(ts) != len(self.poses):
            raise DatasetFormatError(
                f"{len(ts)} timestamps for {len(self.poses)} poses"
            )
        if np.any(np.diff(ts) <= 0):
            raise DatasetFormatError(
                "Trajectory timestamps must be strictly increasing"
            )
        object.__setattr__(self, "timestamps", ts)
        object.__setattr__(self, "poses", tuple(self.poses))

    @classmethod
    def from_pairs(cls, pairs: typing.Iterable[tuple[float, Pose]]) -> "Trajectory":
        items = list(pairs)
        return cls(np.array([t for t, _ in items]), tuple(p for _, p in items))

    def __len__(self) -> int:
        return len(self.poses)

    @property
    def positions(self) -> FloatArray:
        if not self.poses:
            return np.zeros((0, 3))
        return np.stack([p.translation for p in self.poses])

    def transformed(self, transform: Pose) -> "Trajectory":
        """
        The trajectory with ``transform`` applied in the world frame.
        """
        return Trajectory(self.timestamps, tuple(transform @ p for p in self.poses))


def associate(
    first: ArrayLike, second: ArrayLike, tolerance: float = 0.02
) -> list[tuple[int, int]]:
    """
    Greedy timestamp association: candidate pairs closer than ``tolerance`` are
    taken in order of increasing time difference, each timestamp used at most once.

    Returns:
        Index pairs ``(i, j)`` sorted by ``i``.
    """
    a = np.asarray(first, dtype=np.float64).reshape(-1)
    b = np.asarray(second, dtype=np.float64).reshape(-1)
    if not len(a) or not len(b):
        return []

    candidates: set[tuple[int, int]] = set()
    order_b = np.argsort(b, kind="stable")
    sorted_b = b[order_b]
    pos = np.searchsorted(sorted_b, a)
    for i, p in enumerate(pos):
        for j in (p - 1, p):
            if 0 <= j < len(b):
                candidates.add((i, int(order_b[j])))
    order_a = np.argsort(a, kind="stable")
    sorted_a = a[order_a]
    pos = np.searchsorted(sorted_a, b)
    for j, p in enumerate(pos):
        for i in (p - 1, p):
            if 0 <= i < len(a):
                candidates.add((int(order_a[i]), j))

    scored = sorted(
        (abs(a[i] - b[j]), i, j) for i, j in candidates if abs(a[i] - b[j]) < tolerance
    )
    used_a: set[int] = set()
    used_b: set[int] = set()
    pairs = []
    for _, i, j in scored:
        if i in used_a or j in used_b:
            continue
        used_a.add(i)
        used_b.add(j)
        pairs.append((i, j))
    return sorted(pairs)


def ate_rmse(
    estimate: Trajectory, ground_truth: Trajectory, tolerance: float = 0.02
) -> float:
    """
    Absolute trajectory error in centimeters after rigid least-squares alignment of
    the estimated positions onto the ground truth.

    Raises:
        InsufficientDataError: with fewer than two associated poses.
    """
    pairs = associate(estimate.timestamps, ground_truth.timestamps, tolerance)
    if len(pairs) < 2:
        raise InsufficientDataError(
            f"{len(pairs)} associated poses; ATE needs at least 2"
        )

    est = estimate.positions[[i for i, _ in pairs]]
    gt = ground_truth.positions[[j for _, j in pairs]]
    est_mean, gt_mean = est.mean(axis=0), gt.mean(axis=0)
    est_c, gt_c = est - est_mean, gt - gt_mean

    if np.any(np.linalg.norm(est_c, axis=1) > 0) and np.any(
        np.linalg.norm(gt_c, axis=1) > 0
    ):
        rotation = Rotation.align_vectors(gt_c, est_c)[0].as_matrix()
    else:
        rotation = np.eye(3)

    residual = gt_c - est_c @ rotation.T
    rmse = float(np.sqrt(np.mean(np.sum(residual**2, axis=1))))
    logger.debug("ATE over %d pairs: %.4f m", len(pairs), rmse)
    return rmse * 100.0


# --------------------------------------------------------------------------------
# Surface sampling

# Mass of a unit 2D Gaussian inside its 1σ circle.
_MASS_1SIGMA = 1.0 - math.exp(-0.5)


def _surfel_arrays(surfels: typing.Union[SurfelMap, SurfelArrays]) -> SurfelArrays:
    return surfels.arrays if isinstance(surfels, SurfelMap) else surfels


def sample_surfel_points(
    surfels: typing.Union[SurfelMap, SurfelArrays], n: int, seed: int = 0
) -> FloatArray:
    """
    Draws ``n`` points from the surfel disks: a surfel is picked with probability
    proportional to its disk area, then a point is drawn from its Gaussian
    truncated at 1σ.

    Raises:
        EmptyDomainError: if there are no surfels to sample.
    """
    arrays = _surfel_arrays(surfels)
    if n == 0:
        return np.zeros((0, 3))
    if not len(arrays):
        raise EmptyDomainError("Cannot sample points from an empty surfel map")

    rng = np.random.default_rng(seed)
    area = arrays.scales[:, 0] * arrays.scales[:, 1]
    chosen = rng.choice(len(arrays), size=n, p=area / area.sum())

    u = rng.random(n)
    radius = np.sqrt(-2.0 * np.log1p(-u * _MASS_1SIGMA))
    phi = rng.uniform(0.0, 2.0 * math.pi, n)

    frames = arrays.rotation_matrices[chosen]
    scales = arrays.scales[chosen]
    offset = (
        frames[:, :, 0] * (scales[:, 0] * radius * np.cos(phi))[:, None]
        + frames[:, :, 1] * (scales[:, 1] * radius * np.sin(phi))[:, None]
    )
    return typing.cast(FloatArray, arrays.positions[chosen] + offset)


def sample_mesh_points(mesh: TriangleMesh, n: int, seed: int = 0) -> FloatArray:
    """
    Uniform area-weighted samples on the mesh surface.
    """
    if n == 0:
        return np.zeros((0, 3))
    areas = mesh.face_areas() if len(mesh) else np.zeros(0)
    if not len(areas) or areas.sum() <= 0:
        raise EmptyDomainError("Cannot sample points from an empty mesh")

    rng = np.random.default_rng(seed)
    faces = mesh.faces[rng.choice(len(areas), size=n, p=areas / areas.sum())]
    r1 = np.sqrt(rng.random(n))[:, None]
    r2 = rng.random(n)[:, None]
    a, b, c = (mesh.vertices[faces[:, i]] for i in range(3))
    return typing.cast(FloatArray, (1 - r1) * a + r1 * (1 - r2) * b + r1 * r2 * c)


# --------------------------------------------------------------------------------
# Point-to-surface distance


def closest_points_on_triangles(
    p: FloatArray, a: FloatArray, b: FloatArray, c: FloatArray
) -> FloatArray:
    """
    Closest point of triangle ``(a, b, c)`` to ``p``, row-wise, by Voronoi-region
    classification.
    """
    ab, ac, ap = b - a, c - a, p - a
    bp, cp = p - b, p - c

    def _dot(x: FloatArray, y: FloatArray) -> FloatArray:
        return typing.cast(FloatArray, np.einsum("ij,ij->i", x, y))

    def _ratio(num: FloatArray, den: FloatArray) -> FloatArray:
        return np.divide(num, den, out=np.zeros_like(num), where=den != 0)

    d1, d2 = _dot(ab, ap), _dot(ac, ap)
    d3, d4 = _dot(ab, bp), _dot(ac, bp)
    d5, d6 = _dot(ab, cp), _dot(ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    total = va + vb + vc
    v = _ratio(vb, total)
    w = _ratio(vc, total)
    out = a + ab * v[:, None] + ac * w[:, None]

    # Later assignments take priority, so regions are applied in reverse order.
    regions = [
        (
            (va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0),
            b + (c - b) * _ratio(d4 - d3, (d4 - d3) + (d5 - d6))[:, None],
        ),
        ((vb <= 0) & (d2 >= 0) & (d6 <= 0), a + ac * _ratio(d2, d2 - d6)[:, None]),
        ((d6 >= 0) & (d5 <= d6), c),
        ((vc <= 0) & (d1 >= 0) & (d3 <= 0), a + ab * _ratio(d1, d1 - d3)[:, None]),
        ((d3 >= 0) & (d4 <= d3), b),
        ((d1 <= 0) & (d2 <= 0), a),
    ]
    for mask, point in regions:
        out = np.where(mask[:, None], point, out)
    return typing.cast(FloatArray, out)


def _subdivide(triangles: FloatArray, max_edge: float) -> FloatArray:
    """
    Splits triangles at edge midpoints until no edge exceeds ``max_edge``.
    """
    done = []
    pending = triangles
    while len(pending):
        edges = np.stack(
            [
                np.linalg.norm(pending[:, 1] - pending[:, 0], axis=1),
                np.linalg.norm(pending[:, 2] - pending[:, 1], axis=1),
                np.linalg.norm(pending[:, 0] - pending[:, 2], axis=1),
            ],
            axis=1,
        )
        small = edges.max(axis=1) <= max_edge
        done.append(pending[small])
        big = pending[~small]
        a, b, c = big[:, 0], big[:, 1], big[:, 2]
        ab, bc, ca = (a + b) / 2, (b + c) / 2, (c + a) / 2
        pending = np.concatenate(
            [
                np.stack([a, ab, ca], axis=1),
                np.stack([ab, b, bc], axis=1),
                np.stack([ca, bc, c], axis=1),
                np.stack([ab, bc, ca], axis=1),
            ]
        )
    return np.concatenate(done) if done else np.zeros((0, 3, 3))


class MeshDistance:
    """
    Exact point-to-mesh distance with a centroid k-d tree as the spatial index.

    Triangles are subdivided so that every candidate search stays local; the
    subdivided surface is identical to the input.
    """

    def __init__(self, mesh: TriangleMesh, max_edge: typing.Optional[float] = None):
        if not len(mesh):
            raise EmptyDomainError("Cannot measure distances to an empty mesh")

        triangles = mesh.vertices[mesh.faces]
        if max_edge is None:
            extent = float(np.ptp(mesh.vertices, axis=0).max())
            max_edge = max(extent / 64.0, 1e-6)
        self.triangles = _subdivide(triangles, max_edge)
        self.centroids = self.triangles.mean(axis=1)
        self.radius = float(
            np.linalg.norm(self.triangles - self.centroids[:, None], axis=2).max()
        )
        self.tree = cKDTree(self.centroids)

    def _closest(self, points: FloatArray, ids: IntArray) -> FloatArray:
        t = self.triangles[ids]
        return closest_points_on_triangles(points, t[:, 0], t[:, 1], t[:, 2])

    def query(self, points: ArrayLike, chunk: int = 8192) -> FloatArray:
        """
        Distance from each point to the mesh surface.
        """
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        out = np.empty(len(pts))
        for start in range(0, len(pts), chunk):
            block = pts[start : start + chunk]
            _, nearest = self.tree.query(block)
            bound = np.linalg.norm(block - self._closest(block, nearest), axis=1)

            candidates = self.tree.query_ball_point(block, bound + self.radius + 1e-12)
            counts = np.array([len(c) for c in candidates])
            ids = np.concatenate([np.asarray(c, dtype=np.int64) for c in candidates])
            owner = np.repeat(np.arange(len(block)), counts)
            closest = self._closest(block[owner], ids)
            dist = np.linalg.norm(block[owner] - closest, axis=1)

            best = bound.copy()
            np.minimum.at(best, owner, dist)
            out[start : start + len(block)] = best
        return out


# --------------------------------------------------------------------------------
# Reconstruction report


@dataclasses.dataclass(frozen=True)
class ReconReport:
    accuracy_cm: float
    accuracy_ratio_pct: float
    completeness_cm: float
    completeness_ratio_pct: float
    pred_samples: int
    gt_samples: int

    def as_dict(self) -> dict[str, float]:
        return dataclasses.asdict(self)


def recon_metrics(
    prediction: typing.Union[TriangleMesh, ArrayLike],
    ground_truth: TriangleMesh,
    tau: float = 0.03,
    samples: typing.Optional[int] = None,
    seed: int = 0,
) -> ReconReport:
    """
    Accuracy (prediction → ground truth) and completeness (ground truth →
    prediction) with the fraction of distances below ``tau``.

    A predicted mesh is sampled with ``samples`` points; the ground truth is sampled
    with as many points as the prediction has.

    Raises:
        EmptyDomainError: if either side is empty.
    """
    if isinstance(prediction, TriangleMesh):
        if not len(prediction):
            raise EmptyDomainError("Predicted mesh is empty")
        count = samples if samples is not None else 1_000_000
        pred_points = sample_mesh_points(prediction, count, seed)
    else:
        pred_points = np.asarray(prediction, dtype=np.float64).reshape(-1, 3)
    if not len(pred_points):
        raise EmptyDomainError("Prediction has no points")
    if not len(ground_truth):
        raise EmptyDomainError("Ground-truth mesh is empty")

    accuracy = MeshDistance(ground_truth).query(pred_points)
    gt_points = sample_mesh_points(ground_truth, len(pred_points), seed + 1)
    if isinstance(prediction, TriangleMesh):
        completeness = MeshDistance(prediction).query(gt_points)
    else:
        completeness = cKDTree(pred_points).query(gt_points)[0]

    report = ReconReport(
        accuracy_cm=float(accuracy.mean() * 100.0),
        accuracy_ratio_pct=float(np.mean(accuracy < tau) * 100.0),
        completeness_cm=float(completeness.mean() * 100.0),
        completeness_ratio_pct=float(np.mean(completeness < tau) * 100.0),
        pred_samples=len(pred_points),
        gt_samples=len(gt_points),
    )
    logger.debug("Reconstruction metrics: %s", report)
    return report


# --------------------------------------------------------------------------------
# Image metrics


def _check_pair(a: ArrayLike, b: ArrayLike) -> tuple[FloatArray, FloatArray]:
    x = np.asarray(a, dtype=np.float64)
    y = np.asarray(b, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"Image shapes differ: {x.shape} vs {y.shape}")
    return x, y


def psnr(a: ArrayLike, b: ArrayLike) -> float:
    """
    Peak signal-to-noise ratio in dB for images in ``[0, 1]``; identical images
    give ``inf``.
    """
    x, y = _check_pair(a, b)
    mse = float(np.mean((x - y) ** 2))
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def ssim(a: ArrayLike, b: ArrayLike) -> float:
    """
    Structural similarity with an 11×11 Gaussian window (σ = 1.5), averaged over
    channels.
    """
    x, y = _check_pair(a, b)
    return float(
        structural_similarity(
            x,
            y,
            gaussian_weights=True,
            sigma=1.5,
            use_sample_covariance=False,
            data_range=1.0,
            channel_axis=-1 if x.ndim == 3 else None,
        )
    )


def format_report(values: typing.Mapping[str, typing.Any]) -> str:
    """
    ``key = value`` lines, in insertion order.
    """
    lines = []
    for key, value in values.items():
        if isinstance(value, float):
            text = "inf" if math.isinf(value) else f"{value:.6g}"
        else:
            text = str(value)
        lines.append(f"{key} = {text}")
    return "\n".join(lines) + "\n"
