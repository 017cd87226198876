"""
Sparse keypoint frontends used by the tracker to build 2D-3D correspondences.
"""

__all__ = [
    "FeatureFrontend",
    "HarrisBriefFrontend",
    "Keypoints",
    "OrbFrontend",
    "detect_and_describe",
    "frontends",
    "hamming",
]

import dataclasses
import logging
import typing
from abc import ABC, abstractmethod as abstract_method

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy import ndimage
from scipy.spatial import cKDTree

from .geometry import FloatArray
from .registry import AutoRegister, ComponentRegistry

logger = logging.getLogger(__name__)

DESCRIPTOR_BYTES = 32

_POPCOUNT = np.array([bin(i).count("1") for i in range(256)], dtype=np.uint8)


@dataclasses.dataclass(frozen=True, eq=False)
class Keypoints:
    """
    Detected keypoints; ``points`` are ``(x, y)`` pixel coordinates, ``descriptors``
    are packed 256-bit binary strings.
    """

    points: FloatArray
    angles: FloatArray
    descriptors: NDArray[np.uint8]
    responses: FloatArray

    @classmethod
    def empty(cls) -> "Keypoints":
        return cls(
            points=np.zeros((0, 2)),
            angles=np.zeros(0),
            descriptors=np.zeros((0, DESCRIPTOR_BYTES), dtype=np.uint8),
            responses=np.zeros(0),
        )

    def __len__(self) -> int:
        return len(self.points)

    def take(self, index: ArrayLike) -> "Keypoints":
        idx = np.asarray(index)
        return Keypoints(
            self.points[idx],
            self.angles[idx],
            self.descriptors[idx],
            self.responses[idx],
        )


def hamming(a: ArrayLike, b: ArrayLike) -> NDArray[np.int64]:
    """
    Bitwise Hamming distance between packed descriptors, broadcast over leading
    axes.
    """
    x = np.asarray(a, dtype=np.uint8)
    y = np.asarray(b, dtype=np.uint8)
    return _POPCOUNT[x ^ y].sum(axis=-1, dtype=np.int64)


frontends = ComponentRegistry["FeatureFrontend"](
    attr_name="frontend_name", group="surfel_fusion.frontends"
)


class FeatureFrontend(AutoRegister(frontends), ABC):  # type: ignore
    """
    Detects keypoints and computes binary descriptors on an intensity image.
    """

    frontend_name: str

    def __init__(self, max_keypoints: int = 1000, seed: int = 0) -> None:
        self.max_keypoints = max_keypoints
        self.seed = seed

    @abstract_method
    def detect_and_describe(self, intensity: FloatArray) -> Keypoints:
        """
        Args:
            intensity:
                Grayscale image in ``[0, 1]``.
        """
        raise NotImplementedError()


class HarrisBriefFrontend(FeatureFrontend):
    """
    Harris corners, intensity-centroid orientation and steered BRIEF descriptors.
    """

    frontend_name = "harris-brief"

    harris_k = 0.04
    window_sigma = 1.5
    relative_threshold = 0.01
    absolute_threshold = 1e-8
    nms_size = 7
    min_distance = 3.0
    border = 16
    orientation_radius = 15
    pattern_radius = 14
    smoothing_sigma = 2.0

    def __init__(self, max_keypoints: int = 1000, seed: int = 0) -> None:
        super().__init__(max_keypoints, seed)

        # Fixed sampling pattern; pairs are drawn once per seed.
        rng = np.random.default_rng(seed)
        pattern = rng.normal(0.0, self.pattern_radius / 2.5, size=(256, 2, 2))
        norms = np.linalg.norm(pattern, axis=-1, keepdims=True)
        clip = np.minimum(1.0, self.pattern_radius / np.maximum(norms, 1e-12))
        self.pattern = pattern * clip

        r = self.orientation_radius
        dy, dx = np.mgrid[-r : r + 1, -r : r + 1]
        disk = dx * dx + dy * dy <= r * r
        self._disk = (dx[disk], dy[disk])

    def response(self, intensity: FloatArray) -> FloatArray:
        gx = ndimage.sobel(intensity, axis=1) / 8.0
        gy = ndimage.sobel(intensity, axis=0) / 8.0
        sxx = ndimage.gaussian_filter(gx * gx, self.window_sigma)
        syy = ndimage.gaussian_filter(gy * gy, self.window_sigma)
        sxy = ndimage.gaussian_filter(gx * gy, self.window_sigma)
        return typing.cast(
            FloatArray, sxx * syy - sxy * sxy - self.harris_k * (sxx + syy) ** 2
        )

    def detect(self, intensity: FloatArray) -> tuple[FloatArray, FloatArray]:
        """
        Returns:
            ``(points, responses)`` sorted by decreasing response.
        """
        h, w = intensity.shape
        if self.max_keypoints == 0 or min(h, w) <= 2 * self.border:
            return np.zeros((0, 2)), np.zeros(0)

        score = self.response(intensity)
        threshold = max(
            self.relative_threshold * float(score.max()), self.absolute_threshold
        )
        peaks = (score == ndimage.maximum_filter(score, size=self.nms_size)) & (
            score > threshold
        )
        b = self.border
        peaks[:b] = peaks[-b:] = False
        peaks[:, :b] = peaks[:, -b:] = False

        ys, xs = np.nonzero(peaks)
        responses = score[ys, xs]
        order = np.argsort(-responses, kind="stable")
        ys, xs, responses = ys[order], xs[order], responses[order]

        # Plateaus leave several maxima per corner; keep the first of each cluster.
        keep = np.ones(len(xs), dtype=bool)
        if len(xs) > 1:
            tree = cKDTree(np.stack([xs, ys], axis=1))
            for i, j in sorted(tree.query_pairs(self.min_distance)):
                if keep[i]:
                    keep[j] = False
        ys, xs, responses = ys[keep], xs[keep], responses[keep]
        ys, xs, responses = (
            ys[: self.max_keypoints],
            xs[: self.max_keypoints],
            responses[: self.max_keypoints],
        )

        def _offset(lo: FloatArray, mid: FloatArray, hi: FloatArray) -> FloatArray:
            curvature = lo - 2.0 * mid + hi
            safe = np.where(curvature < 0, curvature, -1.0)
            shift = np.clip((lo - hi) / (2.0 * safe), -0.5, 0.5)
            return np.where(curvature < 0, shift, 0.0)

        ox = _offset(score[ys, xs - 1], score[ys, xs], score[ys, xs + 1])
        oy = _offset(score[ys - 1, xs], score[ys, xs], score[ys + 1, xs])
        points = np.stack([xs + ox, ys + oy], axis=1).astype(np.float64)
        return points, responses

    def orientation(self, intensity: FloatArray, points: FloatArray) -> FloatArray:
        """
        Intensity-centroid angle of the disk around each point.
        """
        if not len(points):
            return np.zeros(0)
        dx, dy = self._disk
        px = np.rint(points[:, 0]).astype(np.int64)
        py = np.rint(points[:, 1]).astype(np.int64)
        patch = intensity[py[:, None] + dy[None, :], px[:, None] + dx[None, :]]
        m10 = patch @ dx.astype(np.float64)
        m01 = patch @ dy.astype(np.float64)
        return np.arctan2(m01, m10)

    def describe(
        self, intensity: FloatArray, points: FloatArray, angles: FloatArray
    ) -> NDArray[np.uint8]:
        if not len(points):
            return np.zeros((0, DESCRIPTOR_BYTES), dtype=np.uint8)

        smooth = ndimage.gaussian_filter(intensity, self.smoothing_sigma)
        h, w = smooth.shape
        cos = np.cos(angles)[:, None]
        sin = np.sin(angles)[:, None]

        def _sample(offsets: FloatArray) -> FloatArray:
            x = points[:, :1] + cos * offsets[None, :, 0] - sin * offsets[None, :, 1]
            y = points[:, 1:] + sin * offsets[None, :, 0] + cos * offsets[None, :, 1]
            xi = np.clip(np.rint(x).astype(np.int64), 0, w - 1)
            yi = np.clip(np.rint(y).astype(np.int64), 0, h - 1)
            return typing.cast(FloatArray, smooth[yi, xi])

        bits = _sample(self.pattern[:, 0]) < _sample(self.pattern[:, 1])
        return np.packbits(bits, axis=1)

    def detect_and_describe(self, intensity: FloatArray) -> Keypoints:
        points, responses = self.detect(intensity)
        angles = self.orientation(intensity, points)
        descriptors = self.describe(intensity, points, angles)
        logger.debug("Detected %d keypoints", len(points))
        return Keypoints(points, angles, descriptors, responses)


class OrbFrontend(FeatureFrontend):
    """
    OpenCV ORB (oriented FAST + rotated BRIEF, multi-scale).
    """

    frontend_name = "orb"

    def detect_and_describe(self, intensity: FloatArray) -> Keypoints:
        import cv2

        if self.max_keypoints == 0:
            return Keypoints.empty()

        image = np.clip(np.rint(intensity * 255.0), 0, 255).astype(np.uint8)
        orb = cv2.ORB_create(nfeatures=self.max_keypoints)
        found, descriptors = orb.detectAndCompute(image, None)
        if descriptors is None or not found:
            return Keypoints.empty()

        return Keypoints(
            points=np.array([kp.pt for kp in found], dtype=np.float64),
            angles=np.deg2rad(np.array([kp.angle for kp in found], dtype=np.float64)),
            descriptors=np.asarray(descriptors, dtype=np.uint8),
            responses=np.array([kp.response for kp in found], dtype=np.float64),
        )


def detect_and_describe(
    intensity: FloatArray,
    frontend: str = "harris-brief",
    max_keypoints: int = 1000,
    seed: int = 0,
) -> Keypoints:
    """
    One-shot detection with a registered frontend.
    """
    return typing.cast(
        FeatureFrontend, frontends.get(frontend, max_keypoints, seed)
    ).detect_and_describe(intensity)

