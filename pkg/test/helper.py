"""
Reference implementations used as oracles, plus a fake distribution for the plugin
tests.  Everything here favours obviousness over speed.
"""

import sys
import typing
from importlib.metadata import DistributionFinder, PathDistribution
from os import path
from pathlib import Path

import numpy as np


class DummyDistributionFinder(DistributionFinder):
    """
    Injects a dummy distribution into the meta path finder, so that we can
    pretend like it's been pip installed during unit tests (i.e., so that we
    can test plugin loading in :py:class:`ComponentRegistry`), without polluting
    the persistent virtualenv.
    """

    DUMMY_PACKAGE_DIR = "dummy_plugin.egg-info"

    @classmethod
    def install(cls) -> None:
        for finder in sys.meta_path:
            if isinstance(finder, cls):
                # If we've already installed an instance of the class, then
                # something is probably wrong with our tests.
                raise ValueError(f"{cls.__name__} is already installed")

        sys.meta_path.append(cls())

    @classmethod
    def uninstall(cls) -> None:
        for i, finder in enumerate(sys.meta_path):
            if isinstance(finder, cls):
                sys.meta_path.pop(i)
                return
        else:
            raise ValueError(f"{cls.__name__} was not installed")

    # ``context`` should be a ``DistributionFinder.Context``, but that type isn't
    # compatible with ``EllipsisType``, and mypy isn't having any of it, so :shrug:
    def find_distributions(self, context: typing.Any = ...) -> list[PathDistribution]:
        return [
            PathDistribution(
                Path(path.join(path.dirname(__file__), self.DUMMY_PACKAGE_DIR))
            )
        ]


def batch_least_squares(
    prior: np.ndarray,
    prior_variance: np.ndarray,
    measurements: typing.Sequence[np.ndarray],
    variances: typing.Sequence[np.ndarray],
) -> np.ndarray:
    """
    Stacks the prior and every direct measurement of a 6-vector into one weighted
    least-squares problem and solves it with ``lstsq``.
    """
    rows = [np.eye(6) / np.sqrt(prior_variance)[:, None]]
    rhs = [np.asarray(prior) / np.sqrt(prior_variance)]
    for z, var in zip(measurements, variances):
        rows.append(np.eye(6) / np.sqrt(var)[:, None])
        rhs.append(np.asarray(z) / np.sqrt(var))
    solution, *_ = np.linalg.lstsq(np.vstack(rows), np.concatenate(rhs), rcond=None)
    return typing.cast(np.ndarray, solution)


def point_triangle_distance(
    point: np.ndarray, a: np.ndarray, b: np.ndarray, c: np.ndarray
) -> float:
    """
    Distance from ``point`` to triangle ``abc``: the plane distance if the foot of
    the perpendicular falls inside, otherwise the nearest of the three edges.
    """
    normal = np.cross(b - a, c - a)
    area = np.linalg.norm(normal)
    best = np.inf
    if area > 0:
        normal = normal / area
        foot = point - np.dot(point - a, normal) * normal
        signs = [
            np.dot(np.cross(q1 - q0, foot - q0), normal)
            for q0, q1 in ((a, b), (b, c), (c, a))
        ]
        if min(signs) >= 0:
            return float(abs(np.dot(point - a, normal)))

    for p0, p1 in ((a, b), (b, c), (c, a)):
        edge = p1 - p0
        length_sq = np.dot(edge, edge)
        t = np.clip(np.dot(point - p0, edge) / length_sq, 0.0, 1.0) if length_sq else 0
        best = min(best, float(np.linalg.norm(p0 + t * edge - point)))
    return float(best)


def global_ssim(x: np.ndarray, y: np.ndarray, data_range: float = 1.0) -> float:
    """
    Single-window SSIM over the whole image (no sliding window).
    """
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    mx, my = x.mean(), y.mean()
    vx, vy = x.var(), y.var()
    cov = np.mean((x - mx) * (y - my))
    return float(
        ((2 * mx * my + c1) * (2 * cov + c2)) / ((mx**2 + my**2 + c1) * (vx + vy + c2))
    )
