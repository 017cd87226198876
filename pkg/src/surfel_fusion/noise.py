__all__ = ["NoiseParams", "noise_covariance"]

import dataclasses

import numpy as np
from numpy.typing import ArrayLike

from .errors import InvalidDepthError
from .geometry import FloatArray


@dataclasses.dataclass(frozen=True)
class NoiseParams:
    """
    Depth-dependent measurement noise: ``σ_p = κ_p·d²`` (meters) and
    ``σ_n = κ_n·d²``.
    """

    kappa_p: float = 0.002
    kappa_n: float = 0.02

    def __post_init__(self) -> None:
        if not (self.kappa_p > 0 and self.kappa_n > 0):
            raise ValueError("Noise coefficients must be positive")


def noise_covariance(d: ArrayLike, params: NoiseParams) -> FloatArray:
    """
    Diagonal measurement covariance ``[σ_p² ×3, σ_n² ×3]`` for depths ``d``.

    Returns:
        Variances, shape ``d.shape + (6,)``.
    """
    depth = np.asarray(d, dtype=np.float64)
    if np.any(~(depth > 0)):
        raise InvalidDepthError("Noise model needs positive depths")

    d4 = depth**4
    var_p = params.kappa_p**2 * d4
    var_n = params.kappa_n**2 * d4
    return np.stack([var_p, var_p, var_p, var_n, var_n, var_n], axis=-1)
