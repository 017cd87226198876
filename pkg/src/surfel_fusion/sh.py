"""
Real spherical harmonics (orders 0 and 1) for view-dependent surfel color.

Coefficients are stored per surfel as ``(k, 3)`` arrays with ``k = (order + 1)²``;
the DC term is offset by 0.5 so that zero coefficients render mid-grey.
"""

__all__ = [
    "C0",
    "C1",
    "basis",
    "basis_gradient",
    "coefficient_count",
    "evaluate",
    "rgb_to_sh",
    "sh_to_rgb",
]

import typing

import numpy as np

from .geometry import FloatArray

C0 = 0.28209479177387814
C1 = 0.4886025119029199


def coefficient_count(order: int) -> int:
    if order not in (0, 1):
        raise ValueError(f"Unsupported SH order {order}")
    return (order + 1) ** 2


def rgb_to_sh(rgb: FloatArray) -> FloatArray:
    """
    DC coefficient reproducing ``rgb`` (in ``[0, 1]``).
    """
    return (rgb - 0.5) / C0


def sh_to_rgb(dc: FloatArray) -> FloatArray:
    return dc * C0 + 0.5


def basis(directions: FloatArray, k: int) -> FloatArray:
    """
    SH basis values ``(N, k)`` for unit view directions ``(N, 3)``.
    """
    out = np.empty(directions.shape[:-1] + (k,))
    out[..., 0] = C0
    if k > 1:
        x, y, z = directions[..., 0], directions[..., 1], directions[..., 2]
        out[..., 1] = -C1 * y
        out[..., 2] = C1 * z
        out[..., 3] = -C1 * x
    return out


def basis_gradient(k: int) -> FloatArray:
    """
    ``∂basis_j / ∂direction`` as a constant ``(k, 3)`` matrix (the order-1 basis is
    linear in the direction).
    """
    out = np.zeros((k, 3))
    if k > 1:
        out[1, 1] = -C1
        out[2, 2] = C1
        out[3, 0] = -C1
    return out


def evaluate(
    coefficients: FloatArray, directions: FloatArray
) -> tuple[FloatArray, FloatArray]:
    """
    Evaluates color along ``directions``.

    Returns:
        ``(rgb, unclipped)`` where ``rgb`` is clipped to ``[0, 1]``; comparing the two
        tells the backward pass which channels saturated.
    """
    k = coefficients.shape[-2]
    raw = np.einsum("nk,nkc->nc", basis(directions, k), coefficients) + 0.5
    return typing.cast(FloatArray, np.clip(raw, 0.0, 1.0)), raw
