"""Small array helpers shared by loss terms and feedback experts.

All helpers treat the last two axes as spatial (H, W); leading axes are batch.
"""

from __future__ import annotations

import numpy as np


def as_batch(images, name: str = "images") -> np.ndarray:
    arr = np.asarray(images, dtype=np.float64)
    if arr.ndim < 2:
        raise ValueError(f"{name} must have at least two (spatial) dimensions, got shape {arr.shape}")
    return arr


def diff_x(a: np.ndarray) -> np.ndarray:
    return a[..., :, 1:] - a[..., :, :-1]


def diff_y(a: np.ndarray) -> np.ndarray:
    return a[..., 1:, :] - a[..., :-1, :]


def diff_x_adjoint(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    out = np.zeros(shape)
    out[..., :, 1:] += g
    out[..., :, :-1] -= g
    return out


def diff_y_adjoint(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    out = np.zeros(shape)
    out[..., 1:, :] += g
    out[..., :-1, :] -= g
    return out


def laplacian(a: np.ndarray) -> np.ndarray:
    """4-neighbour discrete Laplacian on the valid interior (shape H-2, W-2)."""
    return (
        a[..., :-2, 1:-1]
        + a[..., 2:, 1:-1]
        + a[..., 1:-1, :-2]
        + a[..., 1:-1, 2:]
        - 4.0 * a[..., 1:-1, 1:-1]
    )


def laplacian_adjoint(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    out = np.zeros(shape)
    out[..., :-2, 1:-1] += g
    out[..., 2:, 1:-1] += g
    out[..., 1:-1, :-2] += g
    out[..., 1:-1, 2:] += g
    out[..., 1:-1, 1:-1] -= 4.0 * g
    return out


def has_laplacian_support(shape: tuple[int, ...]) -> bool:
    return shape[-1] >= 3 and shape[-2] >= 3
