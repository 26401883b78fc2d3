"""Binary morphology with square structuring elements.

Dilation treats pixels outside the image as 0 and erosion treats them as 1,
so a region touching the frame border keeps no artificial rim there.
"""
from __future__ import annotations

import numpy as np
from scipy import ndimage


def _check_kernel(k: int) -> None:
    if k < 1 or k % 2 == 0:
        raise ValueError(f"structuring element size must be odd and >= 1, got {k}")


def as_mask(m) -> np.ndarray:
    m = np.asarray(m)
    if m.dtype != bool:
        if not np.isin(m, (0, 1)).all():
            raise ValueError("mask entries must be 0 or 1")
        m = m.astype(bool)
    return m


def _footprint(k: int, ndim: int) -> np.ndarray:
    # Stacked masks (n, h, w) are processed per image.
    shape = (1,) * (ndim - 2) + (k, k)
    return np.ones(shape, dtype=bool)


def dilate(m, k: int) -> np.ndarray:
    """Set every pixel within Chebyshev radius ``(k - 1) // 2`` of a set pixel."""
    _check_kernel(k)
    m = as_mask(m)
    if k == 1 or not m.any():
        return m.copy()
    return ndimage.binary_dilation(m, structure=_footprint(k, m.ndim), border_value=0)


def erode(m, k: int) -> np.ndarray:
    """Keep pixels whose whole in-image ``k x k`` neighbourhood is set."""
    _check_kernel(k)
    m = as_mask(m)
    if k == 1:
        return m.copy()
    return ndimage.binary_erosion(m, structure=_footprint(k, m.ndim), border_value=1)


def required_dilation(k_conv: int, depth: int) -> int:
    """Square kernel size covering the receptive field of ``depth`` stacked same-padded convs.

    Composing two square dilations of sizes a and b gives size a + b - 1, so
    ``depth`` convolutions of size ``k_conv`` need ``depth * (k_conv - 1) + 1``.
    """
    _check_kernel(k_conv)
    if depth < 0:
        raise ValueError("depth must be non-negative")
    return depth * (k_conv - 1) + 1


def boundary_masks(m, kappa: int = 7) -> tuple[np.ndarray, np.ndarray]:
    """Inner ring ``m - erode(m)`` and outer ring ``dilate(m) - m`` of a shadow mask."""
    m = as_mask(m)
    m_s = m & ~erode(m, kappa)
    m_ns = dilate(m, kappa) & ~m
    return m_s, m_ns
