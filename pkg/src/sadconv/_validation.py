"""Input checks shared by the estimator and the command line."""
from __future__ import annotations

import numpy as np


def check_images(X, name: str = "X") -> np.ndarray:
    """Coerce to a float32 ``(n, 3, h, w)`` batch in [0, 1]; a single ``(3, h, w)`` image is promoted."""
    X = np.asarray(X)
    if X.dtype == np.uint8:
        X = X.astype(np.float32) / 255.0
    X = X.astype(np.float32, copy=False)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4 or X.shape[1] != 3:
        raise ValueError(f"{name} must have shape (n, 3, h, w) or (3, h, w), got {X.shape}")
    if X.shape[0] == 0:
        raise ValueError(f"{name} is empty")
    if not np.isfinite(X).all():
        raise ValueError(f"{name} contains non-finite values")
    if X.min() < 0.0 or X.max() > 1.0:
        raise ValueError(f"{name} values must lie in [0, 1], got range [{X.min():.4g}, {X.max():.4g}]")
    return X


def check_masks(mask, X: np.ndarray, name: str = "mask") -> np.ndarray:
    """Boolean ``(n, h, w)`` masks matching the batch ``X``; one ``(h, w)`` mask is broadcast."""
    m = np.asarray(mask)
    if m.dtype != bool:
        values = np.unique(m)
        if not np.isin(values, (0, 1)).all():
            raise ValueError(f"{name} must be binary, found values {values[:5]}")
        m = m.astype(bool)
    if m.ndim == 2:
        m = np.broadcast_to(m, (X.shape[0],) + m.shape)
    if m.ndim != 3 or m.shape != (X.shape[0],) + X.shape[2:]:
        raise ValueError(f"{name} shape {m.shape} does not match images {X.shape}")
    return np.ascontiguousarray(m)
