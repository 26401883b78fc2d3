"""Shadow-removal metrics: LAB RMSE, PSNR and SSIM per region.

Images are ``(3, h, w)`` or ``(n, 3, h, w)`` arrays in [0, 1]. Regions are
``"shadow"`` (mask set), ``"non-shadow"`` (mask clear) and ``"all"``.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .morphology import as_mask
from .tensor import Tensor

REGIONS = ("shadow", "non-shadow", "all")
PSNR_CAP = 99.0

# D65, 2 degree observer
WHITE_D65 = np.array([0.95047, 1.0, 1.08883])
SRGB_TO_XYZ = np.array([
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
])


class _ClampCounter:
    def __init__(self):
        self.count = 0


lab_clamp_events = _ClampCounter()


def _array(x) -> np.ndarray:
    return np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)


def rgb_to_lab(image) -> np.ndarray:
    """sRGB in [0, 1] (channel axis -3) to CIE L*a*b* under D65.

    Out-of-range inputs are clipped; each clipping call bumps
    ``lab_clamp_events.count`` and emits a ``RuntimeWarning``.
    """
    rgb = _array(image)
    if rgb.ndim < 3 or rgb.shape[-3] != 3:
        raise ValueError(f"expected 3 channels on axis -3, got shape {rgb.shape}")
    if rgb.min() < 0.0 or rgb.max() > 1.0:
        lab_clamp_events.count += 1
        warnings.warn("rgb_to_lab: input outside [0, 1] was clipped", RuntimeWarning, stacklevel=2)
        rgb = np.clip(rgb, 0.0, 1.0)
    linear = np.where(rgb <= 0.04045, rgb / 12.92, ((rgb + 0.055) / 1.055) ** 2.4)
    xyz = np.einsum("ij,...jhw->...ihw", SRGB_TO_XYZ, linear)
    t = xyz / WHITE_D65[:, None, None]
    delta = 6.0 / 29.0
    f = np.where(t > delta ** 3, np.cbrt(t), t / (3 * delta ** 2) + 4.0 / 29.0)
    fx, fy, fz = f[..., 0, :, :], f[..., 1, :, :], f[..., 2, :, :]
    return np.stack([116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)], axis=-3)


def _region_mask(m, shape, region: str) -> np.ndarray:
    if region not in REGIONS:
        raise ValueError(f"region must be one of {REGIONS}, got {region!r}")
    h, w = shape[-2:]
    if region == "all":
        return np.ones((h, w), dtype=bool)
    m = as_mask(m)
    if m.shape[-2:] != (h, w):
        raise ValueError(f"mask shape {m.shape} does not match image shape {shape}")
    return m if region == "shadow" else ~m


def rmse_from_lab(lab_pred, lab_gt, m, region: str = "all") -> float:
    """RMSE over the selected pixels and all three Lab channels; 0 for an empty region."""
    sel = _region_mask(m, np.shape(lab_pred), region)
    if not sel.any():
        return 0.0
    d = (np.asarray(lab_pred) - np.asarray(lab_gt)) ** 2
    d = d[..., sel]  # (..., 3, count)
    return float(math.sqrt(d.mean()))


def region_rmse_lab(pred, gt, m, region: str = "all") -> float:
    pred, gt = _array(pred), _array(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    return rmse_from_lab(rgb_to_lab(pred), rgb_to_lab(gt), m, region)


def psnr(pred, gt, m=None, region: str = "all") -> float:
    """Peak-1 PSNR in dB over a region; identical inputs give the 99 dB cap."""
    pred, gt = _array(pred), _array(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    sel = _region_mask(m, pred.shape, region)
    if not sel.any():
        return PSNR_CAP
    mse = float(((pred - gt) ** 2)[..., sel].mean())
    if mse <= 1e-10:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def _gaussian(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    k = g.size
    rows = sliding_window_view(img, k, axis=-1) @ g
    return sliding_window_view(rows, k, axis=-2) @ g


def ssim_map(pred, gt, window: int = 11, sigma: float = 1.5) -> np.ndarray:
    """Per-window SSIM over valid windows, averaged over channels; shape (..., h-10, w-10)."""
    x, y = _array(pred), _array(gt)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {y.shape}")
    if x.shape[-1] < window or x.shape[-2] < window:
        raise ValueError(f"image {x.shape[-2:]} is smaller than the {window}x{window} SSIM window")
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    g = _gaussian(window, sigma)
    mu_x, mu_y = _filter_valid(x, g), _filter_valid(y, g)
    sxx = _filter_valid(x * x, g) - mu_x ** 2
    syy = _filter_valid(y * y, g) - mu_y ** 2
    sxy = _filter_valid(x * y, g) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x ** 2 + mu_y ** 2 + c1) * (sxx + syy + c2)
    return (num / den).mean(axis=-3)


def ssim(pred, gt, m=None, region: str = "all") -> float:
    """Mean SSIM over windows whose centre lies in the region (1.0 if none do)."""
    smap = ssim_map(pred, gt)
    sel = _region_mask(m, np.shape(_array(pred)), region)
    r = (sel.shape[0] - smap.shape[-2]) // 2
    sel = sel[r:r + smap.shape[-2], r:r + smap.shape[-1]]
    if not sel.any():
        return 1.0
    return float(smap[..., sel].mean())


@dataclass
class RegionReport:
    """Per-region rmse (LAB units), psnr (dB) and ssim; ``empty`` flags regions with no pixels."""

    values: dict = field(default_factory=dict)
    empty: dict = field(default_factory=dict)

    def __getitem__(self, region: str) -> dict:
        return self.values[region]

    def to_json(self) -> str:
        parts = []
        for region in REGIONS:
            v = self.values[region]
            parts.append(f'"{region}": {{"rmse": {v["rmse"]:.4f}, "psnr": {v["psnr"]:.4f}, '
                         f'"ssim": {v["ssim"]:.4f}}}')
        return "{" + ", ".join(parts) + "}"


def region_report(pred, gt, m) -> RegionReport:
    """All three metrics over the three regions for one ``(3, h, w)`` image."""
    pred, gt = _array(pred), _array(gt)
    if pred.ndim != 3:
        raise ValueError(f"expected a single (3, h, w) image, got shape {pred.shape}")
    lab_p, lab_g = rgb_to_lab(pred), rgb_to_lab(gt)
    report = RegionReport()
    for region in REGIONS:
        sel = _region_mask(m, pred.shape, region)
        report.empty[region] = not sel.any()
        report.values[region] = {
            "rmse": rmse_from_lab(lab_p, lab_g, m, region),
            "psnr": psnr(pred, gt, m, region),
            "ssim": ssim(pred, gt, m, region),
        }
    return report


def average_reports(reports) -> RegionReport:
    """Per-image mean; images where a region is empty are left out of that region's mean."""
    reports = list(reports)
    if not reports:
        raise ValueError("no reports to average")
    out = RegionReport()
    for region in REGIONS:
        use = [r for r in reports if not r.empty[region]]
        out.empty[region] = not use
        use = use or reports
        out.values[region] = {k: float(np.mean([r.values[region][k] for r in use])) for k in ("rmse", "psnr", "ssim")}
    return out
