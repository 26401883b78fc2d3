"""PNG image/mask I/O, ISTD-style folder scanning, and a synthetic shadow-triplet generator."""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .morphology import as_mask


class ImageIOError(Exception):
    """Base class for image loading failures."""


class MissingImageError(ImageIOError, FileNotFoundError):
    pass


class NotPNGError(ImageIOError):
    pass


class BitDepthError(ImageIOError):
    pass


class DatasetLayoutError(Exception):
    pass


def _open_png(path) -> Image.Image:
    path = Path(path)
    if not path.is_file():
        raise MissingImageError(f"no such image: {path}")
    try:
        img = Image.open(path)
        img.load()
    except Exception as exc:  # PIL raises a zoo of types for unreadable data
        raise NotPNGError(f"{path}: not a readable image ({exc})") from exc
    if img.format != "PNG":
        raise NotPNGError(f"{path}: expected PNG, got {img.format}")
    if img.mode not in ("L", "RGB", "RGBA", "P", "1"):
        raise BitDepthError(f"{path}: unsupported mode {img.mode!r} (need 8-bit)")
    return img


def load_image(path) -> np.ndarray:
    """8-bit RGB PNG to a ``(3, h, w)`` float32 array, byte ``b`` mapping to ``b / 255``."""
    img = _open_png(path)
    if img.mode == "1":
        raise BitDepthError(f"{path}: 1-bit image, expected 8-bit RGB")
    arr = np.asarray(img.convert("RGB"), dtype=np.uint8)
    return (arr.transpose(2, 0, 1).astype(np.float32) / 255.0).astype(np.float32)


def quantize(image) -> np.ndarray:
    return np.round(np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def save_image(image, path) -> None:
    """Clamp to [0, 1], quantise with ``round(v * 255)`` and write an RGB PNG."""
    arr = np.asarray(image.data if hasattr(image, "data") else image)
    if arr.ndim == 4 and arr.shape[0] == 1:
        arr = arr[0]
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ValueError(f"expected a (3, h, w) image, got shape {arr.shape}")
    Image.fromarray(quantize(arr).transpose(1, 2, 0)).save(path, format="PNG")


def load_mask(path, threshold: int = 128) -> np.ndarray:
    """Grayscale (or RGB, via luma) PNG to a boolean mask: ``pixel >= threshold``."""
    img = _open_png(path)
    if img.size[0] == 0 or img.size[1] == 0:
        raise ImageIOError(f"{path}: empty image")
    arr = np.asarray(img.convert("L"), dtype=np.uint8)
    return arr >= threshold


def save_mask(m, path) -> None:
    m = as_mask(m)
    Image.fromarray(m.astype(np.uint8) * 255).save(path, format="PNG")


# -- triplets ----------------------------------------------------------------

@dataclass
class Triplet:
    shadow_image: np.ndarray
    mask: np.ndarray
    free_image: np.ndarray
    id: str = ""

    def __post_init__(self):
        validate_triplet(self)


def validate_triplet(t: Triplet) -> None:
    for name in ("shadow_image", "free_image"):
        arr = getattr(t, name)
        if arr.ndim != 3 or arr.shape[0] != 3:
            raise ValueError(f"triplet {t.id!r}: {name} must be (3, h, w), got {arr.shape}")
    if t.shadow_image.shape != t.free_image.shape or t.mask.shape != t.shadow_image.shape[1:]:
        raise ValueError(f"triplet {t.id!r}: shapes differ: shadow {t.shadow_image.shape}, "
                         f"mask {t.mask.shape}, free {t.free_image.shape}")


@dataclass
class TripletPaths:
    id: str
    shadow: Path
    mask: Path
    free: Path

    def load(self, threshold: int = 128) -> Triplet:
        return Triplet(load_image(self.shadow), load_mask(self.mask, threshold), load_image(self.free), self.id)


@dataclass
class ScanResult:
    triplets: list[TripletPaths]
    skipped: list[str] = field(default_factory=list)


ISTD_FOLDERS = ("A", "B", "C")


def scan_istd(root, folders: tuple[str, str, str] = ISTD_FOLDERS) -> ScanResult:
    """Join ``shadow/mask/free`` subfolders on shared PNG file names.

    Files present in only some folders are returned in ``skipped`` as
    ``"<folder>/<name>"`` entries.
    """
    root = Path(root)
    dirs = [root / f for f in folders]
    for d in dirs:
        if not d.is_dir():
            raise DatasetLayoutError(f"missing subfolder {d}")
    names = [{p.name for p in d.iterdir() if p.suffix.lower() == ".png"} for d in dirs]
    common = set.intersection(*names)
    skipped = sorted(f"{folder}/{n}" for folder, ns in zip(folders, names) for n in ns - common)
    triplets = [TripletPaths(Path(n).stem, dirs[0] / n, dirs[1] / n, dirs[2] / n) for n in sorted(common)]
    triplets.sort(key=lambda t: t.id)
    return ScanResult(triplets, skipped)


def write_istd(triplets, root, folders: tuple[str, str, str] = ISTD_FOLDERS) -> None:
    root = Path(root)
    for f in folders:
        (root / f).mkdir(parents=True, exist_ok=True)
    for t in triplets:
        name = f"{t.id}.png"
        save_image(t.shadow_image, root / folders[0] / name)
        save_mask(t.mask, root / folders[1] / name)
        save_image(t.free_image, root / folders[2] / name)


# -- synthetic shadows -------------------------------------------------------

@dataclass
class SynthConfig:
    """Parameters of the synthetic shadow generator.

    ``rho_target`` is the requested non-shadow area fraction; ``None`` draws
    a shadow fraction uniformly from ``shadow_fraction_range``.
    """

    seed: int = 0
    size: int = 64
    shape_family: str = "mixed"  # ellipse | polygon | mixed
    alpha_range: tuple[float, float] = (0.3, 0.6)
    tint: float = 0.1
    texture: str = "smooth"  # smooth | stripes
    rho_target: float | None = None
    shadow_fraction_range: tuple[float, float] = (0.15, 0.4)

    def __post_init__(self):
        lo, hi = self.alpha_range
        if not 0.0 < lo <= hi <= 1.0:
            raise ValueError(f"alpha_range must satisfy 0 < lo <= hi <= 1, got {self.alpha_range}")
        if self.shape_family not in ("ellipse", "polygon", "mixed"):
            raise ValueError(f"unknown shape family {self.shape_family!r}")
        if self.texture not in ("smooth", "stripes"):
            raise ValueError(f"unknown texture family {self.texture!r}")
        if self.rho_target is not None and not 0.0 <= self.rho_target <= 1.0:
            raise ValueError("rho_target must lie in [0, 1]")
        if self.size < 4:
            raise ValueError("size must be >= 4")


def _texture(rng, size: int, family: str) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / size
    base = rng.uniform(0.45, 0.8, size=3)
    img = np.empty((3, size, size))
    for c in range(3):
        field_ = np.zeros((size, size))
        for _ in range(3):
            if family == "smooth":
                fy, fx = rng.uniform(0.5, 3.0, size=2)
            else:
                fy, fx = rng.uniform(0.0, 1.0), rng.uniform(4.0, 8.0)
            phase = rng.uniform(0, 2 * np.pi)
            field_ += np.sin(2 * np.pi * (fy * yy + fx * xx) + phase)
        img[c] = base[c] + 0.06 * field_
    return np.clip(img, 0.0, 1.0)


def _star_radius(theta, angles, radii):
    # piecewise-linear radius over angle, periodic
    a = np.concatenate([angles, angles[:1] + 2 * np.pi])
    r = np.concatenate([radii, radii[:1]])
    return np.interp(np.mod(theta - angles[0], 2 * np.pi) + angles[0], a, r)


def _shape_mask(rng, size: int, family: str, area_fraction: float) -> np.ndarray:
    if area_fraction <= 0.0:
        return np.zeros((size, size), dtype=bool)
    if area_fraction >= 1.0:
        return np.ones((size, size), dtype=bool)
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    cy, cx = rng.uniform(0.3, 0.7, size=2) * size
    if family == "mixed":
        family = "ellipse" if rng.random() < 0.5 else "polygon"
    if family == "ellipse":
        ay, ax = rng.uniform(0.6, 1.4), rng.uniform(0.6, 1.4)
        rot = rng.uniform(0, np.pi)
        dy, dx = yy - cy, xx - cx
        u = (dx * np.cos(rot) + dy * np.sin(rot)) / ax
        v = (-dx * np.sin(rot) + dy * np.cos(rot)) / ay
        dist = np.hypot(u, v)
    else:
        n = int(rng.integers(5, 9))
        angles = np.sort(rng.uniform(0, 2 * np.pi, size=n))
        radii = rng.uniform(0.6, 1.4, size=n)
        theta = np.arctan2(yy - cy, xx - cx)
        dist = np.hypot(yy - cy, xx - cx) / _star_radius(theta, angles, radii)
    # the mask is {dist < s}; pick s so the area matches
    order = np.sort(dist.ravel())
    count = int(round(area_fraction * size * size))
    count = min(max(count, 1), size * size)
    return dist <= order[count - 1]


def synth_triplet(rng, config: SynthConfig, idx: int) -> Triplet:
    size = config.size
    free = _texture(rng, size, config.texture)
    if config.rho_target is None:
        frac = rng.uniform(*config.shadow_fraction_range)
    else:
        frac = 1.0 - config.rho_target
    m = _shape_mask(rng, size, config.shape_family, frac)
    alpha = rng.uniform(*config.alpha_range)
    tint = 1.0 + rng.uniform(-config.tint, config.tint, size=3) if config.tint > 0 else np.ones(3)
    factor = np.where(m[None], (alpha * tint)[:, None, None], 1.0)
    shadow = np.clip(free * factor, 0.0, 1.0)
    # stored at 8-bit precision so disk round trips are lossless
    to8 = lambda a: (quantize(a).astype(np.float32) / 255.0).astype(np.float32)
    return Triplet(to8(shadow), m, to8(free), f"synth_{idx:05d}")


def synth_triplets(config: SynthConfig, n: int) -> list[Triplet]:
    """``n`` seed-deterministic triplets; each gets its own child generator."""
    if n <= 0:
        return []
    children = np.random.SeedSequence(config.seed).spawn(n)
    return [synth_triplet(np.random.default_rng(s), config, i) for i, s in enumerate(children)]


def shadow_fraction_mask(h: int, w: int, shadow_fraction: float) -> np.ndarray:
    """Centred disc covering ``shadow_fraction`` of an ``h x w`` frame (exact pixel count)."""
    if shadow_fraction <= 0:
        return np.zeros((h, w), dtype=bool)
    if shadow_fraction >= 1:
        return np.ones((h, w), dtype=bool)
    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    dist = np.hypot(yy - h / 2, xx - w / 2)
    flat = dist.ravel()
    count = int(round(shadow_fraction * h * w))
    order = np.argsort(flat, kind="stable")
    m = np.zeros(h * w, dtype=bool)
    m[order[:count]] = True
    return m.reshape(h, w)


def stack_batch(triplets) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    triplets = list(triplets)
    return (np.stack([t.shadow_image for t in triplets]),
            np.stack([t.mask for t in triplets]),
            np.stack([t.free_image for t in triplets]))


def env_threads(default: int | None = None) -> int | None:
    value = os.environ.get("SADC_THREADS")
    return int(value) if value else default
