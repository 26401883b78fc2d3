"""MAC model of a SADC block against one dense conv, and a latency benchmark.

Counts are multiply-accumulates; a dense ``C -> C`` conv over an ``H x W``
map costs ``C**2 * H * W * K**2``.
"""
from __future__ import annotations

import json
import math
import subprocess
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import _kernels
from .dataio import shadow_fraction_mask
from .morphology import as_mask, dilate
from .sadc import SadcBlock, sadc_test_forward, sadc_train_forward
from .tensor import Tensor

MIN_RELIABLE_REPS = 30


@dataclass
class FlopsReport:
    rho: float
    C: int
    H: int
    W: int
    K: int
    macs_dense: float
    macs_sadc: float
    gamma_exact: float
    gamma_approx: float
    halo: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


def _check_counts(**counts):
    for name, v in counts.items():
        if int(v) != v or v <= 0:
            raise ValueError(f"{name} must be a positive integer, got {v!r}")


def _disk_halo_fraction(rho: float, h: int, w: int, k: int) -> float:
    # area fraction of a disc of shadow area (1 - rho) * h * w grown by (k - 1) / 2
    area = (1.0 - rho) * h * w
    if area <= 0:
        return 0.0
    r = math.sqrt(area / math.pi) + (k - 1) / 2
    return min(1.0, math.pi * r * r / (h * w))


def flops_model(rho: float, C: int, H: int, W: int, K: int, include_dilation_halo: bool = False,
                halo_fraction: float | None = None) -> FlopsReport:
    """Analytic MACs of one block in the sparse phase.

    ``macs_sadc = rho*C*H*W*K^2 + 2*(1 - rho)*C^2*H*W*K^2``. With
    ``include_dilation_halo`` the first dense conv is charged on the dilated
    shadow area instead: ``halo_fraction`` if given, else a disc-shaped
    shadow estimate.
    """
    if not 0.0 <= rho <= 1.0 or not math.isfinite(rho):
        raise ValueError(f"rho must lie in [0, 1], got {rho}")
    _check_counts(C=C, H=H, W=W, K=K)
    hw = H * W
    dense = C * C * hw * K * K
    shadow = 1.0 - rho
    first = shadow
    if include_dilation_halo:
        first = _disk_halo_fraction(rho, H, W, K) if halo_fraction is None else float(halo_fraction)
        if not shadow <= first <= 1.0:
            raise ValueError(f"halo_fraction must lie in [1 - rho, 1], got {first}")
    sadc = rho * C * hw * K * K + (first + shadow) * C * C * hw * K * K
    return FlopsReport(rho, C, H, W, K, float(dense), float(sadc), 1.0 - sadc / dense, 2 * rho - 1,
                       include_dilation_halo)


def flops_from_mask(m, C: int, K: int) -> FlopsReport:
    """Exact integer MACs for a given mask, using measured active-pixel counts."""
    m = as_mask(m)
    if m.ndim != 2:
        raise ValueError("expected a single (h, w) mask")
    _check_counts(C=C, K=K)
    h, w = m.shape
    n_shadow = int(m.sum())
    n_ns = h * w - n_shadow
    n_first = int(dilate(m, K).sum()) if n_shadow else 0
    dense = C * C * h * w * K * K
    sadc = n_ns * C * K * K + (n_first + n_shadow) * C * C * K * K
    rho = n_ns / (h * w)
    return FlopsReport(rho, C, h, w, K, float(dense), float(sadc), 1.0 - sadc / dense, 2 * rho - 1, True)


def count_macs_instrumented(block: SadcBlock, m, phase: str = "test", x=None, input_mode: str = "whole") -> int:
    """MACs tallied inside the conv kernels during one block forward on a single image."""
    m = as_mask(m)
    if m.ndim != 2:
        raise ValueError("expected a single (h, w) mask")
    if phase not in ("train", "test"):
        raise ValueError(f"phase must be 'train' or 'test', got {phase!r}")
    if x is None:
        x = np.random.default_rng(0).standard_normal((1, block.channels) + m.shape).astype(np.float32)
    with _kernels.MacCounter() as counter:
        if phase == "train":
            sadc_train_forward(block, x, m, input_mode)
        else:
            sadc_test_forward(block, x, m, input_mode)
    return counter.total


# -- wall clock --------------------------------------------------------------

@dataclass
class BenchConfig:
    rho: float = 0.9
    C: int = 64
    H: int = 256
    W: int = 256
    K: int = 3
    reps: int = 30
    warmup: int = 3
    threads: int = 1
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError(f"rho must lie in [0, 1], got {self.rho}")
        _check_counts(C=self.C, H=self.H, W=self.W, K=self.K, reps=self.reps, threads=self.threads)
        if self.K % 2 == 0:
            raise ValueError("K must be odd")
        if self.warmup < 0:
            raise ValueError("warmup must be >= 0")


@dataclass
class BenchReport:
    config: dict
    dense_ms: dict
    sadc_ms: dict
    speedup: float
    threads: int
    git_rev: str
    reliable: bool = True
    measured_rho: float = field(default=0.0)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def _git_rev() -> str:
    try:
        out = subprocess.run(["git", "rev-parse", "--short", "HEAD"], cwd=Path(__file__).parent,
                             capture_output=True, text=True, timeout=5)
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def _summary(times_s) -> dict:
    ms = np.asarray(times_s) * 1e3
    return {"p10": float(np.percentile(ms, 10)), "p50": float(np.median(ms)), "p90": float(np.percentile(ms, 90))}


def _time(fn, reps: int, warmup: int) -> list[float]:
    for _ in range(warmup):
        fn()
    out = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        dt = time.perf_counter() - t0
        if math.isfinite(dt) and dt > 0:
            out.append(dt)
    return out


def benchmark(config: BenchConfig) -> BenchReport:
    """Median latency of one dense ``C -> C`` conv vs one sparse SADC block on the same input.

    The mask is a centred disc covering ``1 - rho`` of the frame. Dense and
    sparse repetitions are interleaved so drift affects both equally.
    """
    rng = np.random.default_rng(config.seed)
    c, k = config.C, config.K
    x = rng.standard_normal((1, c, config.H, config.W)).astype(np.float32)
    m = shadow_fraction_mask(config.H, config.W, 1.0 - config.rho)
    block = SadcBlock(c, k, rng=rng)
    w_dense = block.w1.weight.data
    pad = k // 2
    xt = Tensor(x)

    def dense():
        return _kernels.conv2d_forward(x, w_dense, 1, pad)

    def sparse():
        return sadc_test_forward(block, xt, m)

    with threadpool_limits(limits=config.threads):
        for _ in range(config.warmup):
            dense()
            sparse()
        t_dense, t_sparse = [], []
        for _ in range(config.reps):
            t_dense += _time(dense, 1, 0)
            t_sparse += _time(sparse, 1, 0)
    reliable = min(len(t_dense), len(t_sparse)) >= MIN_RELIABLE_REPS
    dense_s, sadc_s = _summary(t_dense), _summary(t_sparse)
    return BenchReport(
        config=asdict(config),
        dense_ms=dense_s,
        sadc_ms=sadc_s,
        speedup=dense_s["p50"] / sadc_s["p50"],
        threads=config.threads,
        git_rev=_git_rev(),
        reliable=reliable,
        measured_rho=float(1.0 - m.mean()),
    )
