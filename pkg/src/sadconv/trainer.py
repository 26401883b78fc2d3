"""Minibatch Adam training of :class:`SadcNet`, evaluation, and ablation sweeps."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, replace
from typing import Callable, Sequence, TextIO

import numpy as np
from threadpoolctl import threadpool_limits

from .dataio import Triplet, stack_batch
from .metrics import RegionReport, average_reports, region_report
from .objective import (Lambda2Schedule, StandInExtractor, gradient_loss, identity_extractor,
                        intra_distill_loss, lambda2, perceptual_loss, total_loss)
from .optim import AdamState, adam_step
from .sadc import SadcNet, net_forward
from .tensor import GradTape

ARMS = {"sadc": "sadc", "shared-conv": "shared", "naive-split": "split"}
FASHIONS = {1: "whole", 2: "split"}
EXTRACTORS = ("standin", "identity")
LR_SCHEDULES = ("constant", "cosine")


class TrainingDivergedError(FloatingPointError):
    def __init__(self, epoch: int, detail: str):
        super().__init__(f"training diverged at epoch {epoch}: {detail}")
        self.epoch = epoch


@dataclass
class TrainConfig:
    """Training hyperparameters and ablation switches.

    ``arm`` selects the block design (``"sadc"``, ``"shared-conv"`` or
    ``"naive-split"``), ``fashion`` whether block branches see the whole map
    (1) or only their own region (2) during training, and ``use_intra``
    whether the distillation term enters the loss. ``crop`` enables random
    square crops of that size.
    """

    epochs: int = 300
    batch_size: int = 5
    lr: float = 2e-4
    lr_schedule: str = "constant"
    kappa: int = 7
    schedule: str = "warmup-ramp"
    warmup_epochs: int = 50
    fashion: int = 1
    arm: str = "sadc"
    use_intra: bool = True
    channels: int = 16
    n_blocks: int = 3
    kernel_size: int = 3
    seed: int = 0
    crop: int | None = None
    lambda1: float = 1.0
    intra_norm: str = "image"
    extractor: str = "standin"
    init: str = "near_identity"
    threads: int = 1

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ValueError(f"lr_schedule must be one of {LR_SCHEDULES}, got {self.lr_schedule!r}")
        if self.arm not in ARMS:
            raise ValueError(f"arm must be one of {sorted(ARMS)}, got {self.arm!r}")
        if self.fashion not in FASHIONS:
            raise ValueError(f"fashion must be 1 or 2, got {self.fashion!r}")
        if self.extractor not in EXTRACTORS:
            raise ValueError(f"extractor must be one of {EXTRACTORS}")
        if self.kappa < 1 or self.kappa % 2 == 0:
            raise ValueError("kappa must be a positive odd integer")
        if self.crop is not None and self.crop < 1:
            raise ValueError("crop must be positive")
        self.lambda2_schedule()  # validates schedule fields

    def lambda2_schedule(self) -> Lambda2Schedule:
        warmup = min(self.warmup_epochs, self.epochs - 1) if self.schedule != "constant" else 0
        return Lambda2Schedule(self.schedule, warmup, self.epochs)

    @property
    def variant(self) -> str:
        return ARMS[self.arm]

    @property
    def input_mode(self) -> str:
        return FASHIONS[self.fashion]

    def build_net(self) -> SadcNet:
        return SadcNet(self.channels, self.n_blocks, self.kernel_size, self.variant, self.input_mode,
                       seed=self.seed, init=self.init)


def epoch_lr(config: TrainConfig, epoch: int) -> float:
    """Learning rate for ``epoch``; ``"cosine"`` anneals from ``lr`` towards 0 over the run."""
    if config.lr_schedule == "constant":
        return config.lr
    return config.lr * 0.5 * (1.0 + math.cos(math.pi * epoch / config.epochs))


def _extractor(name: str):
    return StandInExtractor(seed=0) if name == "standin" else identity_extractor


def _crop(rng, x, m, y, size):
    h, w = m.shape[-2:]
    if size >= h and size >= w:
        return x, m, y
    size_h, size_w = min(size, h), min(size, w)
    i = int(rng.integers(0, h - size_h + 1))
    j = int(rng.integers(0, w - size_w + 1))
    sl = (..., slice(i, i + size_h), slice(j, j + size_w))
    return x[sl], m[sl], y[sl]


def training_loss(net: SadcNet, x, m, y, config: TrainConfig, lam2: float, extractor=None):
    """Total loss and its parts for one batch, recorded on the active tape."""
    extractor = extractor or _extractor(config.extractor)
    out, branches = net_forward(net, x, m, "train", return_branches=True)
    percep = perceptual_loss(extractor, out, y)
    grad = gradient_loss(out, y)
    intra = []
    if config.use_intra:
        intra = [intra_distill_loss(x_s, x_ns, m, config.kappa, config.intra_norm) for x_s, x_ns in branches]
    total = total_loss(percep, grad, intra, config.lambda1, lam2 if config.use_intra else 0.0)
    parts = {"percep": percep.item(), "grad": grad.item(),
             "intra": float(sum(v.item() for v in intra)) if intra else 0.0}
    return total, parts


def fit(config: TrainConfig, data: Sequence[Triplet], log: TextIO | None = None,
        callback: Callable[[dict], None] | None = None):
    """Train a fresh net on ``data``.

    Returns ``(net, history)`` where ``history`` holds one dict per epoch
    (mean batch losses and the applied distillation weight). When ``log``
    is given each record is also written there as a JSON line.
    """
    data = list(data)
    if not data:
        raise ValueError("fit needs at least one triplet")
    shapes = {t.mask.shape for t in data}
    if len(shapes) != 1:
        raise ValueError(f"triplets differ in size: {sorted(shapes)}")
    x_all, m_all, y_all = stack_batch(data)
    rng = np.random.default_rng(config.seed)
    net = config.build_net()
    params = net.parameters()
    adam = AdamState.for_params(params, lr=config.lr)
    schedule = config.lambda2_schedule()
    extractor = _extractor(config.extractor)
    history = []
    with threadpool_limits(limits=config.threads):
        for epoch in range(config.epochs):
            lam2 = lambda2(schedule, epoch)
            adam.lr = epoch_lr(config, epoch)
            order = rng.permutation(len(data))
            sums = {"loss": 0.0, "percep": 0.0, "grad": 0.0, "intra": 0.0}
            batches = 0
            for start in range(0, len(order), config.batch_size):
                idx = order[start:start + config.batch_size]
                x, m, y = x_all[idx], m_all[idx], y_all[idx]
                if config.crop is not None:
                    x, m, y = _crop(rng, x, m, y, config.crop)
                try:
                    with GradTape() as tape:
                        loss, parts = training_loss(net, x, m, y, config, lam2, extractor)
                    grads = tape.gradient(loss, params)
                except FloatingPointError as exc:
                    raise TrainingDivergedError(epoch, str(exc)) from exc
                value = loss.item()
                if not math.isfinite(value):
                    raise TrainingDivergedError(epoch, f"loss is {value}")
                adam_step(adam, params, grads)
                sums["loss"] += value
                for k in ("percep", "grad", "intra"):
                    sums[k] += parts[k]
                batches += 1
            record = {"epoch": epoch, "lambda2": lam2, "lr": adam.lr, "arm": config.arm, "fashion": config.fashion,
                      **{k: v / batches for k, v in sums.items()}}
            history.append(record)
            if log is not None:
                log.write(json.dumps(record, sort_keys=True) + "\n")
                log.flush()
            if callback is not None:
                callback(record)
    return net, history


def predict(net: SadcNet, image, m, phase: str = "test") -> np.ndarray:
    """Clamped output images for a ``(3, h, w)`` or ``(n, 3, h, w)`` input."""
    image = np.asarray(image, dtype=np.float32)
    single = image.ndim == 3
    batch = image[None] if single else image
    m = np.asarray(m, dtype=bool)
    out = net_forward(net, batch, m, phase, clamp=True).data
    return out[0] if single else out


def evaluate(net: SadcNet, data: Sequence[Triplet], phase: str = "test") -> RegionReport:
    """Per-image region metrics of the net's outputs, averaged over ``data``."""
    data = list(data)
    if not data:
        raise ValueError("evaluate needs at least one triplet")
    reports = [region_report(predict(net, t.shadow_image, t.mask, phase), t.free_image, t.mask) for t in data]
    return average_reports(reports)


def evaluate_identity(data: Sequence[Triplet]) -> RegionReport:
    """Metrics of returning the shadow image unchanged."""
    return average_reports(region_report(t.shadow_image, t.free_image, t.mask) for t in data)


def kappa_sweep(config: TrainConfig, train: Sequence[Triplet], test: Sequence[Triplet],
                kappas: Sequence[int] = (3, 5, 7, 9, 11)) -> list[dict]:
    """Train one net per ring width and report test-set shadow-region metrics."""
    rows = []
    for kappa in kappas:
        net, history = fit(replace(config, kappa=kappa), train)
        report = evaluate(net, test)
        rows.append({"kappa": kappa, "final_loss": history[-1]["loss"], **{
            f"{region}_{metric}": report[region][metric]
            for region in ("shadow", "non-shadow", "all") for metric in ("rmse", "psnr", "ssim")}})
    return rows


def config_dict(config: TrainConfig) -> dict:
    return asdict(config)
