"""Training objective: perceptual, image-gradient and intra-convolution distillation terms."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .morphology import as_mask, boundary_masks
from .tensor import Tensor, as_tensor, conv2d, leaky_relu, log_softmax

SCHEDULE_MODES = ("constant", "warmup-constant", "warmup-ramp")

FeatureExtractor = Callable[[Tensor], Sequence[Tensor]]


# -- distillation ------------------------------------------------------------

def _ring_masks(m, kappa, dtype):
    m = as_mask(m)
    if m.ndim == 2:
        m = m[None]
    rings = [boundary_masks(mi, kappa) for mi in m]
    ms = np.stack([r[0] for r in rings])[:, None].astype(dtype)
    mns = np.stack([r[1] for r in rings])[:, None].astype(dtype)
    return ms, mns


def color_distributions(x_s: Tensor, x_ns: Tensor, m, kappa: int = 7, normalize: str = "image"):
    """Channel distributions of the two boundary rings.

    Returns ``(p, log_p, log_q, valid)``: the teacher distribution ``p`` from
    the non-shadow branch on the outer ring (detached, ndarray), the student
    log-distribution ``log_q`` from the shadow branch on the inner ring
    (Tensor), and a per-sample flag marking samples whose rings are both
    non-empty.

    ``normalize="image"`` divides ring sums by ``h * w``; ``"count"`` divides
    by the number of ring pixels instead.
    """
    x_s, x_ns = as_tensor(x_s), as_tensor(x_ns)
    if x_s.shape != x_ns.shape:
        raise ValueError(f"branch outputs differ in shape: {x_s.shape} vs {x_ns.shape}")
    if normalize not in ("image", "count"):
        raise ValueError("normalize must be 'image' or 'count'")
    n, c, h, w = x_s.shape
    ms, mns = _ring_masks(m, kappa, x_s.dtype)
    if ms.shape[0] not in (1, n) or ms.shape[-2:] != (h, w):
        raise ValueError(f"mask shape {np.shape(m)} does not match branch outputs {x_s.shape}")
    count_s = ms.sum(axis=(1, 2, 3))
    count_ns = mns.sum(axis=(1, 2, 3))
    valid = (count_s > 0) & (count_ns > 0)
    if normalize == "image":
        den_s = den_ns = np.full(ms.shape[0], float(h * w), dtype=x_s.dtype)
    else:
        den_s, den_ns = np.maximum(count_s, 1), np.maximum(count_ns, 1)

    p_logits = (x_ns.data * mns).sum(axis=(2, 3)) / den_ns[:, None]
    p_logits = p_logits - p_logits.max(axis=1, keepdims=True)
    log_p = p_logits - np.log(np.exp(p_logits).sum(axis=1, keepdims=True))
    q_logits = (x_s * ms).sum(axis=(2, 3)) / den_s[:, None].astype(x_s.dtype)
    return np.exp(log_p), log_p, log_softmax(q_logits, axis=1), np.broadcast_to(valid, (n,))


def intra_distill_loss(x_s: Tensor, x_ns: Tensor, m, kappa: int = 7, normalize: str = "image") -> Tensor:
    """``KL(p || q)`` between boundary colour distributions of one block, averaged over the batch.

    ``p`` comes from the non-shadow branch just outside the shadow and is
    treated as a fixed target; ``q`` comes from the shadow branch just inside
    it. Samples whose inner or outer ring is empty contribute 0.
    """
    p, log_p, log_q, valid = color_distributions(x_s, x_ns, m, kappa, normalize)
    weight = (p * valid[:, None]).astype(log_q.dtype)
    n = log_q.shape[0]
    # constant entropy term keeps the value equal to the KL, not just its gradient
    entropy = float((weight * log_p).sum())
    return ((log_q * weight).sum() * -1.0 + entropy) * (1.0 / n)


# -- reconstruction terms ----------------------------------------------------

def _same_shape(a: Tensor, b: Tensor, what: str):
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


def gradient_loss(i_out, i_gt) -> Tensor:
    """L1 distance between forward-difference image gradients.

    Mean over valid positions for the horizontal and vertical differences
    separately, then summed. A direction with no valid positions contributes 0.
    """
    i_out, i_gt = as_tensor(i_out), as_tensor(i_gt)
    _same_shape(i_out, i_gt, "gradient_loss")
    gt = i_gt.data
    total = None
    if i_out.shape[-1] > 1:
        dx_gt = gt[..., :, 1:] - gt[..., :, :-1]
        term = (i_out[..., :, 1:] - i_out[..., :, :-1] - dx_gt).abs().mean()
        total = term
    if i_out.shape[-2] > 1:
        dy_gt = gt[..., 1:, :] - gt[..., :-1, :]
        term = (i_out[..., 1:, :] - i_out[..., :-1, :] - dy_gt).abs().mean()
        total = term if total is None else total + term
    return total if total is not None else i_out.sum() * 0.0


class StandInExtractor:
    """Frozen three-stage strided conv stack with fixed-seed weights.

    Serves as a deterministic structural feature map for the perceptual term;
    any callable mapping a tensor to a list of feature tensors can replace it.
    """

    def __init__(self, seed: int = 0, widths: tuple[int, int, int] = (8, 16, 32), slope: float = 0.2):
        rng = np.random.default_rng(seed)
        chans = (3,) + tuple(widths)
        self.slope = slope
        self.weights = []
        for i, (cin, cout) in enumerate(zip(chans[:-1], chans[1:])):
            w = rng.standard_normal((cout, cin, 3, 3)) * math.sqrt(2.0 / (cin * 9))
            self.weights.append((Tensor(w.astype(np.float32)), 1 if i == 0 else 2))

    def __call__(self, x: Tensor) -> list[Tensor]:
        feats = []
        h = as_tensor(x)
        for w, stride in self.weights:
            h = leaky_relu(conv2d(h, Tensor(w.data.astype(h.dtype)), stride=stride, padding=1), self.slope)
            feats.append(h)
        return feats


def identity_extractor(x: Tensor) -> list[Tensor]:
    return [as_tensor(x)]


def perceptual_loss(extractor: FeatureExtractor, i_out, i_gt) -> Tensor:
    """Sum over feature stages of the mean absolute feature difference."""
    i_out, i_gt = as_tensor(i_out), as_tensor(i_gt)
    _same_shape(i_out, i_gt, "perceptual_loss")
    target = [f.data for f in extractor(Tensor(i_gt.data))]
    total = None
    for f_out, f_gt in zip(extractor(i_out), target):
        term = (f_out - f_gt).abs().mean()
        total = term if total is None else total + term
    return total


# -- weighting ---------------------------------------------------------------

@dataclass(frozen=True)
class Lambda2Schedule:
    """Weight of the distillation term per epoch; ends at 1."""

    mode: str = "warmup-ramp"
    warmup_epochs: int = 50
    total_epochs: int = 300

    def __post_init__(self):
        if self.mode not in SCHEDULE_MODES:
            raise ValueError(f"mode must be one of {SCHEDULE_MODES}, got {self.mode!r}")
        if self.total_epochs < 1:
            raise ValueError("total_epochs must be >= 1")
        if self.mode != "constant" and not 0 <= self.warmup_epochs < self.total_epochs:
            raise ValueError("warmup_epochs must lie in [0, total_epochs)")


def lambda2(schedule: Lambda2Schedule, epoch: int) -> float:
    if not 0 <= epoch < schedule.total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {schedule.total_epochs})")
    if schedule.mode == "constant":
        return 1.0
    if epoch < schedule.warmup_epochs:
        return 0.0
    if schedule.mode == "warmup-constant":
        return 1.0
    span = schedule.total_epochs - 1 - schedule.warmup_epochs
    return 1.0 if span == 0 else (epoch - schedule.warmup_epochs) / span


def _value(x) -> float:
    return float(x.data) if isinstance(x, Tensor) else float(x)


def total_loss(percep, grad, intra: Sequence = (), lambda1: float = 1.0, lambda2: float = 0.0):
    """``percep + lambda1 * grad + lambda2 * sum(intra)``; rejects non-finite parts."""
    parts = [("percep", percep), ("grad", grad)] + [(f"intra[{i}]", v) for i, v in enumerate(intra)]
    for name, v in parts:
        if not math.isfinite(_value(v)):
            raise FloatingPointError(f"loss part {name} is not finite ({_value(v)})")
    total = percep + grad * lambda1
    if lambda2 and len(intra):
        acc = intra[0]
        for v in intra[1:]:
            acc = acc + v
        total = total + acc * lambda2
    return total
