"""Shadow-aware dynamic convolution.

A block routes non-shadow pixels through a cheap depthwise convolution and
shadow pixels through two stacked dense convolutions, merges the two by the
shadow mask and adds the input back::

    x_ns = f(W_l * x)
    x_s  = f(W_2 * f(W_1 * x))
    out  = where(m, x_s, x_ns) + x

:func:`sadc_train_forward` evaluates both branches on the whole map (and is
differentiable). :func:`sadc_test_forward` evaluates each convolution only at
the pixels whose output is needed: the depthwise conv at ``m == 0``, the
second dense conv at ``m == 1``, the first dense conv on ``dilate(m, K)`` and
reading input only from ``dilate(m, 2K - 1)``. The two agree to float
rounding.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy import ndimage

from . import _kernels
from .morphology import as_mask, dilate, required_dilation
from .tensor import ConvWeight, Tensor, as_tensor, conv2d, leaky_relu, masked_merge

VARIANTS = ("sadc", "shared", "split")
INPUT_MODES = ("whole", "split")


def _he(rng, shape, fan_in, scale, dtype):
    return (rng.standard_normal(shape) * (scale * np.sqrt(2.0 / fan_in))).astype(dtype)


class SadcBlock:
    """One two-branch unit with ``C`` input and output channels.

    Parameters
    ----------
    channels : int
        Feature channels ``C``.
    kernel_size : int
        Odd kernel size ``K`` shared by all three convolutions.
    variant : {"sadc", "shared", "split"}
        ``"sadc"`` is the depthwise / two-dense design. ``"shared"`` applies the
        two dense convs to every pixel and ignores the mask. ``"split"`` uses one
        dense conv per region.
    slope : float
        LeakyReLU negative slope.
    bias : bool
        Whether the convolutions carry biases.
    init_scale : float
        Multiplier on He-normal initialisation; 0 gives an all-zero block.
    """

    def __init__(self, channels: int, kernel_size: int = 3, variant: str = "sadc", slope: float = 0.2,
                 bias: bool = True, rng=None, init_scale: float = 1.0, dtype=np.float32):
        if variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {variant!r}")
        if kernel_size % 2 == 0:
            raise ValueError("kernel_size must be odd")
        rng = np.random.default_rng(rng)
        c, k = channels, kernel_size
        self.channels, self.kernel_size, self.variant, self.slope = c, k, variant, slope

        def dense():
            b = Tensor(np.zeros(c, dtype), requires_grad=True) if bias else None
            return ConvWeight(Tensor(_he(rng, (c, c, k, k), c * k * k, init_scale, dtype), requires_grad=True), b)

        def depthwise():
            b = Tensor(np.zeros(c, dtype), requires_grad=True) if bias else None
            return ConvWeight(Tensor(_he(rng, (c, 1, k, k), k * k, init_scale, dtype), requires_grad=True), b,
                              groups=c)

        self.w_l: ConvWeight | None = None
        self.w2: ConvWeight | None = None
        if variant == "sadc":
            self.w_l, self.w1, self.w2 = depthwise(), dense(), dense()
        elif variant == "shared":
            self.w1, self.w2 = dense(), dense()
        else:
            self.w_l, self.w1 = dense(), dense()

    @property
    def shadow_convs(self) -> list[ConvWeight]:
        return [w for w in (self.w1, self.w2) if w is not None]

    @property
    def d1(self) -> int:
        """Dilation size for the intermediate (first-conv output) mask."""
        return required_dilation(self.kernel_size, len(self.shadow_convs) - 1)

    @property
    def d2(self) -> int:
        """Dilation size ``k'`` for the shadow branch's input mask."""
        return required_dilation(self.kernel_size, len(self.shadow_convs))

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out = {}
        for name in ("w_l", "w1", "w2"):
            cw = getattr(self, name)
            if cw is None:
                continue
            out[f"{prefix}{name}"] = cw.weight
            if cw.bias is not None:
                out[f"{prefix}{name}.bias"] = cw.bias
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def __repr__(self):
        return f"SadcBlock(C={self.channels}, K={self.kernel_size}, variant={self.variant!r})"


# -- active sets -------------------------------------------------------------

@dataclass
class ActiveSet:
    """Pixels selected by a mask, row-major, with per-component bounding boxes."""

    coords: np.ndarray
    shape: tuple[int, int]
    _mask: np.ndarray = field(repr=False)

    @classmethod
    def from_mask(cls, m) -> "ActiveSet":
        m = as_mask(m)
        if m.ndim != 2:
            raise ValueError(f"expected an (h, w) mask, got shape {m.shape}")
        coords = np.argwhere(m)
        return cls(coords=coords, shape=m.shape, _mask=m)

    def __len__(self):
        return len(self.coords)

    def flat(self, width: int | None = None, pad: int = 0) -> np.ndarray:
        """Flat row indices in an image of ``width`` columns, shifted by ``pad`` on both axes."""
        width = self.shape[1] if width is None else width
        return ((self.coords[:, 0] + pad) * width + self.coords[:, 1] + pad).astype(np.int64)

    @cached_property
    def tiles(self) -> list[tuple[slice, slice]]:
        """Tight bounding boxes of the 8-connected components."""
        labels, _ = ndimage.label(self._mask, structure=np.ones((3, 3), bool))
        return [bb for bb in ndimage.find_objects(labels) if bb is not None]


def gather_active(x, m) -> tuple[ActiveSet, np.ndarray]:
    """Values of ``x`` at the pixels of ``m``, as an ``(n, c, A)`` array."""
    x = np.asarray(x.data if isinstance(x, Tensor) else x)
    active = ActiveSet.from_mask(m)
    if x.shape[-2:] != active.shape:
        raise ValueError(f"mask shape {active.shape} does not match tensor shape {x.shape}")
    return active, x[..., active.coords[:, 0], active.coords[:, 1]]


def scatter_active(values: np.ndarray, active: ActiveSet, fill: float = 0.0) -> np.ndarray:
    out = np.full(values.shape[:-1] + tuple(active.shape), fill, dtype=values.dtype)
    out[..., active.coords[:, 0], active.coords[:, 1]] = values
    return out


# -- forward passes ----------------------------------------------------------

def _check_block_input(block: SadcBlock, x: Tensor, m) -> np.ndarray:
    if x.ndim != 4:
        raise ValueError(f"expected an (n, c, h, w) tensor, got shape {x.shape}")
    if x.shape[1] != block.channels:
        raise ValueError(f"block has {block.channels} channels but input has {x.shape[1]}")
    m = as_mask(m)
    if m.shape[-2:] != x.shape[-2:] or (m.ndim == 3 and m.shape[0] not in (1, x.shape[0])) or m.ndim not in (2, 3):
        raise ValueError(f"mask shape {m.shape} does not match tensor shape {x.shape}")
    return m


def _mask4(m: np.ndarray, dtype) -> np.ndarray:
    return (m[None, None] if m.ndim == 2 else m[:, None]).astype(dtype)


def sadc_train_forward(block: SadcBlock, x, m, input_mode: str = "whole", return_branches: bool = False):
    """Whole-map forward pass; differentiable.

    With ``input_mode="split"`` the shadow branch sees ``x * m`` and the
    non-shadow branch ``x * (1 - m)`` instead of the whole map.
    Returns the block output, plus ``(x_s, x_ns)`` when ``return_branches``.
    """
    if input_mode not in INPUT_MODES:
        raise ValueError(f"input_mode must be one of {INPUT_MODES}")
    x = as_tensor(x)
    m = _check_block_input(block, x, m)
    f = block.slope
    if block.variant == "shared":
        h = x
        for conv in block.shadow_convs:
            h = leaky_relu(conv(h), f)
        out = h + x
        return (out, (h, h)) if return_branches else out
    if input_mode == "split":
        m4 = _mask4(m, x.dtype)
        xs_in, xns_in = x * m4, x * (1 - m4)
    else:
        xs_in = xns_in = x
    h = xs_in
    for conv in block.shadow_convs:
        h = leaky_relu(conv(h), f)
    x_ns = leaky_relu(block.w_l(xns_in), f)
    out = masked_merge(h, x_ns, m) + x
    return (out, (h, x_ns)) if return_branches else out


class _Plane:
    """Geometry of a zero-padded plane flattened to ``(c, hp * wp)``."""

    def __init__(self, h: int, w: int, k: int):
        self.h, self.w, self.pad = h, w, (k - 1) // 2
        self.hp, self.wp = h + 2 * self.pad, w + 2 * self.pad
        self.offsets = _kernels.tap_offsets(k, self.wp)

    def empty(self, c: int, dtype) -> np.ndarray:
        return np.zeros((c, self.hp * self.wp), dtype=dtype)

    def centers(self, active: ActiveSet) -> np.ndarray:
        return active.flat(self.wp, self.pad)

    def corners(self, active: ActiveSet) -> np.ndarray:
        # top-left tap of each pixel's window
        return active.flat(self.wp, 0)

    def restricted(self, x_flat: np.ndarray, active: ActiveSet) -> np.ndarray:
        """Padded copy of ``x_flat`` (``(c, h * w)``) keeping only the active pixels."""
        plane = self.empty(x_flat.shape[0], x_flat.dtype)
        return _kernels.scatter_columns(plane, self.centers(active), np.take(x_flat, active.flat(), axis=1))


def _weight(cw: ConvWeight, dtype) -> np.ndarray:
    return np.ascontiguousarray(cw.weight.data, dtype=dtype)


def _bias(cw: ConvWeight, dtype):
    return None if cw.bias is None else cw.bias.data.astype(dtype, copy=False)


def sadc_test_forward(block: SadcBlock, x, m, input_mode: str = "whole", halo: int | None = None) -> Tensor:
    """Mask-gathered forward pass: every conv runs only where its output is read.

    Parameters
    ----------
    block : SadcBlock
    x : Tensor or ndarray, shape (n, C, h, w)
    m : array of bool, shape (h, w) or (n, h, w)
    input_mode : {"whole", "split"}
        Must match the mode the block is trained with.
    halo : int, optional
        Override of the shadow-branch input dilation size (defaults to
        ``block.d2``). Only useful to show that smaller halos break exactness.

    Returns
    -------
    Tensor
        Same values as :func:`sadc_train_forward` up to float rounding.
    """
    if input_mode not in INPUT_MODES:
        raise ValueError(f"input_mode must be one of {INPUT_MODES}")
    x = as_tensor(x)
    m = _check_block_input(block, x, m)
    xd = x.data
    n, c, h, w = xd.shape
    k, f = block.kernel_size, block.slope
    geom = _Plane(h, w, k)
    convs = block.shadow_convs
    depth = len(convs)
    out = xd.copy()  # residual
    for i in range(n):
        mi = m if m.ndim == 2 else m[min(i, m.shape[0] - 1)]
        if block.variant == "shared":
            mi = np.ones_like(mi)
        x_flat = xd[i].reshape(c, -1)
        out_flat = out[i].reshape(c, -1)
        # in whole mode the first shadow layer reads only inside the default
        # halo, so a plain zero-padded copy equals the restricted input
        full = None
        if input_mode == "whole":
            full = np.pad(xd[i], ((0, 0), (geom.pad,) * 2, (geom.pad,) * 2))

        if mi.any():
            if halo is None and full is not None:
                src = full.reshape(c, -1)
            else:
                in_mask = mi if input_mode == "split" else dilate(mi, block.d2 if halo is None else halo)
                src = geom.restricted(x_flat, ActiveSet.from_mask(in_mask))
            for layer, conv in enumerate(convs, start=1):
                active = ActiveSet.from_mask(dilate(mi, required_dilation(k, depth - layer)))
                vals = _kernels.gathered_dense_conv(src, geom.corners(active), geom.offsets,
                                                    _weight(conv, xd.dtype), _bias(conv, xd.dtype))
                _kernels.leaky_relu_inplace(vals, f)
                if layer < depth:
                    src = geom.empty(vals.shape[0], xd.dtype)
                    _kernels.scatter_columns(src, geom.centers(active), vals)
            _kernels.scatter_columns(out_flat, active.flat(), vals, accumulate=True)

        if block.w_l is not None and not mi.all():
            cw = block.w_l
            if cw.depthwise:
                ns_in = xd[i] * ~mi if input_mode == "split" else xd[i]
                _kernels.depthwise_leaky_add(ns_in, ~mi, cw.weight.data[:, 0], _bias(cw, xd.dtype), f, out[i],
                                             padded=full if k == 3 else None)
            else:
                ns = ActiveSet.from_mask(~mi)
                src = geom.restricted(x_flat, ns) if full is None else full.reshape(c, -1)
                vals = _kernels.gathered_dense_conv(src, geom.corners(ns), geom.offsets,
                                                    _weight(cw, xd.dtype), _bias(cw, xd.dtype))
                _kernels.leaky_relu_inplace(vals, f)
                _kernels.scatter_columns(out_flat, ns.flat(), vals, accumulate=True)
    if not np.isfinite(out).all():
        raise FloatingPointError("sadc_test_forward produced non-finite values")
    return Tensor(out)


# -- network -----------------------------------------------------------------

class SadcNet:
    """Stem conv (3 -> C), a chain of SADC blocks, head conv (C -> 3).

    Parameters
    ----------
    channels, n_blocks, kernel_size : int
    variant : {"sadc", "shared", "split"}
        Block design, see :class:`SadcBlock`.
    input_mode : {"whole", "split"}
        Whether block branches see the whole feature map during training
        ("whole") or only their own region ("split").
    init : {"near_identity", "random", "identity"}
        ``"identity"`` makes the net an exact identity map (zero blocks, stem
        copying RGB into the first three channels, head reading them back).
        ``"near_identity"`` adds small random weights on top of that.
    """

    def __init__(self, channels: int = 16, n_blocks: int = 3, kernel_size: int = 3, variant: str = "sadc",
                 input_mode: str = "whole", slope: float = 0.2, bias: bool = True, seed=0,
                 init: str = "near_identity", block_scale: float = 0.1, dtype=np.float32):
        if n_blocks < 1:
            raise ValueError("n_blocks must be >= 1")
        if channels < 3:
            raise ValueError("channels must be >= 3")
        if input_mode not in INPUT_MODES:
            raise ValueError(f"input_mode must be one of {INPUT_MODES}")
        if init not in ("near_identity", "random", "identity"):
            raise ValueError(f"unknown init {init!r}")
        rng = np.random.default_rng(seed)
        c, k = channels, kernel_size
        self.channels, self.kernel_size, self.variant, self.input_mode = c, k, variant, input_mode
        self.slope = slope
        block_init = {"identity": 0.0, "near_identity": block_scale, "random": 1.0}[init]
        edge_scale = {"identity": 0.0, "near_identity": block_scale, "random": 1.0}[init]

        stem = _he(rng, (c, 3, k, k), 3 * k * k, edge_scale, dtype)
        head = _he(rng, (3, c, k, k), c * k * k, edge_scale, dtype)
        if init != "random":
            centre = k // 2
            for ch in range(3):
                stem[ch] = 0.0
                stem[ch, ch, centre, centre] = 1.0
                head[ch, ch, centre, centre] += 1.0
        zb = (lambda m: Tensor(np.zeros(m, dtype), requires_grad=True)) if bias else (lambda m: None)
        self.stem = ConvWeight(Tensor(stem, requires_grad=True), zb(c))
        self.head = ConvWeight(Tensor(head, requires_grad=True), zb(3))
        self.blocks = [SadcBlock(c, k, variant, slope, bias, rng, block_init, dtype) for _ in range(n_blocks)]

    @classmethod
    def identity(cls, channels: int = 16, n_blocks: int = 3, kernel_size: int = 3, **kw) -> "SadcNet":
        return cls(channels, n_blocks, kernel_size, init="identity", **kw)

    def named_parameters(self) -> dict[str, Tensor]:
        out = {"stem.w": self.stem.weight}
        if self.stem.bias is not None:
            out["stem.w.bias"] = self.stem.bias
        for i, blk in enumerate(self.blocks):
            out.update(blk.named_parameters(f"block{i}."))
        out["head.w"] = self.head.weight
        if self.head.bias is not None:
            out["head.w.bias"] = self.head.bias
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def astype(self, dtype) -> "SadcNet":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self

    def __repr__(self):
        return (f"SadcNet(C={self.channels}, blocks={len(self.blocks)}, K={self.kernel_size}, "
                f"variant={self.variant!r}, input_mode={self.input_mode!r})")


def check_image_range(image: np.ndarray, tol: float = 1e-6) -> None:
    lo, hi = float(image.min()), float(image.max())
    if lo < -tol or hi > 1 + tol:
        raise ValueError(f"image values must lie in [0, 1], got range [{lo:.4g}, {hi:.4g}]")


def net_forward(net: SadcNet, image, m, phase: str = "train", return_branches: bool = False,
                clamp: bool = False):
    """Run ``stem -> blocks -> head`` with every block in the requested phase.

    The output is unclamped unless ``clamp`` is set (use that only when
    emitting images). ``return_branches`` (train phase only) also returns the
    per-block ``(x_s, x_ns)`` pairs needed by the distillation loss.
    """
    if phase not in ("train", "test"):
        raise ValueError(f"phase must be 'train' or 'test', got {phase!r}")
    image = as_tensor(image)
    if image.ndim != 4 or image.shape[1] != 3:
        raise ValueError(f"expected an (n, 3, h, w) image batch, got shape {image.shape}")
    check_image_range(image.data)
    h = net.stem(image)
    branches = []
    for blk in net.blocks:
        if phase == "train":
            h, br = sadc_train_forward(blk, h, m, net.input_mode, return_branches=True)
            branches.append(br)
        else:
            h = sadc_test_forward(blk, h, m, net.input_mode)
    out = net.head(h)
    if clamp:
        out = Tensor(np.clip(out.data, 0.0, 1.0))
    if return_branches:
        if phase != "train":
            raise ValueError("branch outputs are only available in the train phase")
        return out, branches
    return out
