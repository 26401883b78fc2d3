"""Dense tensors and a recording tape for reverse-mode gradients.

Feature maps are rank-4 ``(n, c, h, w)`` arrays; losses reduce them to
scalars. Operations are recorded only while a :class:`GradTape` is active
and at least one input requires a gradient, so inference never builds a
graph.

>>> w = Tensor(np.ones((1, 1, 1, 1), np.float32), requires_grad=True)
>>> x = Tensor(np.full((1, 1, 2, 2), 3.0, np.float32))
>>> with GradTape() as tape:
...     loss = conv2d(x, w).sum()
>>> float(tape.gradient(loss, [w])[0].squeeze())
12.0
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import _kernels

__all__ = [
    "Tensor",
    "GradTape",
    "ConvWeight",
    "backward",
    "conv2d",
    "leaky_relu",
    "masked_merge",
    "log_softmax",
    "as_tensor",
]

_TAPES: list["GradTape"] = []


class Tensor:
    """An ndarray plus the bookkeeping needed to differentiate through it."""

    __slots__ = ("data", "requires_grad", "name", "_parents", "_backward")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    # -- introspection -----------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad, name=self.name)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # -- arithmetic ---------------------------------------------------------
    def __add__(self, other):
        other = as_tensor(other, self.dtype)
        return _record(self.data + other.data, (self, other),
                       lambda g: (_unbroadcast(g, self.shape), _unbroadcast(g, other.shape)))

    __radd__ = __add__

    def __sub__(self, other):
        other = as_tensor(other, self.dtype)
        return _record(self.data - other.data, (self, other),
                       lambda g: (_unbroadcast(g, self.shape), _unbroadcast(-g, other.shape)))

    def __rsub__(self, other):
        return as_tensor(other, self.dtype) - self

    def __mul__(self, other):
        other = as_tensor(other, self.dtype)
        a, b = self.data, other.data
        return _record(a * b, (self, other),
                       lambda g: (_unbroadcast(g * b, self.shape), _unbroadcast(g * a, other.shape)))

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other, self.dtype)
        a, b = self.data, other.data
        with np.errstate(divide="ignore", invalid="ignore"):
            q = a / b
        return _record(_check_finite(q, "div"), (self, other),
                       lambda g: (_unbroadcast(g / b, self.shape),
                                  _unbroadcast(-g * a / (b * b), other.shape)))

    def __rtruediv__(self, other):
        return as_tensor(other, self.dtype) / self

    def __neg__(self):
        return _record(-self.data, (self,), lambda g: (-g,))

    def __pow__(self, p: float):
        a = self.data
        return _record(_check_finite(a ** p, "pow"), (self,), lambda g: (g * p * a ** (p - 1),))

    def __getitem__(self, idx):
        shape, dtype = self.shape, self.dtype

        def grad(g):
            full = np.zeros(shape, dtype=dtype)
            full[idx] = g
            return (full,)

        return _record(self.data[idx], (self,), grad)

    # -- reductions & elementwise -------------------------------------------
    def sum(self, axis=None, keepdims: bool = False):
        shape = self.shape

        def grad(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return _record(np.asarray(self.data.sum(axis=axis, keepdims=keepdims)), (self,), grad)

    def mean(self, axis=None, keepdims: bool = False):
        if axis is None:
            count = self.data.size
        else:
            axes = (axis,) if isinstance(axis, int) else axis
            count = int(np.prod([self.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / max(count, 1))

    def abs(self):
        a = self.data
        return _record(np.abs(a), (self,), lambda g: (g * np.sign(a),))

    def exp(self):
        out = _check_finite(np.exp(self.data), "exp")
        return _record(out, (self,), lambda g: (g * out,))

    def log(self):
        a = self.data
        with np.errstate(divide="ignore", invalid="ignore"):
            out = _check_finite(np.log(a), "log")
        return _record(out, (self,), lambda g: (g / a,))

    def reshape(self, *shape):
        old = self.shape
        return _record(self.data.reshape(*shape), (self,), lambda g: (g.reshape(old),))


def as_tensor(value, dtype=None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    arr = np.asarray(value)
    if dtype is not None and (not np.issubdtype(arr.dtype, np.floating) or arr.ndim == 0):
        arr = arr.astype(dtype)
    return Tensor(arr)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _record(data, parents: tuple, grad_fn) -> Tensor:
    out = Tensor(data)
    if _TAPES and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = grad_fn
        _TAPES[-1].nodes.append(out)
    return out


def _check_finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise FloatingPointError(f"{op} produced non-finite values")
    return arr


class GradTape:
    """Records operations in creation order; the reverse sweep runs backwards over it.

    Creation order is a topological order of the graph, so a single reversed
    pass visits every node once, after all of its consumers.
    """

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def gradient(self, loss: Tensor, sources: Sequence[Tensor], loss_grad=None) -> list[np.ndarray]:
        """Gradients of ``loss`` w.r.t. ``sources``; unread sources get zeros."""
        grads = backward(self, loss, loss_grad)
        return [grads.get(s, np.zeros(s.shape, dtype=s.dtype)) for s in sources]


def backward(tape: GradTape, loss: Tensor, loss_grad=None) -> dict[Tensor, np.ndarray]:
    """Reverse sweep over ``tape`` seeded at ``loss``.

    Returns a mapping from every reached leaf tensor to its gradient.
    """
    if not tape.nodes:
        raise ValueError("backward called on an empty tape")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor that requires a gradient")
    if loss_grad is None:
        if loss.data.size != 1:
            raise ValueError(f"loss must be a scalar, got shape {loss.shape}")
        loss_grad = np.ones_like(loss.data)
    pending: dict[int, np.ndarray] = {id(loss): np.asarray(loss_grad, dtype=loss.dtype)}
    leaves: dict[Tensor, np.ndarray] = {}
    for node in reversed(tape.nodes):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if parent._backward is None:
                leaves[parent] = leaves[parent] + pg if parent in leaves else np.array(pg, dtype=parent.dtype)
            elif key in pending:
                pending[key] = pending[key] + pg
            else:
                pending[key] = pg
    return leaves


# -- primitives --------------------------------------------------------------

def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int = 0, groups: int = 1) -> Tensor:
    """Cross-correlation of an ``(n, c, h, w)`` map with ``(c_out, c/groups, k, k)`` weights.

    Zero padding outside the image. With ``stride=1`` and
    ``padding=(k - 1) // 2`` the output keeps the input's spatial size.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv2d expects rank-4 input and weight, got {x.shape} and {weight.shape}")
    c = x.shape[1]
    co, cg, k, k2 = weight.shape
    if k != k2:
        raise ValueError(f"conv2d expects square kernels, got weight shape {weight.shape}")
    if groups < 1 or c % groups or co % groups or cg != c // groups:
        raise ValueError(
            f"conv2d shape mismatch: input {x.shape} vs weight {weight.shape} with groups={groups}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if x.shape[2] + 2 * padding < k or x.shape[3] + 2 * padding < k:
        raise ValueError(f"input {x.shape} too small for kernel {k} with padding {padding}")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (co,):
            raise ValueError(f"bias shape {bias.shape} does not match {co} output channels")
    xd, wd = x.data, weight.data.astype(x.dtype, copy=False)
    out = _kernels.conv2d_forward(xd, wd, stride, padding, groups)
    if bias is not None:
        out += bias.data.astype(out.dtype, copy=False)[None, :, None, None]
    _check_finite(out, "conv2d")

    def grad(g):
        gx, gw = _kernels.conv2d_backward(g, xd, wd, stride, padding, groups,
                                          need_x=x.requires_grad, need_w=weight.requires_grad)
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _record(out, parents, grad)


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    x = as_tensor(x)
    if not 0.0 < slope <= 1.0:
        raise ValueError(f"slope must lie in (0, 1], got {slope}")
    pos = x.data >= 0
    out = _kernels.leaky_relu_np(x.data, slope)
    _check_finite(out, "leaky_relu")
    return _record(out, (x,), lambda g: (np.where(pos, g, g * g.dtype.type(slope)),))


def _mask4(m, shape) -> np.ndarray:
    m = np.asarray(m, dtype=bool)
    if m.ndim == 2:
        m = m[None, None]
    elif m.ndim == 3:
        m = m[:, None]
    if m.shape[-2:] != tuple(shape[-2:]) or m.shape[0] not in (1, shape[0]):
        raise ValueError(f"mask shape {m.shape} does not match tensor shape {tuple(shape)}")
    return m


def masked_merge(a: Tensor, b: Tensor, m) -> Tensor:
    """Take ``a`` where the mask is set and ``b`` elsewhere, across all channels."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"masked_merge operands differ: {a.shape} vs {b.shape}")
    mb = _mask4(m, a.shape)
    out = np.where(mb, a.data, b.data)
    _check_finite(out, "masked_merge")
    zero = a.dtype.type(0)
    return _record(out, (a, b), lambda g: (np.where(mb, g, zero), np.where(mb, zero, g)))


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    soft = np.exp(out)
    return _record(out, (x,), lambda g: (g - soft * g.sum(axis=axis, keepdims=True),))


@dataclass
class ConvWeight:
    """Kernel tensor plus grouping and optional bias, applied with same padding."""

    weight: Tensor
    bias: Tensor | None = None
    groups: int = 1

    def __post_init__(self):
        co, cg, k, k2 = self.weight.shape
        if k != k2 or k % 2 == 0:
            raise ValueError(f"kernel must be square and odd, got {self.weight.shape}")
        if self.groups > 1 and cg != 1:
            raise ValueError("only dense (groups=1) and depthwise (c_in_per_group=1) weights are supported")

    @property
    def kernel_size(self) -> int:
        return self.weight.shape[2]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1] * self.groups

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def depthwise(self) -> bool:
        return self.groups > 1

    def parameters(self) -> list[Tensor]:
        return [self.weight] if self.bias is None else [self.weight, self.bias]

    def __call__(self, x: Tensor, stride: int = 1) -> Tensor:
        return conv2d(x, self.weight, self.bias, stride=stride,
                      padding=(self.kernel_size - 1) // 2, groups=self.groups)
