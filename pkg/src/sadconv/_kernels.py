"""Raw ndarray kernels behind the differentiable primitives and the sparse path.

Stride-1 dense convolutions and the sparse path both work on zero-padded
planes flattened to ``(C, Hp * Wp)``: every pixel is a column and every
kernel tap is a constant column offset, so each tap is one BLAS matmul on a
shifted view. Strided and grouped convolutions use im2col.
"""
from __future__ import annotations

import threading

import numba
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class MacCounter:
    """Tallies multiply-accumulates issued by the kernels while active."""

    def __init__(self):
        self.total = 0
        self.by_kernel: dict[str, int] = {}

    def add(self, kind: str, n: int) -> None:
        n = int(n)
        self.total += n
        self.by_kernel[kind] = self.by_kernel.get(kind, 0) + n

    def __enter__(self) -> "MacCounter":
        active_counters().append(self)
        return self

    def __exit__(self, *exc):
        active_counters().remove(self)
        return False


_local = threading.local()


def active_counters() -> list[MacCounter]:
    stack = getattr(_local, "counters", None)
    if stack is None:
        stack = _local.counters = []
    return stack


def count_macs(kind: str, n: int) -> None:
    for c in active_counters():
        c.add(kind, n)


def _windows(x, k, stride, padding):
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = sliding_window_view(x, (k, k), axis=(2, 3))
    if stride > 1:
        cols = cols[:, :, ::stride, ::stride]
    return x, cols


def _flat_geometry(x, k, padding):
    # padded plane flattened to (n, c, hp * wp); output pixel (i, j) sits at column i * wp + j
    n, c, h, wd = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    hp, wp = xp.shape[2], xp.shape[3]
    ho, wo = hp - k + 1, wp - k + 1
    span = (ho - 1) * wp + wo
    offsets = [i * wp + j for i in range(k) for j in range(k)]
    return xp.reshape(n, c, hp * wp), (hp, wp, ho, wo, span), offsets


def _unflatten(flat, ho, wp, wo):
    n, co, span = flat.shape
    full = np.zeros((n, co, ho * wp), dtype=flat.dtype)
    full[..., :span] = flat
    return np.ascontiguousarray(full.reshape(n, co, ho, wp)[..., :wo])


def _dense_s1_forward(x, w, padding):
    co, c, k, _ = w.shape
    xf, (hp, wp, ho, wo, span), offsets = _flat_geometry(x, k, padding)
    taps = np.ascontiguousarray(w.transpose(2, 3, 0, 1)).reshape(k * k, co, c)  # BLAS needs unit inner stride
    n = x.shape[0]
    out = np.empty((n, co, span), dtype=np.result_type(x, w))
    term = np.empty((co, span), dtype=out.dtype)
    for b in range(n):
        for t, off in enumerate(offsets):
            if t == 0:
                np.matmul(taps[t], xf[b, :, off:off + span], out=out[b])
            else:
                np.matmul(taps[t], xf[b, :, off:off + span], out=term)
                out[b] += term
    return _unflatten(out, ho, wp, wo)


def _dense_s1_backward(g, x, w, padding, need_x, need_w):
    n, c, h, wd = x.shape
    co, _, k, _ = w.shape
    xf, (hp, wp, ho, wo, span), offsets = _flat_geometry(x, k, padding)
    gf = np.zeros((n, co, ho, wp), dtype=g.dtype)
    gf[..., :wo] = g
    gf = gf.reshape(n, co, ho * wp)[..., :span]  # zeros at the wrap-around columns
    gw = np.zeros((k * k, co, c), dtype=w.dtype) if need_w else None
    gxf = np.zeros((n, c, hp * wp), dtype=x.dtype) if need_x else None
    taps_t = np.ascontiguousarray(w.transpose(2, 3, 1, 0)).reshape(k * k, c, co)
    term = np.empty((c, span), dtype=gxf.dtype) if need_x else None
    for b in range(n):
        gb = np.ascontiguousarray(gf[b])
        for t, off in enumerate(offsets):
            xs = xf[b, :, off:off + span]
            if need_w:
                gw[t] += gb @ xs.T
            if need_x:
                np.matmul(taps_t[t], gb, out=term)
                gxf[b, :, off:off + span] += term
    if need_w:
        gw = np.ascontiguousarray(gw.reshape(k, k, co, c).transpose(2, 3, 0, 1))
    gx = None
    if need_x:
        gx = gxf.reshape(n, c, hp, wp)
        gx = np.ascontiguousarray(gx[:, :, padding:padding + h, padding:padding + wd]) if padding else gx
    return gx, gw


def conv2d_forward(x, w, stride=1, padding=0, groups=1):
    n, c, h, wd = x.shape
    co, cg, k, _ = w.shape
    if groups == 1 and stride == 1:
        out = _dense_s1_forward(x, w, padding)
        count_macs("dense", n * out.shape[2] * out.shape[3] * co * cg * k * k)
        return out
    xp, cols = _windows(x, k, stride, padding)
    ho, wo = cols.shape[2], cols.shape[3]
    if groups == 1:
        out = np.tensordot(cols, w, axes=([1, 4, 5], [1, 2, 3]))
        out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    elif cg == 1 and co == c:
        out = np.zeros((n, c, ho, wo), dtype=x.dtype)
        span_h, span_w = stride * (ho - 1) + 1, stride * (wo - 1) + 1
        for i in range(k):
            for j in range(k):
                tap = w[:, 0, i, j][None, :, None, None]
                out += xp[:, :, i:i + span_h:stride, j:j + span_w:stride] * tap
    else:
        cols = cols.reshape(n, groups, cg, ho, wo, k, k)
        wg = w.reshape(groups, co // groups, cg, k, k)
        out = np.einsum("ngchwij,gocij->ngohw", cols, wg).reshape(n, co, ho, wo)
    count_macs("dense" if groups == 1 else "grouped", n * ho * wo * co * cg * k * k)
    return out


def conv2d_backward(g, x, w, stride=1, padding=0, groups=1, need_x=True, need_w=True):
    """Return ``(grad_x, grad_w)`` for ``conv2d_forward``; skipped ones are None."""
    if groups == 1 and stride == 1:
        return _dense_s1_backward(g, x, w, padding, need_x, need_w)
    n, c, h, wd = x.shape
    co, cg, k, _ = w.shape
    xp, cols = _windows(x, k, stride, padding)
    ho, wo = g.shape[2], g.shape[3]
    span_h, span_w = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    gxp = np.zeros(xp.shape, dtype=x.dtype) if need_x else None
    gw = None
    if groups == 1:
        if need_w:
            gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))
        if need_x:
            dcols = np.tensordot(g, w, axes=([1], [0]))  # n, ho, wo, c, k, k
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i:i + span_h:stride, j:j + span_w:stride] += dcols[..., i, j].transpose(0, 3, 1, 2)
    elif cg == 1 and co == c:
        gw = np.empty_like(w) if need_w else None
        for i in range(k):
            for j in range(k):
                window = (slice(None), slice(None), slice(i, i + span_h, stride), slice(j, j + span_w, stride))
                if need_w:
                    gw[:, 0, i, j] = np.einsum("nchw,nchw->c", g, xp[window])
                if need_x:
                    gxp[window] += g * w[:, 0, i, j][None, :, None, None]
    else:
        colsg = cols.reshape(n, groups, cg, ho, wo, k, k)
        gg = g.reshape(n, groups, co // groups, ho, wo)
        wg = w.reshape(groups, co // groups, cg, k, k)
        if need_w:
            gw = np.einsum("ngohw,ngchwij->gocij", gg, colsg).reshape(w.shape)
        if need_x:
            dcols = np.einsum("ngohw,gocij->ngchwij", gg, wg).reshape(n, c, ho, wo, k, k)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i:i + span_h:stride, j:j + span_w:stride] += dcols[..., i, j]
    gx = None
    if need_x:
        gx = gxp[:, :, padding:padding + h, padding:padding + wd] if padding else gxp
        gx = np.ascontiguousarray(gx)
    return gx, (None if gw is None else np.asarray(gw, dtype=w.dtype))


# -- sparse -------------------------------------------------------------------

def tap_offsets(k: int, padded_width: int) -> np.ndarray:
    """Flat offsets of the k*k taps relative to the top-left tap, row-major."""
    ii, jj = np.meshgrid(np.arange(k), np.arange(k), indexing="ij")
    return (ii * padded_width + jj).ravel().astype(np.int64)


def gathered_dense_conv(plane, rows, offsets, weight, bias=None):
    """Dense conv evaluated only at selected pixels of a zero-padded plane.

    ``plane`` is ``(c_in, hp * wp)``; ``rows`` index the top-left tap of each
    output pixel's window; ``offsets`` come from :func:`tap_offsets`;
    ``weight`` is ``(c_out, c_in, k, k)``. The windows are gathered once into
    a ``(c_in * k * k, n)`` column matrix so the conv is a single GEMM.
    Returns ``(c_out, len(rows))``.
    """
    c_out = weight.shape[0]
    if rows.size == 0:
        return np.zeros((c_out, 0), dtype=plane.dtype)
    cols = np.take(plane, offsets[:, None] + rows[None, :], axis=1)
    out = weight.reshape(c_out, -1) @ cols.reshape(-1, rows.size)
    if bias is not None:
        out += bias[:, None]
    count_macs("dense", rows.size * weight[0].size * c_out)
    return out


@numba.njit(cache=True)
def _scatter_columns(dst, idx, vals, accumulate):
    for c in range(dst.shape[0]):
        d, v = dst[c], vals[c]
        if accumulate:
            for p in range(idx.shape[0]):
                d[idx[p]] += v[p]
        else:
            for p in range(idx.shape[0]):
                d[idx[p]] = v[p]


def scatter_columns(dst, idx, vals, accumulate=False):
    """``dst[:, idx] = vals`` (or ``+=``) for a C-contiguous 2-d ``dst``; ``idx`` must be unique."""
    _scatter_columns(dst, np.ascontiguousarray(idx, np.int64), np.ascontiguousarray(vals, dst.dtype), accumulate)
    return dst


def row_runs(m: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Maximal horizontal runs of set pixels as ``(row, start, stop)`` arrays."""
    h, w = m.shape
    edges = np.zeros((h, w + 2), dtype=np.int8)
    edges[:, 1:-1] = m
    d = np.diff(edges, axis=1)
    rows, starts = np.nonzero(d == 1)
    _, stops = np.nonzero(d == -1)
    return rows.astype(np.int64), starts.astype(np.int64), stops.astype(np.int64)


@numba.njit(cache=True, fastmath=True, error_model="numpy")
def _depthwise_leaky_add(x, rows, starts, stops, w, bias, slope, out):
    c_n, h, wd = x.shape
    k = w.shape[1]
    p = k // 2
    acc = np.empty(wd, dtype=x.dtype)
    for c in range(c_n):
        xc = x[c]
        oc = out[c]
        for r in range(rows.shape[0]):
            i, j0, j1 = rows[r], starts[r], stops[r]
            acc[j0:j1] = bias[c]
            for di in range(k):
                ii = i + di - p
                if ii < 0 or ii >= h:
                    continue
                xrow = xc[ii]
                for dj in range(k):
                    lo = max(j0, p - dj)
                    hi = min(j1, wd + p - dj)
                    shift = dj - p
                    a = acc[lo:hi]
                    a += xrow[lo + shift:hi + shift] * w[c, di, dj]
            orow = oc[i]
            for j in range(j0, j1):
                v = acc[j]
                orow[j] += max(v, v * slope)


@numba.njit(cache=True, fastmath=True, error_model="numpy")
def _depthwise3_leaky_add(xp, rows, starts, stops, w, bias, slope, out):
    # 3x3 taps unrolled over a padded input so the column loop vectorizes
    for c in range(xp.shape[0]):
        w00, w01, w02 = w[c, 0, 0], w[c, 0, 1], w[c, 0, 2]
        w10, w11, w12 = w[c, 1, 0], w[c, 1, 1], w[c, 1, 2]
        w20, w21, w22 = w[c, 2, 0], w[c, 2, 1], w[c, 2, 2]
        b = bias[c]
        for r in range(rows.shape[0]):
            i, j0, j1 = rows[r], starts[r], stops[r]
            top, mid, bot = xp[c, i], xp[c, i + 1], xp[c, i + 2]
            orow = out[c, i]
            for j in range(j0, j1):
                v = (b + top[j] * w00 + top[j + 1] * w01 + top[j + 2] * w02
                     + mid[j] * w10 + mid[j + 1] * w11 + mid[j + 2] * w12
                     + bot[j] * w20 + bot[j + 1] * w21 + bot[j + 2] * w22)
                orow[j] += max(v, v * slope)


def depthwise_leaky_add(x, m, w, bias, slope, out, padded=None):
    """``out[:, i, j] += leaky(depthwise(x)[:, i, j])`` where ``m`` is set.

    ``x`` and ``out`` are ``(c, h, w)``; ``w`` is ``(c, k, k)``. ``padded``
    may supply ``x`` already zero-padded by one pixel on each side, which
    the 3x3 path would otherwise build itself.
    """
    dtype = x.dtype
    bias = np.zeros(x.shape[0], dtype) if bias is None else np.ascontiguousarray(bias, dtype)
    rows, starts, stops = row_runs(m)
    if rows.size and w.shape[-1] == 3:
        xp = np.pad(x, ((0, 0), (1, 1), (1, 1))) if padded is None else padded
        _depthwise3_leaky_add(xp, rows, starts, stops, np.ascontiguousarray(w, dtype), bias, dtype.type(slope), out)
    elif rows.size:
        _depthwise_leaky_add(np.ascontiguousarray(x), rows, starts, stops, np.ascontiguousarray(w, dtype),
                             bias, dtype.type(slope), out)
    count_macs("depthwise", int((stops - starts).sum()) * w.shape[0] * w.shape[1] * w.shape[2])


def leaky_relu_np(x, slope):
    return np.where(x >= 0, x, x * x.dtype.type(slope))


def leaky_relu_inplace(x, slope):
    # valid for slope <= 1
    return np.maximum(x, x * x.dtype.type(slope), out=x)
