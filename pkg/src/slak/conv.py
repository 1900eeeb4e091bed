"""Convolution forward/backward passes.

All convolutions are cross-correlations on (batch, channel, height, width)
arrays and keep the dtype of their input. Three execution paths exist:

* ``reference``: loops over groups and kernel taps in row-major order, one
  vectorised shifted multiply-add per tap. Slow, simple, and the oracle for
  everything else.
* ``im2col``: strided window view + one batched matmul per call. Used for
  full/grouped convolutions and strided convs (stem, downsampling, 1x1).
* ``toeplitz``: stride-1 depthwise convs. The longer kernel axis is unrolled
  into a per-channel banded matrix so each kernel column becomes a batched
  GEMM; taps that fall entirely in the zero padding are never materialised.

A zero-skipping direct-loop path for sparse depthwise kernels lives in
:mod:`slak.kernels`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import InvalidMaskError, InvalidShapeError

Padding = Union[str, tuple]

# Above this many elements the stacked-column buffer is built in chunks.
_STACK_BUDGET = 1 << 23


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel_h: int
    kernel_w: int
    groups: int = 1
    stride: int = 1
    dilation: int = 1
    padding: Padding = "same"

    def __post_init__(self):
        if self.in_channels % self.groups or self.out_channels % self.groups:
            raise InvalidShapeError(
                f"channels ({self.in_channels}, {self.out_channels}) not divisible by groups {self.groups}")
        if min(self.kernel_h, self.kernel_w, self.stride, self.dilation) < 1:
            raise InvalidShapeError("kernel extents, stride and dilation must be >= 1")
        if not (self.padding == "same" or (isinstance(self.padding, tuple) and len(self.padding) == 4)):
            raise InvalidShapeError(f"padding must be 'same' or (top, bottom, left, right), got {self.padding!r}")

    @property
    def depthwise(self) -> bool:
        return self.groups == self.in_channels == self.out_channels

    @property
    def weight_shape(self) -> tuple:
        return (self.out_channels, self.in_channels // self.groups, self.kernel_h, self.kernel_w)

    def pads(self, h: int, w: int) -> tuple:
        if self.padding != "same":
            return tuple(int(p) for p in self.padding)
        # Even totals put the extra cell bottom/right.
        th = _same_total(h, self.kernel_h, self.stride, self.dilation)
        tw = _same_total(w, self.kernel_w, self.stride, self.dilation)
        return (th // 2, th - th // 2, tw // 2, tw - tw // 2)

    def output_hw(self, h: int, w: int) -> tuple:
        pt, pb, pl, pr = self.pads(h, w)
        eh = self.dilation * (self.kernel_h - 1) + 1
        ew = self.dilation * (self.kernel_w - 1) + 1
        ho = (h + pt + pb - eh) // self.stride + 1
        wo = (w + pl + pr - ew) // self.stride + 1
        if ho < 1 or wo < 1:
            raise InvalidShapeError(f"input {h}x{w} too small for kernel {self.kernel_h}x{self.kernel_w}")
        return ho, wo


def _same_total(n, k, stride, dilation):
    eff = dilation * (k - 1) + 1
    out = -(-n // stride)
    return max((out - 1) * stride + eff - n, 0)


def depthwise_spec(channels, kh, kw=None, dilation=1, padding="same") -> ConvSpec:
    return ConvSpec(channels, channels, kh, kh if kw is None else kw, groups=channels,
                    dilation=dilation, padding=padding)


def _check(x, w, b, spec):
    if x.ndim != 4 or x.shape[1] != spec.in_channels:
        raise InvalidShapeError(f"input shape {x.shape} does not match in_channels={spec.in_channels}")
    if tuple(w.shape) != spec.weight_shape:
        raise InvalidShapeError(f"weight shape {tuple(w.shape)} does not match expected {spec.weight_shape}")
    if b is not None and b.shape != (spec.out_channels,):
        raise InvalidShapeError(f"bias shape {b.shape} does not match ({spec.out_channels},)")


def _pad(x, pads):
    pt, pb, pl, pr = pads
    if not any(pads):
        return x
    return np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr)))


# ---------------------------------------------------------------- reference


def conv2d_reference(x, w, b=None, spec: ConvSpec = None):
    """Naive tap-by-tap convolution; the accumulation order is kernel row-major."""
    _check(x, w, b, spec)
    B, _, H, W = x.shape
    ho, wo = spec.output_hw(H, W)
    xp = _pad(x, spec.pads(H, W))
    s, d, G = spec.stride, spec.dilation, spec.groups
    cig, cog = spec.in_channels // G, spec.out_channels // G
    out = np.zeros((B, spec.out_channels, ho, wo), dtype=np.result_type(x, w))
    for g in range(G):
        xs = xp[:, g * cig:(g + 1) * cig]
        for i in range(spec.kernel_h):
            for j in range(spec.kernel_w):
                patch = xs[:, :, i * d:i * d + s * (ho - 1) + 1:s, j * d:j * d + s * (wo - 1) + 1:s]
                wt = w[g * cog:(g + 1) * cog, :, i, j]
                out[:, g * cog:(g + 1) * cog] += np.einsum("oc,bchw->bohw", wt, patch)
    if b is not None:
        out += b[None, :, None, None]
    return out


# ------------------------------------------------------------------- im2col


def _windows(xp, spec, ho, wo):
    B, C = xp.shape[:2]
    sb, sc, sh, sw = xp.strides
    s, d = spec.stride, spec.dilation
    return as_strided(xp, shape=(B, C, spec.kernel_h, spec.kernel_w, ho, wo),
                      strides=(sb, sc, sh * d, sw * d, sh * s, sw * s), writeable=False)


def _im2col_forward(x, w, b, spec):
    B, _, H, W = x.shape
    ho, wo = spec.output_hw(H, W)
    G = spec.groups
    if spec.kernel_h == spec.kernel_w == 1 and spec.stride == 1 and G == 1 and spec.pads(H, W) == (0, 0, 0, 0):
        out = np.matmul(w[:, :, 0, 0], x.reshape(B, x.shape[1], H * W)).reshape(B, -1, H, W)
    else:
        cols = _windows(_pad(x, spec.pads(H, W)), spec, ho, wo)
        K = spec.in_channels // G * spec.kernel_h * spec.kernel_w
        cols = cols.reshape(B, G, K, ho * wo)
        wg = w.reshape(G, spec.out_channels // G, K)
        out = np.matmul(wg[None], cols).reshape(B, spec.out_channels, ho, wo)
    if b is not None:
        out = out + b[None, :, None, None]
    return out


def _im2col_backward(x, w, spec, dy, need_bias):
    B, _, H, W = x.shape
    ho, wo = dy.shape[2:]
    G = spec.groups
    pads = spec.pads(H, W)
    db = dy.sum(axis=(0, 2, 3)) if need_bias else None
    if spec.kernel_h == spec.kernel_w == 1 and spec.stride == 1 and G == 1 and pads == (0, 0, 0, 0):
        w2 = w[:, :, 0, 0]
        x3 = x.reshape(B, x.shape[1], H * W)
        dy3 = dy.reshape(B, dy.shape[1], H * W)
        dw = np.matmul(dy3, np.swapaxes(x3, 1, 2)).sum(axis=0)[:, :, None, None]
        dx = np.matmul(w2.T, dy3).reshape(x.shape)
        return dx, dw, db
    xp = _pad(x, pads)
    cig = spec.in_channels // G
    K = cig * spec.kernel_h * spec.kernel_w
    cols = _windows(xp, spec, ho, wo).reshape(B, G, K, ho * wo)
    dyg = dy.reshape(B, G, spec.out_channels // G, ho * wo)
    dw = np.matmul(dyg, np.swapaxes(cols, 2, 3)).sum(axis=0).reshape(w.shape)
    wg = w.reshape(G, spec.out_channels // G, K)
    dcols = np.matmul(np.swapaxes(wg, 1, 2)[None], dyg)
    dcols = dcols.reshape(B, spec.in_channels, spec.kernel_h, spec.kernel_w, ho, wo)
    dxp = np.zeros(xp.shape, dtype=dy.dtype)
    s, d = spec.stride, spec.dilation
    for i in range(spec.kernel_h):
        for j in range(spec.kernel_w):
            dxp[:, :, i * d:i * d + s * (ho - 1) + 1:s, j * d:j * d + s * (wo - 1) + 1:s] += dcols[:, :, i, j]
    pt, pb, pl, pr = pads
    dx = dxp[:, :, pt:pt + H, pl:pl + W]
    return dx, dw, db


# ----------------------------------------------------------------- toeplitz


class _Band:
    """Index bookkeeping for one banded (Toeplitz) unrolling along an axis."""

    def __init__(self, n_in, n_out, k, pad_before, dilation):
        hh, ii = np.meshgrid(np.arange(n_out), np.arange(k), indexing="ij")
        rr = hh + ii * dilation - pad_before
        ok = (rr >= 0) & (rr < n_in)
        self.h, self.i, self.r = hh[ok], ii[ok], rr[ok]
        self.k = k
        self.n_in, self.n_out = n_in, n_out
        # used taps: rows of the kernel that touch real input at least once
        self.tap_onehot = np.zeros((self.h.size, k))
        self.tap_onehot[np.arange(self.h.size), self.i] = 1.0

    def matrix(self, w2):
        # w2: (C, k, kw) -> T: (C, kw, n_out, n_in)
        C, _, kw = w2.shape
        T = np.zeros((C, kw, self.n_out, self.n_in), dtype=w2.dtype)
        T[:, :, self.h, self.r] = np.swapaxes(w2[:, self.i, :], 1, 2)
        return T

    def kernel_grad(self, dT):
        # dT: (C, kw, n_out, n_in) -> (C, k, kw)
        g = dT[:, :, self.h, self.r]
        return np.swapaxes(g @ self.tap_onehot.astype(dT.dtype), 1, 2)


def _orient(pads, w_shape):
    """Put the longer kernel axis on H; returns (pads, flipped)."""
    pt, pb, pl, pr = pads
    if w_shape[3] > w_shape[2]:
        return (pl, pr, pt, pb), True
    return pads, False


def _col_chunks(kw, per_col):
    step = max(1, _STACK_BUDGET // max(per_col, 1))
    return [(j0, min(kw, j0 + step)) for j0 in range(0, kw, step)]


class _Group:
    """Depthwise kernels that share one unrolled input layout.

    Members have the same orientation, dilation, short-axis extent and
    short-axis padding, so their banded matrices can be stacked along the
    output-row axis and applied with a single batched matmul per column chunk.
    """

    def __init__(self, x, members, flipped, key):
        self.members = members          # list of (index, w_oriented, pads)
        self.flipped = flipped
        _, self.kw, self.pl, self.pr, self.d = key
        xo = np.swapaxes(x, 2, 3) if flipped else x
        B, C, self.H, self.W = xo.shape
        self.Wo = self.W + self.pl + self.pr - self.d * (self.kw - 1)
        self.xt = np.zeros((C, self.H, self.W + self.pl + self.pr, B), dtype=x.dtype)
        self.xt[:, :, self.pl:self.pl + self.W, :] = xo.transpose(1, 2, 3, 0)
        self.bands, self.rows = [], []
        for _, wo, pads in members:
            pt, pb = pads[0], pads[1]
            ho = self.H + pt + pb - self.d * (wo.shape[2] - 1)
            self.bands.append(_Band(self.H, ho, wo.shape[2], pt, self.d))
            self.rows.append(ho)
        self.T = np.concatenate([b.matrix(wo[:, 0]) for b, (_, wo, _) in zip(self.bands, members)], axis=2)

    def columns(self, j0, j1):
        C, B = self.xt.shape[0], self.xt.shape[3]
        d, Wo = self.d, self.Wo
        return np.concatenate([self.xt[:, :, j * d:j * d + Wo, :].reshape(C, self.H, Wo * B)
                               for j in range(j0, j1)], axis=1)

    def chunks(self):
        C, B = self.xt.shape[0], self.xt.shape[3]
        return _col_chunks(self.kw, C * self.H * self.Wo * B)

    def stacked(self, j0, j1):
        C, rows = self.T.shape[0], self.T.shape[2]
        return self.T[:, j0:j1].transpose(0, 2, 1, 3).reshape(C, rows, (j1 - j0) * self.H)

    def split_rows(self, arr):
        out, r0 = [], 0
        for ho in self.rows:
            out.append(arr[:, r0:r0 + ho])
            r0 += ho
        return out


def _group_kernels(x, ws, specs):
    H, W = x.shape[2:]
    groups = {}
    for idx, (w, spec) in enumerate(zip(ws, specs)):
        pads, flipped = _orient(spec.pads(H, W), w.shape)
        wo = np.swapaxes(w, 2, 3) if flipped else w
        key = (flipped, wo.shape[3], pads[2], pads[3], spec.dilation)
        groups.setdefault(key, []).append((idx, wo, pads))
    return [_Group(x, members, key[0], key) for key, members in groups.items()]


def dw_multi_forward(x, ws, specs):
    """Several stride-1 depthwise convs of the same input; returns a list of outputs."""
    B, C = x.shape[:2]
    outs = [None] * len(ws)
    for g in _group_kernels(x, ws, specs):
        acc = np.zeros((C, g.T.shape[2], g.Wo * B), dtype=np.result_type(x, *ws))
        for j0, j1 in g.chunks():
            acc += g.stacked(j0, j1) @ g.columns(j0, j1)
        for (idx, _, _), part, ho in zip(g.members, g.split_rows(acc), g.rows):
            y = part.reshape(C, ho, g.Wo, B).transpose(3, 0, 1, 2)
            if g.flipped:
                y = np.swapaxes(y, 2, 3)
            outs[idx] = np.ascontiguousarray(y)
    return outs


def dw_multi_backward(x, ws, specs, dys):
    """Returns (dx summed over all kernels, [dw per kernel])."""
    B, C = x.shape[:2]
    dx = np.zeros(x.shape, dtype=np.result_type(*dys))
    dws = [None] * len(ws)
    for g in _group_kernels(x, ws, specs):
        parts = []
        for idx, _, _ in g.members:
            dy = np.swapaxes(dys[idx], 2, 3) if g.flipped else dys[idx]
            parts.append(dy.transpose(1, 2, 3, 0).reshape(C, dy.shape[2], g.Wo * B))
        dyt = np.concatenate(parts, axis=1) if len(parts) > 1 else np.ascontiguousarray(parts[0])
        dT = np.empty(g.T.shape, dtype=dyt.dtype)
        dxt = np.zeros(g.xt.shape, dtype=dyt.dtype)
        d, H, Wo = g.d, g.H, g.Wo
        for j0, j1 in g.chunks():
            n = j1 - j0
            gT = dyt @ np.swapaxes(g.columns(j0, j1), 1, 2)
            dT[:, j0:j1] = gT.reshape(C, -1, n, H).transpose(0, 2, 1, 3)
            dxs = (np.swapaxes(g.stacked(j0, j1), 1, 2) @ dyt).reshape(C, n, H, Wo, B)
            for jj, j in enumerate(range(j0, j1)):
                dxt[:, :, j * d:j * d + Wo, :] += dxs[:, jj]
        dxo = dxt[:, :, g.pl:g.pl + g.W, :].transpose(3, 0, 1, 2)
        dx += np.swapaxes(dxo, 2, 3) if g.flipped else dxo
        for (idx, _, _), band, part in zip(g.members, g.bands, g.split_rows(dT.transpose(0, 2, 1, 3))):
            dw = band.kernel_grad(part.transpose(0, 2, 1, 3))[:, None]
            dws[idx] = np.ascontiguousarray(np.swapaxes(dw, 2, 3) if g.flipped else dw)
    return dx, dws


def _dw_toeplitz_forward(x, w, b, spec):
    out = dw_multi_forward(x, [w], [spec])[0]
    if b is not None:
        out += b[None, :, None, None]
    return out


def _dw_toeplitz_backward(x, w, spec, dy, need_bias):
    db = dy.sum(axis=(0, 2, 3)) if need_bias else None
    dx, dws = dw_multi_backward(x, [w], [spec], [dy])
    return dx, dws[0], db


# ------------------------------------------------------------------ public


def _fast_path(spec):
    return "toeplitz" if spec.depthwise and spec.stride == 1 else "im2col"


def conv2d_forward(x, w, b=None, spec: ConvSpec = None, path: str = "auto"):
    """Cross-correlation of ``x`` with ``w``; ``path`` picks the executor."""
    _check(x, w, b, spec)
    path = _fast_path(spec) if path == "auto" else path
    if path == "reference":
        return conv2d_reference(x, w, b, spec)
    if path == "toeplitz":
        if not (spec.depthwise and spec.stride == 1):
            raise InvalidShapeError("toeplitz path needs a stride-1 depthwise spec")
        return _dw_toeplitz_forward(x, w, b, spec)
    if path == "im2col":
        return _im2col_forward(x, w, b, spec)
    raise ValueError(f"unknown path {path!r}")


def conv2d_backward(x, w, spec: ConvSpec, dy, need_bias=True, path="auto"):
    """Gradients (dx, dw, db) of ``conv2d_forward`` for output gradient ``dy``."""
    _check(x, w, None, spec)
    expect = (x.shape[0], spec.out_channels) + spec.output_hw(*x.shape[2:])
    if tuple(dy.shape) != expect:
        raise InvalidShapeError(f"output gradient shape {tuple(dy.shape)} does not match forward output {expect}")
    path = _fast_path(spec) if path == "auto" else path
    if path == "toeplitz":
        return _dw_toeplitz_backward(x, w, spec, dy, need_bias)
    return _im2col_backward(x, w, spec, dy, need_bias)


def check_mask(mask, w):
    if mask.shape != w.shape:
        raise InvalidShapeError(f"mask shape {mask.shape} does not match weight shape {w.shape}")
    if not np.all((mask == 0) | (mask == 1)):
        raise InvalidMaskError("mask must contain only 0 and 1")


def sparse_dw_conv_forward(x, w, mask, spec: ConvSpec, path: str = "skip"):
    """Depthwise conv with ``w * mask``.

    ``path="skip"`` runs the zero-skipping direct kernel that visits only the
    active taps; ``path="masked"`` multiplies the mask in and runs the dense
    fast path.
    """
    if not spec.depthwise:
        raise InvalidShapeError("sparse_dw_conv_forward needs a depthwise spec")
    _check(x, w, None, spec)
    check_mask(mask, w)
    wm = (w * mask).astype(w.dtype)
    if path == "masked":
        return conv2d_forward(x, wm, None, spec)
    if path == "skip":
        from .kernels import dw_direct
        return dw_direct(x, wm, spec, skip_zeros=True)
    raise ValueError(f"unknown path {path!r}")


# ------------------------------------------------------- decomposed units


def _check_dw_set(x, ws):
    C = x.shape[1]
    for w in ws:
        if w.shape[0] != C or w.shape[1] != 1:
            raise InvalidShapeError(f"depthwise kernel {w.shape} does not match {C} input channels")


def decomposed_dw_forward(x, w_mn, w_nm, w_small, bn_a, bn_b, bn_c, mode="eval"):
    """BN_a(x * w_mn) + BN_b(x * w_nm) + BN_c(x * w_small), all depthwise, stride 1, same padding.

    Returns (y, caches) where caches holds the three BatchNorm caches.
    """
    from .norms import batchnorm_forward
    ws = [w_mn, w_nm, w_small]
    _check_dw_set(x, ws)
    C = x.shape[1]
    specs = [depthwise_spec(C, w.shape[2], w.shape[3]) for w in ws]
    outs = dw_multi_forward(x, ws, specs)
    y, caches = None, []
    for o, bn in zip(outs, (bn_a, bn_b, bn_c)):
        o, c = batchnorm_forward(o, bn, mode)
        caches.append(c)
        y = o if y is None else y + o
    return y, caches


def seq_decomposed_dw_forward(x, w_mn, w_nm):
    """x * w_mn followed by * w_nm, each depthwise with same padding."""
    _check_dw_set(x, [w_mn, w_nm])
    C = x.shape[1]
    h = conv2d_forward(x, w_mn, None, depthwise_spec(C, w_mn.shape[2], w_mn.shape[3]))
    return conv2d_forward(h, w_nm, None, depthwise_spec(C, w_nm.shape[2], w_nm.shape[3]))


def embed_kernel(w, size):
    """Zero-pad a (C, 1, kh, kw) kernel into a centred size x size grid (size - k must be even)."""
    C, _, kh, kw = w.shape
    if (size - kh) % 2 or (size - kw) % 2 or kh > size or kw > size:
        raise InvalidShapeError(f"cannot centre a {kh}x{kw} kernel in a {size}x{size} grid")
    out = np.zeros((C, 1, size, size), dtype=w.dtype)
    t, l = (size - kh) // 2, (size - kw) // 2
    out[:, :, t:t + kh, l:l + kw] = w
    return out
