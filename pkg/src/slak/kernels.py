"""Direct-loop depthwise convolution compiled with numba.

Each channel's kernel is flattened into a list of (row, col, weight) taps.
The dense variant lists every tap; the zero-skipping variant drops taps whose
weight is exactly zero, so its cost scales with the number of active weights.
The inner loop streams one output row against one shifted input row, which
numba vectorises.
"""

from __future__ import annotations

import numba
import numpy as np

from .conv import ConvSpec, _pad


@numba.njit(cache=True, nogil=True)
def _dw_taps(xp, tap_ptr, tap_i, tap_j, tap_w, out):
    B, C, Ho, Wo = out.shape
    for b in range(B):
        for c in range(C):
            o = out[b, c]
            xc = xp[b, c]
            for t in range(tap_ptr[c], tap_ptr[c + 1]):
                i = tap_i[t]
                j = tap_j[t]
                wv = tap_w[t]
                for h in range(Ho):
                    orow = o[h]
                    xrow = xc[h + i]
                    for q in range(Wo):
                        orow[q] += wv * xrow[q + j]


def tap_lists(w, dilation=1, skip_zeros=True):
    """CSR-style per-channel tap lists for a (C, 1, kh, kw) kernel."""
    C = w.shape[0]
    w2 = w[:, 0]
    if skip_zeros:
        c_idx, i_idx, j_idx = np.nonzero(w2)
    else:
        c_idx, i_idx, j_idx = np.indices(w2.shape).reshape(3, -1)
    ptr = np.zeros(C + 1, dtype=np.int64)
    np.add.at(ptr, c_idx + 1, 1)
    ptr = np.cumsum(ptr)
    return (ptr, (i_idx * dilation).astype(np.int64), (j_idx * dilation).astype(np.int64),
            np.ascontiguousarray(w2[c_idx, i_idx, j_idx]))


def dw_direct(x, w, spec: ConvSpec, skip_zeros=True, taps=None):
    """Stride-1 depthwise conv by explicit tap loops.

    ``taps`` may carry precomputed :func:`tap_lists` output so timing loops
    exclude the setup.
    """
    B, C, H, W = x.shape
    ho, wo = spec.output_hw(H, W)
    xp = np.ascontiguousarray(_pad(x, spec.pads(H, W)))
    if taps is None:
        taps = tap_lists(w, spec.dilation, skip_zeros)
    ptr, ti, tj, tw = taps
    out = np.zeros((B, C, ho, wo), dtype=np.result_type(x, w))
    _dw_taps(xp, ptr, ti, tj, tw.astype(out.dtype), out)
    return out
