"""Effective receptive field: input-gradient contribution maps and area ratios.

The contribution of input pixel (i, j) is the absolute gradient of the summed
central feature of the last feature map, summed over input channels and
images, then max-normalised. ``area_ratio`` reports how much of the grid the
smallest centred square holding a given mass fraction covers.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass
from typing import List, Sequence

import numpy as np

from .conv import ConvSpec, conv2d_backward, conv2d_forward, depthwise_spec
from .errors import DegenerateError, InvalidShapeError

THRESHOLDS = (0.2, 0.3, 0.5, 0.99)


@dataclass
class ContributionMap:
    grid: np.ndarray
    raw_max: float = 1.0

    @property
    def size(self):
        return self.grid.shape[0]

    def support(self, tol=0.0):
        return self.grid > tol


class ConvStack:
    """Chain of stride-1 'same' convolutions, used as a transparent ERF model.

    ``layers`` is a list of (weight, spec). With ``linear=True`` no
    nonlinearity sits between layers, so the support of the map is exactly
    the combined kernel extent.
    """

    def __init__(self, layers, linear=True):
        self.layers = list(layers)
        self.linear = linear

    @classmethod
    def depthwise(cls, channels, kernels, stream, dilations=None, positive=False):
        layers = []
        for i, k in enumerate(kernels):
            kh, kw = (k, k) if isinstance(k, int) else k
            d = 1 if dilations is None else dilations[i]
            g = stream.derive(f"layer{i}").generator
            w = g.standard_normal((channels, 1, kh, kw))
            if positive:
                w = np.abs(w) + 0.1
            layers.append((w, depthwise_spec(channels, kh, kw, d)))
        return cls(layers)

    def forward_features(self, x, mode="eval"):
        caches = []
        for w, spec in self.layers:
            caches.append(x)
            x = conv2d_forward(x, w.astype(x.dtype), None, spec)
            if not self.linear:
                x = np.maximum(x, 0)
        return x, caches

    def backward(self, caches, dfeatures=None, return_input_grad=True, dlogits=None):
        d = dfeatures
        for (w, spec), x in zip(reversed(self.layers), reversed(caches)):
            if not self.linear:
                out = conv2d_forward(x, w.astype(x.dtype), None, spec)
                d = d * (out > 0)
            d, _, _ = conv2d_backward(x, w.astype(x.dtype), spec, d, need_bias=False)
        return ({}, d) if return_input_grad else {}


def center_index(n):
    return n // 2


def input_gradients(model, images):
    """d(sum_c f[b, c, centre]) / dx for every image b, from one batched pass in eval mode."""
    feats, cache = model.forward_features(images, "eval")
    B, C, H, W = feats.shape
    d = np.zeros_like(feats)
    d[:, :, center_index(H), center_index(W)] = 1.0
    _, dx = model.backward(cache, dfeatures=d, return_input_grad=True)
    return dx


def contribution_map(model, images, batch=8, per_image_norm=False) -> ContributionMap:
    """Accumulated |input gradient| map of ``model`` on ``images`` (B, C, G, G)."""
    images = np.asarray(images)
    if images.ndim != 4 or images.shape[0] < 1:
        raise InvalidShapeError(f"expected a non-empty (B, C, G, G) batch, got {images.shape}")
    if images.shape[2] != images.shape[3]:
        raise InvalidShapeError("contribution maps need square inputs")
    total = np.zeros(images.shape[2:], dtype=np.float64)
    for s in range(0, images.shape[0], batch):
        g = np.abs(input_gradients(model, images[s:s + batch])).sum(axis=1, dtype=np.float64)
        if per_image_norm:
            peak = g.reshape(g.shape[0], -1).max(axis=1)
            g = g / np.where(peak > 0, peak, 1.0)[:, None, None]
        total += g.sum(axis=0)
    peak = float(total.max())
    grid = total / peak if peak > 0 else total
    return ContributionMap(grid, peak)


def _window(g, a):
    """Half-open [start, start + a) centred on g // 2, clipped to the grid."""
    start = center_index(g) - a // 2
    return max(start, 0), min(start + a, g)


def area_side(cmap, t):
    """Smallest centred square side A holding at least fraction t of the mass."""
    if not 0.0 < t <= 1.0:
        raise ValueError(f"t must be in (0, 1], got {t}")
    grid = cmap.grid if isinstance(cmap, ContributionMap) else np.asarray(cmap, dtype=np.float64)
    g = grid.shape[0]
    total = grid.sum()
    if total <= 0:
        raise DegenerateError("contribution map has zero total mass")
    pref = np.zeros((g + 1, g + 1))
    pref[1:, 1:] = grid.cumsum(0).cumsum(1)
    goal = t * total * (1 - 1e-12)
    for a in range(1, g + 1):
        lo, hi = _window(g, a)
        mass = pref[hi, hi] - pref[lo, hi] - pref[hi, lo] + pref[lo, lo]
        if mass >= goal:
            return a
    return g


def area_ratio(cmap, t):
    """r = (A / G)^2 for the smallest centred square holding fraction t of the mass."""
    grid = cmap.grid if isinstance(cmap, ContributionMap) else np.asarray(cmap)
    return (area_side(cmap, t) / grid.shape[0]) ** 2


def linear_stack_support(kernels: Sequence) -> tuple:
    """(height, width) extent of a stride-1 linear conv stack: 1 + sum (k - 1) * dilation."""
    if not kernels:
        raise ValueError("need at least one kernel")
    h = w = 1
    for k in kernels:
        if isinstance(k, int):
            kh, kw, d = k, k, 1
        elif len(k) == 2:
            (kh, kw), d = k, 1
        else:
            kh, kw, d = k
        h += (kh - 1) * d
        w += (kw - 1) * d
    return h, w


def summary(cmap, thresholds=THRESHOLDS):
    return {f"{t:g}": area_ratio(cmap, t) for t in thresholds}


def map_csv(cmap) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    for row in cmap.grid:
        w.writerow([f"{v:.6e}" for v in row])
    return buf.getvalue()


def map_svg(cmap, cell=2, max_cells=112) -> str:
    """Log-scaled grey heatmap; large grids are block-averaged to ``max_cells`` per side."""
    grid = cmap.grid
    g = grid.shape[0]
    f = max(1, math.ceil(g / max_cells))
    n = g // f
    small = grid[:n * f, :n * f].reshape(n, f, n, f).mean(axis=(1, 3))
    logv = np.log10(np.maximum(small, 1e-6))
    shade = np.clip((logv + 6.0) / 6.0, 0.0, 1.0)
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{n * cell}" height="{n * cell}" '
             f'shape-rendering="crispEdges">']
    for i in range(n):
        for j in range(n):
            v = int(round(255 * shade[i, j]))
            parts.append(f'<rect x="{j * cell}" y="{i * cell}" width="{cell}" height="{cell}" '
                         f'fill="rgb({v},{v},{v})"/>')
    parts.append("</svg>")
    return "\n".join(parts)


def summary_json(cmap, thresholds=THRESHOLDS) -> str:
    return json.dumps(summary(cmap, thresholds), indent=2, sort_keys=True)
