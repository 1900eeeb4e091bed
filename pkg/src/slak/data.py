"""Synthetic long-range task: are two bright markers farther apart than d*?

Positions are uniform over the image, so solving the task needs information
from both markers at once, i.e. a receptive field spanning up to the whole
image. Label 1 iff the Chebyshev distance between the markers exceeds d*.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import RngStream


@dataclass(frozen=True)
class SyntheticTask:
    image_size: int = 64
    channels: int = 3
    threshold: int = 28         # d*; balanced classes at size 64 with 3-pixel markers
    margin: int = 6             # pairs with threshold - margin < distance <= threshold + margin are redrawn
    noise: float = 0.0
    marker_value: float = 1.0
    marker_size: int = 3        # side of each square marker; positions are top-left corners
    markers: int = 2

    def __post_init__(self):
        if self.markers != 2:
            raise ValueError("the distance rule is defined for exactly two markers")
        if self.image_size < 2 or self.threshold < 0 or self.margin < 0:
            raise ValueError("image_size must be >= 2, threshold and margin >= 0")
        if not 1 <= self.marker_size <= self.image_size:
            raise ValueError("marker_size must be in [1, image_size]")
        if self.threshold + self.margin >= self.span - 1:
            raise ValueError("threshold + margin leaves no positive examples")

    @property
    def span(self):
        """Number of admissible top-left coordinates per axis."""
        return self.image_size - self.marker_size + 1

    def label(self, p, q):
        return int(chebyshev(p, q) > self.threshold)


def chebyshev(p, q):
    p = np.asarray(p)
    q = np.asarray(q)
    return np.abs(p - q).max(axis=-1)


def render(task: SyntheticTask, positions, noise=None):
    """Images for given marker positions, shape (n, 2, 2) as (row, col) pairs.

    ``noise`` is an optional (n, C, S, S) array added to the background.
    """
    positions = np.asarray(positions, dtype=np.int64)
    n = positions.shape[0]
    s = task.image_size
    x = np.zeros((n, task.channels, s, s), dtype=np.float32) if noise is None else noise.astype(np.float32)
    idx = np.arange(n)
    for k in range(2):
        for di in range(task.marker_size):
            for dj in range(task.marker_size):
                x[idx, :, positions[:, k, 0] + di, positions[:, k, 1] + dj] = task.marker_value
    labels = (chebyshev(positions[:, 0], positions[:, 1]) > task.threshold).astype(np.int64)
    return x, labels


def sample_positions(task: SyntheticTask, stream: RngStream, n: int):
    """(n, 2, 2) marker corners as drawn by :func:`synth_batch`, without rendering."""
    return _draw_positions(task, stream.generator, n)


def _draw_positions(task, gen, n):
    s = task.span
    out = np.empty((0, 2, 2), dtype=np.int64)
    lo, hi = task.threshold - task.margin, task.threshold + task.margin
    while out.shape[0] < n:
        pos = gen.integers(0, s, size=(2 * (n - out.shape[0]) + 8, 2, 2))
        d = chebyshev(pos[:, 0], pos[:, 1])
        ok = (d != 0) & ~((d > lo) & (d <= hi))
        out = np.concatenate([out, pos[ok]])
    return out[:n]


def synth_batch(task: SyntheticTask, stream: RngStream, n: int):
    """n seeded images and labels. Consumes the stream's generator."""
    if n < 1:
        raise ValueError("n must be >= 1")
    gen = stream.generator
    pos = _draw_positions(task, gen, n)
    noise = (gen.standard_normal((n, task.channels, task.image_size, task.image_size), dtype=np.float32)
             * np.float32(task.noise))
    return render(task, pos, noise)
