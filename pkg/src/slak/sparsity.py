"""Dynamic sparsity: SNIP masks, magnitude prune, random grow, cosine-decayed rate.

Masks are ``uint8`` arrays congruent to their weights. Every selection breaks
ties by ascending (layer index, flat index), so results never depend on sort
stability or platform.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Sequence

import numpy as np

from .errors import DegenerateError, InvalidCountError, InvalidShapeError, ScheduleRangeError
from .tensor import RngStream

WIDTH_GRID = tuple(round(1.0 + 0.1 * i, 1) for i in range(21))


class Mask:
    """Binary occupancy for one weight tensor with a cached active count."""

    def __init__(self, occupancy):
        occ = np.asarray(occupancy)
        if not np.all((occ == 0) | (occ == 1)):
            raise InvalidShapeError("mask values must be 0 or 1")
        self.occupancy = occ.astype(np.uint8)
        self.nnz = int(self.occupancy.sum())

    @classmethod
    def dense(cls, shape):
        return cls(np.ones(shape, dtype=np.uint8))

    @property
    def shape(self):
        return self.occupancy.shape

    @property
    def size(self):
        return self.occupancy.size

    @property
    def density(self):
        return self.nnz / self.size

    def copy(self):
        return Mask(self.occupancy.copy())

    def __eq__(self, other):
        return isinstance(other, Mask) and np.array_equal(self.occupancy, other.occupancy)

    def __repr__(self):
        return f"Mask(shape={self.shape}, nnz={self.nnz})"


@dataclass
class SparsityPlan:
    target_sparsity: float
    included_layers: List[str]
    per_layer_nnz: Dict[str, int] = field(default_factory=dict)
    per_layer_size: Dict[str, int] = field(default_factory=dict)

    @property
    def total_nnz(self):
        return sum(self.per_layer_nnz.values())

    @property
    def total_size(self):
        return sum(self.per_layer_size.values())

    @classmethod
    def from_masks(cls, masks: Dict[str, Mask], s: float):
        return cls(s, list(masks), {k: m.nnz for k, m in masks.items()}, {k: m.size for k, m in masks.items()})

    @classmethod
    def uniform(cls, sizes: Dict[str, int], s: float):
        """Every included layer at density 1-s; used when no SNIP pass is available."""
        nnz = {k: int(round((1.0 - s) * n)) for k, n in sizes.items()}
        return cls(s, list(sizes), nnz, dict(sizes))


@dataclass
class AdaptationConfig:
    frequency: int = 100
    initial_rate: float = 0.3
    horizon: int = 1
    seed: int = 0
    scope: str = "layer"

    def __post_init__(self):
        if self.frequency < 1:
            raise ValueError("adaptation frequency must be >= 1")
        if not 0.0 < self.initial_rate <= 1.0:
            raise ValueError("initial adaptation rate must be in (0, 1]")
        if self.scope not in ("layer", "global"):
            raise ValueError("scope must be 'layer' or 'global'")

    def adapts_at(self, t: int) -> bool:
        return t % self.frequency == 0 and t < self.horizon


def snip_scores(w, g):
    """Connection sensitivity |w * g|."""
    w = np.asarray(w)
    g = np.asarray(g)
    if w.shape != g.shape:
        raise InvalidShapeError(f"weight shape {w.shape} and gradient shape {g.shape} differ")
    return np.abs(w * g)


def _keep_count(total, s):
    if not 0.0 <= s < 1.0:
        raise ValueError(f"sparsity must be in [0, 1), got {s}")
    return int(round((1.0 - s) * total))


def build_masks_global_topk(scores: Dict[str, np.ndarray], s: float) -> Dict[str, Mask]:
    """Keep the K = round((1-s) N) highest scores across all layers."""
    names = list(scores)
    flat = [np.asarray(scores[n], dtype=np.float64).ravel() for n in names]
    total = sum(f.size for f in flat)
    k = _keep_count(total, s)
    if k == 0:
        raise DegenerateError(f"sparsity {s} keeps no weights out of {total}")
    allv = np.concatenate(flat)
    # concatenation order already is ascending (layer, flat index), so a stable
    # sort on -score realises the tie rule
    order = np.argsort(-allv, kind="stable")[:k]
    keep = np.zeros(total, dtype=np.uint8)
    keep[order] = 1
    masks, pos = {}, 0
    for n, f in zip(names, flat):
        masks[n] = Mask(keep[pos:pos + f.size].reshape(np.shape(scores[n])))
        pos += f.size
    return masks


def magnitude_prune(w, mask: Mask, k: int):
    """Deactivate the k active entries with the smallest |w|; returns (mask, pruned flat indices)."""
    if k < 0 or k > mask.nnz:
        raise InvalidCountError(f"cannot prune {k} of {mask.nnz} active weights")
    if np.shape(w) != mask.shape:
        raise InvalidShapeError(f"weight shape {np.shape(w)} and mask shape {mask.shape} differ")
    if k == 0:
        return mask.copy(), np.empty(0, dtype=np.int64)
    occ = mask.occupancy.ravel()
    active = np.flatnonzero(occ)
    mags = np.abs(np.asarray(w, dtype=np.float64).ravel()[active])
    pruned = active[np.argsort(mags, kind="stable")[:k]]
    new = occ.copy()
    new[pruned] = 0
    return Mask(new.reshape(mask.shape)), np.sort(pruned)


def random_grow(mask: Mask, k: int, stream: RngStream, exclude=None):
    """Activate k inactive positions chosen uniformly without replacement.

    ``exclude`` lists flat indices that may not be grown (positions pruned in
    the same adaptation step).
    """
    occ = mask.occupancy.ravel()
    candidates = np.flatnonzero(occ == 0)
    if exclude is not None and len(exclude):
        candidates = np.setdiff1d(candidates, exclude, assume_unique=True)
    if k < 0 or k > candidates.size:
        raise InvalidCountError(f"cannot grow {k} weights from {candidates.size} inactive positions")
    if k == 0:
        return mask.copy(), np.empty(0, dtype=np.int64)
    grown = np.sort(stream.generator.choice(candidates, size=k, replace=False))
    new = occ.copy()
    new[grown] = 1
    return Mask(new.reshape(mask.shape)), grown


def adaptation_count(p_t: float, nnz: int) -> int:
    return int(math.floor(p_t * nnz + 1e-9))


def adaptation_step(w, mask: Mask, p_t: float, stream: RngStream, k: int = None):
    """Prune floor(p_t * nnz) by magnitude, regrow as many at random.

    Grown weights are zeroed in ``w`` (in place). Returns (mask, pruned, grown)
    flat index arrays. Positions pruned now are not eligible for regrowth, so
    the count is capped at the number of inactive slots; a nearly dense layer
    swaps fewer weights rather than regrowing what it just pruned.
    """
    if not 0.0 <= p_t <= 1.0:
        raise ValueError(f"adaptation rate must be in [0, 1], got {p_t}")
    if k is None:
        k = adaptation_count(p_t, mask.nnz)
    k = min(k, mask.size - mask.nnz)
    pruned_mask, pruned = magnitude_prune(w, mask, k)
    new_mask, grown = random_grow(pruned_mask, k, stream, exclude=pruned)
    flat_w = w.reshape(-1)
    flat_w[grown] = 0
    flat_w[new_mask.occupancy.ravel() == 0] = 0
    return new_mask, pruned, grown


def cosine_adaptation_rate(p0: float, t: float, horizon: float) -> float:
    """Half-period cosine from p0 at t=0 to 0 at t=horizon."""
    if t < 0 or t > horizon:
        raise ScheduleRangeError(f"step {t} outside [0, {horizon}]")
    if horizon == 0:
        return p0
    return 0.5 * p0 * (1.0 + math.cos(math.pi * t / horizon))


def apply_masks(weights: Dict[str, np.ndarray], masks: Dict[str, Mask]):
    """Zero masked-out entries in place; returns ``weights``."""
    for name, mask in masks.items():
        w = weights[name]
        if w.shape != mask.shape:
            raise InvalidShapeError(f"{name}: weight shape {w.shape} and mask shape {mask.shape} differ")
        w *= mask.occupancy.astype(w.dtype)
    return weights


def global_sparsity(masks: Dict[str, Mask]) -> float:
    total = sum(m.size for m in masks.values())
    return 1.0 - sum(m.nnz for m in masks.values()) / total if total else 0.0


def width_plan(base_dims: Sequence[int], s: float, counter: Callable[[Sequence[int], float], float],
               grid: Sequence[float] = WIDTH_GRID):
    """Width factor whose sparse parameter count best matches the dense unwidened model.

    ``counter(dims, s)`` returns the sparsity-aware parameter count of the
    architecture at stage widths ``dims``. Returns (factor, widened_dims, report).
    """
    from .config import round_width
    if not 0.0 <= s < 1.0:
        raise ValueError(f"sparsity must be in [0, 1), got {s}")
    base = counter(list(base_dims), 0.0)
    best = None
    rows = []
    for f in grid:
        dims = [round_width(d * f) for d in base_dims]
        n = counter(dims, s)
        gap = abs(n - base)
        rows.append({"factor": f, "dims": dims, "params": n, "rel_gap": (n - base) / base})
        if best is None or gap < best[0]:
            best = (gap, f, dims, n)
    _, factor, dims, n = best
    report = {"sparsity": s, "factor": factor, "widened_dims": dims, "dense_baseline_params": base,
              "sparse_widened_params": n, "rel_deviation": (n - base) / base, "grid": rows}
    return factor, dims, report
