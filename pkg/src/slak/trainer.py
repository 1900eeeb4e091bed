"""Training loop with SNIP-seeded dynamic sparsity.

Each step: forward, label-smoothed cross-entropy, backward, mask the
gradients, AdamW, re-apply masks. Every ``frequency`` steps (and before the
horizon) each sparsified layer prunes a cosine-decayed fraction of its active
weights by magnitude and regrows as many at random positions.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Dict, List, Optional

import numpy as np

from .data import SyntheticTask, synth_batch
from .errors import ConfigError, InvalidShapeError, NumericError
from .model import Model
from .optim import OptimState, adamw_step, lr_schedule
from .sparsity import (Mask, adaptation_count, adaptation_step, apply_masks, build_masks_global_topk,
                       cosine_adaptation_rate, global_sparsity, magnitude_prune, random_grow, snip_scores)
from .tensor import RngStream

METRIC_FIELDS = ("step", "loss", "acc", "lr", "p_t", "global_sparsity")
REFERENCE_BATCH = 4096
REFERENCE_LR = 4e-3


@dataclass
class TrainConfig:
    total_steps: int = 2000
    batch_size: int = 64
    peak_lr: Optional[float] = None      # None -> 4e-3 * batch / 4096
    warmup_steps: Optional[int] = None   # None -> 5% of total_steps
    weight_decay: float = 0.05
    label_smoothing: float = 0.1
    seed: int = 0
    sparsity: float = 0.0
    frequency: int = 100
    initial_rate: float = 0.3
    adaptation_scope: str = "layer"
    stop_adaptation: Optional[int] = None  # horizon of the rate schedule; None -> total_steps
    target_acc: Optional[float] = None     # stop once the running train accuracy reaches this
    acc_window: int = 50

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.total_steps < 0:
            raise ConfigError("must be >= 0", "total_steps")
        if self.batch_size < 1:
            raise ConfigError("must be >= 1", "batch_size")
        if self.total_steps and not self.resolved_warmup < self.total_steps:
            raise ConfigError("warmup must be shorter than the run", "warmup_steps")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ConfigError("must be in [0, 1)", "label_smoothing")
        if not 0.0 <= self.sparsity < 1.0:
            raise ConfigError("must be in [0, 1)", "sparsity")
        if self.frequency < 1:
            raise ConfigError("must be >= 1", "frequency")
        if not 0.0 < self.initial_rate <= 1.0:
            raise ConfigError("must be in (0, 1]", "initial_rate")
        if self.adaptation_scope not in ("layer", "global"):
            raise ConfigError("must be 'layer' or 'global'", "adaptation_scope")
        if self.peak_lr is not None and self.peak_lr < 0:
            raise ConfigError("must be >= 0", "peak_lr")
        if self.stop_adaptation is not None and not 0 <= self.stop_adaptation <= self.total_steps:
            raise ConfigError("must be in [0, total_steps]", "stop_adaptation")
        if self.target_acc is not None and not 0.0 < self.target_acc <= 1.0:
            raise ConfigError("must be in (0, 1]", "target_acc")
        if self.acc_window < 1:
            raise ConfigError("must be >= 1", "acc_window")

    @property
    def resolved_lr(self):
        return REFERENCE_LR * self.batch_size / REFERENCE_BATCH if self.peak_lr is None else self.peak_lr

    @property
    def resolved_warmup(self):
        return int(0.05 * self.total_steps) if self.warmup_steps is None else self.warmup_steps

    @property
    def horizon(self):
        return self.total_steps if self.stop_adaptation is None else self.stop_adaptation

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown train fields {sorted(extra)}", sorted(extra)[0])
        return cls(**d)


def cross_entropy_ls(logits, labels, eps=0.0):
    """Mean cross-entropy against (1-eps) one-hot + eps/K uniform. Returns (loss, dlogits)."""
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    n, k = logits.shape
    if k < 2:
        raise InvalidShapeError("need at least two classes")
    if labels.shape != (n,) or labels.min(initial=0) < 0 or labels.max(initial=0) >= k:
        raise ValueError(f"labels must be integers in [0, {k})")
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    target = np.full((n, k), eps / k)
    target[np.arange(n), labels] += 1.0 - eps
    loss = float(-(target * logp).sum() / n)
    dlogits = (np.exp(logp) - target) / n
    return loss, dlogits.astype(logits.dtype)


# ------------------------------------------------------------------ masks


def snip_masks(model: Model, x, labels, sparsity, label_smoothing=0.1):
    """Global top-k masks over |w * g| from one batch. Leaves BN statistics untouched."""
    layers = model.sparsifiable()
    saved = {k: v.copy() for k, v in model.buffers.items()}
    logits, cache = model.forward(x, "train")
    _, dl = cross_entropy_ls(logits, labels, label_smoothing)
    grads = model.backward(cache, dl)
    for k, v in saved.items():
        model.buffers[k][...] = v
    scores = {n: snip_scores(model.params[n], grads[n]) for n in layers}
    return build_masks_global_topk(scores, sparsity)


def _global_adaptation(weights, masks, p_t, stream):
    """Prune the globally smallest floor(p_t * nnz) active weights; regrow per layer as many.

    Per-layer counts are capped at the layer's inactive slots, as in :func:`adaptation_step`.
    """
    names = list(masks)
    total = sum(m.nnz for m in masks.values())
    k = adaptation_count(p_t, total)
    mags = np.concatenate([np.abs(weights[n].astype(np.float64).ravel())[np.flatnonzero(masks[n].occupancy.ravel())]
                           for n in names])
    owner = np.concatenate([np.full(masks[n].nnz, i) for i, n in enumerate(names)])
    chosen = owner[np.argsort(mags, kind="stable")[:k]]
    out = {}
    for i, n in enumerate(names):
        ki = min(int((chosen == i).sum()), masks[n].size - masks[n].nnz)
        m, pruned = magnitude_prune(weights[n], masks[n], ki)
        m, grown = random_grow(m, ki, stream, exclude=pruned)
        w = weights[n].reshape(-1)
        w[grown] = 0
        w[m.occupancy.ravel() == 0] = 0
        out[n] = (m, pruned, grown)
    return out


# ------------------------------------------------------------------ the loop


@dataclass
class TrainResult:
    initial: dict
    rows: List[dict] = field(default_factory=list)
    adaptations: List[dict] = field(default_factory=list)
    max_masked_abs: float = 0.0
    masks: Dict[str, Mask] = field(default_factory=dict)
    stopped_early: bool = False

    def csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(METRIC_FIELDS)
        for r in self.rows:
            w.writerow([r["step"]] + [repr(float(r[k])) for k in METRIC_FIELDS[1:]])
        return buf.getvalue()

    def running_acc(self, window=50):
        acc = np.array([r["acc"] for r in self.rows])
        if acc.size < window:
            return acc.cumsum() / np.arange(1, acc.size + 1)
        c = np.concatenate([[0.0], acc.cumsum()])
        return (c[window:] - c[:-window]) / window


def masked_abs_sum(params, masks):
    return float(sum(np.abs(params[n][masks[n].occupancy == 0]).sum() for n in masks))


def train(model: Model, masks: Optional[Dict[str, Mask]], config: TrainConfig, task: SyntheticTask = None,
          on_step: Optional[Callable] = None, log_every: int = 0, log=print) -> TrainResult:
    """Runs ``config.total_steps`` optimizer steps. ``masks`` None means build SNIP masks here
    (or train dense when ``config.sparsity`` is 0)."""
    task = task or SyntheticTask(image_size=model.config.input_size, channels=model.config.in_channels)
    root = RngStream(config.seed)
    data_stream = root.derive("data")
    grow_stream = root.derive("grow")
    x0, y0 = synth_batch(task, root.derive("snip"), config.batch_size)
    if masks is None and config.sparsity > 0:
        masks = snip_masks(model, x0, y0, config.sparsity, config.label_smoothing)
    masks = dict(masks or {})
    for n, m in masks.items():
        if model.params[n].shape != m.shape:
            raise InvalidShapeError(f"mask for {n} has shape {m.shape}, weight has {model.params[n].shape}")
    apply_masks(model.params, masks)
    model.touch()
    mask_f = {n: m.occupancy.astype(model.params[n].dtype) for n, m in masks.items()}

    logits, _ = model.forward(x0, "eval")
    loss0, _ = cross_entropy_ls(logits, y0, config.label_smoothing)
    sparsity0 = global_sparsity(masks) if masks else 0.0
    result = TrainResult(initial={"step": 0, "loss": loss0, "acc": float((logits.argmax(1) == y0).mean()),
                                  "lr": 0.0, "p_t": config.initial_rate if masks else 0.0,
                                  "global_sparsity": sparsity0})
    state = OptimState.zeros_like(model.params)
    no_decay = {n for n, p in model.params.items() if p.ndim <= 1}
    T = config.total_steps
    peak, warm = config.resolved_lr, config.resolved_warmup
    horizon = config.horizon
    acc_sum = 0.0
    for t in range(1, T + 1):
        x, y = synth_batch(task, data_stream, config.batch_size)
        logits, cache = model.forward(x, "train")
        loss, dl = cross_entropy_ls(logits, y, config.label_smoothing)
        acc = float((logits.argmax(1) == y).mean())
        grads = model.backward(cache, dl)
        for n, mf in mask_f.items():
            grads[n] *= mf
        lr = lr_schedule(t, peak, warm, T)
        adamw_step(model.params, grads, state, lr, config.weight_decay, no_decay)
        apply_masks(model.params, masks)
        p_t = cosine_adaptation_rate(config.initial_rate, min(t, horizon), horizon) if masks and horizon else 0.0
        if masks and t % config.frequency == 0 and t < horizon:
            if config.adaptation_scope == "global":
                changes = _global_adaptation(model.params, masks, p_t, grow_stream)
            else:
                changes = {n: adaptation_step(model.params[n], masks[n], p_t, grow_stream) for n in masks}
            for n, (m, pruned, grown) in changes.items():
                masks[n] = m
                mask_f[n] = m.occupancy.astype(model.params[n].dtype)
                for buf in (state.m[n], state.v[n]):
                    flat = buf.reshape(-1)
                    flat[pruned] = 0
                    flat[grown] = 0
            result.adaptations.append({"step": t, "p_t": p_t,
                                       "per_layer": {n: 1.0 - m.density for n, m in masks.items()},
                                       "global_sparsity": global_sparsity(masks)})
        model.touch()
        if masks:
            result.max_masked_abs = max(result.max_masked_abs, masked_abs_sum(model.params, masks))
        row = {"step": t, "loss": loss, "acc": acc, "lr": lr, "p_t": p_t,
               "global_sparsity": global_sparsity(masks) if masks else 0.0}
        if not math.isfinite(loss):
            raise NumericError(f"loss became {loss} at step {t}", index=t)
        result.rows.append(row)
        if on_step is not None:
            on_step(t, model, masks, row)
        if log_every and t % log_every == 0:
            log(f"step {t} loss {loss:.4f} acc {acc:.3f} lr {lr:.2e} p_t {p_t:.4f}")
        acc_sum += acc
        if t > config.acc_window:
            acc_sum -= result.rows[t - 1 - config.acc_window]["acc"]
        if config.target_acc is not None and t >= config.acc_window and \
                acc_sum / config.acc_window >= config.target_acc:
            result.stopped_early = t < T
            break
    result.masks = masks
    return result


def write_run(result: TrainResult, model_config, train_config: TrainConfig, out_dir):
    """Metrics CSV plus the resolved run config as JSON."""
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "metrics.csv"), "w", newline="") as f:
        f.write(result.csv())
    with open(os.path.join(out_dir, "run_config.json"), "w") as f:
        json.dump({"model": model_config.to_dict(), "train": train_config.to_dict()}, f, indent=2, sort_keys=True)
