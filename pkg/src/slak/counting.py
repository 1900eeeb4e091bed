"""Exact parameter and MAC counts, dense and sparsity-aware.

One MAC counts as one FLOP; only conv and linear layers contribute. Counts
come from the same layer graph the model is built from, so identifiers in the
per-layer tables match checkpoint and gradient keys.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Dict, List, Optional

from .config import ModelConfig
from .model import Conv, Linear, Model, ParallelBranches, Sequential, Block, ChainPlusSmall, LayerNorm, BatchNorm
from .sparsity import SparsityPlan

CONVENTIONS = ("all", "dw")


@dataclass
class LayerCount:
    name: str
    kind: str              # "conv", "dwconv", "linear", "norm", "other"
    params: int
    macs: int


@dataclass
class FlopRecord:
    kernel: int
    variant: str
    macs: int
    params: int
    dw_macs: int
    dw_params: int


def _prod(shape):
    n = 1
    for s in shape:
        n *= int(s)
    return n


def _walk(layer, res, out):
    """Append LayerCounts for ``layer`` at square resolution ``res``; returns the output resolution."""
    if isinstance(layer, Sequential):
        for l in layer.layers:
            res = _walk(l, res, out)
        return res
    if isinstance(layer, Block):
        _walk(layer.dw, res, out)
        for l in (layer.norm, layer.pw1, layer.pw2):
            _walk(l, res, out)
        out.append(LayerCount(f"{layer.name}.gamma", "other", layer.channels, 0))
        return res
    if isinstance(layer, ChainPlusSmall):
        _walk(layer.chain, res, out)
        _walk(layer.chain_bn, res, out)
        _walk(layer.small, res, out)
        return res
    if isinstance(layer, ParallelBranches):
        for (b, *_), spec in zip(layer.branches, layer.specs):
            w = _prod(spec.weight_shape)
            out.append(LayerCount(f"{layer.name}.{b}.weight", "dwconv", w, w * res * res))
            if layer.bias:
                out.append(LayerCount(f"{layer.name}.{b}.bias", "other", spec.out_channels, 0))
        for n in layer.norms or []:
            _walk(n, res, out)
        return res
    if isinstance(layer, Conv):
        spec = layer.spec
        ho, wo = spec.output_hw(res, res)
        w = _prod(spec.weight_shape)
        kind = "dwconv" if spec.depthwise else "conv"
        out.append(LayerCount(f"{layer.name}.weight", kind, w, w * ho * wo))
        if layer.bias:
            out.append(LayerCount(f"{layer.name}.bias", "other", spec.out_channels, 0))
        return ho
    if isinstance(layer, Linear):
        o, i = layer.shape
        out.append(LayerCount(f"{layer.name}.weight", "linear", o * i, o * i))
        out.append(LayerCount(f"{layer.name}.bias", "other", o, 0))
        return res
    if isinstance(layer, (LayerNorm, BatchNorm)):
        out.append(LayerCount(f"{layer.name}", "norm", 2 * layer.channels, 0))
        return res
    raise TypeError(f"no counting rule for {type(layer).__name__}")


def layer_table(config: ModelConfig, input_size: Optional[int] = None) -> List[LayerCount]:
    """Dense per-tensor counts in model order."""
    m = Model(config)
    res = input_size or config.input_size
    out: List[LayerCount] = []
    res = _walk(m.stem, res, out)
    for st in m.stages:
        res = _walk(st, res, out)
    _walk(m.head_norm, res, out)
    _walk(m.head_fc, res, out)
    return out


def _density(row, plan, convention):
    if plan is None or row.name not in plan.per_layer_size:
        return 1.0
    if convention == "dw" and row.kind != "dwconv":
        return 1.0
    return plan.per_layer_nnz[row.name] / plan.per_layer_size[row.name]


def count_params(config: ModelConfig, plan: Optional[SparsityPlan] = None):
    """Returns (total, table). With a plan, included layers contribute their nnz."""
    table = layer_table(config)
    total = 0
    rows = []
    for r in table:
        n = r.params
        if plan is not None and r.name in plan.per_layer_nnz:
            n = plan.per_layer_nnz[r.name]
        rows.append(replace(r, params=n))
        total += n
    return total, rows


def count_flops(config: ModelConfig, input_size: Optional[int] = None, plan: Optional[SparsityPlan] = None,
                convention: str = "all"):
    """Returns (total MACs, table). ``convention`` picks which included layers a plan thins:
    'all' scales every sparsified layer by its density, 'dw' only the depthwise ones."""
    if convention not in CONVENTIONS:
        raise ValueError(f"convention must be one of {CONVENTIONS}")
    rows = []
    total = 0
    for r in layer_table(config, input_size):
        macs = int(round(r.macs * _density(r, plan, convention)))
        rows.append(replace(r, macs=macs))
        total += macs
    return total, rows


def sparsifiable_sizes(config: ModelConfig) -> Dict[str, int]:
    m = Model(config)
    shapes = {n: s for n, s, _ in m.param_specs()}
    return {n: _prod(shapes[n]) for n in m.sparsifiable()}


def uniform_plan(config: ModelConfig, s: float) -> SparsityPlan:
    return SparsityPlan.uniform(sparsifiable_sizes(config), s)


def sparse_param_counter(config: ModelConfig):
    """Callback for :func:`slak.sparsity.width_plan`: params at given dims under uniform density."""
    def counter(dims, s):
        c = replace(config, stage_dims=tuple(dims))
        return count_params(c, uniform_plan(c, s) if s > 0 else None)[0]
    return counter


def dw_totals(table):
    macs = sum(r.macs for r in table if r.kind == "dwconv")
    params = sum(r.params for r in table if r.kind == "dwconv")
    return macs, params


def flops_sweep(template: ModelConfig, kernels, variants=("full", "decomposed_parallel"),
                input_size: Optional[int] = None) -> List[FlopRecord]:
    """Counts for ``template`` with every stage kernel set to each size in ``kernels``."""
    records = []
    for v in variants:
        for k in kernels:
            if not 3 <= k <= 151:
                raise ValueError(f"kernel size {k} outside [3, 151]")
            c = replace(template, dw_variant=v, stage_kernels=(k,) * len(template.stage_dims),
                        short_edge=min(template.short_edge, k))
            macs, table = count_flops(c, input_size)
            params, _ = count_params(c)
            dm, dp = dw_totals(table)
            records.append(FlopRecord(k, v, macs, params, dm, dp))
    return records
