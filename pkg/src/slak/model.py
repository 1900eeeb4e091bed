"""The SLaK network: stem, ConvNeXt-style stages with large-kernel depthwise units, head.

Parameters live in one ordered ``dict`` keyed by dotted identifiers such as
``stages.0.blocks.1.dw.lk_h.weight``; BatchNorm running statistics live in a
separate buffer dict. Layers are small objects that read those dicts, return
a cache from ``forward`` and accumulate into a gradient dict in ``backward``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import count

import numpy as np

from .config import ModelConfig
from .conv import ConvSpec, conv2d_backward, conv2d_forward, depthwise_spec, dw_multi_backward, dw_multi_forward
from .errors import CacheError, InvalidShapeError
from .norms import (BatchNormState, LayerNormState, batchnorm_backward, batchnorm_forward, gelu_backward,
                    gelu_forward, layernorm_backward, layernorm_forward)
from .tensor import DEFAULT_DTYPE, RngStream, trunc_normal

INIT_STD = 0.02


def _acc(grads, name, g):
    if name in grads:
        grads[name] += g
    else:
        grads[name] = g


class Layer:
    def __init__(self, name):
        self.name = name

    def param_specs(self):
        """[(identifier, shape, init)] where init is 'trunc_normal', 'ones', 'zeros' or a float."""
        return []

    def buffer_specs(self):
        return []


class Conv(Layer):
    def __init__(self, name, spec: ConvSpec, bias=True):
        super().__init__(name)
        self.spec = spec
        self.bias = bias

    def param_specs(self):
        out = [(f"{self.name}.weight", self.spec.weight_shape, "trunc_normal")]
        if self.bias:
            out.append((f"{self.name}.bias", (self.spec.out_channels,), "zeros"))
        return out

    def forward(self, m, x, train):
        b = m.params[f"{self.name}.bias"] if self.bias else None
        return conv2d_forward(x, m.params[f"{self.name}.weight"], b, self.spec), x

    def backward(self, m, x, dy, grads):
        dx, dw, db = conv2d_backward(x, m.params[f"{self.name}.weight"], self.spec, dy, need_bias=self.bias)
        _acc(grads, f"{self.name}.weight", dw)
        if self.bias:
            _acc(grads, f"{self.name}.bias", db)
        return dx


class BatchNorm(Layer):
    def __init__(self, name, channels):
        super().__init__(name)
        self.channels = channels

    def param_specs(self):
        return [(f"{self.name}.weight", (self.channels,), "ones"), (f"{self.name}.bias", (self.channels,), "zeros")]

    def buffer_specs(self):
        return [(f"{self.name}.running_mean", (self.channels,), "zeros"),
                (f"{self.name}.running_var", (self.channels,), "ones")]

    def state(self, m):
        n = self.name
        return BatchNormState(m.params[f"{n}.weight"], m.params[f"{n}.bias"],
                              m.buffers[f"{n}.running_mean"], m.buffers[f"{n}.running_var"])

    def forward(self, m, x, train):
        return batchnorm_forward(x, self.state(m), "train" if train else "eval")

    def backward(self, m, cache, dy, grads):
        dx, dg, db = batchnorm_backward(dy, cache, self.state(m))
        _acc(grads, f"{self.name}.weight", dg)
        _acc(grads, f"{self.name}.bias", db)
        return dx


class LayerNorm(Layer):
    """Channel layer norm; works on (B, C, H, W) and on pooled (B, C)."""

    def __init__(self, name, channels, eps=1e-6):
        super().__init__(name)
        self.channels = channels
        self.eps = eps

    def param_specs(self):
        return [(f"{self.name}.weight", (self.channels,), "ones"), (f"{self.name}.bias", (self.channels,), "zeros")]

    def state(self, m):
        return LayerNormState(m.params[f"{self.name}.weight"], m.params[f"{self.name}.bias"], self.eps)

    def forward(self, m, x, train):
        return layernorm_forward(x, self.state(m))

    def backward(self, m, cache, dy, grads):
        dx, dg, db = layernorm_backward(dy, cache, self.state(m))
        _acc(grads, f"{self.name}.weight", dg)
        _acc(grads, f"{self.name}.bias", db)
        return dx


class Linear(Layer):
    def __init__(self, name, in_features, out_features):
        super().__init__(name)
        self.shape = (out_features, in_features)

    def param_specs(self):
        return [(f"{self.name}.weight", self.shape, "trunc_normal"), (f"{self.name}.bias", (self.shape[0],), "zeros")]

    def forward(self, m, x, train):
        return x @ m.params[f"{self.name}.weight"].T + m.params[f"{self.name}.bias"], x

    def backward(self, m, x, dy, grads):
        _acc(grads, f"{self.name}.weight", dy.T @ x)
        _acc(grads, f"{self.name}.bias", dy.sum(axis=0))
        return dy @ m.params[f"{self.name}.weight"]


class Sequential(Layer):
    def __init__(self, name, layers):
        super().__init__(name)
        self.layers = layers

    def param_specs(self):
        return [s for l in self.layers for s in l.param_specs()]

    def buffer_specs(self):
        return [s for l in self.layers for s in l.buffer_specs()]

    def forward(self, m, x, train):
        caches = []
        for layer in self.layers:
            x, c = layer.forward(m, x, train)
            caches.append(c)
        return x, caches

    def backward(self, m, caches, dy, grads):
        for layer, c in zip(reversed(self.layers), reversed(caches)):
            dy = layer.backward(m, c, dy, grads)
        return dy


# ------------------------------------------------------------ depthwise units


class ParallelBranches(Layer):
    """Sum of BN(conv_k(x)) over depthwise kernels that all read the same input.

    This is the decomposed unit (M x N, N x M and a small square kernel) and
    also the 'full' unit when given a single biased kernel and no norms.
    """

    def __init__(self, name, channels, kernels, norms=True, bias=False):
        super().__init__(name)
        self.branches = kernels                 # [(branch_name, kh, kw, dilation)]
        self.specs = [depthwise_spec(channels, kh, kw, dil) for _, kh, kw, dil in kernels]
        self.norms = [BatchNorm(f"{name}.{b}.bn", channels) for b, *_ in kernels] if norms else None
        self.bias = bias
        self.channels = channels

    def param_specs(self):
        out = []
        for (b, *_), spec in zip(self.branches, self.specs):
            out.append((f"{self.name}.{b}.weight", spec.weight_shape, "trunc_normal"))
            if self.bias:
                out.append((f"{self.name}.{b}.bias", (self.channels,), "zeros"))
        for n in self.norms or []:
            out += n.param_specs()
        return out

    def buffer_specs(self):
        return [s for n in self.norms or [] for s in n.buffer_specs()]

    def weights(self, m):
        return [m.params[f"{self.name}.{b}.weight"] for b, *_ in self.branches]

    def forward(self, m, x, train):
        outs = dw_multi_forward(x, self.weights(m), self.specs)
        if self.bias:
            for (b, *_), o in zip(self.branches, outs):
                o += m.params[f"{self.name}.{b}.bias"][None, :, None, None]
        if self.norms is None:
            return sum(outs[1:], outs[0]), (x, None)
        bn_caches = []
        y = None
        for n, o in zip(self.norms, outs):
            o, c = n.forward(m, o, train)
            bn_caches.append(c)
            y = o if y is None else y + o
        return y, (x, bn_caches)

    def backward(self, m, cache, dy, grads):
        x, bn_caches = cache
        if bn_caches is None:
            dys = [dy] * len(self.branches)
        else:
            dys = [n.backward(m, c, dy, grads) for n, c in zip(self.norms, bn_caches)]
        dx, dws = dw_multi_backward(x, self.weights(m), self.specs, dys)
        for (b, *_), dw, d in zip(self.branches, dws, dys):
            _acc(grads, f"{self.name}.{b}.weight", dw)
            if self.bias:
                _acc(grads, f"{self.name}.{b}.bias", d.sum(axis=(0, 2, 3)))
        return dx


class ChainPlusSmall(Layer):
    """BN(chain(x)) + BN(small(x)): sequential, dilated and stacked variants."""

    def __init__(self, name, channels, chain, small_kernel):
        super().__init__(name)
        self.chain = Sequential(f"{name}.chain", [Conv(f"{name}.chain.{i}", depthwise_spec(channels, kh, kw, dil),
                                                       bias=False)
                                                  for i, (kh, kw, dil) in enumerate(chain)])
        self.chain_bn = BatchNorm(f"{name}.chain.bn", channels)
        self.small = ParallelBranches(name, channels, [("small", small_kernel, small_kernel, 1)])

    def param_specs(self):
        return self.chain.param_specs() + self.chain_bn.param_specs() + self.small.param_specs()

    def buffer_specs(self):
        return self.chain_bn.buffer_specs() + self.small.buffer_specs()

    def forward(self, m, x, train):
        a, ca = self.chain.forward(m, x, train)
        a, cb = self.chain_bn.forward(m, a, train)
        s, cs = self.small.forward(m, x, train)
        return a + s, (ca, cb, cs)

    def backward(self, m, cache, dy, grads):
        ca, cb, cs = cache
        dx = self.chain.backward(m, ca, self.chain_bn.backward(m, cb, dy, grads), grads)
        return dx + self.small.backward(m, cs, dy, grads)


def make_dw_unit(name, channels, kernel, config: ModelConfig):
    v, n, sk = config.dw_variant, config.short_edge, config.small_kernel
    if v == "full":
        return ParallelBranches(name, channels, [("full", kernel, kernel, 1)], norms=False, bias=True)
    if v == "decomposed_parallel":
        return ParallelBranches(name, channels, [("lk_h", kernel, n, 1), ("lk_w", n, kernel, 1),
                                                 ("small", sk, sk, 1)])
    if v == "decomposed_sequential":
        return ChainPlusSmall(name, channels, [(kernel, n, 1), (n, kernel, 1)], sk)
    if v == "dilated":
        k = config.dilated_kernel(kernel)
        return ChainPlusSmall(name, channels, [(k, k, config.dilation_rate)], sk)
    if v == "stacked_small":
        return ChainPlusSmall(name, channels, [(3, 3, 1)] * config.stack_count, sk)
    raise ValueError(v)


# ---------------------------------------------------------------- the block


class Block(Layer):
    def __init__(self, name, channels, kernel, config: ModelConfig, drop_prob=0.0):
        super().__init__(name)
        self.dw = make_dw_unit(f"{name}.dw", channels, kernel, config)
        self.norm = LayerNorm(f"{name}.norm", channels)
        self.pw1 = Conv(f"{name}.pw1", ConvSpec(channels, 4 * channels, 1, 1))
        self.pw2 = Conv(f"{name}.pw2", ConvSpec(4 * channels, channels, 1, 1))
        self.channels = channels
        self.linear = config.activation == "identity"
        self.layer_scale = config.layer_scale_init
        self.drop_prob = drop_prob

    def param_specs(self):
        return (self.dw.param_specs() + self.norm.param_specs() + self.pw1.param_specs() + self.pw2.param_specs()
                + [(f"{self.name}.gamma", (self.channels,), float(self.layer_scale))])

    def buffer_specs(self):
        return self.dw.buffer_specs()

    def forward(self, m, x, train):
        h, c_dw = self.dw.forward(m, x, train)
        h, c_norm = self.norm.forward(m, h, train)
        h, c_pw1 = self.pw1.forward(m, h, train)
        if self.linear:
            a, c_act = h, None
        else:
            a, c_act = gelu_forward(h)
        h, c_pw2 = self.pw2.forward(m, a, train)
        gamma = m.params[f"{self.name}.gamma"]
        branch = h * gamma[None, :, None, None]
        keep = None
        if train and self.drop_prob > 0:
            p_keep = 1.0 - self.drop_prob
            keep = (m.drop_stream.generator.random(x.shape[0]) < p_keep).astype(x.dtype) / x.dtype.type(p_keep)
            branch = branch * keep[:, None, None, None]
        return x + branch, (c_dw, c_norm, c_pw1, c_act, c_pw2, h, keep)

    def backward(self, m, cache, dy, grads):
        c_dw, c_norm, c_pw1, c_act, c_pw2, h, keep = cache
        db = dy if keep is None else dy * keep[:, None, None, None]
        gamma = m.params[f"{self.name}.gamma"]
        _acc(grads, f"{self.name}.gamma", (db * h).sum(axis=(0, 2, 3)))
        d = self.pw2.backward(m, c_pw2, db * gamma[None, :, None, None], grads)
        if not self.linear:
            d = gelu_backward(d, c_act)
        d = self.pw1.backward(m, c_pw1, d, grads)
        d = self.norm.backward(m, c_norm, d, grads)
        return dy + self.dw.backward(m, c_dw, d, grads)


# ---------------------------------------------------------------- the model


@dataclass
class ForwardCache:
    model_id: int
    version: int
    token: int
    input_shape: tuple
    parts: dict = field(default_factory=dict)


_tokens = count(1)


class Model:
    """Parameters, buffers and the layer graph built from a :class:`ModelConfig`."""

    def __init__(self, config: ModelConfig):
        self.config = config
        dims, ker = config.stage_dims, config.stage_kernels
        self.stem = Sequential("stem", [Conv("stem.conv", ConvSpec(config.in_channels, dims[0], 4, 4, stride=4,
                                                                   padding=(0, 0, 0, 0))),
                                        LayerNorm("stem.norm", dims[0])])
        total = sum(config.stage_blocks)
        rates = np.linspace(0, config.drop_path_rate, total) if total else []
        self.stages = []
        k = 0
        for s, (nb, dim, kernel) in enumerate(zip(config.stage_blocks, dims, ker)):
            layers = []
            if s > 0:
                layers.append(LayerNorm(f"stages.{s}.down.norm", dims[s - 1]))
                layers.append(Conv(f"stages.{s}.down.conv", ConvSpec(dims[s - 1], dim, 2, 2, stride=2,
                                                                     padding=(0, 0, 0, 0))))
            for b in range(nb):
                layers.append(Block(f"stages.{s}.blocks.{b}", dim, kernel, config, float(rates[k])))
                k += 1
            self.stages.append(Sequential(f"stages.{s}", layers))
        self.head_norm = LayerNorm("head.norm", dims[-1])
        self.head_fc = Linear("head.fc", dims[-1], config.num_classes)
        self.params: dict = {}
        self.buffers: dict = {}
        self.version = 0
        self._live_token = None
        self.drop_stream = RngStream(0).derive("drop_path")

    @property
    def layers(self):
        return [self.stem, *self.stages, self.head_norm, self.head_fc]

    def param_specs(self):
        return [s for l in self.layers for s in l.param_specs()]

    def buffer_specs(self):
        return [s for l in self.layers for s in l.buffer_specs()]

    def sparsifiable(self):
        """Identifiers of weights that take part in sparse training (block DW and pointwise convs)."""
        out = []
        for name, shape, init in self.param_specs():
            if ".blocks." in name and name.endswith(".weight") and len(shape) == 4:
                out.append(name)
        return out

    def touch(self):
        """Record that parameters changed; older forward caches become stale."""
        self.version += 1

    # -- passes -----------------------------------------------------------

    def _check_input(self, x):
        if x.ndim != 4 or x.shape[1] != self.config.in_channels:
            raise InvalidShapeError(f"input shape {x.shape} does not match in_channels={self.config.in_channels}")
        if x.shape[2] % 4 or x.shape[3] % 4 or min(x.shape[2:]) < 4:
            raise InvalidShapeError(f"spatial extents {x.shape[2:]} must be multiples of 4")

    def forward_features(self, x, mode="eval"):
        """Final feature map before pooling, plus cache."""
        self._check_input(x)
        train = mode == "train"
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        token = next(_tokens)
        self._live_token = token
        cache = ForwardCache(id(self), self.version, token, x.shape)
        h, cache.parts["stem"] = self.stem.forward(self, x, train)
        stage_caches = []
        for st in self.stages:
            h, c = st.forward(self, h, train)
            stage_caches.append(c)
        cache.parts["stages"] = stage_caches
        return h, cache

    def forward(self, x, mode="eval"):
        feats, cache = self.forward_features(x, mode)
        pooled = feats.mean(axis=(2, 3))
        z, cache.parts["head_norm"] = self.head_norm.forward(self, pooled, mode == "train")
        logits, cache.parts["head_fc"] = self.head_fc.forward(self, z, mode == "train")
        cache.parts["feat_shape"] = feats.shape
        return logits, cache

    def _check_cache(self, cache):
        if not isinstance(cache, ForwardCache) or cache.model_id != id(self):
            raise CacheError("cache was produced by a different model")
        if cache.version != self.version:
            raise CacheError("parameters changed since this forward pass; cache is stale")
        if cache.token != self._live_token:
            raise CacheError("a newer forward pass replaced this cache")

    def backward(self, cache, dlogits=None, dfeatures=None, return_input_grad=False):
        """Gradients for every parameter identifier (zeros where no signal reaches)."""
        self._check_cache(cache)
        grads: dict = {}
        if dlogits is not None:
            if "head_fc" not in cache.parts:
                raise CacheError("cache holds features only; pass dfeatures")
            d = self.head_fc.backward(self, cache.parts["head_fc"], dlogits, grads)
            d = self.head_norm.backward(self, cache.parts["head_norm"], d, grads)
            B, C, H, W = cache.parts["feat_shape"]
            d = np.broadcast_to((d / (H * W))[:, :, None, None], (B, C, H, W)).astype(d.dtype)
            if dfeatures is not None:
                d = d + dfeatures
        elif dfeatures is not None:
            d = dfeatures
        else:
            raise ValueError("need dlogits or dfeatures")
        for st, c in zip(reversed(self.stages), reversed(cache.parts["stages"])):
            d = st.backward(self, c, d, grads)
        dx = self.stem.backward(self, cache.parts["stem"], d, grads)
        for name, arr in self.params.items():
            if name not in grads:
                grads[name] = np.zeros_like(arr)
        return (grads, dx) if return_input_grad else grads


def build(config: ModelConfig, stream: RngStream, dtype=DEFAULT_DTYPE) -> Model:
    """Allocate and initialise a model. Each weight draws from its own child stream."""
    model = Model(config)
    for name, shape, init in model.param_specs():
        if init == "trunc_normal":
            arr = trunc_normal(stream.derive(name), shape, INIT_STD, dtype)
        elif init == "ones":
            arr = np.ones(shape, dtype)
        elif init == "zeros":
            arr = np.zeros(shape, dtype)
        else:
            arr = np.full(shape, init, dtype)
        if name in model.params:
            raise ValueError(f"duplicate parameter identifier {name}")
        model.params[name] = arr
    for name, shape, init in model.buffer_specs():
        model.buffers[name] = np.ones(shape, dtype) if init == "ones" else np.zeros(shape, dtype)
    model.drop_stream = stream.derive("drop_path")
    return model


def forward(model: Model, x, mode="eval"):
    return model.forward(x, mode)


def backward(model: Model, cache, dlogits):
    return model.backward(cache, dlogits)


def astype(model: Model, dtype) -> Model:
    """Copy of ``model`` with parameters and buffers cast (float64 for gradient checks)."""
    out = Model(model.config)
    out.params = {k: v.astype(dtype) for k, v in model.params.items()}
    out.buffers = {k: v.astype(dtype) for k, v in model.buffers.items()}
    out.drop_stream = model.drop_stream
    return out
