"""BatchNorm, channel LayerNorm and exact GELU with hand-written backward passes."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np

from .errors import DegenerateError, InvalidShapeError

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


@dataclass
class BatchNormState:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.1

    @classmethod
    def identity(cls, channels, dtype=np.float32, **kw):
        return cls(np.ones(channels, dtype), np.zeros(channels, dtype),
                   np.zeros(channels, dtype), np.ones(channels, dtype), **kw)

    @property
    def channels(self):
        return self.gamma.shape[0]


def batchnorm_forward(x, state: BatchNormState, mode="train"):
    """Returns (y, cache). Train mode updates the running statistics in place."""
    if x.shape[1] != state.channels:
        raise InvalidShapeError(f"input has {x.shape[1]} channels, batchnorm expects {state.channels}")
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, -1) + (1,) * (x.ndim - 2)
    if mode == "train":
        n = x.size // x.shape[1]
        if n <= 1:
            raise DegenerateError("batchnorm train mode needs more than one value per channel")
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        m = state.momentum
        state.running_mean[...] = (1 - m) * state.running_mean + m * mean
        state.running_var[...] = (1 - m) * state.running_var + m * var * (n / (n - 1))
    elif mode == "eval":
        mean, var = state.running_mean, state.running_var
    else:
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    inv = (1.0 / np.sqrt(var + state.eps)).astype(x.dtype)
    xhat = (x - mean.reshape(bshape).astype(x.dtype)) * inv.reshape(bshape)
    y = xhat * state.gamma.reshape(bshape) + state.beta.reshape(bshape)
    return y, (xhat, inv, mode)


def batchnorm_backward(dy, cache, state: BatchNormState):
    """Returns (dx, dgamma, dbeta)."""
    xhat, inv, mode = cache
    axes = (0,) + tuple(range(2, dy.ndim))
    bshape = (1, -1) + (1,) * (dy.ndim - 2)
    dgamma = (dy * xhat).sum(axis=axes)
    dbeta = dy.sum(axis=axes)
    g = (state.gamma * inv).reshape(bshape)
    if mode == "eval":
        return dy * g, dgamma, dbeta
    n = dy.size // dy.shape[1]
    dx = g * (dy - (dbeta / n).reshape(bshape) - xhat * (dgamma / n).reshape(bshape))
    return dx, dgamma, dbeta


@dataclass
class LayerNormState:
    gamma: np.ndarray
    beta: np.ndarray
    eps: float = 1e-6

    @classmethod
    def identity(cls, channels, dtype=np.float32, eps=1e-6):
        return cls(np.ones(channels, dtype), np.zeros(channels, dtype), eps)


def layernorm_forward(x, state: LayerNormState):
    """Normalise over axis 1 (channels) at every other position."""
    if x.shape[1] != state.gamma.shape[0]:
        raise InvalidShapeError(f"input has {x.shape[1]} channels, layernorm expects {state.gamma.shape[0]}")
    bshape = (1, -1) + (1,) * (x.ndim - 2)
    mean = x.mean(axis=1, keepdims=True)
    xc = x - mean
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + state.eps)
    xhat = xc * inv
    return xhat * state.gamma.reshape(bshape) + state.beta.reshape(bshape), (xhat, inv)


def layernorm_backward(dy, cache, state: LayerNormState):
    xhat, inv = cache
    bshape = (1, -1) + (1,) * (dy.ndim - 2)
    red = (0,) + tuple(range(2, dy.ndim))
    dgamma = (dy * xhat).sum(axis=red)
    dbeta = dy.sum(axis=red)
    dxhat = dy * state.gamma.reshape(bshape)
    dx = inv * (dxhat - dxhat.mean(axis=1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=1, keepdims=True))
    return dx, dgamma, dbeta


@numba.njit(cache=True, inline="always")
def _erf32(a):
    # Rational fit on [-4, 4]; max abs error ~1e-7, i.e. float32 rounding level.
    x = min(max(a, -4.0), 4.0)
    x2 = x * x
    p = x2 * -2.72614225801306e-10 + 2.77068142495902e-08
    p = x2 * p + -2.10102402082508e-06
    p = x2 * p + -5.69250639462346e-05
    p = x2 * p + -7.34990630326855e-04
    p = x2 * p + -2.95459980854025e-03
    p = x2 * p + -1.60960333262415e-02
    q = x2 * -1.45660718464996e-05 + -2.13374055278905e-04
    q = x2 * q + -1.68282697438203e-03
    q = x2 * q + -7.37332916720468e-03
    q = x2 * q + -1.42647390514189e-02
    return x * p / q


@numba.vectorize(["float32(float32)"], cache=True)
def _cdf32(x):
    return 0.5 * (1.0 + _erf32(x / _SQRT2))


@numba.vectorize(["float64(float64)"], cache=True)
def _cdf64(x):
    return 0.5 * (1.0 + math.erf(x / _SQRT2))


def normal_cdf(x):
    x = np.asarray(x)
    return _cdf32(x) if x.dtype == np.float32 else _cdf64(x.astype(np.float64, copy=False))


def gelu_forward(x):
    """Exact GELU, x * Phi(x); returns (y, cache)."""
    cdf = normal_cdf(x)
    return x * cdf, (x, cdf)


def gelu_backward(dy, cache):
    x, cdf = cache
    pdf = np.exp(x * x * x.dtype.type(-0.5))
    pdf *= x.dtype.type(_INV_SQRT_2PI)
    pdf *= x
    pdf += cdf
    return dy * pdf
