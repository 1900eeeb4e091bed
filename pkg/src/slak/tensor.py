"""Dense array helpers, seeded random streams and a finite-difference oracle.

Tensors are plain ``numpy.ndarray`` objects laid out row-major with images in
(batch, channel, height, width) order. Every random draw in the package goes
through :class:`RngStream`, which wraps numpy's PCG64 bit generator. Child
streams are derived from a parent seed plus a string name via
``numpy.random.SeedSequence`` spawn keys, so two different names never share
a sequence and the same (seed, name) pair always replays the same values.
"""

from __future__ import annotations

import hashlib
from typing import Callable, Sequence

import numpy as np

from .errors import InvalidShapeError, NumericError

DEFAULT_DTYPE = np.float32
RNG_ALGORITHM = "PCG64"


class RngStream:
    """Deterministic random stream backed by PCG64.

    ``derive(name)`` returns an independent child keyed by ``name``; the
    child's spawn key is the SHA-256 digest of the name split into 32-bit
    words, appended to the parent's key.
    """

    def __init__(self, seed: int, spawn_key: Sequence[int] = ()):
        if seed < 0:
            raise ValueError(f"seed must be non-negative, got {seed}")
        self.seed = int(seed)
        self.spawn_key = tuple(int(k) for k in spawn_key)
        self._seq = np.random.SeedSequence(self.seed, spawn_key=self.spawn_key)
        self.generator = np.random.Generator(np.random.PCG64(self._seq))

    def derive(self, name: str) -> "RngStream":
        digest = hashlib.sha256(name.encode("utf-8")).digest()
        words = [int.from_bytes(digest[i:i + 4], "little") for i in range(0, 32, 4)]
        return RngStream(self.seed, self.spawn_key + tuple(words))

    def state(self) -> dict:
        return self.generator.bit_generator.state

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, algorithm={RNG_ALGORITHM!r}, depth={len(self.spawn_key) // 8})"


def rng_uniform(stream: RngStream, n: int) -> np.ndarray:
    """Draw ``n`` float64 values in [0, 1); consumes exactly ``n`` raw draws."""
    if n < 0:
        raise ValueError(f"n must be >= 0, got {n}")
    if n == 0:
        return np.empty(0, dtype=np.float64)
    return stream.generator.random(n)


def _check_shape(shape) -> tuple[int, ...]:
    shape = tuple(int(s) for s in shape)
    if not 1 <= len(shape) <= 4:
        raise InvalidShapeError(f"tensor rank must be 1..4, got shape {shape}")
    if any(s < 1 for s in shape):
        raise InvalidShapeError(f"all extents must be >= 1, got shape {shape}")
    return shape


def trunc_normal(stream: RngStream, shape, std: float, dtype=DEFAULT_DTYPE) -> np.ndarray:
    """Normal(0, std) samples with anything outside +-2 std redrawn."""
    n = int(np.prod(shape))
    out = stream.generator.normal(0.0, std, size=n)
    bad = np.abs(out) > 2.0 * std
    while bad.any():
        out[bad] = stream.generator.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2.0 * std
    return out.astype(dtype).reshape(shape)


def tensor_new(shape, init="zeros", *, value=None, std=None, stream=None, dtype=DEFAULT_DTYPE):
    """Allocate a tensor.

    ``init`` is one of ``"zeros"``, ``"ones"``, ``"constant"`` (needs ``value``),
    ``"trunc_normal"`` (needs ``std`` and ``stream``) or ``"values"`` (needs
    ``value``, any array-like whose size matches ``shape``).
    """
    shape = _check_shape(shape)
    if init == "zeros":
        return np.zeros(shape, dtype=dtype)
    if init == "ones":
        return np.ones(shape, dtype=dtype)
    if init == "constant":
        return np.full(shape, value, dtype=dtype)
    if init == "trunc_normal":
        if stream is None or std is None:
            raise ValueError("trunc_normal init needs std and stream")
        return trunc_normal(stream, shape, std, dtype)
    if init == "values":
        arr = np.asarray(value, dtype=dtype)
        if arr.size != int(np.prod(shape)):
            raise InvalidShapeError(f"{arr.size} values cannot fill shape {shape}")
        return arr.reshape(shape).copy()
    raise ValueError(f"unknown init {init!r}")


def finite_diff_grad(f: Callable[[np.ndarray], float], x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``, in float64."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(x))
        flat[i] = orig - eps
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"non-finite function value at flat index {i}", index=i)
        gflat[i] = (fp - fm) / (2.0 * eps)
    return grad


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    """max|a-b| / max(max|b|, tiny); the error measure used across the tests."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(float(np.max(np.abs(b))) if b.size else 0.0, 1e-30)
    return float(np.max(np.abs(a - b))) / scale if a.size else 0.0


def check_finite(name: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {name}")
