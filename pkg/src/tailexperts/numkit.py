"""Dense numeric core: matrix ops, stable softmax family, deterministic RNG,
and the finite-difference gradient oracle used by every gradient test.

Everything operates on float64 numpy arrays. All functions are pure; arrays
may be shared read-only across threads.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import NumericError, ShapeError

Array = np.ndarray


def as_matrix(a, name: str = "matrix") -> Array:
    """Coerce to a 2-D float64 array, rejecting non-finite values."""
    out = np.asarray(a, dtype=np.float64)
    if out.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {out.shape}")
    if not np.all(np.isfinite(out)):
        raise NumericError(f"{name} contains non-finite values")
    return out


def matmul(a: Array, b: Array) -> Array:
    """Matrix product with explicit shape and finiteness contracts."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    with np.errstate(over="ignore", invalid="ignore"):
        out = a @ b
    if not np.all(np.isfinite(out)):
        raise NumericError("matmul produced non-finite values")
    return out


def softmax(v: Array, axis: int = -1) -> Array:
    """Numerically stable softmax along `axis` (max-subtraction)."""
    v = np.asarray(v, dtype=np.float64)
    z = v - np.max(v, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(v: Array, axis: int = -1) -> Array:
    """log(softmax(v)) without forming intermediate exponentials of large v."""
    v = np.asarray(v, dtype=np.float64)
    z = v - np.max(v, axis=axis, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=axis, keepdims=True))


def finite_diff_grad(
    f: Callable[[Array], float], x: Array, eps: float = 1e-5
) -> Array:
    """Central-difference gradient oracle: (f(x+eps*e_i) - f(x-eps*e_i)) / (2*eps).

    O(eps^2) truncation error; eps=1e-5 keeps it below the 1e-6 tolerances the
    gradient tests use.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = np.asarray(x, dtype=np.float64)
    flat = x.ravel()
    grad = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = float(f(x))
        flat[i] = orig - eps
        lo = float(f(x))
        flat[i] = orig
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise NumericError(f"objective non-finite near coordinate {i}")
        grad[i] = (hi - lo) / (2.0 * eps)
    return grad.reshape(x.shape)


class Rng:
    """Deterministic random stream keyed by a 64-bit seed.

    Built on the counter-based Philox generator, so identical seed plus call
    sequence reproduces the identical output sequence on any platform.
    Independent child streams are derived by `child(label)`; a stream is
    single-owner — concurrent use requires separate children.
    """

    def __init__(self, seed: int, _key: tuple[int, ...] = ()):
        self.seed = int(seed)
        self.key = tuple(int(k) for k in _key)
        ss = np.random.SeedSequence(self.seed, spawn_key=self.key)
        self._gen = np.random.Generator(np.random.Philox(ss))

    def child(self, label: str | int) -> "Rng":
        """Derive an independent stream; same (seed, label path) => same stream."""
        if isinstance(label, str):
            # crc32 is stable across platforms and python versions
            import zlib

            token = zlib.crc32(label.encode("utf-8"))
        else:
            token = int(label)
        return Rng(self.seed, self.key + (token,))

    def normal(self, loc=0.0, scale=1.0, size=None) -> Array:
        return self._gen.normal(loc, scale, size)

    def uniform(self, low=0.0, high=1.0, size=None) -> Array:
        return self._gen.uniform(low, high, size)

    def random(self, size=None) -> Array:
        return self._gen.random(size)

    def integers(self, low, high=None, size=None) -> Array:
        return self._gen.integers(low, high, size)

    def permutation(self, n: int) -> Array:
        return self._gen.permutation(n)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, key={self.key})"
