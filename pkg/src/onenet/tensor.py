"""Dense float64 tensor helpers and a seeded random stream.

Tensors are plain numpy arrays (row-major, float64). The helpers here only
add the shape/finiteness checks the rest of the package relies on.
"""

from __future__ import annotations

import numpy as np

DTYPE = np.float64


class DimensionError(ValueError):
    """Raised when array shapes or geometries do not agree."""


class ParameterError(ValueError):
    """Raised when a scalar parameter is outside its legal range."""


def as_tensor(x, shape=None) -> np.ndarray:
    """Return `x` as a float64 C-contiguous array, optionally reshaped."""
    arr = np.ascontiguousarray(x, dtype=DTYPE)
    if shape is not None:
        shape = tuple(int(s) for s in shape)
        if int(np.prod(shape)) != arr.size:
            raise DimensionError(f"cannot view {arr.size} values as {shape}")
        arr = arr.reshape(shape)
    return arr


def check_finite(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise FloatingPointError(f"{what} contains non-finite values")
    return x


def _same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch: {a.shape} vs {b.shape}")


def dot(a, b) -> float:
    a = as_tensor(a)
    b = as_tensor(b)
    _same_shape(a, b)
    return float(np.dot(a.ravel(), b.ravel()))


def axpy(alpha: float, x, y) -> np.ndarray:
    """Return ``alpha * x + y``."""
    x = as_tensor(x)
    y = as_tensor(y)
    _same_shape(x, y)
    return alpha * x + y


def l2_norm(x) -> float:
    return float(np.linalg.norm(as_tensor(x).ravel()))


class RngStream:
    """Seeded stream of uniform and Gaussian draws.

    Uniforms come from a PCG64 generator; Gaussians are produced from pairs
    of uniforms with the Box-Muller transform, so both families are a pure
    function of the seed and the order of calls.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def spawn(self, key: int) -> "RngStream":
        """Independent child stream derived from (seed, key)."""
        ss = np.random.SeedSequence([self.seed & 0xFFFFFFFFFFFFFFFF, int(key)])
        child = RngStream.__new__(RngStream)
        child.seed = self.seed
        child._gen = np.random.Generator(np.random.PCG64(ss))
        return child

    def uniform(self, lo: float, hi: float, n) -> np.ndarray:
        if not lo < hi:
            raise ParameterError(f"empty range [{lo}, {hi})")
        u = self._gen.random(n)
        out = lo + (hi - lo) * u
        # rounding in lo + (hi-lo)*u can land exactly on hi
        return np.minimum(out, np.nextafter(hi, lo))

    def gaussian(self, n) -> np.ndarray:
        shape = (n,) if np.isscalar(n) else tuple(n)
        count = int(np.prod(shape))
        if count < 1:
            raise ParameterError("need at least one sample")
        pairs = (count + 1) // 2
        u1 = 1.0 - self._gen.random(pairs)  # (0, 1], keeps log finite
        u2 = self._gen.random(pairs)
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:count]
        return z.reshape(shape)

    def integers(self, lo: int, hi: int, n=None):
        """Uniform integers in [lo, hi)."""
        return self._gen.integers(lo, hi, size=n)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)


def gaussian_sample(rng: RngStream, n) -> np.ndarray:
    return rng.gaussian(n)


def uniform_sample(rng: RngStream, lo: float, hi: float, n) -> np.ndarray:
    return rng.uniform(lo, hi, n)
