"""Orthonormal multi-level 2-D Haar transform."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import DimensionError, as_tensor


class StructureError(ValueError):
    """Raised for malformed coefficient sets."""


@dataclass
class WaveletCoeffs:
    """Haar coefficients of an (H, W, C) image.

    ``details[k]`` holds the (LH, HL, HH) bands of level k + 1, finest first;
    ``approx`` is the LL band of the coarsest level.
    """

    approx: np.ndarray
    details: list

    @property
    def levels(self) -> int:
        return len(self.details)

    def to_vector(self) -> np.ndarray:
        parts = [self.approx.ravel()]
        for bands in reversed(self.details):
            parts.extend(b.ravel() for b in bands)
        return np.concatenate(parts)

    @classmethod
    def from_vector(cls, vec, shape, levels: int) -> "WaveletCoeffs":
        vec = as_tensor(vec).ravel()
        h, w, c = shape
        check_levels(h, w, levels)
        s = 2 ** levels
        pos = 0
        approx_n = (h // s) * (w // s) * c
        approx = vec[:approx_n].reshape(h // s, w // s, c)
        pos = approx_n
        details = []
        for k in range(levels, 0, -1):
            bshape = (h >> k, w >> k, c)
            n = int(np.prod(bshape))
            bands = tuple(vec[pos + i * n: pos + (i + 1) * n].reshape(bshape) for i in range(3))
            pos += 3 * n
            details.append(bands)
        if pos != vec.size:
            raise StructureError(f"{vec.size} coefficients for a {shape} image")
        details.reverse()
        return cls(approx, details)


def check_levels(h: int, w: int, levels: int) -> None:
    if levels < 0:
        raise DimensionError("levels must be non-negative")
    s = 2 ** levels
    if h % s or w % s:
        raise DimensionError(f"{h}x{w} image is not divisible by 2^{levels}")


def default_levels(h: int, w: int, cap: int = 3) -> int:
    """Deepest level count <= cap that the geometry allows."""
    levels = 0
    while levels < cap and h % (2 ** (levels + 1)) == 0 and w % (2 ** (levels + 1)) == 0:
        levels += 1
    return levels


def _analysis(x):
    a, b = x[0::2, 0::2], x[0::2, 1::2]
    c, d = x[1::2, 0::2], x[1::2, 1::2]
    ll = (a + b + c + d) / 2.0
    lh = (a - b + c - d) / 2.0
    hl = (a + b - c - d) / 2.0
    hh = (a - b - c + d) / 2.0
    return ll, (lh, hl, hh)


def _synthesis(ll, bands):
    lh, hl, hh = bands
    h, w = ll.shape[:2]
    out = np.empty((2 * h, 2 * w) + ll.shape[2:])
    out[0::2, 0::2] = (ll + lh + hl + hh) / 2.0
    out[0::2, 1::2] = (ll - lh + hl - hh) / 2.0
    out[1::2, 0::2] = (ll + lh - hl - hh) / 2.0
    out[1::2, 1::2] = (ll - lh - hl + hh) / 2.0
    return out


def haar_forward(img, levels: int) -> WaveletCoeffs:
    x = as_tensor(img)
    if x.ndim == 2:
        x = x[:, :, None]
    check_levels(x.shape[0], x.shape[1], levels)
    details = []
    for _ in range(levels):
        x, bands = _analysis(x)
        details.append(bands)
    return WaveletCoeffs(x, details)


def haar_inverse(coeffs: WaveletCoeffs) -> np.ndarray:
    x = as_tensor(coeffs.approx)
    for bands in reversed(coeffs.details):
        if len(bands) != 3 or any(b.shape != x.shape for b in bands):
            raise StructureError("detail bands do not match the approximation band")
        x = _synthesis(x, bands)
    return x
