"""Image container helpers, PSNR, resampling and patch tiling.

Images are float64 arrays of shape (height, width, channels) with values in
[-1, 1]. Functions also accept (height, width) arrays and keep that shape.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import DimensionError, as_tensor


class GridError(ValueError):
    """Raised when a patch list does not match its grid."""


def as_image(img) -> np.ndarray:
    arr = as_tensor(img)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3 or arr.shape[2] not in (1, 3):
        raise DimensionError(f"expected HxWxC image with C in (1, 3), got {arr.shape}")
    return arr


def validate_image(img) -> np.ndarray:
    arr = as_image(img)
    if arr.size and (arr.min() < -1.0 or arr.max() > 1.0):
        raise ValueError("pixel values outside [-1, 1]")
    return arr


def clamp_image(img) -> np.ndarray:
    return np.clip(as_tensor(img), -1.0, 1.0)


def psnr(reference, candidate) -> float:
    """PSNR in dB after mapping both images from [-1, 1] to [0, 1] (peak 1).

    Returns ``inf`` for identical inputs.
    """
    ref = as_tensor(reference)
    cand = as_tensor(candidate)
    if ref.shape != cand.shape:
        raise DimensionError(f"shape mismatch: {ref.shape} vs {cand.shape}")
    mse = np.mean(((ref - cand) / 2.0) ** 2)
    if mse == 0.0:
        return float("inf")
    return float(10.0 * np.log10(1.0 / mse))


@dataclass(frozen=True)
class PatchGrid:
    patch_size: int
    height: int
    width: int
    row_origins: tuple
    col_origins: tuple

    @property
    def rows(self) -> int:
        return len(self.row_origins)

    @property
    def cols(self) -> int:
        return len(self.col_origins)

    def origins(self):
        """Patch origins in row-major order."""
        return [(r, c) for r in self.row_origins for c in self.col_origins]


def _axis_origins(dim: int, size: int) -> tuple:
    starts = list(range(0, dim - size + 1, size))
    if starts[-1] + size < dim:
        starts.append(dim - size)
    return tuple(starts)


def make_grid(height: int, width: int, size: int) -> PatchGrid:
    if size < 1 or size > min(height, width):
        raise DimensionError(f"patch size {size} does not fit a {height}x{width} image")
    return PatchGrid(size, height, width,
                     _axis_origins(height, size), _axis_origins(width, size))


def extract_patches(img, size: int):
    """Tile `img` with size x size patches; the last row/column is anchored
    to the border when the dimensions are not multiples of `size`."""
    arr = as_tensor(img)
    grid = make_grid(arr.shape[0], arr.shape[1], size)
    patches = [arr[r:r + size, c:c + size].copy() for r, c in grid.origins()]
    return patches, grid


def stitch_patches(patches, grid: PatchGrid) -> np.ndarray:
    origins = grid.origins()
    if len(patches) != len(origins):
        raise GridError(f"{len(patches)} patches for a {grid.rows}x{grid.cols} grid")
    first = as_tensor(patches[0])
    out = np.zeros((grid.height, grid.width) + first.shape[2:], dtype=first.dtype)
    s = grid.patch_size
    for patch, (r, c) in zip(patches, origins):
        patch = as_tensor(patch)
        if patch.shape[:2] != (s, s):
            raise GridError(f"patch of shape {patch.shape[:2]}, expected {(s, s)}")
        out[r:r + s, c:c + s] = patch  # later patches overwrite overlaps
    return out


def box_downsample(img, factor: int) -> np.ndarray:
    arr = as_tensor(img)
    h, w = arr.shape[:2]
    if factor < 1 or h % factor or w % factor:
        raise DimensionError(f"factor {factor} does not divide {h}x{w}")
    blocks = arr.reshape((h // factor, factor, w // factor, factor) + arr.shape[2:])
    return blocks.mean(axis=(1, 3))


def nearest_upsample(img, factor: int) -> np.ndarray:
    if factor < 1:
        raise DimensionError(f"upsampling factor must be >= 1, got {factor}")
    arr = as_tensor(img)
    return np.repeat(np.repeat(arr, factor, axis=0), factor, axis=1)


def _cubic_kernel(t: np.ndarray, a: float = -0.5) -> np.ndarray:
    t = np.abs(t)
    t2, t3 = t * t, t * t * t
    near = (a + 2) * t3 - (a + 3) * t2 + 1
    far = a * t3 - 5 * a * t2 + 8 * a * t - 4 * a
    return np.where(t <= 1, near, np.where(t < 2, far, 0.0))


def bicubic_weights(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) Catmull-Rom interpolation matrix, half-pixel aligned,
    with border samples clamped."""
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    base = np.floor(src).astype(int)
    frac = src - base
    mat = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    for k in (-1, 0, 1, 2):
        idx = np.clip(base + k, 0, n_in - 1)
        np.add.at(mat, (rows, idx), _cubic_kernel(frac - k))
    return mat


def bicubic_upsample(img, out_h: int, out_w: int) -> np.ndarray:
    arr = as_tensor(img)
    h, w = arr.shape[:2]
    if out_h < h or out_w < w:
        raise DimensionError(f"cannot shrink {h}x{w} to {out_h}x{out_w}")
    if (out_h, out_w) == (h, w):
        return arr.copy()
    wh = bicubic_weights(h, out_h)
    ww = bicubic_weights(w, out_w)
    return np.einsum("ah,hw...,bw->ab...", wh, arr, ww)


def resize_nearest(img, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbour resize to an arbitrary size (either direction)."""
    arr = as_tensor(img)
    h, w = arr.shape[:2]
    ri = np.minimum(((np.arange(out_h) + 0.5) * h / out_h).astype(int), h - 1)
    ci = np.minimum(((np.arange(out_w) + 0.5) * w / out_w).astype(int), w - 1)
    return arr[ri][:, ci]


def area_downsample(img, out_h: int, out_w: int) -> np.ndarray:
    """Box-average resize to a smaller, not necessarily integer-ratio size."""
    arr = as_tensor(img)
    h, w = arr.shape[:2]

    def weights(n_in, n_out):
        mat = np.zeros((n_out, n_in))
        edges = np.arange(n_out + 1) * (n_in / n_out)
        for i in range(n_out):
            lo, hi = edges[i], edges[i + 1]
            for j in range(int(np.floor(lo)), min(int(np.ceil(hi)), n_in)):
                mat[i, j] = min(hi, j + 1) - max(lo, j)
        return mat / mat.sum(axis=1, keepdims=True)

    return np.einsum("ah,hw...,bw->ab...", weights(h, out_h), arr, weights(w, out_w))
