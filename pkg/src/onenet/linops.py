"""Measurement operators with exact adjoints.

Every operator maps flat vectors of length ``in_dim`` to flat vectors of
length ``out_dim``. Image-shaped operators flatten (height, width, channels)
in row-major order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .imagery import box_downsample
from .tensor import DimensionError, ParameterError, RngStream, as_tensor, dot


class LinearOperator:
    """Forward/adjoint pair on flat float64 vectors."""

    kind = "generic"

    def __init__(self, in_dim: int, out_dim: int):
        self.in_dim = int(in_dim)
        self.out_dim = int(out_dim)

    def _forward(self, x):
        raise NotImplementedError

    def _adjoint(self, y):
        raise NotImplementedError

    def forward(self, x) -> np.ndarray:
        x = as_tensor(x).ravel()
        if x.size != self.in_dim:
            raise DimensionError(f"{self.kind}: expected input of length {self.in_dim}, got {x.size}")
        return self._forward(x)

    def adjoint(self, y) -> np.ndarray:
        y = as_tensor(y).ravel()
        if y.size != self.out_dim:
            raise DimensionError(f"{self.kind}: expected input of length {self.out_dim}, got {y.size}")
        return self._adjoint(y)

    __call__ = forward

    def normal(self, x) -> np.ndarray:
        """A^T A x."""
        return self.adjoint(self.forward(x))

    def to_dense(self) -> np.ndarray:
        eye = np.eye(self.in_dim)
        return np.stack([self.forward(e) for e in eye], axis=1)

    def spec(self) -> dict:
        return {"kind": self.kind, "in_dim": self.in_dim, "out_dim": self.out_dim}

    def __repr__(self):
        return f"{type(self).__name__}({self.in_dim} -> {self.out_dim})"


class IdentityOp(LinearOperator):
    kind = "identity"

    def __init__(self, d: int):
        super().__init__(d, d)

    def _forward(self, x):
        return x.copy()

    _adjoint = _forward


class MatrixOp(LinearOperator):
    """Dense matrix operator; the adjoint is the transpose."""

    kind = "matrix"

    def __init__(self, matrix, ratio: float | None = None, seed: int | None = None):
        self.matrix = as_tensor(matrix)
        self.matrix.setflags(write=False)
        m, d = self.matrix.shape
        super().__init__(d, m)
        self.ratio = ratio
        self.seed = seed

    def _forward(self, x):
        return self.matrix @ x

    def _adjoint(self, y):
        return self.matrix.T @ y

    def to_dense(self):
        return self.matrix.copy()

    def spec(self):
        return {"kind": "gaussian", "d": self.in_dim, "ratio": self.ratio, "seed": self.seed}


def gaussian_matrix_op(d: int, ratio: float, seed: int) -> MatrixOp:
    """Dense m x d matrix with i.i.d. N(0, 1/m) entries, m = floor(ratio * d)."""
    if not 0 < ratio <= 1:
        raise ParameterError(f"compression ratio must lie in (0, 1], got {ratio}")
    m = int(np.floor(ratio * d))
    if m < 1:
        raise ParameterError(f"ratio {ratio} leaves no measurements for d={d}")
    rng = RngStream(seed)
    mat = rng.gaussian((m, d)) / np.sqrt(m)
    return MatrixOp(mat, ratio=ratio, seed=seed)


def resample_operator_rows(op: MatrixOp, fraction: float, seed: int) -> MatrixOp:
    """Redraw round(fraction * m * d) randomly chosen entries of a Gaussian
    operator from N(0, 1/m); the remaining entries are copied unchanged."""
    if not 0 <= fraction <= 1:
        raise ParameterError(f"fraction must lie in [0, 1], got {fraction}")
    mat = op.matrix.copy()
    m, d = mat.shape
    count = int(round(fraction * m * d))
    if count:
        rng = RngStream(seed)
        picks = rng.permutation(m * d)[:count]
        mat.ravel()[picks] = rng.gaussian(count) / np.sqrt(m)
    return MatrixOp(mat, ratio=op.ratio, seed=op.seed)


@dataclass(frozen=True)
class MaskSpec:
    kind: str  # "pixelwise" | "scattered" | "centered-block"
    drop_rate: float = 0.5
    n_blocks: int = 10
    block_fraction: float = 0.10
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("pixelwise", "scattered", "centered-block"):
            raise ParameterError(f"unknown mask kind {self.kind!r}")
        if self.kind == "pixelwise" and not 0 <= self.drop_rate <= 1:
            raise ParameterError(f"drop rate must lie in [0, 1], got {self.drop_rate}")
        if self.kind != "pixelwise" and not 0 < self.block_fraction <= 1:
            raise ParameterError(f"block fraction must lie in (0, 1], got {self.block_fraction}")


def build_mask(spec: MaskSpec, h: int, w: int) -> np.ndarray:
    """(h, w) array of 0/1 keep flags."""
    rng = RngStream(spec.seed)
    if spec.kind == "pixelwise":
        return (rng.uniform(0.0, 1.0, (h, w)) >= spec.drop_rate).astype(float)
    keep = np.ones((h, w))
    if spec.kind == "scattered":
        side = int(round(spec.block_fraction * min(h, w)))
        if side < 1 or side > min(h, w):
            raise ParameterError(f"block side {side} does not fit {h}x{w}")
        rows = rng.integers(0, h - side + 1, spec.n_blocks)
        cols = rng.integers(0, w - side + 1, spec.n_blocks)
        for r, c in zip(rows, cols):
            keep[r:r + side, c:c + side] = 0.0
        return keep
    bh = int(round(spec.block_fraction * h))
    bw = int(round(spec.block_fraction * w))
    if bh > h or bw > w:
        raise ParameterError(f"block {bh}x{bw} larger than image {h}x{w}")
    r0, c0 = (h - bh) // 2, (w - bw) // 2
    keep[r0:r0 + bh, c0:c0 + bw] = 0.0
    return keep


class MaskOp(LinearOperator):
    """Diagonal 0/1 projection; self-adjoint and idempotent."""

    kind = "mask"

    def __init__(self, keep, channels: int = 1, spec: MaskSpec | None = None):
        keep = as_tensor(keep)
        if keep.ndim == 2:
            keep = np.repeat(keep[:, :, None], channels, axis=2)
        self.keep = keep.ravel().copy()
        self.keep.setflags(write=False)
        self.image_shape = keep.shape
        self.mask_spec = spec
        super().__init__(self.keep.size, self.keep.size)

    def _forward(self, x):
        return self.keep * x

    _adjoint = _forward

    def spec(self):
        out = {"kind": "mask", "shape": list(self.image_shape)}
        if self.mask_spec is not None:
            out.update(mask=self.mask_spec.kind, drop_rate=self.mask_spec.drop_rate,
                       seed=self.mask_spec.seed)
        return out


def mask_op(spec: MaskSpec, h: int, w: int, c: int = 1) -> MaskOp:
    return MaskOp(build_mask(spec, h, w), channels=c, spec=spec)


class BoxDownsampleOp(LinearOperator):
    """Block-mean downsampling by an integer factor; adjoint spreads each
    value over its block scaled by 1/factor^2."""

    kind = "box_downsample"

    def __init__(self, h: int, w: int, c: int, factor: int):
        if factor < 1 or h % factor or w % factor:
            raise DimensionError(f"factor {factor} does not divide {h}x{w}")
        self.image_shape = (h, w, c)
        self.factor = factor
        self.out_shape = (h // factor, w // factor, c)
        super().__init__(h * w * c, int(np.prod(self.out_shape)))

    def _forward(self, x):
        return box_downsample(x.reshape(self.image_shape), self.factor).ravel()

    def _adjoint(self, y):
        f = self.factor
        up = np.repeat(np.repeat(y.reshape(self.out_shape), f, axis=0), f, axis=1)
        return up.ravel() / (f * f)

    def spec(self):
        return {"kind": "box_downsample", "shape": list(self.image_shape), "factor": self.factor}


def box_downsample_op(h: int, w: int, c: int, factor: int) -> BoxDownsampleOp:
    return BoxDownsampleOp(h, w, c, factor)


def identity_op(d: int) -> IdentityOp:
    return IdentityOp(d)


def adjoint_check(op: LinearOperator, trials: int = 100, seed: int = 0,
                  eps: float = 1e-300) -> float:
    """Max over random pairs of |<Ax, y> - <x, A^T y>| / (||Ax|| ||y|| + eps)."""
    if trials < 1:
        raise ParameterError("need at least one trial")
    rng = RngStream(seed)
    worst = 0.0
    for _ in range(trials):
        x = rng.gaussian(op.in_dim)
        y = rng.gaussian(op.out_dim)
        ax = op.forward(x)
        lhs = dot(ax, y)
        rhs = dot(x, op.adjoint(y))
        err = abs(lhs - rhs) / (np.linalg.norm(ax) * np.linalg.norm(y) + eps)
        worst = max(worst, err)
    return worst


def add_measurement_noise(y, sigma: float, seed: int) -> np.ndarray:
    if sigma < 0:
        raise ParameterError(f"noise level must be non-negative, got {sigma}")
    y = as_tensor(y)
    if sigma == 0:
        return y.copy()
    return y + sigma * RngStream(seed).gaussian(y.shape)
