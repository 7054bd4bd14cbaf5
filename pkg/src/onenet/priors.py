"""Proximal operators for the ADMM x-update.

A prox operator is any callable ``prox(v, rho) -> x`` on flat vectors. The
classes below add a name and the image geometry they expect.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .imagery import extract_patches, stitch_patches
from .nn import StateError
from .tensor import DimensionError, ParameterError, as_tensor
from .wavelets import WaveletCoeffs, default_levels, haar_forward, haar_inverse


def soft_threshold(v, t: float) -> np.ndarray:
    """Elementwise sign(v) * max(|v| - t, 0)."""
    if t < 0:
        raise ParameterError(f"threshold must be non-negative, got {t}")
    v = as_tensor(v)
    return np.sign(v) * np.maximum(np.abs(v) - t, 0.0)


class ProxOperator:
    name = "prox"

    def __call__(self, v, rho: float) -> np.ndarray:
        raise NotImplementedError

    def __repr__(self):
        return f"<{self.name}>"


class IdentityProx(ProxOperator):
    name = "identity"

    def __call__(self, v, rho):
        return as_tensor(v).copy()


class PixelL1Prox(ProxOperator):
    """Prox of lam * ||x||_1: soft-thresholding at lam / rho."""

    name = "pixel_l1"

    def __init__(self, lam: float):
        if lam < 0:
            raise ParameterError("lambda must be non-negative")
        self.lam = lam

    def __call__(self, v, rho):
        return soft_threshold(v, self.lam / rho)


@dataclass
class L1WaveletPrior(ProxOperator):
    """Prox of lam * ||W x||_1 for the orthonormal Haar transform W."""

    lam: float = 0.05
    shape: tuple = (28, 28, 1)
    levels: int | None = None
    name = "l1_wavelet"

    def __post_init__(self):
        if self.lam < 0:
            raise ParameterError("lambda must be non-negative")
        self.shape = tuple(self.shape)
        if len(self.shape) == 2:
            self.shape = self.shape + (1,)
        if self.levels is None:
            self.levels = default_levels(self.shape[0], self.shape[1])

    def __call__(self, v, rho):
        return l1_wavelet_prox(self, v, rho)


def l1_wavelet_prox(prior: L1WaveletPrior, v, rho: float) -> np.ndarray:
    """W^T soft_threshold(W v, lam / rho); exact because W is orthonormal."""
    v = as_tensor(v)
    if v.size != int(np.prod(prior.shape)):
        raise DimensionError(f"prior expects {prior.shape} images, got {v.size} values")
    if prior.lam == 0:
        return v.copy()
    coeffs = haar_forward(v.reshape(prior.shape), prior.levels).to_vector()
    shrunk = soft_threshold(coeffs, prior.lam / rho)
    out = haar_inverse(WaveletCoeffs.from_vector(shrunk, prior.shape, prior.levels))
    return out.reshape(v.shape)


def network_projector_prox(model, v) -> np.ndarray:
    """One forward pass of the trained projector, clamped to [-1, 1].

    The learned prior weight is fixed at training time, so rho is unused.
    """
    return model.project(v)


def patchwise_projector(model, v, patch: int, image_shape=None) -> np.ndarray:
    """Project overlapping-at-the-border patches independently and stitch."""
    v = as_tensor(v)
    img = v.reshape(image_shape) if image_shape is not None else v
    if img.ndim == 2:
        img = img[:, :, None]
    patches, grid = extract_patches(img, patch)
    shape = (patch, patch, img.shape[2])
    if tuple(model.input_shape) != shape:
        raise DimensionError(f"projector expects {model.input_shape}, patches are {shape}")
    projected = model.project_batch(np.stack(patches))
    return stitch_patches(list(projected), grid).reshape(v.shape)


class NetworkProjectorProx(ProxOperator):
    """Plug-in projector; images larger than the network input are handled
    patch by patch when ``image_shape`` is given."""

    name = "projector"

    def __init__(self, model, image_shape=None):
        if not getattr(model, "trained", False):
            raise StateError("projector has not been trained or loaded")
        self.model = model
        self.image_shape = tuple(image_shape) if image_shape is not None else tuple(model.input_shape)

    def __call__(self, v, rho):
        if self.image_shape == tuple(self.model.input_shape):
            return network_projector_prox(self.model, v)
        return patchwise_projector(self.model, v, self.model.input_shape[0], self.image_shape)
