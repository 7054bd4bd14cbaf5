"""Glue between an ExperimentConfig and the numeric modules: operators,
priors, penalty presets and the per-image solve used by the CLI."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .config import ExperimentConfig, TaskSection
from .imagery import psnr
from .linops import (MaskSpec, add_measurement_noise, box_downsample_op, gaussian_matrix_op,
                     identity_op, mask_op)
from .priors import L1WaveletPrior, NetworkProjectorProx
from .solvers import AdmmConfig, admm_solve, denoise_rho
from .tensor import ParameterError

DEFAULT_RHO = 0.3


def build_operator(task: TaskSection, shape, seed: int):
    h, w, c = shape
    kind = task.kind
    if kind == "cs":
        return gaussian_matrix_op(h * w * c, task.ratio, seed)
    if kind == "pixelwise_inpaint":
        return mask_op(MaskSpec("pixelwise", drop_rate=task.drop_rate, seed=seed), h, w, c)
    if kind == "scattered_inpaint":
        return mask_op(MaskSpec("scattered", n_blocks=task.n_blocks, seed=seed), h, w, c)
    if kind == "block_inpaint":
        return mask_op(MaskSpec("centered-block", block_fraction=task.block_fraction, seed=seed),
                       h, w, c)
    if kind == "superres":
        return box_downsample_op(h, w, c, task.factor)
    if kind == "denoise":
        return identity_op(h * w * c)
    raise ParameterError(f"unknown task {kind!r}")


def task_rho(cfg: ExperimentConfig, task: TaskSection | None = None) -> float:
    task = task or cfg.task
    if cfg.admm.rho > 0:
        return cfg.admm.rho
    if task.kind == "denoise" and task.sigma > 0:
        # sigma is on the [-1, 1] scale; the preset takes 8-bit units
        return denoise_rho(task.sigma * 127.5)
    return DEFAULT_RHO


def admm_config(cfg: ExperimentConfig, task: TaskSection | None = None) -> AdmmConfig:
    a = cfg.admm
    return AdmmConfig(rho=task_rho(cfg, task), max_iters=a.max_iters, stop_tol=a.stop_tol,
                      cg_tol=a.cg_tol, cg_max_iters=a.cg_max_iters,
                      early_stop_at=a.early_stop_at or None)


def build_prior(cfg: ExperimentConfig, shape, model=None):
    if cfg.prior.kind == "l1_wavelet":
        return L1WaveletPrior(lam=cfg.prior.lam, shape=tuple(shape),
                              levels=cfg.prior.levels or None)
    if model is None:
        raise ParameterError("prior.kind = projector needs a model file")
    return NetworkProjectorProx(model, image_shape=tuple(shape))


def synthesize(A, x, sigma: float, seed: int) -> np.ndarray:
    y = A.forward(np.asarray(x, dtype=np.float64).ravel())
    return add_measurement_noise(y, sigma, seed) if sigma > 0 else y


@dataclass
class SolveResult:
    image: np.ndarray
    trace: object
    psnr: float | None
    seconds: float


def solve_image(A, y, prior, admm_cfg: AdmmConfig, shape, ground_truth=None) -> SolveResult:
    gt = None if ground_truth is None else np.asarray(ground_truth, dtype=np.float64).ravel()
    t0 = time.perf_counter()
    x, trace = admm_solve(A, y, prior, admm_cfg, ground_truth=gt)
    dt = time.perf_counter() - t0
    img = x.reshape(shape)
    return SolveResult(img, trace, None if gt is None else psnr(gt.reshape(shape), img), dt)
