"""ADMM with a pluggable proximal step, and the CG solver for its z-update."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .imagery import psnr
from .tensor import DimensionError, ParameterError, as_tensor


class NumericalError(FloatingPointError):
    def __init__(self, message, iteration=None):
        super().__init__(message if iteration is None else f"{message} (iteration {iteration})")
        self.iteration = iteration


class ContractError(ValueError):
    """A plugged-in operator broke its input/output contract."""


@dataclass
class CGInfo:
    iterations: int
    residual: float
    converged: bool


def cg_solve(apply_spd, b, tol: float = 1e-10, max_iters: int = 200, x0=None):
    """Conjugate gradients for M x = b with M symmetric positive definite.

    `apply_spd` evaluates v -> M v. Stops once ||M x - b|| / ||b|| <= tol and
    returns ``(x, CGInfo)``; after `max_iters` the last iterate is returned
    with ``converged=False``.
    """
    b = as_tensor(b).ravel()
    if not np.all(np.isfinite(b)):
        raise NumericalError("non-finite right-hand side", 0)
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros_like(b), CGInfo(0, 0.0, True)
    x = np.zeros_like(b) if x0 is None else as_tensor(x0).ravel().copy()
    r = b - apply_spd(x) if x0 is not None else b.copy()
    p = r.copy()
    rs = r @ r
    if math.sqrt(rs) / bnorm <= tol:
        return x, CGInfo(0, math.sqrt(rs) / bnorm, True)
    for k in range(1, max_iters + 1):
        mp = apply_spd(p)
        curv = p @ mp
        if not np.isfinite(curv) or curv <= 0:
            raise NumericalError("operator is not positive definite or produced non-finite values", k)
        alpha = rs / curv
        x += alpha * p
        r -= alpha * mp
        rs_new = r @ r
        if not np.isfinite(rs_new):
            raise NumericalError("non-finite residual", k)
        rel = math.sqrt(rs_new) / bnorm
        if rel <= tol:
            return x, CGInfo(k, rel, True)
        p = r + (rs_new / rs) * p
        rs = rs_new
    return x, CGInfo(max_iters, math.sqrt(rs) / bnorm, False)


def z_update(A, y, x, u, rho: float, cg_tol: float = 1e-10, cg_max_iters: int = 200, z0=None):
    """Minimize 1/2 ||y - A z||^2 + rho/2 ||x - z + u||^2 over z.

    Solves (A^T A + rho I) z = A^T y + rho (x + u) matrix-free.
    """
    rhs = A.adjoint(y) + rho * (x + u)
    z, _ = cg_solve(lambda v: A.adjoint(A.forward(v)) + rho * v, rhs,
                    tol=cg_tol, max_iters=cg_max_iters, x0=z0)
    return z


def least_squares_init(A, y, eps: float = 1e-6, cg_tol: float = 1e-10, cg_max_iters: int = 200):
    """Tikhonov-regularized least squares: (A^T A + eps I) z = A^T y."""
    z, _ = cg_solve(lambda v: A.adjoint(A.forward(v)) + eps * v, A.adjoint(y),
                    tol=cg_tol, max_iters=cg_max_iters)
    return z


def denoise_rho(sigma: float) -> float:
    """Penalty preset for denoising; sigma is on the 0..255 scale."""
    return 3.0 * sigma / 255.0


@dataclass
class AdmmConfig:
    rho: float = 0.3
    max_iters: int = 300
    stop_tol: float = 1e-4
    cg_tol: float = 1e-10
    cg_max_iters: int = 200
    early_stop_at: int | None = None
    init_eps: float = 1e-6
    clamp_output: bool = True
    divergence_factor: float = 1e3

    def __post_init__(self):
        if not self.rho > 0:
            raise ParameterError(f"rho must be positive, got {self.rho}")
        if not (self.stop_tol > 0 and self.cg_tol > 0):
            raise ParameterError("tolerances must be positive")
        if self.max_iters < 0 or self.cg_max_iters < 1:
            raise ParameterError("iteration limits must be non-negative")


@dataclass
class AdmmState:
    x: np.ndarray
    z: np.ndarray
    u: np.ndarray


@dataclass
class IterRecord:
    iteration: int
    rmse_xz: float
    data_fidelity: float
    psnr: float | None = None


@dataclass
class AdmmTrace:
    records: list = field(default_factory=list)
    stop_reason: str = ""
    max_iterate_norm: float = 0.0
    init_norm: float = 0.0

    @property
    def iterations(self) -> int:
        return len(self.records)

    @property
    def converged(self) -> bool:
        return self.stop_reason == "converged"

    @property
    def diverged(self) -> bool:
        return self.stop_reason == "diverged"

    def rmse(self) -> np.ndarray:
        return np.array([r.rmse_xz for r in self.records])

    def to_csv(self, fh=None, comment: str | None = None) -> str:
        buf = io.StringIO()
        if comment:
            buf.write(f"# {comment}\n")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["iteration", "rmse_xz", "data_fidelity", "psnr"])
        for r in self.records:
            writer.writerow([r.iteration, repr(r.rmse_xz), repr(r.data_fidelity),
                             "" if r.psnr is None else repr(r.psnr)])
        text = buf.getvalue()
        if fh is not None:
            fh.write(text)
        return text


def admm_solve(A, y, prox, cfg: AdmmConfig | None = None, ground_truth=None,
               callback=None):
    """Solve min 1/2 ||y - A x||^2 + prior(x) with a plug-in proximal step.

    `prox(v, rho)` returns the x-update for v = z - u. Iterates x, z, u in
    that order starting from u = 0 and a regularized least-squares z.
    Returns ``(x, trace)``; ``trace.state`` keeps the final iterates.
    """
    cfg = cfg or AdmmConfig()
    y = as_tensor(y).ravel()
    if y.size != A.out_dim:
        raise DimensionError(f"measurement length {y.size} != operator rows {A.out_dim}")
    d = A.in_dim
    gt = None if ground_truth is None else as_tensor(ground_truth).ravel()

    z = least_squares_init(A, y, cfg.init_eps, cfg.cg_tol, cfg.cg_max_iters)
    u = np.zeros(d)
    x = z.copy()
    trace = AdmmTrace(init_norm=float(np.linalg.norm(z)))
    bound = cfg.divergence_factor * max(trace.init_norm, 1e-12)
    limit = cfg.max_iters if cfg.early_stop_at is None else min(cfg.max_iters, cfg.early_stop_at)

    for k in range(1, limit + 1):
        x = as_tensor(prox(z - u, cfg.rho))
        if x.size != d:
            raise ContractError(f"prox returned {x.size} values, expected {d}")
        x = x.ravel()
        z = z_update(A, y, x, u, cfg.rho, cfg.cg_tol, cfg.cg_max_iters, z0=z)
        u = u + x - z
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(z)) and np.all(np.isfinite(u))):
            raise NumericalError("non-finite ADMM iterate", k)

        rmse = float(np.sqrt(np.mean((x - z) ** 2)))
        resid = y - A.forward(z)
        rec = IterRecord(k, rmse, 0.5 * float(resid @ resid))
        if gt is not None:
            rec.psnr = psnr(gt, np.clip(x, -1, 1) if cfg.clamp_output else x)
        trace.records.append(rec)
        trace.max_iterate_norm = max(trace.max_iterate_norm, float(np.linalg.norm(x)),
                                     float(np.linalg.norm(z)))
        if callback is not None:
            callback(k, x, z, u)
        if trace.max_iterate_norm > bound:
            trace.stop_reason = "diverged"
            break
        if rmse < cfg.stop_tol:
            trace.stop_reason = "converged"
            break
    else:
        trace.stop_reason = "early_stop" if limit < cfg.max_iters else "max_iters"

    trace.state = AdmmState(x.copy(), z.copy(), u.copy())
    out = np.clip(x, -1.0, 1.0) if cfg.clamp_output else x.copy()
    return out, trace
