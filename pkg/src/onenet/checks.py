"""Invariant suites behind ``onenet check``.

Each suite returns a list of CheckResult rows; a suite passes when every row
passes.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import nn, training
from .linops import (MaskSpec, adjoint_check, box_downsample_op, gaussian_matrix_op,
                     identity_op, mask_op)
from .solvers import cg_solve
from .tensor import RngStream
from .wavelets import haar_forward, haar_inverse


@dataclass
class CheckResult:
    name: str
    error: float
    threshold: float
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.error) and self.error < self.threshold)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: err={self.error:.3e} (< {self.threshold:.0e}) {self.seconds:.2f}s"


def _timed(name, threshold, fn):
    t0 = time.perf_counter()
    err = fn()
    return CheckResult(name, float(err), threshold, time.perf_counter() - t0)


def builtin_operators(h=28, w=28, seed=0):
    d = h * w
    return {
        "identity": identity_op(d),
        "gaussian_0.1": gaussian_matrix_op(d, 0.1, seed),
        "gaussian_0.3": gaussian_matrix_op(d, 0.3, seed),
        "gaussian_1.0": gaussian_matrix_op(d, 1.0, seed),
        "mask_pixelwise": mask_op(MaskSpec("pixelwise", drop_rate=0.5, seed=seed), h, w),
        "mask_scattered": mask_op(MaskSpec("scattered", seed=seed), h, w),
        "mask_centered_block": mask_op(MaskSpec("centered-block", block_fraction=0.3), h, w),
        "box_downsample_2": box_downsample_op(h, w, 1, 2),
        "box_downsample_4": box_downsample_op(h, w, 1, 4),
    }


def adjoint_suite(trials=100, seed=0, threshold=1e-10):
    return [_timed(f"adjoint {name}", threshold, lambda op=op: adjoint_check(op, trials, seed))
            for name, op in builtin_operators(seed=seed).items()]


def cg_suite(sizes=(1, 2, 5, 10, 25, 50, 100), seed=0, threshold=1e-8):
    """Random SPD systems; each must reach relative residual `threshold`
    within 2n iterations."""
    rng = RngStream(seed)
    out = []
    for n in sizes:
        Q = rng.gaussian((n, n))
        M = Q @ Q.T + n * np.eye(n)
        b = rng.gaussian(n)

        def run(M=M, b=b, n=n):
            x, info = cg_solve(lambda v: M @ v, b, tol=threshold * 1e-2, max_iters=2 * n)
            resid = np.linalg.norm(M @ x - b) / np.linalg.norm(b)
            return resid if info.iterations <= 2 * n else np.inf

        out.append(_timed(f"cg n={n}", threshold, run))
    return out


def wavelet_suite(n_images=1000, shape=(28, 28, 1), levels=None, seed=0,
                  recon_threshold=1e-12, parseval_threshold=1e-10):
    from .wavelets import default_levels
    levels = default_levels(shape[0], shape[1]) if levels is None else levels
    rng = RngStream(seed)
    recon = parse = 0.0
    t0 = time.perf_counter()
    for _ in range(n_images):
        img = rng.uniform(-1.0, 1.0, shape)
        c = haar_forward(img, levels)
        recon = max(recon, float(np.max(np.abs(haar_inverse(c) - img))))
        n_img = np.linalg.norm(img)
        parse = max(parse, abs(np.linalg.norm(c.to_vector()) - n_img) / n_img)
    dt = time.perf_counter() - t0
    return [CheckResult(f"wavelet reconstruction ({n_images} images)", recon, recon_threshold, dt),
            CheckResult(f"wavelet parseval ({n_images} images)", parse, parseval_threshold, 0.0)]


def _layer_cases(rng):
    """(name, module, input) triples covering every layer kind."""
    def inp(*shape):
        return rng.gaussian(shape)

    return [
        ("conv stride 1", nn.Conv(3, 2, 3, 1, rng), inp(2, 6, 6, 2)),
        ("conv stride 2", nn.Conv(4, 2, 3, 2, rng), inp(2, 7, 7, 2)),
        ("deconv stride 2", nn.Deconv(4, 3, 2, 2, rng), inp(2, 4, 4, 3)),
        ("dense", nn.Dense(12, 5, rng), inp(3, 12)),
        ("channelwise dense", nn.ChannelwiseDense(3, 3, 2, rng), inp(2, 3, 3, 2)),
        ("elu", nn.ELU(), inp(4, 10)),
        ("refnorm", _refnorm(rng), inp(4, 3, 3, 2)),
        ("residual same", nn.bottleneck(4, "same", rng), inp(2, 4, 4, 4)),
        ("residual half", nn.bottleneck(4, "half", rng), inp(2, 4, 4, 4)),
        ("residual quarter", nn.bottleneck(4, "quarter", rng), inp(2, 4, 4, 4)),
    ]


def _refnorm(rng):
    layer = nn.RefNorm(2)
    layer.params["gamma"] += 0.3 * rng.gaussian(2)
    layer.params["beta"] += rng.gaussian(2)
    layer.mean = rng.gaussian(2)
    layer.var = rng.uniform(0.5, 2.0, 2)
    return layer


def tiny_training_state(seed=0, shape=(8, 8, 1)):
    cfg = training.TrainConfig(
        seed=seed, float32=False,
        projector_arch={"channels": (3, 4), "strides": (1, 2), "window": 3,
                        "latent_channels": 2, "latent_window": 2},
        classifier_arch={"stem_channels": 2, "blocks": ("half",)},
        latent_classifier_arch={"stem_channels": 0, "blocks": ("same",)},
    )
    state = training.init_state(shape, cfg)
    rng = RngStream(seed).spawn(9)
    ref = rng.uniform(-1, 1, (4,) + shape)
    training.refresh_reference_stats(state, ref, ref + 0.1 * rng.gaussian(ref.shape))
    return state, cfg, rng


def loss_gradient_check(seed=0, max_entries=6, step=1e-5):
    """Finite-difference check of the projector loss w.r.t. P's parameters and
    of the classifier loss w.r.t. D's parameters, in float64."""
    state, cfg, rng = tiny_training_state(seed)
    shape = state.P.input_shape
    x = rng.uniform(-1, 1, (3,) + shape)
    v = x + 0.2 * rng.gaussian(x.shape)
    # larger adversarial weights so those terms are visible in the check
    w = training.LossWeights(0.01, 1.0, 0.005, 0.5, 0.5)

    def p_loss():
        return training.projector_loss(state.P, state.D, state.D_lat, x, v, w, backward=False).total

    state.P.zero_grad()
    res = training.projector_loss(state.P, state.D, state.D_lat, x, v, w, backward=True)
    worst = _param_fd(state.P.parameters(), p_loss, rng, max_entries, step)

    pos, neg = x, res.projected

    def d_loss():
        return training.classifier_loss(state.D, pos, neg, backward=False)

    state.D.zero_grad()
    training.classifier_loss(state.D, pos, neg, backward=True)
    return max(worst, _param_fd(state.D.parameters(), d_loss, rng, max_entries, step))


def _param_fd(params, loss, rng, max_entries, step):
    grads = [(layer.params[name], layer.grads[name].copy()) for _, layer, name in params]
    num_all, ana_all = [], []
    for arr, g in grads:
        flat = arr.reshape(-1)
        for idx in rng.permutation(flat.size)[:max_entries]:
            orig = flat[idx]
            flat[idx] = orig + step
            fp = loss()
            flat[idx] = orig - step
            fm = loss()
            flat[idx] = orig
            num_all.append((fp - fm) / (2 * step))
            ana_all.append(g.reshape(-1)[idx])
    num, ana = np.array(num_all), np.array(ana_all)
    return float(np.linalg.norm(num - ana) / max(np.linalg.norm(num), np.linalg.norm(ana), 1e-12))


def gradient_suite(seed=0, threshold=1e-4):
    rng = RngStream(seed)
    out = [_timed(f"gradient {name}", threshold,
                  lambda m=module, x=x: nn.gradient_check(m, x, seed=seed))
           for name, module, x in _layer_cases(rng)]
    out.append(_timed("gradient training losses", threshold, lambda: loss_gradient_check(seed)))
    return out


SUITES = {"adjoint": adjoint_suite, "cg": cg_suite, "wavelet": wavelet_suite,
          "gradient": gradient_suite}


def run_suite(kind: str):
    if kind not in SUITES:
        raise KeyError(f"unknown check suite {kind!r}; choose from {sorted(SUITES)}")
    return SUITES[kind]()
