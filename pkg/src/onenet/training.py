"""Adversarial training of the projection network.

One training step draws perturbed images v ~ f(x), takes an Adam step on the
projector P against the five-term projection loss, then one step each on
the image classifier D and the latent classifier D_l, whose weights are
clipped afterwards.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field

import numpy as np

from .imagery import area_downsample, bicubic_upsample, resize_nearest
from .nn import (DEFAULT_LATENT_CLASSIFIER, Adam, Projector, build_classifier,
                 build_projector, clip_weights)
from .tensor import ParameterError, RngStream, as_tensor

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class PerturbationConfig:
    mask_weight_range: tuple = (0.05, 0.5)
    low_res_mask_side: int = 4
    smoothing_ratio_range: tuple = (0.2, 0.95)
    smoothing_enabled: bool = False

    def __post_init__(self):
        lo, hi = self.mask_weight_range
        if lo < 0 or hi < lo:
            raise ParameterError(f"bad mask weight range {self.mask_weight_range}")
        slo, shi = self.smoothing_ratio_range
        if not 0 < slo <= shi <= 1:
            raise ParameterError(f"bad smoothing ratio range {self.smoothing_ratio_range}")
        if self.low_res_mask_side < 2:
            raise ParameterError("low_res_mask_side must be >= 2")


def _draw(rng, lo, hi, n):
    return np.full(n, float(lo)) if lo == hi else rng.uniform(lo, hi, n)


def smooth(img, ratio: float) -> np.ndarray:
    """Box-downsample by `ratio`, then nearest-neighbour upsample back."""
    h, w = img.shape[:2]
    th, tw = max(1, int(round(ratio * h))), max(1, int(round(ratio * w)))
    if (th, tw) == (h, w):
        return img.copy()
    return resize_nearest(area_downsample(img, th, tw), h, w)


def noise_mask(shape, cfg: PerturbationConfig, rng: RngStream) -> np.ndarray:
    """Per-pixel noise std: a low-resolution uniform mask, bicubic-upsampled
    and clamped back into the weight range (the cubic kernel overshoots)."""
    side = cfg.low_res_mask_side
    lo, hi = cfg.mask_weight_range
    low = _draw(rng, lo, hi, side * side).reshape(side, side)
    return np.clip(bicubic_upsample(low, shape[0], shape[1]), lo, hi)


def perturb(img, cfg: PerturbationConfig, rng: RngStream) -> np.ndarray:
    """Draw v ~ f(x): optional smoothing, then spatially varying Gaussian noise.

    The result is not clamped to [-1, 1].
    """
    x = as_tensor(img)
    squeeze = x.ndim == 2
    if squeeze:
        x = x[:, :, None]
    if cfg.smoothing_enabled:
        x = smooth(x, _draw(rng, *cfg.smoothing_ratio_range, 1)[0])
    mask = noise_mask(x.shape, cfg, rng)
    v = x + rng.gaussian(x.shape) * mask[:, :, None]
    return v[:, :, 0] if squeeze else v


def perturb_batch(batch, cfg: PerturbationConfig, rng: RngStream) -> np.ndarray:
    return np.stack([perturb(x, cfg, rng) for x in batch])


@dataclass
class LossWeights:
    l1: float = 0.01    # ||x - P(x)||^2
    l2: float = 1.0     # ||x - P(v)||^2
    l3: float = 0.005   # ||v - P(v)||^2
    l4: float = 0.0001  # -log sigmoid(D_l(E(v)))
    l5: float = 0.001   # -log sigmoid(D(P(v)))

    def __post_init__(self):
        if min(self.l1, self.l2, self.l3, self.l4, self.l5) < 0:
            raise ParameterError("loss weights must be non-negative")


TERM_NAMES = ("recon_clean", "recon_perturbed", "projection", "adv_latent", "adv_image")


def sigmoid(t):
    return 0.5 * (1.0 + np.tanh(0.5 * t))


def neg_log_sigmoid(t):
    """-log sigmoid(t), computed stably."""
    return np.logaddexp(0.0, -t)


@dataclass
class LossResult:
    total: float
    terms: dict
    projected_clean: np.ndarray = None
    projected: np.ndarray = None
    latent_clean: np.ndarray = None
    latent_perturbed: np.ndarray = None


def _sq(a):
    return np.sum(a.reshape(a.shape[0], -1).astype(np.float64) ** 2, axis=1)


def projector_loss(P: Projector, D, D_lat, x, v, w: LossWeights, backward=True) -> LossResult:
    """Projection loss averaged over the batch.

    l1 ||x - P(x)||^2 + l2 ||x - P(v)||^2 + l3 ||v - P(v)||^2
    - l4 log sigmoid(D_l(E(v))) - l5 log sigmoid(D(P(v))).

    With ``backward=True`` the gradient with respect to P's parameters is
    accumulated into P (D and D_l gradients are left dirty).
    """
    x = np.asarray(x)
    v = np.asarray(v)
    n = x.shape[0]
    out, latent = P.forward(np.concatenate([x, v]), train=backward)
    px, pv = out[:n], out[n:]
    lat_x, lat_v = latent[:n], latent[n:]

    logit_lat = D_lat.forward(lat_v, train=backward).reshape(n)
    logit_img = D.forward(pv, train=backward).reshape(n)
    terms = {
        "recon_clean": w.l1 * _sq(x - px).mean(),
        "recon_perturbed": w.l2 * _sq(x - pv).mean(),
        "projection": w.l3 * _sq(v - pv).mean(),
        "adv_latent": w.l4 * neg_log_sigmoid(logit_lat.astype(np.float64)).mean(),
        "adv_image": w.l5 * neg_log_sigmoid(logit_img.astype(np.float64)).mean(),
    }
    terms = {k: float(t) for k, t in terms.items()}
    total = sum(terms.values())
    res = LossResult(total, terms, px, pv, lat_x, lat_v)
    if not backward:
        return res

    g_lat_logit = (w.l4 / n) * (sigmoid(logit_lat) - 1.0)
    g_img_logit = (w.l5 / n) * (sigmoid(logit_img) - 1.0)
    g_lat_v = D_lat.backward(g_lat_logit.reshape(n, 1))
    g_pv_adv = D.backward(g_img_logit.reshape(n, 1))
    g_out = np.concatenate([
        (2.0 * w.l1 / n) * (px - x),
        (2.0 * w.l2 / n) * (pv - x) + (2.0 * w.l3 / n) * (pv - v) + g_pv_adv,
    ])
    g_latent = np.concatenate([np.zeros_like(lat_x), g_lat_v])
    P.backward(g_out, g_latent)
    return res


def classifier_loss(net, positives, negatives, backward=True) -> float:
    """Binary cross-entropy on logits: -mean log s(l+) - mean log(1 - s(l-))."""
    positives = np.asarray(positives)
    negatives = np.asarray(negatives)
    n_pos, n_neg = len(positives), len(negatives)
    logits = net.forward(np.concatenate([positives, negatives]), train=backward).reshape(-1)
    lp = logits[:n_pos].astype(np.float64)
    ln = logits[n_pos:].astype(np.float64)
    loss = float(neg_log_sigmoid(lp).mean() + neg_log_sigmoid(-ln).mean())
    if backward:
        g = np.concatenate([(sigmoid(lp) - 1.0) / n_pos, sigmoid(ln) / n_neg])
        net.backward(g.reshape(-1, 1))
    return loss


@dataclass
class TrainConfig:
    iterations: int = 1000
    batch_size: int = 32
    lr: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.999
    c_clip: float = 0.05
    weights: LossWeights = field(default_factory=LossWeights)
    perturbation: PerturbationConfig = field(default_factory=PerturbationConfig)
    eval_every: int = 100
    refresh_every: int = 10  # iterations between reference-statistics refreshes
    patience: int = 5
    val_fraction: float = 0.1
    seed: int = 0
    float32: bool = True
    projector_arch: dict | None = None
    classifier_arch: dict | None = None
    latent_classifier_arch: dict | None = None

    def __post_init__(self):
        if self.iterations < 0 or self.batch_size < 1:
            raise ParameterError("iterations must be >= 0 and batch_size >= 1")
        if self.eval_every < 1 or self.refresh_every < 1 or self.patience < 0:
            raise ParameterError("eval_every and refresh_every must be >= 1, patience >= 0")


@dataclass
class TrainState:
    P: Projector
    D: object
    D_lat: object
    opt_P: Adam
    opt_D: Adam
    opt_D_lat: Adam
    rng: RngStream
    iteration: int = 0
    history: list = field(default_factory=list)
    val_history: list = field(default_factory=list)


def init_state(input_shape, cfg: TrainConfig) -> TrainState:
    root = RngStream(cfg.seed)
    P = build_projector(input_shape, cfg.projector_arch, seed=cfg.seed)
    D = build_classifier(input_shape, cfg.classifier_arch, seed=cfg.seed + 1, c_clip=cfg.c_clip)
    lat_arch = cfg.latent_classifier_arch or DEFAULT_LATENT_CLASSIFIER
    D_lat = build_classifier(P.latent_shape, lat_arch, seed=cfg.seed + 2, c_clip=cfg.c_clip)
    if cfg.float32:
        for net in (P, D, D_lat):
            net.astype(np.float32)

    def adam():
        return Adam(cfg.lr, cfg.beta1, cfg.beta2)

    return TrainState(P, D, D_lat, adam(), adam(), adam(), root.spawn(1))


def _params(model):
    return [layer.params[name] for _, layer, name in model.parameters()]


def _grads(model):
    return [layer.grads[name] for _, layer, name in model.parameters()]


def train_step(state: TrainState, batch, cfg: TrainConfig) -> dict:
    """One P step, one D step and one D_l step on a batch of clean images."""
    batch = np.asarray(batch, dtype=np.float64)
    if len(batch) == 0:
        raise ParameterError("empty batch")
    P, D, D_lat = state.P, state.D, state.D_lat
    v = perturb_batch(batch, cfg.perturbation, state.rng)

    P.zero_grad()
    res = projector_loss(P, D, D_lat, batch, v, cfg.weights, backward=True)
    if not np.isfinite(res.total):
        raise TrainingError(f"non-finite projector loss at iteration {state.iteration}: {res.terms}")
    state.opt_P.step(_params(P), _grads(P))

    D.zero_grad()
    d_loss = classifier_loss(D, batch, res.projected)
    state.opt_D.step(_params(D), _grads(D))
    clip_weights(D, cfg.c_clip)

    D_lat.zero_grad()
    dl_loss = classifier_loss(D_lat, res.latent_clean, res.latent_perturbed)
    state.opt_D_lat.step(_params(D_lat), _grads(D_lat))
    clip_weights(D_lat, cfg.c_clip)

    if not (np.isfinite(d_loss) and np.isfinite(dl_loss)):
        raise TrainingError(f"non-finite classifier loss at iteration {state.iteration}")
    state.iteration += 1
    metrics = {"iteration": state.iteration, **res.terms, "projector_loss": res.total,
               "classifier_loss": d_loss, "latent_classifier_loss": dl_loss}
    state.history.append(metrics)
    return metrics


def refresh_reference_stats(state: TrainState, ref_clean, ref_perturbed) -> None:
    state.P.refresh_reference_stats(np.concatenate([ref_clean, ref_perturbed]))
    state.D.refresh_reference_stats(ref_clean)
    _, latent = state.P.forward(ref_clean, train=False)
    state.D_lat.refresh_reference_stats(latent)


def snapshot(model):
    nets = model.networks() if isinstance(model, Projector) else [model]
    return ([p.copy() for net in nets for p in net.param_arrays()],
            [(n.mean.copy(), n.var.copy()) for net in nets for n in net.norm_layers()])


def restore(model, snap) -> None:
    nets = model.networks() if isinstance(model, Projector) else [model]
    params, stats = snap
    for dst, src in zip([p for net in nets for p in net.param_arrays()], params):
        dst[...] = src
    for norm, (mean, var) in zip([n for net in nets for n in net.norm_layers()], stats):
        norm.mean, norm.var = mean.copy(), var.copy()


def validation_loss(state: TrainState, x_val, v_val, w: LossWeights, chunk: int = 128) -> float:
    total = 0.0
    for i in range(0, len(x_val), chunk):
        res = projector_loss(state.P, state.D, state.D_lat, x_val[i:i + chunk], v_val[i:i + chunk],
                             w, backward=False)
        total += res.total * len(x_val[i:i + chunk])
    return total / len(x_val)


@dataclass
class TrainResult:
    projector: Projector
    state: TrainState
    best_iteration: int
    stopped_early: bool


def train(dataset, cfg: TrainConfig | None = None, validation=None, callback=None) -> TrainResult:
    """Train a projector with early stopping on the validation projector loss.

    `dataset` is an (N, H, W, C) array or a DatasetHandle. Without an explicit
    `validation` set, the last ``val_fraction`` of the data is held out.
    Returns the best-validation projector.
    """
    cfg = cfg or TrainConfig()
    images = np.asarray(getattr(dataset, "images", dataset), dtype=np.float64)
    if len(images) == 0:
        raise ParameterError("empty dataset")
    if validation is None:
        n_val = max(1, int(round(cfg.val_fraction * len(images)))) if len(images) > 1 else 0
        validation = images[len(images) - n_val:]
        images = images[:len(images) - n_val] if n_val else images
    validation = np.asarray(getattr(validation, "images", validation), dtype=np.float64)

    state = init_state(images.shape[1:], cfg)
    data_rng = RngStream(cfg.seed).spawn(2)
    ref_rng = RngStream(cfg.seed).spawn(3)
    ref_idx = ref_rng.permutation(len(images))[:cfg.batch_size]
    ref_clean = images[ref_idx]
    ref_perturbed = perturb_batch(ref_clean, cfg.perturbation, ref_rng)
    v_val = perturb_batch(validation, cfg.perturbation, RngStream(cfg.seed).spawn(4)) \
        if len(validation) else validation

    refresh_reference_stats(state, ref_clean, ref_perturbed)
    best = (np.inf, 0, snapshot(state.P))
    bad_evals = 0
    stopped_early = False
    steps_per_epoch = max(1, len(images) // cfg.batch_size)
    order = None

    for it in range(cfg.iterations):
        step = it % steps_per_epoch
        if step == 0:
            order = data_rng.permutation(len(images))
        if it and it % cfg.refresh_every == 0:
            refresh_reference_stats(state, ref_clean, ref_perturbed)
        idx = order[step * cfg.batch_size:(step + 1) * cfg.batch_size]
        metrics = train_step(state, images[idx], cfg)
        if callback is not None:
            callback(metrics)

        if (it + 1) % cfg.eval_every == 0 and len(validation):
            val = validation_loss(state, validation, v_val, cfg.weights)
            state.val_history.append((state.iteration, val))
            metrics["validation_loss"] = val
            log.info("iteration %d: train %.4f val %.4f", state.iteration,
                     metrics["projector_loss"], val)
            if val < best[0]:
                best = (val, state.iteration, snapshot(state.P))
                bad_evals = 0
            else:
                bad_evals += 1
                if bad_evals > cfg.patience:
                    stopped_early = True
                    break

    if state.val_history and cfg.iterations:
        restore(state.P, best[2])
        best_it = best[1]
    else:
        best_it = state.iteration
    state.P.eval()
    state.P.trained = True
    return TrainResult(state.P, state, best_it, stopped_early)


METRIC_COLUMNS = ("iteration",) + TERM_NAMES + ("projector_loss", "classifier_loss",
                                                "latent_classifier_loss", "validation_loss")


def metrics_csv(history, comment: str | None = None) -> str:
    buf = io.StringIO()
    if comment:
        buf.write(f"# {comment}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(METRIC_COLUMNS)
    for row in history:
        writer.writerow([repr(row[c]) if isinstance(row.get(c), float) else row.get(c, "")
                         for c in METRIC_COLUMNS])
    return buf.getvalue()
