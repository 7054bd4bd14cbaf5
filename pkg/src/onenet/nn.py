"""Small from-scratch network toolkit: layers, backprop, Adam, model files.

Activations are NHWC float64 arrays. Every layer caches what it needs for
``backward`` when run with ``train=True`` and accumulates parameter
gradients into ``layer.grads``.
"""

from __future__ import annotations

import io
import struct

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .tensor import DimensionError, ParameterError, RngStream, as_tensor


class StateError(RuntimeError):
    """Raised when a network is used in the wrong mode or before training."""


class FormatError(ValueError):
    pass


# ---------------------------------------------------------------- conv core

def same_padding(size: int, window: int, stride: int):
    """Output size and (before, after) padding of a 'same' convolution."""
    out = -(-size // stride)
    total = max((out - 1) * stride + window - size, 0)
    return out, (total // 2, total - total // 2)


def _windows(xp, k, s, ho, wo):
    n, _, _, c = xp.shape
    sn, sh, sw, sc = xp.strides
    return as_strided(xp, (n, ho, wo, k, k, c), (sn, sh * s, sw * s, sh, sw, sc), writeable=False)


def conv2d(x, weight, stride):
    """'same' convolution; weight has shape (k, k, c_in, c_out)."""
    k = weight.shape[0]
    n, h, w, _ = x.shape
    ho, ph = same_padding(h, k, stride)
    wo, pw = same_padding(w, k, stride)
    xp = np.pad(x, ((0, 0), ph, pw, (0, 0)))
    cols = _windows(xp, k, stride, ho, wo)
    return np.tensordot(cols, weight, axes=([3, 4, 5], [0, 1, 2]))


def conv2d_transpose(g, weight, stride, in_hw):
    """Adjoint of :func:`conv2d` with respect to its input."""
    k = weight.shape[0]
    h, w = in_hw
    n, ho, wo, _ = g.shape
    _, ph = same_padding(h, k, stride)
    _, pw = same_padding(w, k, stride)
    dcols = np.tensordot(g, weight, axes=([3], [3]))  # n, ho, wo, k, k, c_in
    dxp = np.zeros((n, h + sum(ph), w + sum(pw), weight.shape[2]), dtype=dcols.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, :, :, i, j]
    return dxp[:, ph[0]:ph[0] + h, pw[0]:pw[0] + w]


def conv2d_weight_grad(x, g, k, stride):
    n, h, w, _ = x.shape
    ho, ph = same_padding(h, k, stride)
    wo, pw = same_padding(w, k, stride)
    xp = np.pad(x, ((0, 0), ph, pw, (0, 0)))
    cols = _windows(xp, k, stride, ho, wo)
    return np.tensordot(cols, g, axes=([0, 1, 2], [0, 1, 2]))


# ---------------------------------------------------------------- layers

class Layer:
    kind = "layer"
    code = 0

    def __init__(self):
        self.params = {}
        self.grads = {}
        self._cache = None

    def geometry(self) -> list:
        return []

    def output_shape(self, in_shape):
        return in_shape

    def forward(self, x, train=False):
        raise NotImplementedError

    def backward(self, g):
        raise NotImplementedError

    def _need_cache(self):
        if self._cache is None:
            raise StateError(f"{self.kind}: backward called without a training-mode forward")
        return self._cache

    def zero_grad(self):
        for name, p in self.params.items():
            self.grads[name] = np.zeros_like(p)

    def parameters(self, prefix=""):
        return [(prefix + name, self, name) for name in self.params]

    def norm_layers(self):
        return []

    def __repr__(self):
        return f"{self.kind}({', '.join(map(str, self.geometry()))})"


def _init(rng, shape, fan_in, gain=1.0):
    return rng.gaussian(shape) * (gain / np.sqrt(fan_in))


class Conv(Layer):
    kind, code = "conv", 1

    def __init__(self, window, c_in, c_out, stride=1, rng=None):
        super().__init__()
        if window < 1 or stride < 1:
            raise ParameterError("window and stride must be >= 1")
        self.window, self.c_in, self.c_out, self.stride = window, c_in, c_out, stride
        rng = rng or RngStream(0)
        self.params = {"w": _init(rng, (window, window, c_in, c_out), window * window * c_in),
                       "b": np.zeros(c_out)}
        self.zero_grad()

    def geometry(self):
        return [self.window, self.c_in, self.c_out, self.stride]

    def output_shape(self, in_shape):
        h, w, _ = in_shape
        return (-(-h // self.stride), -(-w // self.stride), self.c_out)

    def forward(self, x, train=False):
        if x.ndim != 4 or x.shape[3] != self.c_in:
            raise DimensionError(f"conv expects NHWC input with {self.c_in} channels, got {x.shape}")
        if train:
            self._cache = x
        return conv2d(x, self.params["w"], self.stride) + self.params["b"]

    def backward(self, g):
        x = self._need_cache()
        self.grads["w"] += conv2d_weight_grad(x, g, self.window, self.stride)
        self.grads["b"] += g.sum(axis=(0, 1, 2))
        return conv2d_transpose(g, self.params["w"], self.stride, x.shape[1:3])


class Deconv(Layer):
    """Transposed convolution: the exact adjoint of a 'same' conv with the
    same window and stride, so output size is input size times stride."""

    kind, code = "dconv", 2

    def __init__(self, window, c_in, c_out, stride=1, rng=None):
        super().__init__()
        if window < 1 or stride < 1:
            raise ParameterError("window and stride must be >= 1")
        self.window, self.c_in, self.c_out, self.stride = window, c_in, c_out, stride
        rng = rng or RngStream(0)
        fan_in = window * window * c_in / (stride * stride)
        self.params = {"w": _init(rng, (window, window, c_out, c_in), fan_in),
                       "b": np.zeros(c_out)}
        self.zero_grad()

    def geometry(self):
        return [self.window, self.c_in, self.c_out, self.stride]

    def output_shape(self, in_shape):
        h, w, _ = in_shape
        return (h * self.stride, w * self.stride, self.c_out)

    def forward(self, x, train=False):
        if x.ndim != 4 or x.shape[3] != self.c_in:
            raise DimensionError(f"dconv expects NHWC input with {self.c_in} channels, got {x.shape}")
        if train:
            self._cache = x
        out_hw = (x.shape[1] * self.stride, x.shape[2] * self.stride)
        return conv2d_transpose(x, self.params["w"], self.stride, out_hw) + self.params["b"]

    def backward(self, g):
        x = self._need_cache()
        self.grads["w"] += conv2d_weight_grad(g, x, self.window, self.stride)
        self.grads["b"] += g.sum(axis=(0, 1, 2))
        return conv2d(g, self.params["w"], self.stride)


class Dense(Layer):
    """Fully connected layer on the flattened input."""

    kind, code = "dense", 3

    def __init__(self, n_in, n_out, rng=None):
        super().__init__()
        self.n_in, self.n_out = n_in, n_out
        rng = rng or RngStream(0)
        self.params = {"w": _init(rng, (n_in, n_out), n_in), "b": np.zeros(n_out)}
        self.zero_grad()

    def geometry(self):
        return [self.n_in, self.n_out]

    def output_shape(self, in_shape):
        return (self.n_out,)

    def forward(self, x, train=False):
        flat = x.reshape(x.shape[0], -1)
        if flat.shape[1] != self.n_in:
            raise DimensionError(f"dense expects {self.n_in} inputs, got {flat.shape[1]}")
        if train:
            self._cache = x
        return flat @ self.params["w"] + self.params["b"]

    def backward(self, g):
        x = self._need_cache()
        flat = x.reshape(x.shape[0], -1)
        self.grads["w"] += flat.T @ g
        self.grads["b"] += g.sum(axis=0)
        return (g @ self.params["w"].T).reshape(x.shape)


class ChannelwiseDense(Layer):
    """Per-channel fully connected map over spatial positions (no mixing
    across channels); output has the input's shape."""

    kind, code = "cfc", 4

    def __init__(self, height, width, channels, rng=None):
        super().__init__()
        self.height, self.width, self.channels = height, width, channels
        p = height * width
        rng = rng or RngStream(0)
        # near-identity start: the layer begins as a pass-through and learns
        # spatial mixing, which trains much faster than a random mixing
        w = np.eye(p)[None] + _init(rng, (channels, p, p), p, gain=0.1)
        self.params = {"w": w, "b": np.zeros((p, channels))}
        self.zero_grad()

    def geometry(self):
        return [self.height, self.width, self.channels]

    def forward(self, x, train=False):
        n = x.shape[0]
        if x.shape[1:] != (self.height, self.width, self.channels):
            raise DimensionError(f"cfc expects {(self.height, self.width, self.channels)}, got {x.shape[1:]}")
        flat = x.reshape(n, -1, self.channels)
        if train:
            self._cache = flat
        out = np.einsum("npc,cpq->nqc", flat, self.params["w"]) + self.params["b"]
        return out.reshape(x.shape)

    def backward(self, g):
        flat = self._need_cache()
        gf = g.reshape(flat.shape)
        self.grads["w"] += np.einsum("npc,nqc->cpq", flat, gf)
        self.grads["b"] += gf.sum(axis=0)
        return np.einsum("nqc,cpq->npc", gf, self.params["w"]).reshape(g.shape)


def elu(x):
    """Exponential linear unit with alpha = 1."""
    return np.where(x > 0, x, np.expm1(np.minimum(x, 0.0)))


def elu_grad(x):
    return np.where(x > 0, 1.0, np.exp(np.minimum(x, 0.0)))


class ELU(Layer):
    kind, code = "elu", 5

    def forward(self, x, train=False):
        if train:
            self._cache = x
        return elu(x)

    def backward(self, g):
        return g * elu_grad(self._need_cache())


class RefNorm(Layer):
    """Per-channel normalization with statistics frozen from a reference batch.

    Statistics are refreshed by running a forward pass with ``collect=True``
    (see :meth:`Network.refresh_reference_stats`); otherwise they are
    constants, so the layer is affine in its input.
    """

    kind, code = "refnorm", 6
    eps = 1e-5

    def __init__(self, channels):
        super().__init__()
        self.channels = channels
        self.params = {"gamma": np.ones(channels), "beta": np.zeros(channels)}
        self.mean = np.zeros(channels)
        self.var = np.ones(channels)
        self.collect = False
        self.zero_grad()

    def geometry(self):
        return [self.channels]

    def norm_layers(self):
        return [self]

    def forward(self, x, train=False):
        if x.shape[-1] != self.channels:
            raise DimensionError(f"refnorm expects {self.channels} channels, got {x.shape[-1]}")
        if self.collect:
            axes = tuple(range(x.ndim - 1))
            self.mean = x.mean(axis=axes)
            self.var = x.var(axis=axes)
        xhat = (x - self.mean) / np.sqrt(self.var + self.eps)
        if train:
            self._cache = xhat
        return xhat * self.params["gamma"] + self.params["beta"]

    def backward(self, g):
        xhat = self._need_cache()
        axes = tuple(range(g.ndim - 1))
        self.grads["gamma"] += (g * xhat).sum(axis=axes)
        self.grads["beta"] += g.sum(axis=axes)
        return g * (self.params["gamma"] / np.sqrt(self.var + self.eps))


class Sequential(Layer):
    kind, code = "seq", 8

    def __init__(self, layers):
        super().__init__()
        self.layers = list(layers)

    def forward(self, x, train=False):
        for layer in self.layers:
            x = layer.forward(x, train)
        return x

    def backward(self, g):
        for layer in reversed(self.layers):
            g = layer.backward(g)
        return g

    def zero_grad(self):
        for layer in self.layers:
            layer.zero_grad()

    def parameters(self, prefix=""):
        out = []
        for i, layer in enumerate(self.layers):
            out.extend(layer.parameters(f"{prefix}{i}."))
        return out

    def norm_layers(self):
        return [n for layer in self.layers for n in layer.norm_layers()]

    def output_shape(self, in_shape):
        for layer in self.layers:
            in_shape = layer.output_shape(in_shape)
        return in_shape


class Residual(Layer):
    """``branch(x) + shortcut(x)``; an empty shortcut is the identity."""

    kind, code = "residual", 7

    def __init__(self, branch, shortcut=None):
        super().__init__()
        self.branch = branch if isinstance(branch, Sequential) else Sequential(branch)
        self.shortcut = shortcut if shortcut is None or isinstance(shortcut, Sequential) \
            else Sequential(shortcut)

    def geometry(self):
        return [len(self.branch.layers), 0 if self.shortcut is None else len(self.shortcut.layers)]

    def forward(self, x, train=False):
        out = self.branch.forward(x, train)
        skip = x if self.shortcut is None else self.shortcut.forward(x, train)
        if out.shape != skip.shape:
            raise DimensionError(f"residual branch {out.shape} vs shortcut {skip.shape}")
        return out + skip

    def backward(self, g):
        gx = self.branch.backward(g)
        return gx + (g if self.shortcut is None else self.shortcut.backward(g))

    def zero_grad(self):
        self.branch.zero_grad()
        if self.shortcut is not None:
            self.shortcut.zero_grad()

    def parameters(self, prefix=""):
        out = self.branch.parameters(prefix + "branch.")
        if self.shortcut is not None:
            out += self.shortcut.parameters(prefix + "shortcut.")
        return out

    def norm_layers(self):
        out = self.branch.norm_layers()
        if self.shortcut is not None:
            out += self.shortcut.norm_layers()
        return out

    def output_shape(self, in_shape):
        return self.branch.output_shape(in_shape)


class Network(Sequential):
    """A trainable layer stack with an input geometry and a weight bound."""

    kind = "network"

    def __init__(self, layers, input_shape, c_clip=None):
        super().__init__(layers)
        self.input_shape = tuple(input_shape)
        self.c_clip = c_clip
        self.training = False
        self.dtype = np.dtype(np.float64)

    def astype(self, dtype):
        """Convert parameters, gradients and norm statistics in place."""
        self.dtype = np.dtype(dtype)
        for _, layer, name in self.parameters():
            layer.params[name] = layer.params[name].astype(self.dtype)
            layer.grads[name] = layer.grads[name].astype(self.dtype)
        for norm in self.norm_layers():
            norm.mean = norm.mean.astype(self.dtype)
            norm.var = norm.var.astype(self.dtype)
        return self

    def train(self):
        self.training = True
        return self

    def eval(self):
        self.training = False
        return self

    def __call__(self, x):
        return self.forward(x, self.training)

    def forward(self, x, train=False):
        x = np.ascontiguousarray(x, dtype=self.dtype)
        if x.shape[1:] != self.input_shape:
            raise DimensionError(f"network expects inputs of shape {self.input_shape}, got {x.shape[1:]}")
        return super().forward(x, train)

    def param_arrays(self):
        return [layer.params[name] for _, layer, name in self.parameters()]

    def grad_arrays(self):
        return [layer.grads[name] for _, layer, name in self.parameters()]

    def n_params(self) -> int:
        return sum(p.size for p in self.param_arrays())

    def refresh_reference_stats(self, reference_batch):
        """Recompute every norm layer's statistics from a reference batch."""
        norms = self.norm_layers()
        for n in norms:
            n.collect = True
        try:
            super().forward(np.asarray(reference_batch, dtype=self.dtype), False)
        finally:
            for n in norms:
                n.collect = False


# ---------------------------------------------------------------- builders

def conv_ve(window, c_in, c_out, stride, rng):
    return [Conv(window, c_in, c_out, stride, rng), RefNorm(c_out), ELU()]


def dconv_ve(window, c_in, c_out, stride, rng):
    return [Deconv(window, c_in, c_out, stride, rng), RefNorm(c_out), ELU()]


def bottleneck(c_in, mode, rng, window=3):
    """Pre-activation bottleneck unit.

    mode "same" keeps shape, "half" halves each spatial side and doubles the
    channels, "quarter" halves each spatial side and keeps the channels.
    """
    if mode == "same":
        stride, c_out = 1, c_in
    elif mode == "half":
        stride, c_out = 2, 2 * c_in
    elif mode == "quarter":
        stride, c_out = 2, c_in
    else:
        raise ParameterError(f"unknown bottleneck mode {mode!r}")
    mid = max(c_out // 4, 1)
    branch = [ELU(), Conv(1, c_in, mid, 1, rng),
              ELU(), Conv(window, mid, mid, stride, rng),
              ELU(), Conv(1, mid, c_out, 1, rng)]
    shortcut = None if mode == "same" else [Conv(1, c_in, c_out, stride, rng)]
    return Residual(branch, shortcut)


DEFAULT_PROJECTOR = {
    "channels": (16, 32, 32),
    "strides": (1, 2, 2),
    "window": 4,
    "latent_channels": 32,
    "latent_window": 2,
}


class Projector:
    """Encoder/decoder pair; ``P = decoder o encoder`` with a linear output."""

    def __init__(self, encoder: Network, decoder: Network):
        if decoder.output_shape(decoder.input_shape) != encoder.input_shape:
            raise DimensionError("decoder output does not match encoder input")
        if encoder.output_shape(encoder.input_shape) != decoder.input_shape:
            raise DimensionError("encoder output does not match decoder input")
        self.encoder = encoder
        self.decoder = decoder
        self.trained = False
        self.training = False

    @property
    def input_shape(self):
        return self.encoder.input_shape

    @property
    def latent_shape(self):
        return self.decoder.input_shape

    def train(self):
        self.training = True
        self.encoder.train()
        self.decoder.train()
        return self

    def eval(self):
        self.training = False
        self.encoder.eval()
        self.decoder.eval()
        return self

    def forward(self, x, train=None):
        """Return ``(P(x), E(x))`` for a batch."""
        train = self.training if train is None else train
        latent = self.encoder.forward(x, train)
        return self.decoder.forward(latent, train), latent

    def backward(self, grad_out, grad_latent=None):
        g = self.decoder.backward(grad_out)
        if grad_latent is not None:
            g = g + grad_latent
        return self.encoder.backward(g)

    def zero_grad(self):
        self.encoder.zero_grad()
        self.decoder.zero_grad()

    def astype(self, dtype):
        self.encoder.astype(dtype)
        self.decoder.astype(dtype)
        return self

    def networks(self):
        return [self.encoder, self.decoder]

    def parameters(self):
        return self.encoder.parameters("enc.") + self.decoder.parameters("dec.")

    def refresh_reference_stats(self, reference_batch):
        self.encoder.refresh_reference_stats(reference_batch)
        latent = self.encoder.forward(reference_batch, False)
        self.decoder.refresh_reference_stats(latent)

    def project(self, v):
        """Single inference pass on one image (any of flat, HxW, HxWxC);
        output has the input's shape and is clamped to [-1, 1]."""
        if not self.trained:
            raise StateError("projector has not been trained or loaded")
        v = as_tensor(v)
        if v.size != int(np.prod(self.input_shape)):
            raise DimensionError(f"projector expects {self.input_shape}, got {v.shape}")
        out, _ = self.forward(v.reshape((1,) + self.input_shape), train=False)
        return np.clip(out, -1.0, 1.0).astype(np.float64).reshape(v.shape)

    def project_batch(self, batch):
        if not self.trained:
            raise StateError("projector has not been trained or loaded")
        batch = as_tensor(batch)
        out, _ = self.forward(batch.reshape((-1,) + self.input_shape), train=False)
        return np.clip(out, -1.0, 1.0).astype(np.float64).reshape(batch.shape)


def build_projector(input_shape=(28, 28, 1), arch=None, seed=0) -> Projector:
    """Convolutional autoencoder: strided conv_ve stages, a channel-wise fully
    connected layer, a small conv to the latent code, and a mirrored stack of
    deconvolutions ending in a linear output layer."""
    arch = {**DEFAULT_PROJECTOR, **(arch or {})}
    channels, strides = tuple(arch["channels"]), tuple(arch["strides"])
    if len(channels) != len(strides) or not channels:
        raise ParameterError("channels and strides must be non-empty and of equal length")
    h, w, c = input_shape
    total = int(np.prod(strides))
    if h % total or w % total:
        raise ParameterError(f"input {h}x{w} not divisible by total stride {total}")
    rng = RngStream(seed)
    k = arch["window"]
    enc, c_prev = [], c
    shape = (h, w, c)
    for ch, s in zip(channels, strides):
        enc += conv_ve(k, c_prev, ch, s, rng)
        c_prev = ch
        shape = (shape[0] // s, shape[1] // s, ch)
    enc.append(ChannelwiseDense(shape[0], shape[1], shape[2], rng))
    enc += conv_ve(arch["latent_window"], c_prev, arch["latent_channels"], 1, rng)
    encoder = Network(enc, input_shape)
    latent_shape = encoder.output_shape(tuple(input_shape))

    dec, c_prev = [], arch["latent_channels"]
    outs = list(reversed(channels[:-1])) + [None]
    for ch, s in zip(outs, reversed(strides)):
        if ch is None:
            dec.append(Deconv(k, c_prev, c, s, rng))  # linear output
        else:
            dec += dconv_ve(k, c_prev, ch, s, rng)
            c_prev = ch
    decoder = Network(dec, latent_shape)
    return Projector(encoder, decoder)


DEFAULT_CLASSIFIER = {"stem_channels": 16, "blocks": ("half", "same", "half"), "stem_window": 4}
DEFAULT_LATENT_CLASSIFIER = {"stem_channels": 0, "blocks": ("same", "quarter", "same")}


def build_classifier(input_shape, arch=None, seed=0, c_clip=0.05) -> Network:
    """Residual classifier with ELU activations ending in a single logit."""
    arch = {**DEFAULT_CLASSIFIER, **(arch or {})}
    if c_clip is not None and c_clip <= 0:
        raise ParameterError("c_clip must be positive")
    rng = RngStream(seed)
    layers = []
    shape = tuple(input_shape)
    if arch.get("stem_channels"):
        layers.append(Conv(arch.get("stem_window", 4), shape[2], arch["stem_channels"], 1, rng))
        shape = (shape[0], shape[1], arch["stem_channels"])
    for mode in arch["blocks"]:
        block = bottleneck(shape[2], mode, rng)
        layers.append(block)
        shape = block.output_shape(shape)
    layers += [RefNorm(shape[2]), ELU(), Dense(int(np.prod(shape)), 1, rng)]
    net = Network(layers, input_shape, c_clip=c_clip)
    if c_clip is not None:
        clip_weights(net, c_clip)
    return net


# ---------------------------------------------------------------- training utils

def clip_weights(model, c_clip: float) -> None:
    if c_clip <= 0:
        raise ParameterError("c_clip must be positive")
    for _, layer, name in model.parameters():
        np.clip(layer.params[name], -c_clip, c_clip, out=layer.params[name])


class Adam:
    """Adam with bias correction; state is keyed by parameter position."""

    def __init__(self, lr=1e-4, beta1=0.5, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = None
        self.v = None

    def step(self, params, grads):
        if self.m is None:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        if len(grads) != len(params):
            raise DimensionError("gradient list does not match parameter list")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        corr1 = 1 - b1 ** self.t
        corr2 = 1 - b2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p -= self.lr * (m / corr1) / (np.sqrt(v / corr2) + self.eps)


def adam_step(model, grads, optimizer: Adam) -> None:
    params = [layer.params[name] for _, layer, name in model.parameters()]
    optimizer.step(params, grads)


# ---------------------------------------------------------------- gradient checks

def gradient_check(module, x, step=1e-5, max_entries=12, seed=0):
    """Compare backprop against central finite differences.

    Uses the scalar loss ``sum(G * module(x))`` for a random G and checks up
    to `max_entries` randomly chosen entries of every parameter and of the
    input. Returns the worst norm-wise relative error.
    """
    rng = RngStream(seed)
    x = as_tensor(x).copy()
    out = module.forward(x, train=True)
    G = rng.gaussian(out.shape)

    def loss(inp):
        return float(np.sum(G * module.forward(inp, train=False)))

    module.zero_grad()
    module.forward(x, train=True)
    gx = module.backward(G)
    pairs = [(x, gx, None)]
    for _, layer, name in module.parameters():
        pairs.append((layer.params[name], layer.grads[name].copy(), (layer, name)))

    worst = 0.0
    for arr, analytic, owner in pairs:
        flat = arr.reshape(-1)
        picks = rng.permutation(flat.size)[:max_entries]
        num = np.empty(picks.size)
        for i, idx in enumerate(picks):
            orig = flat[idx]
            flat[idx] = orig + step
            fp = loss(x)
            flat[idx] = orig - step
            fm = loss(x)
            flat[idx] = orig
            num[i] = (fp - fm) / (2 * step)
        ana = analytic.reshape(-1)[picks]
        scale = max(np.linalg.norm(num), np.linalg.norm(ana), 1e-12)
        worst = max(worst, float(np.linalg.norm(num - ana) / scale))
    return worst


# ---------------------------------------------------------------- model files

MAGIC = b"PRXA"
FORMAT_VERSION = 1
_KIND_BY_CODE = {1: Conv, 2: Deconv, 3: Dense, 4: ChannelwiseDense, 5: ELU, 6: RefNorm}
ROLE_PROJECTOR, ROLE_CLASSIFIER = 1, 2


def _write_layers(buf, layers):
    buf.write(struct.pack("<I", len(layers)))
    for layer in layers:
        geom = layer.geometry()
        buf.write(struct.pack("<BB", layer.code, len(geom)))
        buf.write(struct.pack(f"<{len(geom)}i", *geom))
        if isinstance(layer, Residual):
            _write_layers(buf, layer.branch.layers)
            if layer.shortcut is not None:
                _write_layers(buf, layer.shortcut.layers)


def _read_exact(buf, n):
    pos = buf.tell()
    data = buf.read(n)
    if len(data) != n:
        raise FormatError(f"truncated model file at byte {pos}")
    return data


def _read_layers(buf):
    (count,) = struct.unpack("<I", _read_exact(buf, 4))
    layers = []
    for _ in range(count):
        pos = buf.tell()
        code, ng = struct.unpack("<BB", _read_exact(buf, 2))
        geom = struct.unpack(f"<{ng}i", _read_exact(buf, 4 * ng))
        if code == Residual.code:
            branch = _read_layers(buf)
            shortcut = _read_layers(buf) if geom[1] else None
            layers.append(Residual(branch, shortcut))
        elif code == ELU.code:
            layers.append(ELU())
        elif code in _KIND_BY_CODE:
            layers.append(_KIND_BY_CODE[code](*geom))
        else:
            raise FormatError(f"unknown layer code {code} at byte {pos}")
    return layers


def _write_network(buf, net: Network):
    buf.write(struct.pack("<3I", *net.input_shape))
    buf.write(struct.pack("<f", 0.0 if net.c_clip is None else net.c_clip))
    _write_layers(buf, net.layers)


def _read_network(buf) -> Network:
    shape = struct.unpack("<3I", _read_exact(buf, 12))
    (c_clip,) = struct.unpack("<f", _read_exact(buf, 4))
    layers = _read_layers(buf)
    return Network(layers, shape, c_clip=float(c_clip) or None)


def _write_arrays(buf, arrays):
    for arr in arrays:
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.asarray(arr, dtype="<f4").tobytes())


def _read_into(buf, target):
    pos = buf.tell()
    (ndim,) = struct.unpack("<B", _read_exact(buf, 1))
    shape = struct.unpack(f"<{ndim}I", _read_exact(buf, 4 * ndim))
    if tuple(shape) != target.shape:
        raise FormatError(f"tensor at byte {pos} has shape {shape}, expected {target.shape}")
    data = np.frombuffer(_read_exact(buf, 4 * target.size), dtype="<f4")
    target[...] = data.reshape(shape).astype(np.float64)


def save_model(model, path_or_buf) -> None:
    """Write a projector or a classifier in the PRXA format.

    Layout (little-endian): magic, u16 version, u8 role, network headers and
    layer tables, then every parameter tensor as f32, then the mean and
    variance of every norm layer as f32.
    """
    nets = model.networks() if isinstance(model, Projector) else [model]
    role = ROLE_PROJECTOR if isinstance(model, Projector) else ROLE_CLASSIFIER
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<HB", FORMAT_VERSION, role))
    for net in nets:
        _write_network(buf, net)
    for net in nets:
        _write_arrays(buf, net.param_arrays())
    for net in nets:
        for norm in net.norm_layers():
            _write_arrays(buf, [norm.mean, norm.var])
    data = buf.getvalue()
    if hasattr(path_or_buf, "write"):
        path_or_buf.write(data)
    else:
        with open(path_or_buf, "wb") as fh:
            fh.write(data)


def load_model(path_or_buf):
    if hasattr(path_or_buf, "read"):
        raw = path_or_buf.read()
    else:
        with open(path_or_buf, "rb") as fh:
            raw = fh.read()
    buf = io.BytesIO(raw)
    if _read_exact(buf, 4) != MAGIC:
        raise FormatError("bad magic at byte 0: not a PRXA model file")
    version, role = struct.unpack("<HB", _read_exact(buf, 3))
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version} at byte 4")
    if role not in (ROLE_PROJECTOR, ROLE_CLASSIFIER):
        raise FormatError(f"unknown model role {role} at byte 6")
    nets = [_read_network(buf) for _ in range(2 if role == ROLE_PROJECTOR else 1)]
    for net in nets:
        for arr in net.param_arrays():
            _read_into(buf, arr)
    for net in nets:
        for norm in net.norm_layers():
            _read_into(buf, norm.mean)
            _read_into(buf, norm.var)
    if buf.read(1):
        raise FormatError(f"trailing bytes after offset {buf.tell() - 1}")
    for net in nets:
        net.zero_grad()
    if role == ROLE_PROJECTOR:
        proj = Projector(*nets)
        proj.trained = True
        return proj
    return nets[0]
