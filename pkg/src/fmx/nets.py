"""Small dense networks with hand-written reverse mode, plus likelihood heads.

Parameters live in one flat float64 vector so that optimizers, gradient
buffers and checkpoints can treat every network the same way. Layer ``j``
stores its weight matrix (n_out, n_in) row-major followed by its bias.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .prior import LOG_VAR_CLIP, EncoderOutput

ACTIVATIONS = ("identity", "tanh")
STD_MIN = 0.001
STD_MAX = 0.4
_HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)


@dataclass
class ForwardCache:
    inputs: list = field(default_factory=list)
    outputs: list = field(default_factory=list)


@dataclass
class Network:
    """Feed-forward stack of dense layers.

    Attributes
    ----------
    sizes : tuple of int
        Layer widths including input and output, e.g. ``(8, 32, 4)``.
    activations : tuple of str
        One of ``"identity"`` or ``"tanh"`` per layer (``len(sizes) - 1``).
    params : numpy.ndarray
        Flat parameter vector.
    """

    sizes: tuple
    activations: tuple
    params: np.ndarray

    def __post_init__(self):
        self.sizes = tuple(int(s) for s in self.sizes)
        self.activations = tuple(self.activations)
        if len(self.activations) != len(self.sizes) - 1:
            raise ValueError("need one activation per layer")
        for act in self.activations:
            if act not in ACTIVATIONS:
                raise ValueError(f"unknown activation {act!r}")
        self.params = np.asarray(self.params, dtype=np.float64)
        if self.params.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got {self.params.shape}")
        if not np.all(np.isfinite(self.params)):
            raise FloatingPointError("network parameters contain non-finite values")

    @property
    def n_params(self):
        return sum(o * i + o for i, o in zip(self.sizes[:-1], self.sizes[1:]))

    @property
    def n_in(self):
        return self.sizes[0]

    @property
    def n_out(self):
        return self.sizes[-1]

    def layers(self, params=None):
        """Yield (W, b, activation) views into ``params``."""
        params = self.params if params is None else params
        off = 0
        for n_in, n_out, act in zip(self.sizes[:-1], self.sizes[1:], self.activations):
            W = params[off:off + n_in * n_out].reshape(n_out, n_in)
            off += n_in * n_out
            b = params[off:off + n_out]
            off += n_out
            yield W, b, act

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.n_in:
            raise ValueError(f"input width {x.shape[-1]} != network input size {self.n_in}")
        cache = ForwardCache()
        h = np.atleast_2d(x)
        for W, b, act in self.layers():
            cache.inputs.append(h)
            h = h @ W.T + b
            if act == "tanh":
                h = np.tanh(h)
            cache.outputs.append(h)
        out = h if x.ndim > 1 else h[0]
        return out, cache

    def __call__(self, x):
        return self.forward(x)[0]

    def backward(self, adjoint, cache):
        """Gradient of <adjoint, output> w.r.t. parameters and input."""
        if cache is None or not cache.inputs:
            raise RuntimeError("backward needs the cache of a forward pass")
        delta = np.atleast_2d(np.asarray(adjoint, dtype=np.float64))
        grads = []
        layers = list(self.layers())
        for j in reversed(range(len(layers))):
            W, _, act = layers[j]
            if act == "tanh":
                delta = delta * (1.0 - cache.outputs[j] ** 2)
            grads.append((delta.T @ cache.inputs[j], delta.sum(axis=0)))
            delta = delta @ W
        flat = np.concatenate([np.concatenate([gW.ravel(), gb]) for gW, gb in reversed(grads)])
        d_input = delta if np.ndim(adjoint) > 1 else delta[0]
        return flat, d_input


def init_network(sizes, activations, rng):
    """Weights uniform in +-1/sqrt(fan_in), zero biases."""
    chunks = []
    for n_in, n_out in zip(sizes[:-1], sizes[1:]):
        bound = 1.0 / np.sqrt(n_in)
        chunks.append(rng.uniform(-bound, bound, size=n_in * n_out))
        chunks.append(np.zeros(n_out))
    return Network(tuple(sizes), tuple(activations), np.concatenate(chunks))


def build_network(n_in, n_out, hidden, rng):
    """Affine map when ``hidden`` is 0, else one tanh hidden layer."""
    if hidden:
        return init_network((n_in, hidden, n_out), ("tanh", "identity"), rng)
    return init_network((n_in, n_out), ("identity",), rng)


# -- encoder -----------------------------------------------------------------

def encode(x, phi: Network):
    out, cache = phi.forward(x)
    if phi.n_out % 2:
        raise ValueError("encoder output size must be even (means and log-variances)")
    half = phi.n_out // 2
    return EncoderOutput(out[..., :half], out[..., half:]), cache


def reparam_sample(enc: EncoderOutput, eps):
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != enc.mu.shape:
        raise ValueError(f"eps shape {eps.shape} != encoder shape {enc.mu.shape}")
    return enc.mu + np.exp(0.5 * np.clip(enc.log_var, -LOG_VAR_CLIP, LOG_VAR_CLIP)) * eps


def reparam_backward(enc: EncoderOutput, eps, dz):
    """Pull a z-adjoint back to (d mu, d log_var)."""
    lv = enc.log_var
    inside = (lv > -LOG_VAR_CLIP) & (lv < LOG_VAR_CLIP)
    d_lv = np.where(inside, dz * eps * 0.5 * np.exp(0.5 * np.clip(lv, -LOG_VAR_CLIP, LOG_VAR_CLIP)), 0.0)
    return dz, d_lv


# -- Bernoulli decoder -------------------------------------------------------

def decode_bernoulli(z, theta: Network):
    return theta.forward(z)


def log_lik_bernoulli(x, logits):
    """Per-datum sum of x log sigma(l) + (1 - x) log(1 - sigma(l))."""
    x = np.asarray(x, dtype=np.float64)
    if np.any((x != 0) & (x != 1)):
        raise ValueError("Bernoulli likelihood needs binary observations")
    return (x * logits - np.logaddexp(0.0, logits)).sum(axis=-1)


def log_lik_bernoulli_grad(x, logits):
    return x - _sigmoid(logits)


# -- Gaussian decoder --------------------------------------------------------

def _sigmoid(t):
    return np.where(t >= 0, 1.0 / (1.0 + np.exp(-np.abs(t))),
                    np.exp(-np.abs(t)) / (1.0 + np.exp(-np.abs(t))))


def gaussian_head(out):
    half = out.shape[-1] // 2
    mean = out[..., :half]
    std = STD_MIN + (STD_MAX - STD_MIN) * _sigmoid(out[..., half:])
    return mean, std


def decode_gaussian(z, theta: Network):
    """Return ((mean, std), cache); std is squashed into [0.001, 0.4]."""
    out, cache = theta.forward(z)
    if theta.n_out % 2:
        raise ValueError("Gaussian decoder output size must be even (mean and std)")
    return gaussian_head(out), cache


def log_lik_gaussian(x, mean, std):
    x = np.asarray(x, dtype=np.float64)
    if x.shape != np.shape(mean) or x.shape != np.shape(std):
        raise ValueError("x, mean and std must share a shape")
    r = (x - mean) / std
    return (-np.log(std) - _HALF_LOG_2PI - 0.5 * r * r).sum(axis=-1)


def log_lik_gaussian_grad(x, out):
    """Gradient of the Gaussian log-likelihood w.r.t. the raw decoder output."""
    half = out.shape[-1] // 2
    mean, std = gaussian_head(out)
    resid = x - mean
    d_mean = resid / std**2
    d_std = -1.0 / std + resid**2 / std**3
    sig = _sigmoid(out[..., half:])
    d_raw = d_std * (STD_MAX - STD_MIN) * sig * (1.0 - sig)
    return np.concatenate([d_mean, d_raw], axis=-1)


LIKELIHOODS = ("bernoulli", "gaussian")


def decoder_output_size(likelihood, n_pixels):
    return n_pixels if likelihood == "bernoulli" else 2 * n_pixels


def log_lik(likelihood, x, out):
    if likelihood == "bernoulli":
        return log_lik_bernoulli(x, out)
    if likelihood == "gaussian":
        return log_lik_gaussian(x, *gaussian_head(out))
    raise ValueError(f"unknown likelihood {likelihood!r}")


def log_lik_grad(likelihood, x, out):
    if likelihood == "bernoulli":
        return log_lik_bernoulli_grad(x, out)
    if likelihood == "gaussian":
        return log_lik_gaussian_grad(x, out)
    raise ValueError(f"unknown likelihood {likelihood!r}")


def decoded_mean(likelihood, out):
    """Pixel means: Bernoulli probabilities or Gaussian means."""
    if likelihood == "bernoulli":
        return _sigmoid(out)
    return gaussian_head(out)[0]


@dataclass
class Model:
    """Encoder q(z|x), decoder p(x|z) and the latent block layout."""

    encoder: Network
    decoder: Network
    likelihood: str
    D: int
    I: int

    def __post_init__(self):
        if self.likelihood not in LIKELIHOODS:
            raise ValueError(f"unknown likelihood {self.likelihood!r}")
        if self.encoder.n_out != 2 * self.D * self.I:
            raise ValueError("encoder must emit 2*D*I outputs")
        if self.decoder.n_in != self.D * self.I:
            raise ValueError("decoder input must be D*I wide")
        if self.decoder.n_out != decoder_output_size(self.likelihood, self.encoder.n_in):
            raise ValueError("decoder output does not match the data width")

    @property
    def n_pixels(self):
        return self.encoder.n_in


def build_model(n_pixels, D, I, likelihood, rng, enc_hidden=0, dec_hidden=0):
    enc = build_network(n_pixels, 2 * D * I, enc_hidden, rng)
    dec = build_network(D * I, decoder_output_size(likelihood, n_pixels), dec_hidden, rng)
    return Model(enc, dec, likelihood, D, I)


def finite_difference_check(f, params, grad, idx, h=1e-5):
    """Max relative error between ``grad[idx]`` and central differences of ``f``.

    ``f`` maps a full parameter vector to a scalar.
    """
    worst = 0.0
    for j in idx:
        p = params.copy()
        p[j] += h
        up = f(p)
        p[j] -= 2 * h
        down = f(p)
        fd = (up - down) / (2 * h)
        err = abs(fd - grad[j]) / max(abs(fd), abs(grad[j]), 1e-6)
        worst = max(worst, err)
    return worst
