"""Training objective, semi-supervised objective and predictive bound.

Mini-batch estimates use the unbiased weighting: per-datum terms are scaled
by N/|B| and the global KL terms enter once per batch, so the expectation over
batches equals the full-data bound.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nets
from .expfam import trigamma
from .prior import (
    LOG_VAR_CLIP,
    EncoderOutput,
    Responsibilities,
    global_kl,
    kl_r,
    kl_z,
    log_scores,
    softmax,
)


@dataclass(frozen=True)
class ElboBreakdown:
    """Mini-batch bound and its parts.

    ``recon``, ``kl_z`` and ``kl_r`` are already scaled by N/|B|; the global
    terms are unscaled. ``total = recon - beta_kl*kl_z - kl_r - (kl_global_ng +
    kl_global_dir)``.
    """

    recon: float
    kl_z: float
    kl_r: float
    kl_global_ng: float
    kl_global_dir: float
    total: float
    beta_kl: float = 1.0

    @property
    def kl_global(self):
        return self.kl_global_ng + self.kl_global_dir

    def recomputed_total(self):
        return self.recon - self.beta_kl * self.kl_z - self.kl_r - self.kl_global


@dataclass(frozen=True)
class SemiSupConfig:
    """Classification weight ``delta`` and the KL up-weighting schedule.

    ``beta_kl`` decays linearly to ``beta_kl_end`` over ``beta_kl_decay_steps``
    joint iterations; with no decay steps it stays constant.
    """

    delta: float = 1000.0
    beta_kl: float = 1.0
    beta_kl_end: float | None = None
    beta_kl_decay_steps: int = 0

    def __post_init__(self):
        if not self.delta >= 0:
            raise ValueError("delta must be nonnegative")
        if not self.beta_kl > 0:
            raise ValueError("beta_kl must be positive")
        if self.beta_kl_end is not None and not self.beta_kl_end > 0:
            raise ValueError("beta_kl_end must be positive")
        if self.beta_kl_decay_steps < 0:
            raise ValueError("beta_kl_decay_steps must be nonnegative")

    def beta_at(self, step):
        if self.beta_kl_end is None or self.beta_kl_decay_steps == 0:
            return self.beta_kl
        frac = min(1.0, step / self.beta_kl_decay_steps)
        return self.beta_kl + frac * (self.beta_kl_end - self.beta_kl)


@dataclass
class Gradients:
    encoder: np.ndarray
    decoder: np.ndarray


@dataclass
class BlockGradient:
    """Gradient of the objective w.r.t. one block's factors in log-mean coordinates."""

    m: np.ndarray
    log_s: np.ndarray
    log_a: np.ndarray
    log_b: np.ndarray
    log_c: np.ndarray


@dataclass
class ObjectiveResult:
    breakdown: ElboBreakdown
    semi_sup: float
    value: float
    grads: Gradients
    resp: Responsibilities
    enc: EncoderOutput
    lambda_grads: dict


def _labeled(labels, i):
    if labels is None or labels[i] is None:
        return None
    mask, y = labels[i]
    return np.asarray(mask, dtype=bool), np.asarray(y, dtype=np.float64)


def check_labels(labels, Ks, batch):
    if labels is None:
        return
    if len(labels) != len(Ks):
        raise ValueError(f"labels cover {len(labels)} blocks, model has {len(Ks)}")
    for i, lab in enumerate(labels):
        if lab is None:
            continue
        mask, y = lab
        if np.shape(mask) != (batch,) or np.shape(y) != (batch, Ks[i]):
            raise ValueError(f"label arrays for block {i + 1} have the wrong shape")
        rows = np.asarray(y)[np.asarray(mask, dtype=bool)]
        if rows.size and not (np.all((rows == 0) | (rows == 1)) and np.all(rows.sum(axis=1) == 1)):
            raise ValueError(f"labels for block {i + 1} are not one-hot")


def clamp_resp(gammas, labels):
    out = []
    for i, g in enumerate(gammas):
        lab = _labeled(labels, i)
        out.append(g if lab is None else np.where(lab[0][:, None], lab[1], g))
    return Responsibilities(tuple(out))


def objective(x, model: nets.Model, state, eps, n_total, labels=None, delta=0.0,
              beta_kl=1.0, lambda_blocks=(), resp=None):
    """Evaluate the (semi-supervised) bound on a batch and its gradients.

    Responsibilities are computed at their closed-form optimum (clamped to
    labels where given) and held fixed for the gradient; passing ``resp``
    substitutes given values instead. ``lambda_blocks`` lists blocks whose
    factor gradients are also returned.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    B = x.shape[0]
    D, I = model.D, model.I
    if state.D != D or state.I != I:
        raise ValueError("prior state does not match the model's block layout")
    eps = np.asarray(eps, dtype=np.float64).reshape(B, D * I)
    check_labels(labels, state.Ks, B)
    scale = n_total / B

    enc_out, enc_cache = model.encoder.forward(x)
    enc = EncoderOutput(enc_out[:, :D * I], enc_out[:, D * I:])
    lv = np.clip(enc.log_var, -LOG_VAR_CLIP, LOG_VAR_CLIP)
    lv_live = (enc.log_var > -LOG_VAR_CLIP) & (enc.log_var < LOG_VAR_CLIP)
    var = np.exp(lv)

    scores = log_scores(enc, state)
    gammas = [softmax(s) for s in scores]
    if resp is None:
        resp = clamp_resp(gammas, labels)

    z = nets.reparam_sample(enc, eps)
    dec_out, dec_cache = model.decoder.forward(z)
    recon = nets.log_lik(model.likelihood, x, dec_out)
    d_dec = scale * nets.log_lik_grad(model.likelihood, x, dec_out)
    dec_grad, dz = model.decoder.backward(d_dec, dec_cache)
    d_mu, d_lv = nets.reparam_backward(enc, eps, dz)
    d_mu = d_mu.copy()
    d_lv = d_lv.copy()

    klz = np.zeros(B)
    klr = np.zeros(B)
    semi = 0.0
    lambda_grads = {}
    for i in range(I):
        sl = slice(i * D, (i + 1) * D)
        comp = state.components[i]
        e_alpha = comp.a / comp.b
        klz += kl_z(enc, resp, state, i)
        klr += kl_r(resp, state, i)
        g = resp[i]
        diff = enc.mu[:, None, sl] - comp.m            # (B, K, D)
        # d ELG_k / d mu and d ELG_k / d var
        dE_dmu = -e_alpha * diff
        dE_dvar = -0.5 * e_alpha
        # -beta * kl_z: gamma-weighted ELG plus the encoder entropy
        w = beta_kl * g
        d_mu[:, sl] += scale * (w[:, :, None] * dE_dmu).sum(axis=1)
        d_lv[:, sl] += scale * np.where(
            lv_live[:, sl],
            (w[:, :, None] * dE_dvar).sum(axis=1) * var[:, sl] + 0.5 * beta_kl,
            0.0,
        )
        lab = _labeled(labels, i)
        cls_w = np.zeros_like(g)
        if lab is not None and delta > 0:
            mask, y = lab
            log_g = scores[i] - _logsumexp(scores[i])
            semi += scale * delta * float((y[mask] * log_g[mask]).sum())
            cls_w = scale * delta * np.where(mask[:, None], y - gammas[i], 0.0)
            d_mu[:, sl] += (cls_w[:, :, None] * dE_dmu).sum(axis=1)
            d_lv[:, sl] += np.where(lv_live[:, sl],
                                    (cls_w[:, :, None] * dE_dvar).sum(axis=1) * var[:, sl], 0.0)
        if i in lambda_blocks:
            lambda_grads[i] = _block_lambda_grad(state, i, enc.mu[:, sl], var[:, sl],
                                                 scale * beta_kl * g + cls_w,
                                                 scale * g + cls_w)

    enc_grad, _ = model.encoder.backward(np.concatenate([d_mu, d_lv], axis=1), enc_cache)
    ng, dr = global_kl(state)
    breakdown = ElboBreakdown(
        recon=scale * float(recon.sum()),
        kl_z=scale * float(klz.sum()),
        kl_r=scale * float(klr.sum()),
        kl_global_ng=ng,
        kl_global_dir=dr,
        total=0.0,
        beta_kl=beta_kl,
    )
    breakdown = ElboBreakdown(**{**breakdown.__dict__, "total": breakdown.recomputed_total()})
    return ObjectiveResult(breakdown, semi, breakdown.total + semi,
                           Gradients(enc_grad, dec_grad), resp, enc, lambda_grads)


def _logsumexp(s):
    top = s.max(axis=-1, keepdims=True)
    return top + np.log(np.exp(s - top).sum(axis=-1, keepdims=True))


def _block_lambda_grad(state, i, mu, var, w_gauss, w_pi):
    """Gradient of the objective w.r.t. block ``i``'s factors.

    ``w_gauss[n, k]`` multiplies E[log N] for datum n and component k in the
    objective and ``w_pi[n, k]`` multiplies E[log pi_k]; both already include
    the batch scaling and any classification weights.
    """
    comp = state.components[i]
    h = state.hyper
    m, s, a, b = comp.m, comp.s, comp.a, comp.b
    diff = mu[:, None, :] - m                                   # (B, K, D)
    quad = diff**2 + var[:, None, :]
    W = w_gauss[:, :, None]
    tri_a = trigamma(a)
    g_m = (W * (a / b) * diff).sum(axis=0)
    g_s = W.sum(axis=0) * 0.5 / s**2
    g_a = 0.5 * (W * (tri_a - quad / b)).sum(axis=0)
    g_b = 0.5 * (W * (-1.0 / b + a * quad / b**2)).sum(axis=0)
    # minus d KL(q || hyperprior)
    dm0 = m - h.m
    g_m -= h.s * (a / b) * dm0
    g_s -= 0.5 * (-h.s / s**2 + 1.0 / s)
    g_a -= 0.5 * h.s * dm0**2 / b + (a - h.a) * tri_a - (b - h.b) / b
    g_b -= -0.5 * h.s * a * dm0**2 / b**2 + h.a / b - a * h.b / b**2

    c = state.mixings[i].c
    C = c.sum()
    V = w_pi.sum(axis=0)
    tri_c = trigamma(c)
    tri_C = trigamma(C)
    g_c = V * tri_c - tri_C * V.sum()
    g_c -= (c - state.c0) * tri_c - (C - state.c0 * c.size) * tri_C
    return BlockGradient(g_m, s * g_s, a * g_a, b * g_b, c * g_c)


def prior_gradients(enc: EncoderOutput, resp: Responsibilities, state, n_total, labels=None,
                    delta=0.0, beta_kl=1.0, blocks=()):
    """Objective gradients w.r.t. the listed blocks' factors, decoder-free.

    Matches the ``lambda_grads`` returned by :func:`objective` for the same
    encodings and responsibilities.
    """
    mu = np.atleast_2d(enc.mu)
    var = np.atleast_2d(enc.var)
    B = mu.shape[0]
    scale = n_total / B
    D = state.D
    scores = log_scores(EncoderOutput(mu, np.atleast_2d(enc.log_var)), state)
    out = {}
    for i in blocks:
        sl = slice(i * D, (i + 1) * D)
        g = np.atleast_2d(resp[i])
        cls_w = np.zeros_like(g)
        lab = _labeled(labels, i)
        if lab is not None and delta > 0:
            mask, y = lab
            cls_w = scale * delta * np.where(mask[:, None], y - softmax(scores[i]), 0.0)
        out[i] = _block_lambda_grad(state, i, mu[:, sl], var[:, sl], scale * beta_kl * g + cls_w,
                                    scale * g + cls_w)
    return out


def train_elbo(x, model, state, eps, n_total, labels=None, beta_kl=1.0):
    """Mini-batch bound and gradients (for ascent) w.r.t. encoder and decoder."""
    res = objective(x, model, state, eps, n_total, labels=labels, delta=0.0, beta_kl=beta_kl)
    return res.breakdown, res.grads


def semi_sup_objective(x, model, state, eps, n_total, labels, delta, beta_kl=1.0):
    """Bound plus delta-weighted log-probability of observed labels."""
    res = objective(x, model, state, eps, n_total, labels=labels, delta=delta, beta_kl=beta_kl)
    return res.value, res.grads


@dataclass
class PredictiveBound:
    """Per-datum predictive bound and its decomposition (sums over blocks)."""

    recon: np.ndarray
    kl_z: np.ndarray
    kl_r: np.ndarray
    bound: np.ndarray
    resp: Responsibilities


def test_elbo(x, model, state, n_samples=1, rng=None, eps=None):
    """Predictive lower bound with q(r) set to its optimum and q(xi) held fixed.

    ``eps`` may be given explicitly with shape (n_samples, B, D*I).
    """
    if n_samples < 1:
        raise ValueError("n_samples must be at least 1")
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    B = x.shape[0]
    DI = model.D * model.I
    enc, _ = nets.encode(x, model.encoder)
    if eps is None:
        eps = rng.standard_normal((n_samples, B, DI))
    eps = np.asarray(eps, dtype=np.float64).reshape(n_samples, B, DI)
    recon = np.zeros(B)
    for e in eps:
        out = model.decoder(nets.reparam_sample(enc, e))
        recon += nets.log_lik(model.likelihood, x, out)
    recon /= n_samples
    gammas = [softmax(s) for s in log_scores(enc, state)]
    resp = Responsibilities(tuple(gammas))
    klz = sum(kl_z(enc, resp, state, i) for i in range(state.I))
    klr = sum(kl_r(resp, state, i) for i in range(state.I))
    return PredictiveBound(recon, klz, klr, recon - klz - klr, resp)


# pytest would otherwise try to collect the function above
test_elbo.__test__ = False


def vanilla_kl(enc: EncoderOutput):
    """KL(q(z|x) || N(0, I)) per datum."""
    lv = np.clip(enc.log_var, -LOG_VAR_CLIP, LOG_VAR_CLIP)
    return 0.5 * (enc.mu**2 + np.exp(lv) - lv - 1.0).sum(axis=-1)


def vanilla_objective(x, model, eps, n_total, kl_weight=1.0):
    """Standard-normal-prior bound (with a KL weight) used for pretraining."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    B = x.shape[0]
    DI = model.D * model.I
    scale = n_total / B
    enc_out, enc_cache = model.encoder.forward(x)
    enc = EncoderOutput(enc_out[:, :DI], enc_out[:, DI:])
    eps = np.asarray(eps, dtype=np.float64).reshape(B, DI)
    z = nets.reparam_sample(enc, eps)
    dec_out, dec_cache = model.decoder.forward(z)
    recon = nets.log_lik(model.likelihood, x, dec_out)
    dec_grad, dz = model.decoder.backward(scale * nets.log_lik_grad(model.likelihood, x, dec_out),
                                          dec_cache)
    d_mu, d_lv = nets.reparam_backward(enc, eps, dz)
    live = (enc.log_var > -LOG_VAR_CLIP) & (enc.log_var < LOG_VAR_CLIP)
    var = np.exp(np.clip(enc.log_var, -LOG_VAR_CLIP, LOG_VAR_CLIP))
    d_mu = d_mu - scale * kl_weight * enc.mu
    d_lv = d_lv - scale * kl_weight * np.where(live, 0.5 * (var - 1.0), 0.0)
    enc_grad, _ = model.encoder.backward(np.concatenate([d_mu, d_lv], axis=1), enc_cache)
    kl = vanilla_kl(enc)
    recon_s = scale * float(recon.sum())
    kl_s = scale * float(kl.sum())
    return (recon_s, kl_s, recon_s - kl_weight * kl_s), Gradients(enc_grad, dec_grad)
