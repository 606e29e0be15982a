"""Factorial mixture prior: state, E-step, natural-gradient M-step, KL terms, sampling.

Blocks and components are 0-based internally. Encoder outputs are arrays of
shape (B, D*I) (or (D*I,) for a single datum); block ``i`` occupies columns
``i*D:(i+1)*D``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .expfam import (
    LOG_2PI,
    Dirichlet,
    DomainError,
    NaturalNG,
    NormalGamma,
    digamma,
    dirichlet_elog_pi,
    dirichlet_kl,
    mean_to_natural,
    natural_to_mean,
    ng_kl,
)

LOG_VAR_CLIP = 30.0
STATE_CODEC_VERSION = 1


@dataclass(frozen=True)
class EncoderOutput:
    """Diagonal Gaussian q(z|x): means and unconstrained log-variances."""

    mu: np.ndarray
    log_var: np.ndarray

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=np.float64)
        log_var = np.asarray(self.log_var, dtype=np.float64)
        if mu.shape != log_var.shape:
            raise ValueError(f"mu {mu.shape} and log_var {log_var.shape} differ in shape")
        if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(log_var))):
            raise FloatingPointError("encoder output contains non-finite values")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "log_var", log_var)

    @property
    def var(self):
        return np.exp(np.clip(self.log_var, -LOG_VAR_CLIP, LOG_VAR_CLIP))

    def block(self, i, D):
        sl = slice(i * D, (i + 1) * D)
        return self.mu[..., sl], self.var[..., sl]


@dataclass(frozen=True)
class Responsibilities:
    """Per-block soft assignments; ``gamma[i]`` has shape (B, K_i) or (K_i,)."""

    gamma: tuple

    def __post_init__(self):
        gamma = tuple(np.asarray(g, dtype=np.float64) for g in self.gamma)
        for g in gamma:
            if np.any(g < 0) or not np.allclose(g.sum(axis=-1), 1.0, rtol=0, atol=1e-9):
                raise ValueError("responsibilities must be nonnegative and sum to one")
        object.__setattr__(self, "gamma", gamma)

    def __getitem__(self, i):
        return self.gamma[i]


@dataclass(frozen=True)
class LatentCode:
    """Product-quantized code: one 0-based component index per block."""

    k: tuple

    def one_hot(self, Ks):
        return [np.eye(K)[k] for K, k in zip(Ks, self.k)]


@dataclass(frozen=True, eq=False)
class FactorialPriorState:
    """All posterior factors q(xi) plus the shared hyperprior.

    ``components[i]`` is a NormalGamma stack of shape (K_i, D); ``mixings[i]``
    is a Dirichlet over K_i; ``hyper`` has shape (D,).
    """

    D: int
    components: tuple
    mixings: tuple
    hyper: NormalGamma
    c0: float

    def __post_init__(self):
        components = tuple(self.components)
        mixings = tuple(self.mixings)
        if len(components) != len(mixings) or not components:
            raise ValueError("need one Dirichlet per block and at least one block")
        for comp, mix in zip(components, mixings):
            if comp.shape != (mix.K, self.D):
                raise ValueError(f"component stack {comp.shape} does not match ({mix.K}, {self.D})")
        if self.hyper.shape != (self.D,):
            raise ValueError("hyperprior must have shape (D,)")
        if not self.c0 > 0:
            raise DomainError("c0 must be positive")
        object.__setattr__(self, "components", components)
        object.__setattr__(self, "mixings", mixings)

    @property
    def I(self):
        return len(self.components)

    @property
    def Ks(self):
        return tuple(mix.K for mix in self.mixings)

    @property
    def latent_dim(self):
        return self.D * self.I

    def replace_block(self, i, component=None, mixing=None):
        components = list(self.components)
        mixings = list(self.mixings)
        if component is not None:
            components[i] = component
        if mixing is not None:
            mixings[i] = mixing
        return FactorialPriorState(self.D, components, mixings, self.hyper, self.c0)

    def __eq__(self, other):
        if not isinstance(other, FactorialPriorState):
            return NotImplemented
        return (
            self.D == other.D
            and self.c0 == other.c0
            and self.hyper == other.hyper
            and len(self.components) == len(other.components)
            and all(a == b for a, b in zip(self.components, other.components))
            and all(a == b for a, b in zip(self.mixings, other.mixings))
        )

    __hash__ = None


def default_hyper(D, m0=0.0, s0=1.0, a0=0.01, b0=0.01):
    return NormalGamma(np.full(D, m0), np.full(D, s0), np.full(D, a0), np.full(D, b0))


def init_state(D, Ks, rng, hyper=None, c0=1.0, jitter=0.5):
    """Hyperprior-valued factors with component means jittered around m0.

    Identical components never separate under exact updates, hence the jitter.
    """
    hyper = default_hyper(D) if hyper is None else hyper
    components = []
    mixings = []
    for K in Ks:
        m = hyper.m + jitter * rng.standard_normal((K, D))
        components.append(
            NormalGamma(m, np.broadcast_to(hyper.s, (K, D)), np.broadcast_to(hyper.a, (K, D)),
                        np.broadcast_to(hyper.b, (K, D)))
        )
        mixings.append(Dirichlet(np.full(K, float(c0))))
    return FactorialPriorState(D, components, mixings, hyper, float(c0))


def _check_block(state, i, k=None):
    if not 0 <= i < state.I:
        raise IndexError(f"block {i} out of range for I={state.I}")
    if k is not None and not 0 <= k < state.Ks[i]:
        raise IndexError(f"component {k} out of range for K_{i}={state.Ks[i]}")


def _check_enc(enc, state):
    if enc.mu.shape[-1] != state.latent_dim:
        raise ValueError(f"encoder width {enc.mu.shape[-1]} != D*I = {state.latent_dim}")


def expected_log_gauss_block(mu, var, comp: NormalGamma):
    """E[log N(z_i; mu_ik, alpha_ik^-1)] for every component of one block.

    ``mu`` and ``var`` have shape (..., D); result has shape (..., K).
    """
    e_log_alpha = digamma(comp.a) - np.log(comp.b)
    e_alpha = comp.a / comp.b
    const = (e_log_alpha - LOG_2PI - 1.0 / comp.s).sum(axis=-1)
    diff = mu[..., None, :] - comp.m
    quad = (e_alpha * (diff**2 + var[..., None, :])).sum(axis=-1)
    return 0.5 * (const - quad)


def expected_log_gauss(enc: EncoderOutput, i, k, state: FactorialPriorState):
    _check_block(state, i, k)
    _check_enc(enc, state)
    mu, var = enc.block(i, state.D)
    return expected_log_gauss_block(mu, var, state.components[i])[..., k]


def log_scores(enc: EncoderOutput, state: FactorialPriorState):
    """Unnormalized log-responsibilities per block, each of shape (..., K_i)."""
    _check_enc(enc, state)
    out = []
    for i in range(state.I):
        mu, var = enc.block(i, state.D)
        out.append(expected_log_gauss_block(mu, var, state.components[i])
                   + dirichlet_elog_pi(state.mixings[i]))
    return out


def softmax(scores):
    shifted = scores - scores.max(axis=-1, keepdims=True)
    w = np.exp(shifted)
    return w / w.sum(axis=-1, keepdims=True)


def responsibilities(enc: EncoderOutput, state: FactorialPriorState, clamp=None) -> Responsibilities:
    """Closed-form local optimum of q(r); ``clamp`` fixes labeled rows.

    ``clamp`` is an optional sequence (one entry per block) of ``None`` or a
    pair ``(mask, y)`` with boolean mask (B,) and one-hot rows y (B, K_i).
    """
    gammas = []
    for i, scores in enumerate(log_scores(enc, state)):
        g = softmax(scores)
        if clamp is not None and clamp[i] is not None:
            mask, y = clamp[i]
            g = np.where(np.asarray(mask)[..., None], y, g)
        gammas.append(g)
    return Responsibilities(tuple(gammas))


def kl_z(enc: EncoderOutput, resp: Responsibilities, state: FactorialPriorState, i):
    """Expected KL between q(z_i|x) and the mixture components, weighted by gamma."""
    _check_block(state, i)
    _check_enc(enc, state)
    D = state.D
    lv = np.clip(enc.log_var[..., i * D:(i + 1) * D], -LOG_VAR_CLIP, LOG_VAR_CLIP)
    mu, var = enc.block(i, D)
    elg = expected_log_gauss_block(mu, var, state.components[i])
    # -E[log q(z_i|x)] folded in: entropy of the diagonal Gaussian
    entropy = 0.5 * (lv + 1.0 + LOG_2PI).sum(axis=-1)
    value = -(resp[i] * elg).sum(axis=-1) - entropy
    return np.where((value < 0) & (value > -1e-10), 0.0, value)


def kl_r(resp: Responsibilities, state: FactorialPriorState, i):
    _check_block(state, i)
    g = resp[i]
    elog_pi = dirichlet_elog_pi(state.mixings[i])
    with np.errstate(divide="ignore", invalid="ignore"):
        glogg = np.where(g > 0, g * np.log(np.where(g > 0, g, 1.0)), 0.0)
    value = (glogg - g * elog_pi).sum(axis=-1)
    return np.where((value < 0) & (value > -1e-10), 0.0, value)


def global_kl(state: FactorialPriorState):
    """(Sum of Normal-Gamma KLs, sum of Dirichlet KLs) against the hyperprior."""
    ng = 0.0
    dr = 0.0
    for comp, mix in zip(state.components, state.mixings):
        ng += ng_kl(comp, state.hyper)
        dr += dirichlet_kl(mix, Dirichlet(np.full(mix.K, state.c0)))
    return ng, dr


def batch_statistics(enc: EncoderOutput, resp: Responsibilities, state, i, n_total):
    """Scaled soft counts, first and second moments for block ``i``."""
    mu, var = enc.block(i, state.D)
    mu = np.atleast_2d(mu)
    var = np.atleast_2d(var)
    g = np.atleast_2d(resp[i])
    scale = n_total / mu.shape[0]
    # elementwise products then axis-0 sums: fixed reduction order
    counts = scale * g.sum(axis=0)
    first = scale * (g[:, :, None] * mu[:, None, :]).sum(axis=0)
    second = scale * (g[:, :, None] * (mu**2 + var)[:, None, :]).sum(axis=0)
    return counts, first, second


def natural_step(state: FactorialPriorState, enc: EncoderOutput, resp: Responsibilities,
                 n_total, rho, blocks=None) -> FactorialPriorState:
    """SVI step: move natural parameters a fraction ``rho`` toward the batch optimum.

    Only the listed ``blocks`` are updated (all by default).
    """
    if not 0 < rho <= 1:
        raise ValueError(f"rho must lie in (0, 1], got {rho}")
    if np.atleast_2d(enc.mu).shape[0] == 0:
        raise ValueError("empty batch")
    _check_enc(enc, state)
    h = state.hyper
    blocks = range(state.I) if blocks is None else blocks
    for i in blocks:
        counts, first, second = batch_statistics(enc, resp, state, i, n_total)
        n = counts[:, None]
        target = NaturalNG(
            h.a + 0.5 * n - 0.5,
            -(h.b + 0.5 * h.s * h.m**2 + 0.5 * second),
            h.s * h.m + first,
            -0.5 * (h.s + n),
        )
        if rho == 1:
            lam = target
        else:
            cur = mean_to_natural(state.components[i])
            lam = NaturalNG(*((1 - rho) * getattr(cur, f) + rho * getattr(target, f)
                              for f in ("l1", "l2", "l3", "l4")))
        c = (1 - rho) * state.mixings[i].c + rho * (state.c0 + counts)
        state = state.replace_block(i, natural_to_mean(lam), Dirichlet(c))
    return state


def sample_code(state: FactorialPriorState, rng, clamp=None) -> LatentCode:
    """Draw pi_i from each Dirichlet, then k_i from Categorical(pi_i).

    ``clamp`` maps block index to a fixed component; those blocks still consume
    their random draws so the free blocks do not depend on what is clamped.
    """
    ks = []
    for i, mix in enumerate(state.mixings):
        pi = rng.dirichlet(mix.c)
        k = int(rng.choice(mix.K, p=pi))
        if clamp and i in clamp:
            k = int(clamp[i])
            _check_block(state, i, k)
        ks.append(k)
    return LatentCode(tuple(ks))


def sample_block(state: FactorialPriorState, i, k, rng, size=None):
    """Posterior-predictive Student-t draw for block ``i`` under component ``k``.

    Sampled as the compound alpha ~ Gamma(a, b), z ~ N(m, (s+1)/(s alpha)),
    which marginalizes to T(m, (s+1)/s * b/a, 2a).
    """
    _check_block(state, i, k)
    comp = state.components[i][k]
    shape = comp.shape if size is None else (size,) + comp.shape
    alpha = rng.gamma(comp.a, 1.0 / comp.b, size=shape)
    scale = np.sqrt((comp.s + 1.0) / (comp.s * alpha))
    return comp.m + scale * rng.standard_normal(shape)


def sample_latent(state: FactorialPriorState, rng, clamp=None):
    code = sample_code(state, rng, clamp)
    z = np.concatenate([sample_block(state, i, k, rng) for i, k in enumerate(code.k)])
    return code, z


# -- checkpoint codec -------------------------------------------------------

def state_to_bytes(state: FactorialPriorState) -> bytes:
    """Little-endian: version u16, I u32, D u32, K_1..K_I u32, c0 f64, then f64 arrays."""
    parts = [struct.pack("<HII", STATE_CODEC_VERSION, state.I, state.D)]
    parts.append(struct.pack(f"<{state.I}I", *state.Ks))
    parts.append(struct.pack("<d", state.c0))
    h = state.hyper
    for arr in (h.m, h.s, h.a, h.b):
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    for comp, mix in zip(state.components, state.mixings):
        for arr in (comp.m, comp.s, comp.a, comp.b, mix.c):
            parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(parts)


def state_from_bytes(buf: bytes) -> FactorialPriorState:
    view = memoryview(buf)
    if len(view) < 10:
        raise ValueError("prior state section truncated")
    version, I, D = struct.unpack_from("<HII", view, 0)
    if version != STATE_CODEC_VERSION:
        raise ValueError(f"unsupported prior state version {version}")
    off = 10
    Ks = struct.unpack_from(f"<{I}I", view, off)
    off += 4 * I
    (c0,) = struct.unpack_from("<d", view, off)
    off += 8

    def take(n):
        nonlocal off
        if off + 8 * n > len(view):
            raise ValueError("prior state section truncated")
        arr = np.frombuffer(view, dtype="<f8", count=n, offset=off).astype(np.float64)
        off += 8 * n
        return arr

    hyper = NormalGamma(*(take(D) for _ in range(4)))
    components, mixings = [], []
    for K in Ks:
        m, s, a, b = (take(K * D).reshape(K, D) for _ in range(4))
        components.append(NormalGamma(m, s, a, b))
        mixings.append(Dirichlet(take(K)))
    if off != len(view):
        raise ValueError("trailing bytes after prior state section")
    return FactorialPriorState(D, components, mixings, hyper, c0)
