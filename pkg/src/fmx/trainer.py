"""Training loop: pretraining, prior initialization and joint optimization.

Each joint iteration performs, on one mini-batch:

1. closed-form responsibilities (clamped where labels exist),
2. an Adam step on encoder and decoder with those responsibilities fixed,
3. re-encoding with the updated encoder, fresh responsibilities, then a
   natural-gradient step on the prior factors with a Robbins-Monro step size.

Random draws come from one counter-based generator per run so that a run
resumed from a checkpoint replays the same batches and noise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import elbo, nets, prior
from .expfam import Dirichlet, DomainError, NormalGamma

PHASES = ("pretrain", "prior_init", "joint")
METRIC_FIELDS = ("iter", "phase", "elbo", "recon", "kl_z", "kl_r", "kl_global", "rho", "semi_sup_loss")

STREAM_MODEL = 0
STREAM_PRIOR = 1
STREAM_TRAIN = 2


def make_rng(seed, stream):
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed), spawn_key=(stream,))))


@dataclass(frozen=True)
class Schedule:
    """Robbins-Monro step sizes rho = max(rho_floor, (tau0 + tau)^-kappa)."""

    kappa: float = 0.7
    tau0: float = 2000.0
    rho_floor: float = 0.0

    def __post_init__(self):
        if not 0.5 < self.kappa <= 1:
            raise ValueError(f"kappa must lie in (1/2, 1], got {self.kappa}")
        if not self.tau0 >= 0:
            raise ValueError("tau0 must be nonnegative")
        if not 0 <= self.rho_floor <= 1:
            raise ValueError("rho_floor must lie in [0, 1]")


def rho(schedule: Schedule, tau) -> float:
    t = schedule.tau0 + tau
    if t < 1:
        raise DomainError(f"tau0 + tau must be at least 1, got {t}")
    return min(1.0, max(schedule.rho_floor, t ** (-schedule.kappa)))


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n, **kwargs):
        return cls(np.zeros(n), np.zeros(n), **kwargs)


def adam_step(params, grads, state: AdamState):
    """One bias-corrected Adam descent step; updates ``state`` in place."""
    grads = np.asarray(grads, dtype=np.float64)
    if grads.shape != params.shape or state.m.shape != params.shape:
        raise ValueError(f"shape mismatch: params {params.shape}, grads {grads.shape}, "
                         f"state {state.m.shape}")
    state.step += 1
    state.m = state.beta1 * state.m + (1 - state.beta1) * grads
    state.v = state.beta2 * state.v + (1 - state.beta2) * grads * grads
    m_hat = state.m / (1 - state.beta1**state.step)
    v_hat = state.v / (1 - state.beta2**state.step)
    return params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


@dataclass(frozen=True)
class TrainConfig:
    """Phase lengths and optimizer settings.

    Defaults follow the published training setup where it exists (batch 64,
    learning rate 1e-4, kappa 0.7, tau0 2000, hyperprior m0=0, s0=1,
    a0=b0=0.01, c0=1); phase lengths are scaled down for small problems.
    """

    pretrain_iters: int = 0
    prior_init_iters: int = 2000
    joint_iters: int = 3000
    batch_size: int = 64
    seed: int = 0
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    schedule: Schedule = field(default_factory=Schedule)
    semi: elbo.SemiSupConfig = field(default_factory=elbo.SemiSupConfig)
    pretrain_anneal: bool = True
    init_jitter: float = 0.5
    m0: float = 0.0
    s0: float = 1.0
    a0: float = 0.01
    b0: float = 0.01
    c0: float = 1.0
    lambda_lr: float | None = None
    lambda_optimizer: str = "adam"
    freeze_prior: bool = False

    def __post_init__(self):
        for name in ("pretrain_iters", "prior_init_iters", "joint_iters"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not (self.s0 > 0 and self.a0 > 0 and self.b0 > 0 and self.c0 > 0):
            raise ValueError("hyperprior s0, a0, b0, c0 must be positive")
        if self.lambda_optimizer not in ("adam", "sgd"):
            raise ValueError("lambda_optimizer must be 'adam' or 'sgd'")

    @property
    def total_iters(self):
        return self.pretrain_iters + self.prior_init_iters + self.joint_iters

    def hyper(self, D):
        return prior.default_hyper(D, self.m0, self.s0, self.a0, self.b0)


def lambda_gradient_step(state, grads, lr):
    """Plain gradient ascent on block factors in (m, log s, log a, log b, log c)."""
    for i, g in grads.items():
        comp = state.components[i]
        new = NormalGamma(comp.m + lr * g.m, comp.s * np.exp(lr * g.log_s),
                          comp.a * np.exp(lr * g.log_a), comp.b * np.exp(lr * g.log_b))
        mix = Dirichlet(state.mixings[i].c * np.exp(lr * g.log_c))
        state = state.replace_block(i, new, mix)
    return state


def lambda_size(state, blocks):
    return sum(4 * state.Ks[i] * state.D + state.Ks[i] for i in blocks)


def lambda_vector(state, blocks):
    """Flatten the listed blocks' factors into (m, log s, log a, log b, log c) order."""
    parts = []
    for i in blocks:
        comp = state.components[i]
        parts += [comp.m.ravel(), np.log(comp.s).ravel(), np.log(comp.a).ravel(), np.log(comp.b).ravel(),
                  np.log(state.mixings[i].c)]
    return np.concatenate(parts) if parts else np.zeros(0)


def lambda_from_vector(state, blocks, vec):
    off = 0
    for i in blocks:
        K, D = state.Ks[i], state.D
        take = []
        for n in (K * D,) * 4 + (K,):
            take.append(vec[off:off + n])
            off += n
        m, ls, la, lb, lc = take
        comp = NormalGamma(m.reshape(K, D), np.exp(ls).reshape(K, D), np.exp(la).reshape(K, D),
                           np.exp(lb).reshape(K, D))
        state = state.replace_block(i, comp, Dirichlet(np.exp(lc)))
    return state


def grads_vector(grads, blocks):
    parts = []
    for i in blocks:
        g = grads[i]
        parts += [np.ravel(g.m), np.ravel(g.log_s), np.ravel(g.log_a), np.ravel(g.log_b), np.ravel(g.log_c)]
    return np.concatenate(parts) if parts else np.zeros(0)


class Trainer:
    """Owns the model, prior state, optimizer state and random stream of one run."""

    def __init__(self, model: nets.Model, state: prior.FactorialPriorState, x, config: TrainConfig,
                 labels=None, rng=None):
        self.model = model
        self.state = state
        self.x = np.asarray(x, dtype=np.float64)
        self.config = config
        self.labels = labels
        if config.batch_size > self.N:
            raise ValueError(f"batch size {config.batch_size} exceeds N={self.N}")
        if self.x.shape[1] != model.n_pixels:
            raise ValueError("data width does not match the model")
        if labels is not None and labels.entries and max(labels.entries) >= self.N:
            raise ValueError("label refers to a datum beyond the dataset")
        self.rng = make_rng(config.seed, STREAM_TRAIN) if rng is None else rng
        kw = dict(lr=config.learning_rate, beta1=config.beta1, beta2=config.beta2, eps=config.adam_eps)
        self.adam_enc = AdamState.zeros(model.encoder.n_params, **kw)
        self.adam_dec = AdamState.zeros(model.decoder.n_params, **kw)
        if config.lambda_lr is not None:
            kw["lr"] = config.lambda_lr
        self.adam_lam = AdamState.zeros(lambda_size(state, self.gradient_blocks), **kw)
        self.iteration = 0

    @classmethod
    def create(cls, x, config: TrainConfig, D, Ks, likelihood, labels=None, enc_hidden=0,
               dec_hidden=0):
        x = np.asarray(x, dtype=np.float64)
        model = nets.build_model(x.shape[1], D, len(Ks), likelihood, make_rng(config.seed, STREAM_MODEL),
                                 enc_hidden, dec_hidden)
        state = prior.init_state(D, Ks, make_rng(config.seed, STREAM_PRIOR), hyper=config.hyper(D),
                                 c0=config.c0, jitter=config.init_jitter)
        return cls(model, state, x, config, labels)

    @property
    def N(self):
        return self.x.shape[0]

    @property
    def phase(self):
        return self.phase_of(self.iteration)

    @property
    def done(self):
        return self.iteration >= self.config.total_iters

    def phase_of(self, it):
        c = self.config
        if it < c.pretrain_iters:
            return "pretrain"
        if it < c.pretrain_iters + c.prior_init_iters:
            return "prior_init"
        return "joint"

    @property
    def gradient_blocks(self):
        """Blocks whose factors feel the classification term when delta > 0."""
        if self.labels is None or self.config.semi.delta <= 0:
            return ()
        return tuple(self.labels.labeled_blocks)

    def _batch(self):
        idx = np.sort(self.rng.choice(self.N, size=self.config.batch_size, replace=False))
        eps = self.rng.standard_normal((len(idx), self.model.D * self.model.I))
        lab = self.labels.batch(idx) if self.labels is not None else None
        return idx, self.x[idx], eps, lab

    def _apply_adam(self, grads):
        # grads are for ascent; Adam descends
        self.model.encoder.params = adam_step(self.model.encoder.params, -grads.encoder, self.adam_enc)
        self.model.decoder.params = adam_step(self.model.decoder.params, -grads.decoder, self.adam_dec)

    def pretrain_step(self):
        T = self.config.pretrain_iters
        tau = self.iteration
        w = (tau / (T - 1) if T > 1 else 1.0) if self.config.pretrain_anneal else 1.0
        _, xb, eps, _ = self._batch()
        (recon, kl, total), grads = elbo.vanilla_objective(xb, self.model, eps, self.N, kl_weight=w)
        self._apply_adam(grads)
        # no natural step in this phase; rho is reported as 0
        return self._row("pretrain", recon - kl, recon, kl, 0.0, 0.0, 0.0, 0.0)

    def prior_init_step(self):
        tau = self.iteration - self.config.pretrain_iters + 1
        r = rho(self.config.schedule, tau)
        _, xb, eps, lab = self._batch()
        enc, _ = nets.encode(xb, self.model.encoder)
        resp = prior.responsibilities(enc, self.state, clamp=lab)
        self.state = prior.natural_step(self.state, enc, resp, self.N, r)
        res = elbo.objective(xb, self.model, self.state, eps, self.N, labels=lab)
        b = res.breakdown
        return self._row("prior_init", b.total, b.recon, b.kl_z, b.kl_r, b.kl_global, r, 0.0)

    def joint_step(self):
        c = self.config
        tau = self.iteration - c.pretrain_iters - c.prior_init_iters + 1
        r = rho(c.schedule, tau)
        beta = c.semi.beta_at(tau - 1)
        _, xb, eps, lab = self._batch()
        res = elbo.objective(xb, self.model, self.state, eps, self.N, labels=lab,
                             delta=c.semi.delta, beta_kl=beta)
        self._apply_adam(res.grads)
        if not c.freeze_prior:
            enc, _ = nets.encode(xb, self.model.encoder)
            resp = prior.responsibilities(enc, self.state, clamp=lab)
            grad_blocks = self.gradient_blocks
            natural_blocks = [i for i in range(self.state.I) if i not in grad_blocks]
            lam_grads = {}
            if grad_blocks:
                lam_grads = elbo.prior_gradients(enc, resp, self.state, self.N, lab, c.semi.delta,
                                                 beta, grad_blocks)
            if natural_blocks:
                self.state = prior.natural_step(self.state, enc, resp, self.N, r, blocks=natural_blocks)
            if lam_grads and c.lambda_optimizer == "sgd":
                lr = c.lambda_lr if c.lambda_lr is not None else c.learning_rate
                self.state = lambda_gradient_step(self.state, lam_grads, lr)
            elif lam_grads:
                vec = adam_step(lambda_vector(self.state, grad_blocks),
                                -grads_vector(lam_grads, grad_blocks), self.adam_lam)
                self.state = lambda_from_vector(self.state, grad_blocks, vec)
        b = res.breakdown
        return self._row("joint", b.total, b.recon, b.kl_z, b.kl_r, b.kl_global, r, -res.semi_sup)

    def _row(self, phase, total, recon, klz, klr, klg, r, semi):
        row = dict(iter=self.iteration, phase=phase, elbo=float(total), recon=float(recon),
                   kl_z=float(klz), kl_r=float(klr), kl_global=float(klg), rho=float(r),
                   semi_sup_loss=float(semi))
        for key in ("elbo", "recon", "kl_z", "kl_r", "kl_global", "semi_sup_loss"):
            if not math.isfinite(row[key]):
                raise FloatingPointError(f"non-finite {key} at iteration {self.iteration}")
        return row

    def step(self):
        phase = self.phase
        if phase == "pretrain":
            row = self.pretrain_step()
        elif phase == "prior_init":
            row = self.prior_init_step()
        else:
            row = self.joint_step()
        self.iteration += 1
        return row

    def run(self, until=None, callback=None):
        """Advance to iteration ``until`` (default: the end); return metric rows."""
        until = self.config.total_iters if until is None else min(until, self.config.total_iters)
        rows = []
        while self.iteration < until:
            row = self.step()
            rows.append(row)
            if callback is not None:
                callback(self, row)
        return rows

    def evaluate(self, x=None, n_samples=1, seed=0):
        """Predictive bound on ``x`` (default: the training data) with fixed noise."""
        x = self.x if x is None else x
        return elbo.test_elbo(x, self.model, self.state, n_samples, rng=np.random.default_rng(seed))
