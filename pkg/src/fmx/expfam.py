"""Normal-Gamma and Dirichlet factors: moments, parameter maps and KL divergences.

All operations are elementwise over the trailing dimensions, so a factor may
hold a single vector of length D or a stack of shape (K, D).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln

LOG_2PI = float(np.log(2.0 * np.pi))

# Recurrence threshold for the asymptotic expansions below.
_ASYMPTOTIC_FROM = 6.0
# Bernoulli numbers B_2k / (2k) for the digamma series, k = 1..7.
_DIGAMMA_COEF = (1 / 12, -1 / 120, 1 / 252, -1 / 240, 1 / 132, -691 / 32760, 1 / 12)
# Bernoulli numbers B_2k for the trigamma series, k = 1..7.
_TRIGAMMA_COEF = (1 / 6, -1 / 30, 1 / 42, -1 / 30, 5 / 66, -691 / 2730, 7 / 6)


class DomainError(ValueError):
    """Raised when parameters leave the domain of a distribution."""


def digamma(x):
    """Digamma function for positive real arguments.

    Shifts the argument upward with psi(x) = psi(x + 1) - 1/x until it is at
    least 6, then applies the asymptotic series with seven Bernoulli terms.
    """
    x = np.asarray(x, dtype=np.float64)
    if np.any(~(x > 0)):
        raise DomainError("digamma is only defined here for positive arguments")
    x = x.copy()
    acc = np.zeros_like(x)
    small = x < _ASYMPTOTIC_FROM
    while np.any(small):
        acc = acc - np.where(small, 1.0 / x, 0.0)
        x = np.where(small, x + 1.0, x)
        small = x < _ASYMPTOTIC_FROM
    inv2 = 1.0 / (x * x)
    series = _horner(_DIGAMMA_COEF, inv2) * inv2
    out = acc + np.log(x) - 0.5 / x - series
    return out[()] if out.ndim == 0 else out


def trigamma(x):
    """First derivative of the digamma function for positive arguments."""
    x = np.asarray(x, dtype=np.float64)
    if np.any(~(x > 0)):
        raise DomainError("trigamma is only defined here for positive arguments")
    x = x.copy()
    acc = np.zeros_like(x)
    small = x < _ASYMPTOTIC_FROM
    while np.any(small):
        acc = acc + np.where(small, 1.0 / (x * x), 0.0)
        x = np.where(small, x + 1.0, x)
        small = x < _ASYMPTOTIC_FROM
    inv = 1.0 / x
    inv2 = inv * inv
    series = _horner(_TRIGAMMA_COEF, inv2) * inv2 * inv
    out = acc + inv + 0.5 * inv2 + series
    return out[()] if out.ndim == 0 else out


def _horner(coefs, t):
    # evaluates coefs[0] + coefs[1] t + coefs[2] t^2 + ...
    out = np.zeros_like(t) + coefs[-1]
    for c in reversed(coefs[:-1]):
        out = out * t + c
    return out


def _frozen(a):
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class NormalGamma:
    """Normal-Gamma factor N(mu; m, (s alpha)^-1) Gamma(alpha; a, b) per entry.

    Parameters
    ----------
    m : array_like
        Location.
    s : array_like
        Precision scale (dimensionless), positive.
    a : array_like
        Gamma shape, positive.
    b : array_like
        Gamma rate, positive.
    """

    m: np.ndarray
    s: np.ndarray
    a: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        arrays = [_frozen(getattr(self, f)) for f in ("m", "s", "a", "b")]
        shape = np.broadcast_shapes(*(x.shape for x in arrays))
        for name, x in zip(("m", "s", "a", "b"), arrays):
            x = _frozen(np.broadcast_to(x, shape))
            if not np.all(np.isfinite(x)):
                raise DomainError(f"NormalGamma.{name} has non-finite entries")
            if name != "m" and not np.all(x > 0):
                raise DomainError(f"NormalGamma.{name} must be strictly positive")
            object.__setattr__(self, name, x)

    @property
    def shape(self):
        return self.m.shape

    def __getitem__(self, idx):
        return NormalGamma(self.m[idx], self.s[idx], self.a[idx], self.b[idx])

    def __eq__(self, other):
        if not isinstance(other, NormalGamma):
            return NotImplemented
        return all(np.array_equal(getattr(self, f), getattr(other, f)) for f in "msab")

    __hash__ = None


@dataclass(frozen=True, eq=False)
class NaturalNG:
    """Natural coordinates (l1, l2, l3, l4) of a Normal-Gamma factor."""

    l1: np.ndarray
    l2: np.ndarray
    l3: np.ndarray
    l4: np.ndarray

    def __post_init__(self):
        arrays = [_frozen(getattr(self, f)) for f in ("l1", "l2", "l3", "l4")]
        shape = np.broadcast_shapes(*(x.shape for x in arrays))
        for name, x in zip(("l1", "l2", "l3", "l4"), arrays):
            x = _frozen(np.broadcast_to(x, shape))
            if not np.all(np.isfinite(x)):
                raise DomainError(f"NaturalNG.{name} has non-finite entries")
            object.__setattr__(self, name, x)
        if not np.all(self.l4 < 0):
            raise DomainError("l4 must be negative")
        if not np.all(self.l1 > -0.5):
            raise DomainError("l1 must exceed -1/2")
        if not np.all(self.l2 < self.l3**2 / (4.0 * self.l4)):
            raise DomainError("l2 must be below l3^2 / (4 l4)")


@dataclass(frozen=True, eq=False)
class Dirichlet:
    """Dirichlet factor with pseudo-counts ``c`` along the last axis."""

    c: np.ndarray

    def __post_init__(self):
        c = _frozen(self.c)
        if c.ndim == 0:
            raise DomainError("Dirichlet pseudo-counts must be a vector")
        if not np.all(np.isfinite(c)) or not np.all(c > 0):
            raise DomainError("Dirichlet pseudo-counts must be finite and positive")
        object.__setattr__(self, "c", c)

    @property
    def K(self):
        return self.c.shape[-1]

    def __eq__(self, other):
        if not isinstance(other, Dirichlet):
            return NotImplemented
        return np.array_equal(self.c, other.c)

    __hash__ = None


def mean_to_natural(f: NormalGamma) -> NaturalNG:
    return NaturalNG(
        f.a - 0.5,
        -(f.b + 0.5 * f.s * f.m**2),
        f.s * f.m,
        -0.5 * f.s,
    )


def natural_to_mean(p: NaturalNG) -> NormalGamma:
    s = -2.0 * p.l4
    m = p.l3 / s
    a = p.l1 + 0.5
    b = -p.l2 - 0.5 * s * m**2
    return NormalGamma(m, s, a, b)


def ng_moments(f: NormalGamma):
    """Return (E[log alpha], E[alpha], E[alpha mu], E[alpha mu^2])."""
    e_alpha = f.a / f.b
    return (
        digamma(f.a) - np.log(f.b),
        e_alpha,
        f.m * e_alpha,
        1.0 / f.s + f.m**2 * e_alpha,
    )


def ng_kl_terms(q: NormalGamma, p: NormalGamma) -> np.ndarray:
    """Elementwise KL(q || p), before summing over dimensions."""
    e_alpha = q.a / q.b
    normal = 0.5 * (p.s * e_alpha * (q.m - p.m) ** 2 + p.s / q.s - np.log(p.s / q.s) - 1.0)
    gamma = (
        p.a * np.log(q.b / p.b)
        - gammaln(q.a)
        + gammaln(p.a)
        + (q.a - p.a) * digamma(q.a)
        - (q.b - p.b) * e_alpha
    )
    return normal + gamma


def _floor_kl(value):
    # round-off below zero is clipped; genuine negatives are a bug upstream
    return np.where((value < 0) & (value > -1e-10), 0.0, value)


def ng_kl(q: NormalGamma, p: NormalGamma) -> float:
    """KL(q || p) summed over all entries."""
    if q.shape != p.shape:
        p = NormalGamma(*(np.broadcast_to(getattr(p, f), q.shape) for f in "msab"))
    if q == p:
        return 0.0
    return float(_floor_kl(ng_kl_terms(q, p).sum()))


def dirichlet_elog_pi(f: Dirichlet) -> np.ndarray:
    return digamma(f.c) - digamma(f.c.sum(axis=-1, keepdims=True))


def log_beta(c) -> np.ndarray:
    c = np.asarray(c, dtype=np.float64)
    return gammaln(c).sum(axis=-1) - gammaln(c.sum(axis=-1))


def dirichlet_kl(q: Dirichlet, p: Dirichlet) -> float:
    if q.c.shape != p.c.shape:
        raise ValueError(f"Dirichlet size mismatch: {q.c.shape} vs {p.c.shape}")
    if q == p:
        return 0.0
    value = log_beta(p.c) - log_beta(q.c) + ((q.c - p.c) * dirichlet_elog_pi(q)).sum(axis=-1)
    return float(_floor_kl(np.sum(value)))
