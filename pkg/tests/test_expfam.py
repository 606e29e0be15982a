import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.special import gammaln

from fmx import expfam
from fmx.expfam import (Dirichlet, DomainError, NaturalNG, NormalGamma, digamma, dirichlet_elog_pi,
                        dirichlet_kl, mean_to_natural, natural_to_mean, ng_kl, ng_moments, trigamma)

from conftest import within_se
from oracles import dirichlet_logpdf, mp_digamma, mp_trigamma, ng_draws, ng_logpdf

pos = st.floats(min_value=1e-2, max_value=50.0)
real = st.floats(min_value=-20.0, max_value=20.0)


def random_ng(rng, shape=(3,)):
    return NormalGamma(rng.normal(0, 2, shape), rng.uniform(0.2, 5, shape), rng.uniform(0.5, 8, shape),
                       rng.uniform(0.2, 5, shape))


# -- special functions ---------------------------------------------------------------

def test_digamma_matches_mpmath_over_range():
    xs = np.geomspace(1e-3, 1e4, 400)
    ref = np.array([mp_digamma(x) for x in xs])
    assert np.max(np.abs(digamma(xs) - ref)) < 1e-10


def test_trigamma_matches_mpmath_over_range():
    xs = np.geomspace(1e-3, 1e4, 400)
    ref = np.array([mp_trigamma(x) for x in xs])
    assert np.max(np.abs(trigamma(xs) - ref) / ref) < 1e-10


def test_digamma_one_is_minus_euler_gamma():
    assert digamma(1.0) == pytest.approx(-0.5772156649015329, abs=1e-12)


@pytest.mark.parametrize("bad", [0.0, -1.0, np.nan])
def test_digamma_rejects_nonpositive(bad):
    with pytest.raises(DomainError):
        digamma(np.array([1.0, bad]))


# -- parameter maps --------------------------------------------------------------------

def test_mean_to_natural_hyperprior_example():
    nat = mean_to_natural(NormalGamma(0.0, 1.0, 0.01, 0.01))
    np.testing.assert_allclose([nat.l1, nat.l2, nat.l3, nat.l4], [-0.49, -0.01, 0.0, -0.5], atol=1e-15)


def test_mean_to_natural_second_example():
    nat = mean_to_natural(NormalGamma(2.0, 1.0, 1.0, 1.0))
    np.testing.assert_allclose([nat.l1, nat.l2, nat.l3, nat.l4], [0.5, -3.0, 2.0, -0.5], atol=1e-15)


def test_natural_to_mean_examples():
    f = natural_to_mean(NaturalNG(-0.49, -0.01, 0.0, -0.5))
    np.testing.assert_allclose([f.m, f.s, f.a, f.b], [0, 1, 0.01, 0.01], atol=1e-15)
    f = natural_to_mean(NaturalNG(0.5, -3.0, 2.0, -0.5))
    np.testing.assert_allclose([f.m, f.s, f.a, f.b], [2, 1, 1, 1], atol=1e-15)


def test_roundtrip_1000_random_factors(rng):
    f = NormalGamma(rng.normal(0, 1, 1000), rng.lognormal(0, 1, 1000), rng.lognormal(0, 1, 1000),
                    rng.lognormal(0, 1, 1000))
    g = natural_to_mean(mean_to_natural(f))
    for name in "msab":
        x, y = getattr(f, name), getattr(g, name)
        assert np.max(np.abs(x - y) / np.abs(x)) < 1e-12


@given(real, pos, pos, pos)
def test_roundtrip_property(m, s, a, b):
    f = NormalGamma(m, s, a, b)
    g = natural_to_mean(mean_to_natural(f))
    np.testing.assert_allclose([g.m, g.s, g.a, g.b], [m, s, a, b], rtol=1e-12, atol=1e-12)


@given(real, pos, pos, pos)
def test_natural_roundtrip_property(m, s, a, b):
    p = mean_to_natural(NormalGamma(m, s, a, b))
    q = mean_to_natural(natural_to_mean(p))
    for name in ("l1", "l2", "l3", "l4"):
        np.testing.assert_allclose(getattr(q, name), getattr(p, name), rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("args", [(0, 0, 1, 1), (0, 1, 0, 1), (0, 1, 1, -1), (np.nan, 1, 1, 1),
                                  (0, 1, np.inf, 1)])
def test_normal_gamma_rejects_invalid(args):
    with pytest.raises(DomainError):
        NormalGamma(*args)


@pytest.mark.parametrize("nat", [(0.5, -3.0, 2.0, 0.1), (-0.6, -3.0, 2.0, -0.5), (0.5, -1.0, 2.0, -0.5)])
def test_natural_rejects_invalid(nat):
    with pytest.raises(DomainError):
        NaturalNG(*nat)


def test_dirichlet_rejects_invalid():
    with pytest.raises(DomainError):
        Dirichlet([1.0, 0.0])
    with pytest.raises(DomainError):
        Dirichlet([1.0, np.nan])


# -- moments ------------------------------------------------------------------------------

def test_moments_unit_example():
    elog, ea, eam, eam2 = ng_moments(NormalGamma(0.0, 1.0, 1.0, 1.0))
    assert elog == pytest.approx(-0.577216, abs=1e-6)
    assert (ea, eam, eam2) == (1.0, 0.0, 1.0)


def test_moments_substitution_example():
    _, ea, eam, eam2 = ng_moments(NormalGamma(3.0, 2.0, 4.0, 2.0))
    assert (ea, eam, eam2) == pytest.approx((2.0, 6.0, 18.5))


def test_moments_match_monte_carlo_on_20_factors():
    rng = np.random.default_rng(7)
    for _ in range(20):
        m, s, a, b = rng.normal(0, 2), rng.uniform(0.3, 4), rng.uniform(0.8, 6), rng.uniform(0.3, 4)
        mu, alpha = ng_draws(rng, m, s, a, b, 10**6)
        got = ng_moments(NormalGamma(m, s, a, b))
        for samples, value in zip((np.log(alpha), alpha, alpha * mu, alpha * mu**2), got):
            assert within_se(samples, float(value))


def test_dirichlet_elog_pi_examples():
    np.testing.assert_allclose(dirichlet_elog_pi(Dirichlet([1.0, 1.0])), [-1.0, -1.0], atol=1e-14)
    v = dirichlet_elog_pi(Dirichlet([2.0, 2.0]))
    assert v[0] == v[1] == pytest.approx(float(digamma(2.0) - digamma(4.0)))


def test_dirichlet_elog_pi_monte_carlo():
    rng = np.random.default_rng(8)
    for _ in range(20):
        c = rng.uniform(0.5, 5, size=rng.integers(2, 6))
        pi = rng.dirichlet(c, size=10**6)
        got = dirichlet_elog_pi(Dirichlet(c))
        for k in range(len(c)):
            assert within_se(np.log(pi[:, k]), float(got[k]))


# -- KL divergences -------------------------------------------------------------------------

def test_ng_kl_identical_is_exactly_zero(rng):
    q = random_ng(rng)
    assert ng_kl(q, q) == 0.0


def test_ng_kl_example_matches_monte_carlo():
    rng = np.random.default_rng(9)
    q, p = NormalGamma(1.0, 1.0, 1.0, 1.0), NormalGamma(0.0, 1.0, 1.0, 1.0)
    mu, alpha = ng_draws(rng, 1.0, 1.0, 1.0, 1.0, 10**6)
    diff = ng_logpdf(mu, alpha, 1, 1, 1, 1) - ng_logpdf(mu, alpha, 0, 1, 1, 1)
    assert within_se(diff, ng_kl(q, p))


def test_ng_kl_matches_monte_carlo_on_20_pairs():
    rng = np.random.default_rng(10)
    for _ in range(20):
        qv = (rng.normal(0, 1), rng.uniform(0.5, 3), rng.uniform(1, 5), rng.uniform(0.5, 3))
        pv = (rng.normal(0, 1), rng.uniform(0.5, 3), rng.uniform(1, 5), rng.uniform(0.5, 3))
        mu, alpha = ng_draws(rng, *qv, 10**6)
        diff = ng_logpdf(mu, alpha, *qv) - ng_logpdf(mu, alpha, *pv)
        assert within_se(diff, ng_kl(NormalGamma(*qv), NormalGamma(*pv)))


def test_ng_kl_uses_log_gamma_not_digamma():
    # Shape-only difference: the closed form contains lnGamma(a_p) - lnGamma(a_q).
    q, p = NormalGamma(0.0, 1.0, 3.0, 1.0), NormalGamma(0.0, 1.0, 1.0, 1.0)
    rng = np.random.default_rng(11)
    mu, alpha = ng_draws(rng, 0.0, 1.0, 3.0, 1.0, 10**6)
    diff = ng_logpdf(mu, alpha, 0, 1, 3, 1) - ng_logpdf(mu, alpha, 0, 1, 1, 1)
    assert within_se(diff, ng_kl(q, p))


@given(real, pos, pos, pos, real, pos, pos, pos)
def test_ng_kl_nonnegative(m1, s1, a1, b1, m2, s2, a2, b2):
    assert ng_kl(NormalGamma(m1, s1, a1, b1), NormalGamma(m2, s2, a2, b2)) >= -1e-10


def test_ng_kl_sums_over_dimensions(rng):
    q, p = random_ng(rng), random_ng(rng)
    total = sum(ng_kl(NormalGamma(q.m[d], q.s[d], q.a[d], q.b[d]),
                      NormalGamma(p.m[d], p.s[d], p.a[d], p.b[d])) for d in range(3))
    assert ng_kl(q, p) == pytest.approx(total, rel=1e-12)


def test_dirichlet_kl_identical_is_zero():
    assert dirichlet_kl(Dirichlet([1.5, 2.0, 0.3]), Dirichlet([1.5, 2.0, 0.3])) == 0.0


def test_dirichlet_kl_example_matches_monte_carlo():
    rng = np.random.default_rng(12)
    pi = rng.dirichlet([2.0, 1.0], size=10**6)
    diff = dirichlet_logpdf(pi, [2.0, 1.0]) - dirichlet_logpdf(pi, [1.0, 1.0])
    assert within_se(diff, dirichlet_kl(Dirichlet([2.0, 1.0]), Dirichlet([1.0, 1.0])))


def test_dirichlet_kl_closed_form_value():
    # KL(Dir(2,1) || Dir(1,1)) = log 2 - 1/2
    assert dirichlet_kl(Dirichlet([2.0, 1.0]), Dirichlet([1.0, 1.0])) == pytest.approx(np.log(2) - 0.5)


@given(st.lists(pos, min_size=2, max_size=6), st.data())
def test_dirichlet_kl_nonnegative(cq, data):
    cp = data.draw(st.lists(pos, min_size=len(cq), max_size=len(cq)))
    assert dirichlet_kl(Dirichlet(cq), Dirichlet(cp)) >= -1e-10


def test_dirichlet_kl_dimension_mismatch():
    with pytest.raises(ValueError):
        dirichlet_kl(Dirichlet([1.0, 1.0]), Dirichlet([1.0, 1.0, 1.0]))


def test_factors_are_immutable(rng):
    f = random_ng(rng)
    with pytest.raises(ValueError):
        f.m[0] = 1.0
    with pytest.raises(Exception):
        f.m = np.zeros(3)


def test_log_beta_matches_gammaln():
    c = np.array([0.5, 2.0, 3.5])
    assert expfam.log_beta(c) == pytest.approx(gammaln(c).sum() - gammaln(c.sum()))
