import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from ssvae import stochastic as S
from ssvae import tensor as T
from ssvae.stochastic import AnnealSchedule, CategoricalPosterior, GaussianPosterior, anneal_coeff
from ssvae.tensor import ShapeError, Tape, Tensor, precision
from ssvae.verify import conjugate_stl_gradients, gaussian_kl_mc


def gauss(mu, sigma, requires_grad=False):
    return GaussianPosterior(
        Tensor(np.atleast_2d(mu), requires_grad, np.float64), Tensor(np.atleast_2d(sigma), requires_grad, np.float64)
    )


# -- reparameterized Gaussian


def test_reparam_zero_noise_returns_mean():
    post = gauss([1.0, -2.0], [0.5, 3.0])
    np.testing.assert_array_equal(S.sample_gaussian_reparam(post, np.zeros((1, 2))).data, post.mu.data)


def test_reparam_zero_sigma():
    post = gauss([1.0, -2.0], [0.0, 0.0])
    z = S.sample_gaussian_reparam(post, np.array([[3.0, -7.0]]))
    np.testing.assert_array_equal(z.data, post.mu.data)


def test_reparam_shape_mismatch():
    with pytest.raises(ShapeError):
        S.sample_gaussian_reparam(gauss([0.0], [1.0]), np.zeros((2, 1)))


def test_reparam_moments():
    n = 1_000_000
    with precision("float64"):
        post = GaussianPosterior(Tensor(np.ones((n, 1))), Tensor(np.full((n, 1), 2.0)))
        z = S.sample_gaussian_reparam(post, np.random.default_rng(0).standard_normal((n, 1))).data
    assert abs(z.mean() - 1.0) < 0.01
    assert abs(z.var() - 4.0) < 0.05


def test_reparam_gradient_flows_to_parameters():
    post = gauss([0.5], [2.0], requires_grad=True)
    with Tape() as tape:
        z = S.sample_gaussian_reparam(post, np.array([[1.5]]))
        loss = T.sum_(z * z)
    g = tape.backward(loss)
    z0 = 0.5 + 2.0 * 1.5
    assert g.array(post.mu)[0, 0] == pytest.approx(2 * z0)
    assert g.array(post.sigma)[0, 0] == pytest.approx(2 * z0 * 1.5)


# -- Gumbel-Softmax


def test_gumbel_equal_logits_gives_softmax_of_noise():
    rng = np.random.default_rng(0)
    u = rng.uniform(size=(1, 4))
    g = -np.log(-np.log(u))
    with precision("float64"):
        out = S.gumbel_softmax_sample(CategoricalPosterior(Tensor(np.zeros((1, 4)))), 0.7, u).data
    e = np.exp(g / 0.7 - (g / 0.7).max())
    np.testing.assert_allclose(out, e / e.sum(), rtol=1e-12)


def test_gumbel_low_temperature_is_one_hot():
    rng = np.random.default_rng(1)
    logits = rng.normal(size=(50, 5))
    u = rng.uniform(size=(50, 5))
    with precision("float64"):
        out = S.gumbel_softmax_sample(CategoricalPosterior(Tensor(logits)), 1e-4, u).data
    assert np.all(out.max(axis=1) > 0.999)
    np.testing.assert_array_equal(out.argmax(1), (logits - np.log(-np.log(u))).argmax(1))


@pytest.mark.parametrize("u", [0.0, 1.0])
def test_gumbel_rejects_boundary_noise(u):
    noise = np.full((1, 3), 0.5)
    noise[0, 1] = u
    with pytest.raises(ValueError):
        S.gumbel_softmax_sample(CategoricalPosterior(Tensor(np.zeros((1, 3)))), 1.0, noise)


def test_gumbel_rejects_bad_temperature():
    with pytest.raises(ValueError):
        S.gumbel_softmax_sample(CategoricalPosterior(Tensor(np.zeros((1, 3)))), 0.0, np.full((1, 3), 0.5))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(1e-3, 10.0))
def test_gumbel_rows_on_simplex(seed, tau):
    rng = np.random.default_rng(seed)
    post = CategoricalPosterior(Tensor(rng.normal(scale=3, size=(4, 6))))
    out = S.gumbel_softmax_sample(post, tau, S.uniform_noise(rng, (4, 6))).data
    np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-6)


def test_gumbel_max_sample_is_one_hot():
    rng = np.random.default_rng(0)
    post = CategoricalPosterior(Tensor(rng.normal(size=(10, 3))))
    oh = S.gumbel_max_sample(post, S.uniform_noise(rng, (10, 3)))
    assert np.all(oh.sum(axis=1) == 1) and set(np.unique(oh)) == {0.0, 1.0}


def test_gumbel_relaxed_sample_differentiable():
    rng = np.random.default_rng(3)
    u = rng.uniform(size=(2, 3))
    w = rng.normal(size=(2, 3))

    def f(logits):
        return T.sum_(S.gumbel_softmax_sample(CategoricalPosterior(logits), 0.5, u) * w)

    assert T.finite_difference_check(f, Tensor(rng.normal(size=(2, 3)))).max_error < 1e-4


# -- KL divergences


@pytest.mark.parametrize(
    "mu,sigma,expected",
    [(0.0, 1.0, 0.0), (1.0, 1.0, 0.5), (0.0, 2.0, 0.5 * (4 - 2 * math.log(2) - 1))],
)
def test_kl_gaussian_examples(mu, sigma, expected):
    kl = S.kl_gaussian_standard(gauss([mu], [sigma])).item()
    assert kl == pytest.approx(expected, abs=1e-12)


def test_kl_gaussian_value_example():
    assert S.kl_gaussian_standard(gauss([0.0], [2.0])).item() == pytest.approx(0.806853, abs=1e-6)


@pytest.mark.parametrize("mu,sigma", [(1.0, 1.0), (0.0, 2.0), (-0.7, 0.3)])
def test_kl_gaussian_monte_carlo(mu, sigma):
    mc, se = gaussian_kl_mc(np.array([mu]), np.array([sigma]), 200_000, np.random.default_rng(0))
    kl = S.kl_gaussian_standard(gauss([mu], [sigma])).item()
    assert abs(kl - mc) < 3 * se


def test_kl_gaussian_rejects_nonpositive_sigma():
    with pytest.raises(ValueError):
        S.kl_gaussian_standard(gauss([0.0, 0.0], [1.0, 0.0]))


@settings(max_examples=60, deadline=None)
@given(
    st.lists(st.floats(-5, 5), min_size=1, max_size=4),
    st.lists(st.floats(0.05, 5), min_size=4, max_size=4),
)
def test_kl_gaussian_nonnegative(mu, sigma):
    kl = S.kl_gaussian_standard(gauss(mu, sigma[: len(mu)])).item()
    assert kl >= -1e-12


@pytest.mark.parametrize(
    "q,p,expected",
    [
        ([0.3, 0.7], [0.3, 0.7], 0.0),
        ([1.0, 0.0], [0.5, 0.5], math.log(2)),
        ([0.75, 0.25], [0.5, 0.5], 0.75 * math.log(1.5) + 0.25 * math.log(0.5)),
    ],
)
def test_kl_categorical_examples(q, p, expected):
    with precision("float64"):
        kl = S.kl_categorical(Tensor(np.array([q])), np.array(p)).item()
    assert kl == pytest.approx(expected, abs=1e-12)


def test_kl_categorical_value_example():
    with precision("float64"):
        kl = S.kl_categorical(Tensor(np.array([[0.75, 0.25]])), 0.5).item()
    assert kl == pytest.approx(0.130812, abs=1e-6)


def test_kl_categorical_rejects_unsupported_mass():
    with pytest.raises(ValueError):
        S.kl_categorical(Tensor(np.array([[0.5, 0.5]])), np.array([1.0, 0.0]))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 100_000), st.integers(2, 8))
def test_kl_categorical_nonnegative_and_zero_at_equality(seed, k):
    rng = np.random.default_rng(seed)
    q, p = rng.dirichlet(np.ones(k)), rng.dirichlet(np.ones(k))
    with precision("float64"):
        assert S.kl_categorical(Tensor(q[None]), p).item() >= -1e-12
        assert abs(S.kl_categorical(Tensor(q[None]), q).item()) < 1e-8


def test_kl_categorical_gradient_with_log_q():
    rng = np.random.default_rng(0)
    p = np.full(4, 0.25)

    def f(logits):
        return T.sum_(S.kl_categorical(T.softmax(logits), p, log_q=T.log_softmax(logits)))

    assert T.finite_difference_check(f, Tensor(rng.normal(size=(3, 4)))).max_error < 1e-4


# -- STL


def test_stl_value_matches_full_density():
    rng = np.random.default_rng(0)
    post = gauss(rng.normal(size=3), rng.uniform(0.5, 2, size=3), requires_grad=True)
    with precision("float64"):
        z = S.sample_gaussian_reparam(post, rng.standard_normal((1, 3)))
        full = S.gaussian_log_density(z, post.mu, post.sigma).item()
        assert S.stl_log_q(z, post).item() == pytest.approx(full, rel=1e-14)
    assert full == pytest.approx(stats.norm.logpdf(z.data, post.mu.data, post.sigma.data).sum(), rel=1e-12)


def test_stl_shape_mismatch():
    post = gauss([0.0, 0.0], [1.0, 1.0])
    with pytest.raises(ShapeError):
        S.stl_log_q(Tensor(np.zeros((1, 3))), post)


def test_stl_zero_gradient_at_exact_posterior():
    g_mu, g_sigma = conjugate_stl_gradients(n=2000, seed=4, stl=True)
    assert np.abs(g_mu).max() < 1e-6 and np.abs(g_sigma).max() < 1e-6


def test_stl_unbiased_on_one_dim_gaussian():
    """Mean STL gradient matches the closed-form ELBO gradient away from the posterior."""
    n, x, s = 100_000, 1.3, 0.8
    mu0, sigma0 = 0.2, 0.9
    rng = np.random.default_rng(5)
    with precision("float64"):
        mu = Tensor(np.full((n, 1), mu0), requires_grad=True)
        sigma = Tensor(np.full((n, 1), sigma0), requires_grad=True)
        with Tape() as tape:
            q = GaussianPosterior(mu, sigma)
            z = S.sample_gaussian_reparam(q, rng.standard_normal((n, 1)))
            lik = S.gaussian_log_density(Tensor(np.full((n, 1), x)), z, np.full((n, 1), s))
            obj = T.sum_(lik + S.standard_normal_log_density(z) - S.stl_log_q(z, q))
        g = tape.backward(obj)
    d_mu = (x - mu0) / s**2 - mu0
    d_sigma = -sigma0 / s**2 - sigma0 + 1 / sigma0
    for grads, exact in ((g.array(mu)[:, 0], d_mu), (g.array(sigma)[:, 0], d_sigma)):
        se = grads.std(ddof=1) / math.sqrt(n)
        assert abs(grads.mean() - exact) < 3 * se


# -- annealing


@pytest.mark.parametrize("step,expected", [(0, 0.0), (3000, 0.0), (4500, 0.5), (6000, 1.0), (10**6, 1.0)])
def test_anneal_examples(step, expected):
    assert anneal_coeff(step, AnnealSchedule()) == expected


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 20_000), st.integers(0, 20_000), st.integers(0, 5000), st.integers(1, 5000))
def test_anneal_monotone_and_clamped(a, b, flat, ramp):
    sched = AnnealSchedule(flat, ramp)
    lo, hi = sorted((a, b))
    ca, cb = anneal_coeff(lo, sched), anneal_coeff(hi, sched)
    assert 0.0 <= ca <= cb <= 1.0


def test_categorical_posterior_probs_on_simplex():
    post = CategoricalPosterior(Tensor(np.random.default_rng(0).normal(size=(5, 4))))
    np.testing.assert_allclose(post.probs().data.sum(1), 1.0, atol=1e-6)
