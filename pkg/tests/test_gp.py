import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from aliased_percept import gp
from aliased_percept.gp import Kernel


def naive_posterior(X, y, kernel, noise, Xs):
    """Textbook GP posterior with an explicit inverse."""
    A = kernel.gram(X) + noise**2 * np.eye(len(X))
    Ai = np.linalg.inv(A)
    Ks = kernel.gram(X, Xs)
    mean = Ks.T @ Ai @ y
    var = kernel.signal**2 - np.einsum("ij,ik,kj->j", Ks, Ai, Ks)
    return mean, var


def sine(n=50, seed=0):
    rng = np.random.default_rng(seed)
    X = np.sort(rng.uniform(0, 2 * math.pi, n))[:, None]
    return X, np.sin(X[:, 0]) + 0.1 * rng.standard_normal(n)


# -- kernels ------------------------------------------------------------------


@pytest.mark.parametrize("kind", gp.KERNELS)
def test_zero_distance_gives_signal_variance(kind):
    k = Kernel(kind, 1.7, 0.4)
    assert gp.kernel_eval(k, [0.3, -1.0], [0.3, -1.0]) == 1.7**2


def test_squared_exponential_closed_form():
    k = Kernel("squared_exponential", 1.0, 1.0)
    assert gp.kernel_eval(k, [0.0, 0.0], [1.0, 1.0]) == pytest.approx(math.exp(-1), abs=1e-12)


def test_matern_and_exponential_forms():
    r = 0.8
    x, x2 = [0.0], [r]
    assert gp.kernel_eval(Kernel("exponential", 1, 1), x, x2) == pytest.approx(math.exp(-r))
    a = math.sqrt(3) * r
    assert gp.kernel_eval(Kernel("matern32", 1, 1), x, x2) == pytest.approx((1 + a) * math.exp(-a))
    b = math.sqrt(5) * r
    assert gp.kernel_eval(Kernel("matern52", 1, 1), x, x2) == pytest.approx(
        (1 + b + b * b / 3) * math.exp(-b))


def test_rational_quadratic_tends_to_squared_exponential():
    rq = Kernel("rational_quadratic", 1.3, 0.7, alpha=1e6)
    se = Kernel("squared_exponential", 1.3, 0.7)
    for r in np.linspace(0, 3, 13):
        assert abs(gp.kernel_eval(rq, [0.0], [r]) - gp.kernel_eval(se, [0.0], [r])) < 1e-4


def test_kernel_validation():
    with pytest.raises(ValueError):
        Kernel("linear")
    with pytest.raises(ValueError):
        Kernel("matern52", signal=0.0)
    with pytest.raises(ValueError):
        gp.kernel_eval(Kernel(), [1.0], [1.0, 2.0])


@pytest.mark.parametrize("kind", gp.KERNELS)
def test_gram_symmetric_and_psd(kind):
    rng = np.random.default_rng(2)
    X = rng.standard_normal((60, 3))
    k = Kernel(kind, 0.9, 1.1)
    K = k.gram(X)
    assert np.array_equal(K, K.T)
    assert np.all(np.diag(K) == k.signal**2)
    np.linalg.cholesky(K + 1e-8 * k.signal**2 * np.eye(60))


@pytest.mark.parametrize("kind", gp.KERNELS)
def test_length_derivative_matches_finite_difference(kind):
    s = np.linspace(0.05, 4, 30)
    h = 1e-6
    k = Kernel(kind, 1.2, 1.0, alpha=2.0)
    # k as a function of log(length) at fixed r: s = r / l
    up = Kernel(kind, 1.2, math.exp(h), alpha=2.0).of_scaled(s / math.exp(h))
    dn = Kernel(kind, 1.2, math.exp(-h), alpha=2.0).of_scaled(s / math.exp(-h))
    np.testing.assert_allclose(k.dlog_length(s), (up - dn) / (2 * h), rtol=1e-6, atol=1e-9)


# -- exact inference ----------------------------------------------------------


def test_single_point_shrinkage():
    m = gp.fit_exact([[0.0]], [2.0], Kernel("squared_exponential", 1, 1), 1.0)
    mean, _ = gp.predict(m, [[0.0]])
    assert mean[0] == pytest.approx(1.0, abs=1e-12)


def test_noiseless_interpolation():
    X = np.linspace(0, 3, 12)[:, None]
    y = np.cos(2 * X[:, 0])
    m = gp.fit_exact(X, y, Kernel("matern52", 1.0, 0.8), 0.0)
    mean, var = gp.predict(m, X)
    np.testing.assert_allclose(mean, y, atol=1e-6)
    assert np.all(var < 1e-8)


@pytest.mark.parametrize("kind", gp.KERNELS)
def test_exact_matches_naive_inverse(kind):
    X, y = sine()
    k = Kernel(kind, 1.1, 0.9)
    m = gp.fit_exact(X, y, k, 0.1)
    Xs = np.linspace(-1, 7, 40)[:, None]
    mean, var = gp.predict(m, Xs)
    ref_mean, ref_var = naive_posterior(X, y, k, 0.1, Xs)
    np.testing.assert_allclose(mean, ref_mean, atol=1e-8)
    np.testing.assert_allclose(var, ref_var, atol=1e-8)


def test_random_batch_matches_naive_inverse():
    rng = np.random.default_rng(5)
    X = rng.standard_normal((200, 4))
    y = rng.standard_normal(200)
    k = Kernel("rational_quadratic", 0.8, 1.5, alpha=0.7)
    m = gp.fit_exact(X, y, k, 0.3)
    Xs = rng.standard_normal((50, 4))
    mean, var = gp.predict(m, Xs)
    ref_mean, ref_var = naive_posterior(X, y, k, 0.3, Xs)
    np.testing.assert_allclose(mean, ref_mean, atol=1e-8)
    np.testing.assert_allclose(var, ref_var, atol=1e-8)


def test_prior_reversion_far_from_data():
    X, y = sine()
    m = gp.fit_exact(X, y, Kernel("squared_exponential", 1.4, 0.5), 0.1)
    mean, var = gp.predict(m, [[1e3]])
    assert abs(mean[0]) < 1e-6 and abs(var[0] - 1.4**2) < 1e-6


def test_permutation_invariance():
    rng = np.random.default_rng(1)
    X = rng.standard_normal((80, 2))
    y = rng.standard_normal(80)
    perm = rng.permutation(80)
    k = Kernel("matern32", 1.0, 0.6)
    Xs = rng.standard_normal((20, 2))
    a = gp.predict(gp.fit_exact(X, y, k, 0.2), Xs)
    b = gp.predict(gp.fit_exact(X[perm], y[perm], k, 0.2), Xs)
    np.testing.assert_allclose(a[0], b[0], atol=1e-9)
    np.testing.assert_allclose(a[1], b[1], atol=1e-9)


def test_duplicate_inputs_use_jitter():
    X = np.zeros((5, 1))
    m = gp.fit_exact(X, np.ones(5), Kernel("squared_exponential", 1.0, 1.0), 0.0)
    assert 0 < m.jitter <= 1e-8
    assert np.isfinite(gp.predict(m, [[0.0]])[0]).all()


def test_factorisation_failure_reports_condition():
    A = -np.eye(3)
    with pytest.raises(gp.GpNumericalError, match="condition"):
        gp._factor(A, 1.0)


def test_unfitted_model_refuses_to_predict():
    with pytest.raises(RuntimeError):
        gp.predict(gp.GpModel(Kernel(), 0.1), [[0.0]])


def test_bad_training_shapes():
    with pytest.raises(ValueError):
        gp.fit_exact(np.zeros((3, 1)), np.zeros(4), Kernel(), 0.1)
    with pytest.raises(ValueError):
        gp.fit_exact(np.zeros((0, 1)), np.zeros(0), Kernel(), 0.1)


# -- subset of regressors -----------------------------------------------------


@pytest.mark.parametrize("kind", gp.KERNELS)
def test_sor_with_all_points_equals_exact(kind):
    rng = np.random.default_rng(3)
    X = rng.uniform(0, 5, (200, 1))
    y = np.sin(X[:, 0]) + 0.1 * rng.standard_normal(200)
    k = Kernel(kind, 1.3, 0.7)
    Xs = rng.uniform(0, 5, (100, 1))
    exact = gp.predict(gp.fit_exact(X, y, k, 0.1), Xs)[0]
    sor = gp.predict(gp.fit_sor(X, y, k, 0.1, np.arange(200)), Xs)[0]
    assert np.max(np.abs(exact - sor)) < 1e-6


def test_sor_single_point_shrinkage():
    m = gp.fit_sor([[0.0]], [2.0], Kernel("squared_exponential", 1, 1), 1.0, [0])
    assert gp.predict(m, [[0.0]])[0][0] == pytest.approx(1.0, abs=1e-12)


def test_sor_quarter_subset_beats_zero_predictor():
    X, y = sine()
    k = Kernel("squared_exponential", 1.0, 1.0)
    Xs = np.linspace(0, 2 * math.pi, 100)[:, None]
    exact = gp.predict(gp.fit_exact(X, y, k, 0.1), Xs)[0]
    sor = gp.predict(gp.fit_sor(X, y, k, 0.1, gp.default_inducing(50, 0, 12)), Xs)[0]
    assert np.sqrt(np.mean((sor - exact) ** 2)) < np.sqrt(np.mean(exact**2))


def test_sor_rejects_bad_inducing_sets():
    X, y = sine(10)
    with pytest.raises(ValueError):
        gp.fit_sor(X, y, Kernel(), 0.1, np.arange(11))
    with pytest.raises(ValueError):
        gp.fit_sor(X, y, Kernel(), 0.1, [])
    with pytest.raises(ValueError):
        gp.fit_sor(X, y, Kernel(), 0.1, [0, 10])


def test_default_inducing_subset():
    idx = gp.default_inducing(1000, seed=4, count=512)
    assert idx.size == 512 and np.unique(idx).size == 512 and idx.max() < 1000
    assert np.array_equal(idx, gp.default_inducing(1000, seed=4, count=512))
    assert gp.default_inducing(30, seed=0).size == 30


# -- marginal likelihood ------------------------------------------------------


def test_lml_matches_direct_formula():
    X, y = sine(40)
    k = Kernel("matern32", 0.9, 1.2)
    noise = 0.2
    A = k.gram(X) + noise**2 * np.eye(40)
    direct = (-0.5 * y @ np.linalg.solve(A, y) - 0.5 * np.linalg.slogdet(A)[1]
              - 20 * math.log(2 * math.pi))
    assert gp.log_marginal_likelihood(gp.distances(X), y, k, noise) == pytest.approx(direct, abs=1e-9)


@pytest.mark.parametrize("kind", gp.KERNELS)
def test_lml_gradient_matches_finite_difference(kind):
    X, y = sine(30, seed=2)
    R = gp.distances(X)
    theta = np.log([1.1, 0.8, 0.3])

    def f(t):
        return gp.log_marginal_likelihood(R, y, Kernel(kind, *np.exp(t[:2]), alpha=1.5), math.exp(t[2]))

    _, grad = gp.log_marginal_likelihood(R, y, Kernel(kind, 1.1, 0.8, alpha=1.5), 0.3, want_grad=True)
    h = 1e-5
    fd = [(f(theta + h * e) - f(theta - h * e)) / (2 * h) for e in np.eye(3)]
    np.testing.assert_allclose(grad, fd, rtol=1e-5, atol=1e-7)


def _se_draw(seed=0, n=200):
    rng = np.random.default_rng(seed)
    X = rng.uniform(0, 5, (n, 1))
    K = Kernel("squared_exponential", 1.0, 0.5).gram(X) + 1e-10 * np.eye(n)
    f = np.linalg.cholesky(K) @ rng.standard_normal(n)
    return X, f + 0.1 * rng.standard_normal(n)


def test_recovers_known_hyperparameters():
    X, y = _se_draw()
    fit = gp.optimize_hypers(X, y, "squared_exponential", seed=0)
    err = np.log([fit.kernel.signal / 1.0, fit.kernel.length / 0.5, fit.noise / 0.1])
    assert np.all(np.abs(err) < 0.5), err


def test_white_noise_suppresses_signal():
    rng = np.random.default_rng(1)
    X = rng.uniform(0, 5, (200, 1))
    fit = gp.optimize_hypers(X, rng.standard_normal(200), "squared_exponential", seed=0)
    assert fit.kernel.signal < 0.1 * fit.noise


def test_constant_targets_need_no_noise():
    X = np.linspace(0, 5, 100)[:, None]
    fit = gp.optimize_hypers(X, np.full(100, 2.0), "squared_exponential", seed=0)
    assert fit.noise < 1e-3 * fit.kernel.signal


def test_fixed_length_and_noise_are_respected():
    X, y = _se_draw(n=80)
    fit = gp.optimize_hypers(X, y, "matern52", length=0.33, noise=0.05, seed=0)
    assert fit.kernel.length == 0.33 and fit.noise == 0.05


def test_hyperparameter_subset_and_reproducibility():
    X, y = _se_draw(n=150)
    a = gp.optimize_hypers(X, y, "matern32", inducing_count=60, seed=3)
    b = gp.optimize_hypers(X, y, "matern32", inducing_count=60, seed=3)
    assert a.subset.size == 60
    assert a.kernel == b.kernel and a.noise == b.noise


def test_optimize_rejects_tiny_problems():
    with pytest.raises(ValueError):
        gp.optimize_hypers([[0.0]], [1.0], "matern52")


# -- persistence --------------------------------------------------------------


@settings(max_examples=10, deadline=None)
@given(mode=st.sampled_from(["exact", "sor"]), seed=st.integers(0, 1000))
def test_round_trip_preserves_predictions(mode, seed):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((40, 2))
    y = rng.standard_normal(40)
    k = Kernel("rational_quadratic", 1.0, 1.3, alpha=2.0)
    m = gp.fit_exact(X, y, k, 0.2) if mode == "exact" else gp.fit_sor(X, y, k, 0.2, np.arange(0, 40, 3))
    back = gp.from_dict(gp.to_dict(m))
    Xs = rng.standard_normal((10, 2))
    for a, b in zip(gp.predict(m, Xs), gp.predict(back, Xs)):
        np.testing.assert_array_equal(a, b)
