import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_instance
from lookahead_bo.gp import (
    DEFAULT_BOUNDS,
    Dataset,
    FactorizationError,
    FitWarning,
    FittedGP,
    Hyperparameters,
    _cholesky,
    condition,
    fit_hyperparameters,
    kernel_eval,
    kernel_matrix,
    log_marginal_likelihood,
    posterior,
    posterior_input_gradient,
    sample_posterior,
)


def dense_kernel(A, ta, B, tb, hyp):
    """Pairwise loop over the product squared-exponential kernel."""
    K = np.empty((len(A), len(B)))
    for i in range(len(A)):
        for j in range(len(B)):
            r2 = sum((a - b) ** 2 for a, b in zip(A[i], B[j]))
            K[i, j] = hyp.output_scale * math.exp(
                -r2 / (2 * hyp.theta_x**2) - (ta[i] - tb[j]) ** 2 / (2 * hyp.theta_t**2))
    return K


def dense_posterior(data, hyp, x, t, offset=None):
    offset = float(np.mean(data.y)) if offset is None else offset
    K = dense_kernel(data.X, data.t, data.X, data.t, hyp) + hyp.noise_variance * np.eye(data.n)
    k = dense_kernel(data.X, data.t, [x], [t], hyp)[:, 0]
    Kinv = np.linalg.inv(K)
    return offset + k @ Kinv @ (data.y - offset), hyp.output_scale - k @ Kinv @ k


# -- kernel ----------------------------------------------------------------


def test_kernel_at_zero_distance_is_output_scale():
    hyp = Hyperparameters(0.3, 1.0, 0.0, 1.0)
    assert kernel_eval(([0.2, 0.4], 1.0), ([0.2, 0.4], 1.0), hyp) == 1.0


def test_kernel_at_sqrt2_lengthscales_is_inverse_e():
    hyp = Hyperparameters(0.3, 1.0, 0.0, 1.0)
    x = np.array([0.1, 0.2])
    step = np.array([1.0, 0.0]) * 0.3 * math.sqrt(2)
    assert kernel_eval((x, 0.5), (x + step, 0.5), hyp) == pytest.approx(math.exp(-1), abs=1e-6)


def test_kernel_one_lengthscale_in_space_and_time_is_inverse_e():
    hyp = Hyperparameters(0.25, 0.7, 0.0, 1.0)
    v = kernel_eval(([0.5], 1.0), ([0.75], 1.7), hyp)
    assert v == pytest.approx(0.367879, abs=1e-6)


@pytest.mark.parametrize("bad", [math.nan, math.inf])
def test_kernel_rejects_non_finite_inputs(bad):
    hyp = Hyperparameters(0.3, 1.0, 0.0, 1.0)
    with pytest.raises(ValueError):
        kernel_eval(([bad], 0.0), ([0.1], 0.0), hyp)
    with pytest.raises(ValueError):
        kernel_eval(([0.1], bad), ([0.1], 0.0), hyp)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31), n=st.integers(2, 25), d=st.integers(1, 3))
def test_gram_matrices_are_symmetric_positive_semidefinite(seed, n, d):
    r = np.random.default_rng(seed)
    hyp = Hyperparameters(r.uniform(0.05, 2), r.uniform(0.05, 2), 0.0, r.uniform(0.1, 3))
    X = r.uniform(size=(n, d))
    t = r.uniform(0, 3, size=n)
    K = kernel_matrix(X, t, X, t, hyp)
    np.testing.assert_array_equal(K, K.T)
    assert np.linalg.eigvalsh(K).min() >= -1e-10 * hyp.output_scale
    assert np.all(K > 0) and np.all(K <= hyp.output_scale)


def test_hyperparameter_validation():
    for args in [(0, 1, 0, 1), (1, -1, 0, 1), (1, 1, -1e-3, 1), (1, 1, 0, 0)]:
        with pytest.raises(ValueError):
            Hyperparameters(*args)


def test_dataset_requires_strictly_increasing_times():
    with pytest.raises(ValueError):
        Dataset([[0.1], [0.2]], [1.0, 1.0], [0.0, 0.0])
    with pytest.raises(ValueError):
        Dataset([[0.1], [0.2]], [1.0, 0.5], [0.0, 0.0])


def test_dataset_arrays_are_read_only():
    data = Dataset([[0.1], [0.2]], [0.0, 1.0], [1.0, 2.0])
    with pytest.raises(ValueError):
        data.y[0] = 5.0


# -- marginal likelihood ---------------------------------------------------


def test_log_marginal_likelihood_single_zero_observation():
    data = Dataset([[0.5]], [0.0], [0.0])
    hyp = Hyperparameters(0.2, 1.0, 0.0, 1.0)
    assert log_marginal_likelihood(data, hyp) == pytest.approx(-0.918939, abs=1e-6)


def test_log_marginal_likelihood_single_unit_observation():
    data = Dataset([[0.5]], [0.0], [1.0])
    hyp = Hyperparameters(0.2, 1.0, 0.0, 1.0)
    assert log_marginal_likelihood(data, hyp) == pytest.approx(-1.418939, abs=1e-6)


def test_log_marginal_likelihood_matches_dense_formula(rng):
    _, data, hyp = random_instance(rng, n=5, d=2)
    K = dense_kernel(data.X, data.t, data.X, data.t, hyp) + hyp.noise_variance * np.eye(5)
    _, logdet = np.linalg.slogdet(K)
    ref = -0.5 * data.y @ np.linalg.solve(K, data.y) - 0.5 * logdet - 2.5 * math.log(2 * math.pi)
    assert log_marginal_likelihood(data, hyp) == pytest.approx(ref, abs=1e-10)


def test_factorization_failure_reports_diagnostics():
    A = np.array([[1.0, 2.0], [2.0, 1.0]])
    with pytest.raises(FactorizationError, match="min eigenvalue"):
        _cholesky(A, 1.0)


def test_jitter_rescues_singular_gram_matrix():
    X = np.array([[0.3], [0.3]])
    hyp = Hyperparameters(0.2, 1e9, 0.0, 1.0)
    gp = FittedGP(Dataset(X, [0.0, 1.0], [1.0, 1.0]), hyp)
    assert 0 < gp.jitter <= 1e-4
    mean, var = gp.posterior(([0.3], 1.0))
    assert mean == pytest.approx(1.0, abs=1e-6)


# -- fitting ---------------------------------------------------------------


def test_fit_beats_every_start(rng):
    _, data, _ = random_instance(rng, n=15, d=2)
    seed = 7
    hyp = fit_hyperparameters(data, n_starts=6, rng=np.random.default_rng(seed))
    # the fitter draws its log-uniform starts first from the generator
    lo = np.log([DEFAULT_BOUNDS[k][0] for k in DEFAULT_BOUNDS])
    hi = np.log([DEFAULT_BOUNDS[k][1] for k in DEFAULT_BOUNDS])
    starts = np.exp(np.random.default_rng(seed).uniform(lo, hi, size=(6, 4)))
    offset = float(np.mean(data.y))
    best = log_marginal_likelihood(data, hyp, offset)
    for s in starts:
        assert best >= log_marginal_likelihood(data, Hyperparameters(*s), offset) - 1e-9
    for name, (lo_b, hi_b) in DEFAULT_BOUNDS.items():
        assert lo_b <= getattr(hyp, name) <= hi_b


def test_fit_recovers_generating_lengthscales():
    r = np.random.default_rng(11)
    truth = Hyperparameters(0.2, 1.0, 1e-3, 1.0)
    n = 60
    X = r.uniform(size=(n, 1))
    t = np.sort(r.uniform(0, 5, size=n))
    K = kernel_matrix(X, t, X, t, truth) + truth.noise_variance * np.eye(n)
    y = np.linalg.cholesky(K) @ r.standard_normal(n)
    hyp = fit_hyperparameters(Dataset(X, t, y), rng=np.random.default_rng(0))
    assert 0.1 <= hyp.theta_x <= 0.4
    assert 0.5 <= hyp.theta_t <= 2.0


def test_fit_drives_noise_to_lower_bound_on_noiseless_linear_data():
    X = np.linspace(0, 1, 12)[:, None]
    t = np.linspace(0, 1, 12) ** 2 + np.linspace(0, 0.5, 12)
    y = 0.8 * X[:, 0] - 0.3 * t + 0.1
    data = Dataset(X, t, y)
    hyp = fit_hyperparameters(data, rng=np.random.default_rng(0))
    lo = DEFAULT_BOUNDS["noise_variance"][0]
    assert hyp.noise_variance <= 10 * lo
    # dense grid over the noise variance, other parameters at the fit
    offset = float(np.mean(y))
    grid = np.geomspace(lo, 1.0, 25)
    vals = []
    for s2 in grid:
        h = Hyperparameters(hyp.theta_x, hyp.theta_t, s2, hyp.output_scale)
        vals.append(log_marginal_likelihood(data, h, offset))
    assert int(np.argmax(vals)) == 0


def test_fit_warns_when_no_start_improves():
    data = Dataset([[0.1], [0.9]], [0.0, 1.0], [0.3, -0.2])
    bounds = {"theta_x": (0.5, 0.5), "theta_t": (1.0, 1.0), "noise_variance": (1e-3, 1e-3),
              "output_scale": (1e-2, 1e-2 * (1 + 1e-15))}
    with pytest.warns(FitWarning):
        fit_hyperparameters(data, bounds=bounds, n_starts=2, rng=np.random.default_rng(0))


def test_fit_pins_parameters_with_equal_bounds(rng):
    _, data, _ = random_instance(rng, n=10, d=1)
    hyp = fit_hyperparameters(data, bounds={"noise_variance": (1e-3, 1e-3)},
                              rng=np.random.default_rng(1))
    assert hyp.noise_variance == pytest.approx(1e-3, rel=1e-12)


def test_fit_needs_two_observations():
    with pytest.raises(ValueError):
        fit_hyperparameters(Dataset([[0.1]], [0.0], [0.0]))


# -- posterior -------------------------------------------------------------


def test_prior_moments():
    hyp = Hyperparameters(0.2, 1.0, 1e-3, 1.7)
    gp = FittedGP(Dataset.empty(2), hyp)
    m = posterior(gp, ([0.3, 0.3], 2.0))
    assert m.mean == 0.0 and m.variance == 1.7


def test_noiseless_interpolation_at_observed_point():
    hyp = Hyperparameters(0.2, 1.0, 0.0, 1.0)
    gp = FittedGP(Dataset([[0.4]], [1.0], [0.77]), hyp)
    m = posterior(gp, ([0.4], 1.0))
    assert m.mean == pytest.approx(0.77, abs=1e-12)
    assert m.variance == pytest.approx(0.0, abs=1e-12)


def test_posterior_matches_dense_solve(rng):
    gp, data, hyp = random_instance(rng, n=10, d=2)
    for _ in range(5):
        x, t = rng.uniform(size=2), rng.uniform(0, 3)
        mean, var = posterior(gp, (x, t))
        m_ref, v_ref = dense_posterior(data, hyp, x, t)
        assert mean == pytest.approx(m_ref, rel=1e-8, abs=1e-10)
        assert var == pytest.approx(v_ref, rel=1e-8, abs=1e-10)


def test_factor_reproduces_covariance(rng):
    gp, data, hyp = random_instance(rng, n=15, d=3)
    A = kernel_matrix(data.X, data.t, data.X, data.t, hyp) + (hyp.noise_variance + gp.jitter) * np.eye(15)
    L = gp.factor
    assert np.max(np.abs(L @ L.T - A)) <= 1e-10 * np.max(np.abs(A))
    assert not L.flags.writeable


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_posterior_variance_never_exceeds_prior(seed):
    r = np.random.default_rng(seed)
    gp, _, hyp = random_instance(r)
    X = r.uniform(-0.5, 1.5, size=(20, gp.dim))
    _, var = gp.predict(X, r.uniform(-1, 4))
    assert np.all(var >= 0) and np.all(var <= hyp.output_scale)


# -- conditioning ----------------------------------------------------------


def test_condition_far_away_leaves_prior_moments():
    hyp = Hyperparameters(0.05, 0.05, 1e-3, 1.0)
    gp = FittedGP(Dataset.empty(1), hyp)
    g1 = condition(gp, ([0.0], 0.0), 3.0)
    m = posterior(g1, ([1.0], 10.0))
    assert m.mean == pytest.approx(0.0, abs=1e-12)
    assert m.variance == pytest.approx(1.0, abs=1e-12)


def test_condition_matches_full_refit(rng):
    for _ in range(20):
        gp, data, hyp = random_instance(rng)
        x, t, y = rng.uniform(size=gp.dim), data.last_time + rng.uniform(0.01, 1), rng.normal()
        g1 = condition(gp, (x, t), y)
        ref = FittedGP(data.append(x, t, y), hyp, mean_offset=gp.mean_offset)
        Q = rng.uniform(size=(5, gp.dim))
        for a, b in zip(g1.predict(Q, t + 0.3), ref.predict(Q, t + 0.3)):
            np.testing.assert_allclose(a, b, rtol=1e-8, atol=1e-10)


def test_condition_leaves_parent_unchanged(rng):
    gp, data, _ = random_instance(rng, n=6, d=1)
    before = gp.predict([[0.3]], 5.0)
    condition(gp, ([0.3], data.last_time + 1), 4.0)
    assert gp.n == 6
    np.testing.assert_array_equal(before[0], gp.predict([[0.3]], 5.0)[0])


def test_condition_at_predicted_mean_keeps_mean(rng):
    gp, data, _ = random_instance(rng, n=8, d=2)
    p = (rng.uniform(size=2), data.last_time + 0.5)
    m = posterior(gp, p)
    g1 = condition(gp, p, m.mean)
    assert posterior(g1, p).mean == pytest.approx(m.mean, abs=1e-10)
    assert posterior(g1, p).variance <= m.variance


def test_condition_rejects_past_times(rng):
    gp, data, _ = random_instance(rng, n=4, d=1)
    with pytest.raises(ValueError):
        condition(gp, ([0.5], data.last_time), 0.0)


def test_condition_falls_back_on_degenerate_pivot():
    hyp = Hyperparameters(0.2, 1e8, 0.0, 1.0)
    gp = FittedGP(Dataset([[0.5]], [0.0], [1.0]), hyp)
    g1 = condition(gp, ([0.5], 1.0), 1.0)
    m = posterior(g1, ([0.5], 1.0))
    assert math.isfinite(m.mean) and m.mean == pytest.approx(1.0, abs=1e-6)


def test_tower_property_by_quadrature(rng):
    gp, data, hyp = random_instance(rng, n=7, d=2)
    p = (rng.uniform(size=2), data.last_time + 0.4)
    q = (rng.uniform(size=2), data.last_time + 0.9)
    m, v = posterior(gp, p)
    nodes, weights = np.polynomial.hermite_e.hermegauss(40)
    weights = weights / weights.sum()
    s = math.sqrt(v + hyp.noise_variance)
    avg = sum(w * posterior(condition(gp, p, m + s * g), q).mean for g, w in zip(nodes, weights))
    assert avg == pytest.approx(posterior(gp, q).mean, abs=1e-6)


# -- gradients and sampling --------------------------------------------------


def test_prior_gradients_vanish():
    gp = FittedGP(Dataset.empty(2), Hyperparameters(0.2, 1.0, 1e-3, 1.0))
    dm, ds = posterior_input_gradient(gp, ([0.3, 0.6], 1.0))
    np.testing.assert_array_equal(dm, 0.0)
    np.testing.assert_array_equal(ds, 0.0)


def test_symmetric_layout_has_flat_mean_at_midpoint():
    hyp = Hyperparameters(0.2, 1.0, 1e-3, 1.0)
    gp = FittedGP(Dataset([[0.3], [0.7]], [0.0, 0.5], [1.0, 1.0]), hyp)
    dm, _ = posterior_input_gradient(gp, ([0.5], 0.25))
    assert dm[0] == pytest.approx(0.0, abs=1e-12)


def test_input_gradient_matches_finite_differences(rng):
    h = 1e-5
    for _ in range(10):
        gp, data, _ = random_instance(rng)
        x, t = rng.uniform(0.1, 0.9, size=gp.dim), rng.uniform(0, 3)
        dm, ds = posterior_input_gradient(gp, (x, t))
        for k in range(gp.dim):
            e = np.zeros(gp.dim)
            e[k] = h
            mp, vp = posterior(gp, (x + e, t))
            mm, vm = posterior(gp, (x - e, t))
            fdm = (mp - mm) / (2 * h)
            fds = (math.sqrt(vp) - math.sqrt(vm)) / (2 * h)
            assert dm[k] == pytest.approx(fdm, rel=1e-4, abs=1e-7)
            assert ds[k] == pytest.approx(fds, rel=1e-4, abs=1e-7)


def test_zero_variance_gives_zero_sd_gradient():
    hyp = Hyperparameters(0.2, 1.0, 0.0, 1.0)
    gp = FittedGP(Dataset([[0.4]], [1.0], [0.77]), hyp)
    _, ds = posterior_input_gradient(gp, ([0.4], 1.0))
    np.testing.assert_array_equal(ds, 0.0)


def test_sample_posterior_mean_and_unit_draws(rng):
    prior = FittedGP(Dataset.empty(1), Hyperparameters(0.2, 1.0, 1e-3, 1.0))
    assert sample_posterior(prior, ([0.2], 0.0), 1.0) == 1.0
    gp, data, _ = random_instance(rng, n=5, d=1)
    q = ([0.4], 1.0)
    assert sample_posterior(gp, q, 0.0) == posterior(gp, q).mean


def test_sample_posterior_empirical_mean(rng):
    gp, _, _ = random_instance(rng, n=5, d=1)
    q = ([0.4], 1.0)
    m, v = posterior(gp, q)
    draws = np.array([sample_posterior(gp, q, g) for g in rng.standard_normal(100_000)])
    assert abs(draws.mean() - m) <= 4 * math.sqrt(v / draws.size)


def test_fitted_gp_is_picklable_and_cache_is_per_instance(rng):
    import pickle

    gp, _, _ = random_instance(rng, n=4, d=1)
    gp.cache()["k"] = 1
    clone = pickle.loads(pickle.dumps(gp))
    np.testing.assert_array_equal(clone.factor, gp.factor)
    assert clone.cache() == {} or clone.cache() is not gp.cache()
