import logging

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import stats

from schrodinger_da.ensemble import Ensemble, effective_sample_size, normalize_log_weights
from schrodinger_da.exceptions import StepError
from schrodinger_da.filters_discrete import (FilterStep, bootstrap_step, enkf_step, etpf_step, etpf_transform,
                                             homotopy_kalman_update, optimal_proposal_step, schroedinger_step)
from schrodinger_da.models import GaussianMapModel, ObservationModel, SdeModel, double_well_drift
from schrodinger_da.transport import markov_from_samples, sq_distances


def ident(z):
    return z


def example_setup():
    """Eleven atoms on [-1, 1], forecast variance 0.1, R = 0.1, y = -0.5."""
    z0 = np.linspace(-1, 1, 11)[:, None]
    model = GaussianMapModel(ident, np.eye(1), 0.1)
    obs = ObservationModel.linear(np.eye(1), 0.1 * np.eye(1), np.array([-0.5]))
    return z0, model, obs


def mixture_posterior_mean(z0, s2, R, y):
    # filtering density of a Gaussian mixture forecast with a Gaussian likelihood
    z0 = z0[:, 0]
    g = stats.norm(z0, np.sqrt(s2 + R)).pdf(y)
    means = z0 + s2 / (s2 + R) * (y - z0)
    var = s2 - s2 ** 2 / (s2 + R)
    g = g / g.sum()
    m = g @ means
    v = g @ (var + means ** 2) - m ** 2
    return m, v


def test_bootstrap_flat_likelihood_keeps_uniform_weights(rng):
    z0, model, _ = example_setup()
    flat = ObservationModel.linear(np.eye(1), 1e12 * np.eye(1), np.zeros(1))
    e = bootstrap_step(Ensemble(z0), model, flat, rng)
    assert not e.info["resampled"]
    np.testing.assert_allclose(e.weights, 1.0, atol=1e-9)


def test_bootstrap_matches_mixture_posterior():
    z0, model, obs = example_setup()
    z0 = np.repeat(z0, 1000, axis=0)
    e = bootstrap_step(Ensemble(z0), model, obs, np.random.default_rng(3), tau_ess=0.0)
    mean = e.weights @ e.states[:, 0] / e.size
    m, v = mixture_posterior_mean(z0[::1000], 0.1, 0.1, -0.5)
    assert abs(mean - m) < 3 * np.sqrt(v / e.info["ess"])


def test_bootstrap_degenerate_weights_resample_to_copies():
    model = SdeModel(lambda t, z: np.zeros_like(z), 0.0, 0.5)
    obs = ObservationModel.linear(np.eye(1), 1e-6 * np.eye(1), np.array([0.0]))
    e = bootstrap_step(Ensemble(np.array([[0.0], [1.0]])), model, obs, np.random.default_rng(0), tau_ess=1.0)
    np.testing.assert_array_equal(e.states, [[0.0], [0.0]])
    assert not e.is_weighted


def test_bootstrap_evidence_independent_of_resampling():
    z0, model, obs = example_setup()
    a = bootstrap_step(Ensemble(z0), model, obs, np.random.default_rng(1), tau_ess=0.0)
    b = bootstrap_step(Ensemble(z0), model, obs, np.random.default_rng(1), tau_ess=1.0)
    assert b.info["resampled"] and not a.info["resampled"]
    assert a.info["log_evidence"] == b.info["log_evidence"]


def test_etpf_examples():
    model = SdeModel(lambda t, z: np.zeros_like(z), 0.0, 0.5)
    flat = ObservationModel.linear(np.eye(1), 1e12 * np.eye(1), np.zeros(1))
    z = np.array([[0.3], [-1.0], [2.0]])
    np.testing.assert_allclose(etpf_step(Ensemble(z), model, flat, np.random.default_rng(0)).states, z, atol=1e-9)
    out = etpf_transform(Ensemble.weighted(np.array([[0.0], [1.0]]), [2.0, 0.0]))
    np.testing.assert_array_equal(out.states, [[0.0], [0.0]])


@given(st.integers(2, 15), st.integers(1, 3), st.integers(0, 2 ** 31))
def test_etpf_preserves_weighted_mean(M, nz, seed):
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((M, nz))
    w = rng.random(M) + 0.01
    e = Ensemble.weighted(z, w)
    out = etpf_transform(e)
    np.testing.assert_allclose(out.states.mean(0), e.weights @ z / M, atol=1e-10)


def test_enkf_examples():
    z = np.array([[0.0], [2.0]])
    obs = ObservationModel.linear(np.eye(1), np.eye(1), np.array([3.0]))
    out = enkf_step(Ensemble(z), obs, None, perturbations=np.zeros((2, 1)))
    np.testing.assert_allclose(out.states[:, 0], [2.0, 8 / 3], atol=1e-14)
    # coefficients reproduce the update
    np.testing.assert_allclose(out.info["coefficients"].T @ z, out.states, atol=1e-14)
    z0 = np.array([[1.0], [-1.0]])
    np.testing.assert_allclose(out.info["transform"](z0), out.info["coefficients"].T @ z0, atol=1e-14)
    wide = ObservationModel.linear(np.eye(1), 1e14 * np.eye(1), np.array([3.0]))
    np.testing.assert_allclose(enkf_step(Ensemble(z), wide, np.random.default_rng(0)).states, z, atol=1e-5)
    with pytest.raises(ValueError):
        enkf_step(Ensemble(z[:1]), obs, None)


def test_enkf_large_ensemble_matches_kalman():
    rng = np.random.default_rng(0)
    mf, Pf, R, y = np.array([1.0, -1.0]), np.array([[1.0, 0.5], [0.5, 2.0]]), np.array([[0.5]]), np.array([0.3])
    H = np.array([[1.0, 1.0]])
    z = rng.multivariate_normal(mf, Pf, size=100_000)
    out = enkf_step(Ensemble(z), ObservationModel.linear(H, R, y), rng)
    K = Pf @ H.T @ np.linalg.inv(H @ Pf @ H.T + R)
    ma = mf + K @ (y - H @ mf)
    Pa = Pf - K @ H @ Pf
    m = out.states.mean(0)
    assert np.all(np.abs(m - ma) <= 0.02 * np.maximum(np.abs(ma), np.sqrt(np.diag(Pa))))
    np.testing.assert_allclose(np.cov(out.states, rowvar=False), Pa, rtol=0.02, atol=0.02 * np.abs(Pa).max())


def test_optimal_proposal_flat_is_prediction():
    z0, model, _ = example_setup()
    flat = ObservationModel.linear(np.eye(1), 1e12 * np.eye(1), np.zeros(1))
    e = optimal_proposal_step(Ensemble(z0), model, flat, np.random.default_rng(0))
    np.testing.assert_allclose(e.info["gamma"], 1.0, atol=1e-9)
    np.testing.assert_allclose(e.info["smoothed"].states, z0, atol=1e-9)


def test_optimal_proposal_single_particle():
    model = GaussianMapModel(ident, np.eye(1), 0.1)
    obs = ObservationModel.linear(np.eye(1), 0.1 * np.eye(1), np.array([-0.5]))
    e = optimal_proposal_step(Ensemble(np.array([[0.2]])), model, obs, np.random.default_rng(5))
    assert e.info["gamma"][0] == 1.0
    xi = np.random.default_rng(5).standard_normal((1, 1))
    assert e.states[0, 0] == pytest.approx(0.2 - 0.5 * (0.2 + 0.5) + np.sqrt(0.05) * xi[0, 0], abs=1e-14)


def test_optimal_weights_less_variable_than_bootstrap():
    z0, model, obs = example_setup()
    e_opt = optimal_proposal_step(Ensemble(z0), model, obs, np.random.default_rng(0)).info["ess"]
    ess_boot = []
    for seed in range(100):
        e = bootstrap_step(Ensemble(z0), model, obs, np.random.default_rng(seed), tau_ess=0.0)
        ess_boot.append(e.info["ess"])
    ess_boot = np.array(ess_boot)
    assert e_opt >= ess_boot.mean()
    assert np.mean(e_opt >= ess_boot) >= 0.8


def test_optimal_proposal_evidence_is_exact_predictive():
    z0, model, obs = example_setup()
    e = optimal_proposal_step(Ensemble(z0), model, obs, np.random.default_rng(0))
    want = np.log(np.mean(stats.norm(z0[:, 0], np.sqrt(0.2)).pdf(-0.5)))
    assert e.info["log_evidence"] == pytest.approx(want, abs=1e-12)


def test_schroedinger_flat_likelihood_gives_prediction_chain():
    z0, model, _ = example_setup()
    flat = ObservationModel.linear(np.eye(1), 1e12 * np.eye(1), np.zeros(1))
    e = schroedinger_step(Ensemble(z0), model, flat, K=20, rng=np.random.default_rng(0), tol=1e-11)
    z1 = e.info["forecast"]
    chain = markov_from_samples(lambda a, b: -0.5 * sq_distances(a, b) / 0.1, z1, z0, tol=1e-11)
    np.testing.assert_allclose(e.info["P"], chain.Q, atol=1e-8)


def test_schroedinger_columns_and_row_marginals():
    z0, model, obs = example_setup()
    e = schroedinger_step(Ensemble(z0), model, obs, K=50, rng=np.random.default_rng(1))
    P = e.info["P"]
    L = P.shape[0]
    np.testing.assert_allclose(P.sum(0), 1.0, atol=1e-12)
    assert np.abs(P.mean(axis=1) - e.info["weights"] / L).sum() < 1e-8
    # column kernels are pulled toward the datum overall, and move toward it
    # for atoms more than two forecast deviations away
    col_mean = P.T @ e.info["forecast"][:, 0]
    shift = col_mean - z0[:, 0]
    assert np.mean(np.abs(col_mean + 0.5)) < np.mean(np.abs(z0[:, 0] + 0.5))
    far = np.abs(z0[:, 0] + 0.5) > 2 * np.sqrt(0.1)
    assert np.all(np.sign(shift[far]) == np.sign(-0.5 - z0[far, 0]))


def test_schroedinger_permutation_equivariant():
    rng = np.random.default_rng(2)
    z0 = rng.standard_normal((8, 2))
    model = GaussianMapModel(ident, np.eye(2), 0.3)
    obs = ObservationModel.linear(np.eye(2)[:1], 0.2 * np.eye(1), np.array([0.5]))
    perm = rng.permutation(8)
    a = schroedinger_step(Ensemble(z0), model, obs, K=5, rng=np.random.default_rng(9))
    b = schroedinger_step(Ensemble(z0[perm]), model, obs, K=5, rng=np.random.default_rng(9))
    np.testing.assert_allclose(b.states, a.states[perm], atol=1e-10)


def test_schroedinger_shortcut_small_noise():
    z0 = np.linspace(-3, 3, 20)[:, None]
    model = GaussianMapModel(ident, np.eye(1), 1e-3)
    obs = ObservationModel.linear(np.eye(1), np.eye(1), np.array([0.0]))
    e = schroedinger_step(Ensemble(z0), model, obs, K=10, rng=np.random.default_rng(0))
    assert e.info["shortcut"]


def test_schroedinger_sde_model():
    z0 = np.linspace(-1.5, 0.5, 30)[:, None]
    model = SdeModel(double_well_drift, 0.5, 0.05, interval=0.5)
    obs = ObservationModel.linear(np.eye(1), 0.2 * np.eye(1), np.array([1.0]))
    e = schroedinger_step(Ensemble(z0), model, obs, rng=np.random.default_rng(0))
    assert e.info["L"] == 30
    np.testing.assert_allclose(e.info["P"].sum(0), 1, atol=1e-10)


def test_schroedinger_fallback(caplog):
    z0, model, obs = example_setup()
    with caplog.at_level(logging.WARNING):
        e = schroedinger_step(Ensemble(z0), model, obs, K=10, rng=np.random.default_rng(0), max_iter=1)
    assert e.info["fallback"]
    assert "gamma" in e.info
    assert any("falling back" in r.message for r in caplog.records)


def test_homotopy_stationary_and_flat():
    z = np.array([[1.0], [1.0], [1.0]])
    obs = ObservationModel.linear(np.eye(1), np.eye(1), np.array([1.0]))
    np.testing.assert_array_equal(homotopy_kalman_update(Ensemble(z), obs).states, z)
    z = np.array([[0.0], [1.0], [3.0]])
    wide = ObservationModel.linear(np.eye(1), 1e14 * np.eye(1), np.array([5.0]))
    np.testing.assert_allclose(homotopy_kalman_update(Ensemble(z), wide).states, z, atol=1e-10)


def test_homotopy_scalar_matches_kalman():
    rng = np.random.default_rng(0)
    z = 1.0 + np.sqrt(2.0) * rng.standard_normal((10_000, 1))
    obs = ObservationModel.linear(np.eye(1), 0.5 * np.eye(1), np.array([2.0]))
    out = homotopy_kalman_update(Ensemble(z), obs, n_steps=400)
    m, P = z.mean(), z.var(ddof=1)
    K = P / (P + 0.5)
    assert out.states.mean() == pytest.approx(m + K * (2.0 - m), rel=0.03)
    assert out.states.var(ddof=1) == pytest.approx((1 - K) * P, rel=0.03)


def test_homotopy_blowup_detected():
    z = np.array([[0.0], [1.0]])
    obs = ObservationModel(h=lambda x: np.exp(40 * x), R=np.eye(1) * 1e-8, y=np.array([0.0]))
    with pytest.raises(StepError):
        homotopy_kalman_update(Ensemble(z), obs, n_steps=2)


def test_filter_step_dispatch():
    z0, model, obs = example_setup()
    for s in ("bootstrap", "etpf", "enkf", "optimal", "schroedinger", "homotopy"):
        out = FilterStep(s)(Ensemble(z0), model, obs, np.random.default_rng(0))
        assert out.states.shape == (11, 1)
    with pytest.raises(ValueError):
        FilterStep("kalman")
    with pytest.raises(ValueError):
        FilterStep("bootstrap", tau_ess=2.0)
