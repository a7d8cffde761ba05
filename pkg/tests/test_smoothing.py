import numpy as np
import pytest
from scipy import stats

from schrodinger_da.ensemble import Ensemble
from schrodinger_da.models import GaussianMapModel, ObservationModel, SdeModel, log_likelihood, twisted_gaussian_kernel
from schrodinger_da.smoothing import (HmcConfig, PathPosterior, default_hmc_config, girsanov_log_weight, hmc_chain,
                                      hmc_sample_paths, path_log_posterior, path_potential, residuals,
                                      smoothing_resample_and_propagate, smoothing_weights, stormer_verlet,
                                      _mass_solver)


def ident(z):
    return z


def zero_drift(t, z):
    return np.zeros_like(z)


def scalar_map(R=0.1, y=-0.5, gamma=0.1):
    model = GaussianMapModel(ident, np.eye(1), gamma)
    obs = ObservationModel.linear(np.eye(1), R * np.eye(1), np.array([y]))
    return model, obs


# -- smoothing weights ---------------------------------------------------------

def test_weights_uniform_for_uninformative_likelihood():
    model, obs = scalar_map(R=1e14)
    w = smoothing_weights(Ensemble(np.linspace(-1, 1, 11)), model, obs)
    np.testing.assert_allclose(w, np.ones(11), atol=1e-12)


def test_weights_closed_form_on_eleven_atoms():
    model, obs = scalar_map()
    z0 = np.linspace(-1, 1, 11)
    w = smoothing_weights(Ensemble(z0), model, obs)
    g = np.exp(-(z0 + 0.5) ** 2 / 0.4)
    np.testing.assert_allclose(w, 11 * g / g.sum(), rtol=1e-12)
    assert w.sum() == pytest.approx(11, abs=1e-12)
    # -0.6 and -0.4 are equidistant from the datum
    assert w[2] == pytest.approx(w[3], rel=1e-12)
    assert w[2:4].min() > np.delete(w, [2, 3]).max()


def test_weights_peak_at_atom_nearest_datum():
    model, obs = scalar_map()
    z0 = -1 + 2 * np.arange(11) / 11
    w = smoothing_weights(Ensemble(z0), model, obs)
    assert z0[np.argmax(w)] == pytest.approx(-0.4545454545, abs=1e-9)


def test_single_atom_weight_is_one():
    model, obs = scalar_map()
    np.testing.assert_allclose(smoothing_weights(Ensemble(np.array([0.3])), model, obs), [1.0], atol=1e-15)


def test_weights_match_twisted_kernel(rng):
    A = rng.standard_normal((2, 2))
    B = np.array([[1.0, 0.3], [0.3, 0.5]])
    H = np.array([[1.0, -0.5]])
    model = GaussianMapModel(lambda z: z @ A.T, B, 0.4)
    obs = ObservationModel.linear(H, 0.3 * np.eye(1), np.array([0.7]))
    z0 = rng.standard_normal((7, 2))
    w = smoothing_weights(Ensemble(z0), model, obs)
    lp = twisted_gaussian_kernel(model, H, obs.y, obs.R).log_psi_hat(z0)
    ref = np.exp(lp - lp.max())
    np.testing.assert_allclose(w, 7 * ref / ref.sum(), rtol=1e-12)


def test_prior_weights_multiply_in():
    model, obs = scalar_map()
    z0 = np.array([-0.5, 0.5])
    lw = np.log([3.0, 1.0])
    w = smoothing_weights(Ensemble(z0, lw), model, obs)
    w0 = smoothing_weights(Ensemble(z0), model, obs)
    r = w0 * [3, 1]
    np.testing.assert_allclose(w, 2 * r / r.sum(), rtol=1e-12)


def test_nonlinear_operator_rejected():
    model, _ = scalar_map()
    obs = ObservationModel(h=lambda z: z ** 3, R=np.eye(1), y=np.zeros(1))
    with pytest.raises(TypeError):
        smoothing_weights(Ensemble(np.zeros(3)), model, obs)


def test_resample_and_propagate_returns_equal_weights(rng):
    model, obs = scalar_map()
    out = smoothing_resample_and_propagate(Ensemble(np.linspace(-1, 1, 11)), model, obs, rng)
    assert out.states.shape == (11, 1)
    assert out.log_weights is None


# -- path densities ------------------------------------------------------------

def path_posterior(N=10, gamma=1.0, drift=zero_drift, anchors=(0.0,), R=0.5, y=1.0, **kw):
    model = SdeModel(drift, gamma, 1.0 / N)
    obs = ObservationModel.linear(np.eye(1), R * np.eye(1), np.array([y]))
    return PathPosterior(model, np.asarray(anchors, float), obs, **kw)


def test_constant_path_density_is_likelihood():
    post = path_posterior(anchors=(0.0, 1.0))
    for a in (0.0, 1.0):
        z = np.full(11, a)
        expected = np.log(0.5) + log_likelihood(post.obs, np.array([a]))
        assert path_log_posterior(z, post) == pytest.approx(float(expected), abs=1e-12)


def test_single_step_kinetic_term():
    post = path_posterior(N=1, gamma=1.0, anchors=(0.0,))
    z = np.array([0.0, 1.0])
    lp = path_log_posterior(z, post) - float(log_likelihood(post.obs, np.array([1.0])))
    assert lp == pytest.approx(-0.5, abs=1e-14)


def test_path_off_atom_has_zero_density():
    post = path_posterior(anchors=(0.0,))
    assert path_log_posterior(np.full(11, 0.2), post) == -np.inf


def test_constant_drift_shifts_residuals():
    c, N, g = 0.7, 5, 2.0
    post = path_posterior(N=N, gamma=g, drift=lambda t, z: np.full_like(z, c))
    rng = np.random.default_rng(3)
    z = np.concatenate([[0.0], np.cumsum(rng.standard_normal(N))])
    dt = 1.0 / N
    eta = (np.diff(z) - c * dt) / np.sqrt(g)
    np.testing.assert_allclose(residuals(z[:, None], post.model)[:, 0], eta, rtol=1e-14)
    expected = -0.5 * np.sum(eta ** 2) / dt + float(log_likelihood(post.obs, np.array([z[-1]])))
    assert path_log_posterior(z, post) == pytest.approx(expected, abs=1e-12)


def test_relaxed_prior_density():
    post = path_posterior(anchors=(-1.0, 1.0), relaxation=0.04)
    z0 = np.array([0.3])
    expected = np.log(0.5 * stats.norm(-1, 0.2).pdf(0.3) + 0.5 * stats.norm(1, 0.2).pdf(0.3))
    assert post.log_prior0(z0) == pytest.approx(expected, rel=1e-12)


def test_longer_interval_uses_its_own_step():
    model = SdeModel(zero_drift, 1.0, 0.5, interval=2.0)
    obs = ObservationModel.linear(np.eye(1), np.eye(1), np.zeros(1))
    post = PathPosterior(model, np.zeros(1), obs)
    z = np.array([0.0, 1.0, 1.0, 1.0, 1.0])
    lp = path_log_posterior(z, post) - float(log_likelihood(obs, np.array([1.0])))
    assert post.n_steps == 4
    assert lp == pytest.approx(-1.0, abs=1e-14)


# -- Girsanov weights ----------------------------------------------------------

def test_girsanov_zero_control():
    model = SdeModel(zero_drift, 1.0, 0.25)
    rng = np.random.default_rng(0)
    paths = np.cumsum(rng.standard_normal((6, 5, 2)), axis=1)
    np.testing.assert_array_equal(girsanov_log_weight(paths, np.zeros((6, 4, 2)), model), np.zeros(6))


def test_girsanov_two_step_hand_value():
    dt, u = 0.5, 0.3
    model = SdeModel(zero_drift, 1.0, dt)
    xi = np.array([0.7, -1.2])
    z = np.zeros(3)
    for n in range(2):
        z[n + 1] = z[n] + u * dt + np.sqrt(dt) * xi[n]
    lw = girsanov_log_weight(z[:, None], np.full((2, 1), u), model)
    # -(1/2)(2 u^2 dt + 2 u sqrt(dt) (xi_1 + xi_2))
    assert lw == pytest.approx(0.06106601717798213, abs=1e-14)


def test_girsanov_reweighting_recovers_forecast_mean():
    M, N = 10_000, 20
    model = SdeModel(lambda t, z: -z, 1.0, 1.0 / N)
    rng = np.random.default_rng(11)
    z = np.full((M, 1), 0.5)
    paths = [z]
    u = np.ones((M, N, 1))
    for n in range(N):
        z = z + model.dt * (-z + u[:, n]) + np.sqrt(model.dt) * rng.standard_normal((M, 1))
        paths.append(z)
    paths = np.stack(paths, axis=1)
    lw = girsanov_log_weight(paths, u, model)
    w = np.exp(lw - lw.max())
    w /= w.sum()
    zN = paths[:, -1, 0]
    mean = w @ zN
    se = np.sqrt(w @ (zN - mean) ** 2 / (1.0 / np.sum(w ** 2)))
    exact = 0.5 * (1 - model.dt) ** N
    assert abs(mean - exact) < 3 * se
    # the controlled ensemble itself is far off
    assert abs(zN.mean() - exact) > 10 * se


# -- Stormer-Verlet and HMC ----------------------------------------------------

def spd(rng, n):
    A = rng.standard_normal((n, n))
    return A @ A.T + 0.5 * np.eye(n)


@pytest.mark.parametrize("dtau", [0.1, 1.0, 10.0])
def test_modified_mass_conserves_quadratic_energy(dtau):
    rng = np.random.default_rng(5)
    P = spd(rng, 4)
    V = lambda x: 0.5 * x @ P @ x
    grad = lambda x: P @ x
    cfg = HmcConfig(dtau, n_leapfrog=7, precision=P, n_iter=50)
    res = hmc_chain(rng.standard_normal(4), V, grad, cfg, rng)
    assert res.acceptance_rate == 1.0
    assert res.n_nonfinite == 0
    x = res.samples
    H = 0.5 * np.einsum("ki,ij,kj->k", x, P, x)
    scale = np.maximum(1.0, H)
    assert np.max(np.abs(res.energy_errors) / scale) <= 1e-12


@pytest.mark.parametrize("dtau", [0.1, 1.0, 10.0])
def test_single_step_conserves_quadratic_energy(dtau):
    rng = np.random.default_rng(6)
    P = spd(rng, 3)
    solve = _mass_solver(P, dtau, 3)
    x, p = rng.standard_normal(3), rng.standard_normal(3)
    H0 = 0.5 * p @ p + 0.5 * x @ P @ x
    x1, p1 = stormer_verlet(x, p, lambda v: P @ v, dtau, solve)
    H1 = 0.5 * p1 @ p1 + 0.5 * x1 @ P @ x1
    assert abs(H1 - H0) <= 1e-12 * H0


def test_stormer_verlet_is_reversible():
    rng = np.random.default_rng(8)
    P = spd(rng, 3)
    grad = lambda x: P @ x + np.sin(x) + x ** 3
    solve = _mass_solver(P, 0.3, 3)
    x0, p0 = rng.standard_normal(3), rng.standard_normal(3)
    x1, p1 = stormer_verlet(x0, p0, grad, 0.3, solve)
    x2, p2 = stormer_verlet(x1, -p1, grad, 0.3, solve)
    np.testing.assert_allclose(x2, x0, atol=1e-12)
    np.testing.assert_allclose(p2, -p0, atol=1e-12)


@pytest.mark.parametrize("dtau", [0.1, 1.0, 10.0])
def test_equilibrium_is_fixed(dtau):
    P = np.diag([1.0, 4.0])
    grad = lambda x: P @ x + x ** 3
    x, p = np.zeros(2), np.zeros(2)
    for _ in range(5):
        x, p = stormer_verlet(x, p, grad, dtau, _mass_solver(P, dtau, 2))
    np.testing.assert_array_equal(x, 0.0)
    np.testing.assert_array_equal(p, 0.0)


def test_nonfinite_energy_rejected():
    V = lambda x: np.inf if x[0] > 0.5 else 0.5 * x @ x
    cfg = HmcConfig(0.5, n_leapfrog=5, n_iter=200)
    res = hmc_chain(np.zeros(1), V, lambda x: x, cfg, np.random.default_rng(2))
    assert res.n_nonfinite > 0
    assert np.all(res.samples <= 0.5)


def test_dtau_must_be_positive():
    with pytest.raises(ValueError):
        HmcConfig(0.0)


def test_default_config():
    cfg = default_hmc_config(SdeModel(zero_drift, 1.0, 0.04))
    assert cfg.dtau == pytest.approx(0.1)
    assert cfg.n_leapfrog == 10


def test_gaussian_chi_squared():
    rng = np.random.default_rng(21)
    S = np.array([[1.0, 0.5], [0.5, 2.0]])
    P = np.linalg.inv(S)
    cfg = HmcConfig(0.4, n_leapfrog=4, n_iter=100_000)
    res = hmc_chain(np.zeros(2), lambda x: 0.5 * x @ P @ x, lambda x: P @ x, cfg, rng)
    x = res.samples
    d2 = np.einsum("ki,ij,kj->k", x, P, x)
    edges = stats.chi2(2).ppf(np.linspace(0, 1, 11))
    counts, _ = np.histogram(d2, edges)
    assert stats.chisquare(counts).pvalue > 0.01


def batch_se(x, n_batches=50):
    b = x[: len(x) // n_batches * n_batches].reshape(n_batches, -1).mean(1)
    return b.std(ddof=1) / np.sqrt(n_batches)


def test_brownian_bridge_moments():
    # z_0 = 0, W at t = 1 observed with R = 0.5, y = 1: z_N ~ N(2/3, 1/3)
    post = path_posterior(N=10, gamma=1.0, anchors=(0.0,))
    cfg = HmcConfig(0.15, n_leapfrog=10, n_iter=6000)
    res = hmc_sample_paths(post, cfg, np.random.default_rng(4), anchor=0)
    z = res.samples[1000:, :, 0]
    assert np.all(res.samples[:, 0, 0] == 0.0)
    assert res.acceptance_rate > 0.5
    t = np.linspace(0, 1, 11)
    for n in (5, 10):
        m = t[n] * 2 / 3
        v = t[n] * (1 - t[n]) + t[n] ** 2 / 3
        assert abs(z[:, n].mean() - m) < 3 * batch_se(z[:, n])
        assert abs(z[:, n].var() - v) < 3 * batch_se((z[:, n] - m) ** 2)


def test_path_potential_gradient_matches_finite_differences():
    post = path_posterior(N=4, gamma=0.5, drift=lambda t, z: np.sin(z) - z ** 3 + t, anchors=(0.2,))
    V, grad, precision, unpack = path_potential(post, anchor=0)
    x = np.random.default_rng(1).standard_normal(4)
    g = grad(x)
    e = 1e-6
    fd = np.array([(V(x + e * d) - V(x - e * d)) / (2 * e) for d in np.eye(4)])
    np.testing.assert_allclose(g, fd, rtol=1e-5, atol=1e-6)
    assert unpack(x)[0, 0] == 0.2
    assert precision.shape == (4, 4)


def test_relaxed_sampling_moves_start():
    post = path_posterior(N=5, anchors=(-1.0, 1.0), relaxation=0.05)
    res = hmc_sample_paths(post, HmcConfig(0.1, n_iter=300), np.random.default_rng(9))
    assert res.samples.shape == (300, 6, 1)
    assert np.unique(res.samples[:, 0, 0]).size > 10
    with pytest.raises(ValueError):
        path_potential(path_posterior(anchors=(0.0,)))
