"""One assimilation cycle: forecast from t=0 to t=1, then condition on y.

Scenario (A) filters weight or transform the forecast (bootstrap, ETPF,
EnKF), scenario (B) resamples at t=0 with the smoothing weights and draws
from the optimal proposal, scenario (C) solves the discrete Schroedinger
problem between the prior atoms and the weighted forecast.

All steps return a new :class:`Ensemble`; diagnostics (effective sample
size, log-evidence, couplings) are placed in ``ensemble.info``.
"""
import logging
import zlib
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp
import scipy.linalg as sla

from .ensemble import Ensemble, effective_sample_size, normalize_log_weights
from .exceptions import ConvergenceError, StepError
from .models import (GaussianMapModel, ObservationModel, SdeModel, euler_maruyama_paths,
                     gaussian_logpdf, log_likelihood, make_rng, twisted_gaussian_kernel)
from .transport import (ot_resampling_matrix, sample_columns, sinkhorn, sde_markov_chains,
                        compose_sde_markov)

log = logging.getLogger(__name__)

SCENARIOS = ("bootstrap", "etpf", "enkf", "optimal", "schroedinger", "homotopy")


@dataclass(frozen=True)
class FilterStep:
    """Scenario tag plus its knobs. Calling it performs one cycle."""

    scenario: str = "bootstrap"
    K: int = 0  # oversampling for scenario C, 0 picks the model default
    tau_ess: float = 0.5
    n_homotopy: int = 100

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ValueError(f"unknown scenario {self.scenario!r}")
        if self.K < 0:
            raise ValueError("K must be >= 1 (or 0 for the default)")
        if not 0.0 <= self.tau_ess <= 1.0:
            raise ValueError("tau_ess must lie in [0, 1]")

    def __call__(self, prior, model, obs, rng):
        s = self.scenario
        if s == "bootstrap":
            return bootstrap_step(prior, model, obs, rng, tau_ess=self.tau_ess)
        if s == "etpf":
            return etpf_step(prior, model, obs, rng)
        if s == "enkf":
            return enkf_step(forecast(prior, model, rng), obs, rng)
        if s == "optimal":
            return optimal_proposal_step(prior, model, obs, rng)
        if s == "schroedinger":
            return schroedinger_step(prior, model, obs, K=self.K or None, rng=rng)
        return homotopy_kalman_update(forecast(prior, model, rng), obs, self.n_homotopy)


def _seed_from(rng):
    return int(rng.integers(0, 2 ** 63 - 1))


def forecast_states(states, model, rng):
    """Propagate each row of ``states`` once through the model."""
    if isinstance(model, GaussianMapModel):
        return model.sample(states, rng)
    if isinstance(model, SdeModel):
        return euler_maruyama_paths(model, states, _seed_from(rng))[:, -1]
    raise TypeError(f"unsupported model type {type(model).__name__}")


def forecast(prior: Ensemble, model, rng) -> Ensemble:
    """Forecast ensemble; prior weights are carried along."""
    return Ensemble(forecast_states(prior.states, model, rng), prior.log_weights)


def _weigh(fc: Ensemble, obs):
    ll = np.atleast_1d(log_likelihood(obs, fc.states))
    M = fc.size
    prior_lw = np.zeros(M) if fc.log_weights is None else np.log(fc.weights)
    logw = prior_lw + ll
    log_evidence = logsumexp(logw) - np.log(M)
    return logw, log_evidence


def ot_resample(states, weights, rng):
    """Draw one particle per column of the OT coupling."""
    c = ot_resampling_matrix(states, weights)
    idx = sample_columns(c.P, rng)
    return states[idx], idx


def bootstrap_step(prior: Ensemble, model, obs: ObservationModel, rng, tau_ess=0.5) -> Ensemble:
    """Forecast, weight by the likelihood, resample if M_eff/M < tau_ess."""
    fc = forecast(prior, model, rng)
    logw, log_ev = _weigh(fc, obs)
    w = normalize_log_weights(logw)
    M = fc.size
    ess = effective_sample_size(w)
    info = {"ess": ess, "log_evidence": log_ev, "forecast": fc.states, "resampled": False}
    if ess / M < tau_ess:
        states, idx = ot_resample(fc.states, w, rng)
        info.update(resampled=True, indices=idx)
        return Ensemble(states, info=info)
    return Ensemble(fc.states, logw, info=info)


def etpf_transform(weighted: Ensemble) -> Ensemble:
    """Deterministic transform zhat_j = sum_i z_i p_ij of a weighted ensemble."""
    w = weighted.weights
    c = ot_resampling_matrix(weighted.states, w)
    states = np.asarray(c.P.T @ weighted.states)
    return Ensemble(states, info={"coupling": c})


def etpf_step(prior: Ensemble, model, obs: ObservationModel, rng) -> Ensemble:
    """Ensemble transform particle filter step."""
    if prior.size < 2:
        raise ValueError("ETPF needs M >= 2")
    fc = forecast(prior, model, rng)
    logw, log_ev = _weigh(fc, obs)
    out = etpf_transform(Ensemble(fc.states, logw))
    w = normalize_log_weights(logw)
    out.info.update(ess=effective_sample_size(w), log_evidence=log_ev, forecast=fc.states)
    return out


def _enkf_factors(hz, y, R, perturbations):
    M = hz.shape[0]
    dh = hz - hz.mean(axis=0)
    Phh = dh.T @ dh / (M - 1)
    S = Phh + R
    try:
        fac = sla.cho_factor(S)
    except np.linalg.LinAlgError:
        raise np.linalg.LinAlgError("innovation covariance P^hh + R is singular") from None
    D = sla.cho_solve(fac, (hz - y + perturbations).T)  # (Ny, M)
    return dh / (M - 1), D


def enkf_coefficients(hz, y, R, perturbations):
    """Transform coefficients p_ij of the perturbed-observation EnKF.

    zhat_j = sum_i z_i p_ij with
    p_ij = delta_ij - (h_i - hbar)^T (P^hh + R)^-1 (h_j - y + theta_j) / (M-1).
    """
    dh, D = _enkf_factors(hz, y, R, perturbations)
    return np.eye(hz.shape[0]) - dh @ D


def enkf_step(prior: Ensemble, obs: ObservationModel, rng, perturbations=None) -> Ensemble:
    """Stochastic EnKF analysis of the (forecast) ensemble ``prior``.

    The coefficients p_ij are low rank; ``info["transform"]`` applies them
    to any (M, Nz) array (e.g. the t=0 particles) without forming the
    M x M matrix. For M <= 4096 the matrix itself is in
    ``info["coefficients"]``.
    """
    M = prior.size
    if M < 2:
        raise ValueError("EnKF needs M >= 2")
    hz = obs.apply(prior.states)
    if perturbations is None:
        perturbations = rng.standard_normal(hz.shape) @ obs.chol.T
    dh, D = _enkf_factors(hz, obs.y, obs.R, np.asarray(perturbations, dtype=float).reshape(hz.shape))

    def transform(x):
        x = np.asarray(x, dtype=float)
        return x - D.T @ (dh.T @ x)

    info = {"transform": transform}
    if M <= 4096:
        info["coefficients"] = np.eye(M) - dh @ D
    return Ensemble(transform(prior.states), info=info)


def _linear_H(obs):
    if obs.H is None:
        raise TypeError("the closed-form Gaussian step needs a linear observation operator")
    return obs.H


def optimal_proposal_step(prior: Ensemble, model: GaussianMapModel, obs: ObservationModel, rng) -> Ensemble:
    """Scenario (B): smoothing weights, OT resampling at t=0, twisted draws.

    ``info["smoothed"]`` holds the equally weighted t=0 ensemble and
    ``info["gamma"]`` the smoothing weights (sum M).
    """
    if not isinstance(model, GaussianMapModel):
        raise TypeError("optimal proposal requires a GaussianMapModel")
    H = _linear_H(obs)
    tk = twisted_gaussian_kernel(model, H, obs.y, obs.R)
    z0 = prior.states
    M = prior.size
    prior_lw = np.zeros(M) if prior.log_weights is None else np.log(prior.weights)
    lg = prior_lw + np.atleast_1d(tk.log_psi_hat(z0))
    gam = normalize_log_weights(lg)
    # absolute evidence: psi_hat is n(y; H Psi, R + gamma H B H^T) without its constant
    C = obs.R + model.gamma * H @ model.B @ H.T
    const = gaussian_logpdf(obs.y, obs.y, np.linalg.cholesky(C))[0]
    log_ev = logsumexp(lg) - np.log(M) + const
    if M > 1:
        z0hat, idx = ot_resample(z0, gam, rng)
    else:
        z0hat, idx = z0.copy(), np.zeros(1, dtype=int)
    mean = tk.mean_map(z0hat)
    chol = np.linalg.cholesky(model.gamma * tk.Bbar)
    z1 = mean + rng.standard_normal(mean.shape) @ chol.T
    info = {"gamma": gam, "ess": effective_sample_size(gam), "log_evidence": log_ev,
            "smoothed": Ensemble(z0hat), "indices": idx}
    return Ensemble(z1, info=info)


def _state_keys(states):
    """Permutation-stable integer keys: content hash plus occurrence rank."""
    raw = [zlib.crc32(np.ascontiguousarray(row).tobytes()) for row in states]
    keys = np.empty(len(raw), dtype=np.int64)
    seen = {}
    for i in sorted(range(len(raw)), key=lambda i: (raw[i], tuple(states[i]))):
        r = raw[i]
        keys[i] = (r << 20) + seen.get(r, 0)
        seen[r] = seen.get(r, 0) + 1
    return keys


def default_oversampling(model):
    return 10 if isinstance(model, GaussianMapModel) else 1


def schroedinger_step(prior: Ensemble, model, obs: ObservationModel, K=None, rng=None,
                      tol=1e-8, max_iter=10_000, shortcut="auto") -> Ensemble:
    """Scenario (C): discrete Schroedinger transition from the prior atoms.

    L = K*M forecast samples are drawn, K per prior particle. The L x M
    kernel q(z1^l | z0^j) is scaled by Sinkhorn so that every column sums to
    one and the row means equal w^l / L (w: likelihood weights, sum L).
    Each column then yields one new particle, either by a categorical draw
    or, for a Gaussian map model with small noise, by N(sum_l z1^l p_li,
    gamma B). ``shortcut`` is "auto", True or False.

    As for OT resampling, ``info["coupling"].P`` is in the column-stochastic
    scaling (it is rescaled in place to save memory); multiply its columns
    by p0 = w0 / M to recover the probability coupling.

    Random streams are keyed by particle content, so permuting the prior
    permutes the output. SDE models use the composed per-step chains and
    L = M. If Sinkhorn fails the step falls back to the optimal proposal
    (Gaussian models) or the bootstrap filter.
    """
    if rng is None:
        raise ValueError("rng is required")
    z0 = prior.states
    M, nz = z0.shape
    K = int(K or default_oversampling(model))
    seed = _seed_from(rng)
    keys = _state_keys(z0)
    order = np.argsort(keys, kind="stable")
    p0 = prior.weights / M

    if isinstance(model, GaussianMapModel):
        L = K * M
        means = model.mean(z0)
        noise = np.empty((M, K, nz))
        for j in range(M):
            noise[j] = make_rng(seed, 0, keys[j]).standard_normal((K, nz))
        # rows ordered canonically: parent key, then draw number
        parent = np.repeat(order, K)
        z1 = means[parent] + np.sqrt(model.gamma) * noise[order].reshape(L, nz) @ model.chol.T
        Linv = sla.solve_triangular(model.chol, np.eye(nz), lower=True)
        a = z1 @ Linv.T
        b = means @ Linv.T
        # -0.5 |a - b|^2 / gamma, built in place (L x M can be large)
        logQ = a @ b.T
        logQ *= 2.0
        logQ -= (a * a).sum(1)[:, None]
        logQ -= (b * b).sum(1)[None, :]
        np.minimum(logQ, 0.0, out=logQ)
        logQ *= 0.5 / model.gamma
    elif isinstance(model, SdeModel):
        if K != 1:
            log.debug("SDE Schroedinger step uses L = M; ignoring K=%d", K)
        L = M
        noise = np.empty((M, model.n_steps, nz))
        for j in range(M):
            noise[j] = make_rng(seed, 0, keys[j]).standard_normal((model.n_steps, nz))
        paths = euler_maruyama_paths(model, z0[order], seed, noise=noise[order])
        chains = sde_markov_chains(paths, model.drift, model.gamma, model.dt, tol=tol)
        Qp = compose_sde_markov(chains).Q
        z1 = paths[:, -1]
        with np.errstate(divide="ignore"):
            logQ = np.log(Qp)[:, np.argsort(order)]
    else:
        raise TypeError(f"unsupported model type {type(model).__name__}")

    ll = np.atleast_1d(log_likelihood(obs, z1))
    w = normalize_log_weights(ll)
    log_ev = logsumexp(ll) - np.log(L)
    try:
        c = sinkhorn(logQ, w / L, p0, tol=tol, max_iter=max_iter, log_domain=True)
    except ConvergenceError as err:
        log.warning("Sinkhorn failed (%s); falling back", err)
        if isinstance(model, GaussianMapModel) and obs.H is not None:
            out = optimal_proposal_step(prior, model, obs, rng)
        else:
            out = bootstrap_step(prior, model, obs, rng, tau_ess=1.0)
        out.info["fallback"] = True
        return out
    del logQ
    # columns sum to one; row means are w / L
    P = c.P
    P /= p0[None, :]
    info = {"coupling": c, "P": P, "forecast": z1, "weights": w, "ess": effective_sample_size(w),
            "log_evidence": log_ev, "L": L, "fallback": False}

    use_shortcut = False
    if isinstance(model, GaussianMapModel) and shortcut:
        if shortcut == "auto":
            Pzz = np.atleast_2d(np.cov(z1, rowvar=False))
            use_shortcut = model.gamma * np.trace(model.B) < 0.01 * np.trace(Pzz)
        else:
            use_shortcut = True
    info["shortcut"] = use_shortcut

    out = np.empty((M, nz))
    if use_shortcut:
        zbar = P.T @ z1
        for j in range(M):
            xi = make_rng(seed, 1, keys[j]).standard_normal(nz)
            out[j] = zbar[j] + np.sqrt(model.gamma) * model.chol @ xi
    else:
        U = np.array([make_rng(seed, 1, keys[j]).random() for j in range(M)])
        idx = np.empty(M, dtype=int)
        for lo in range(0, M, 256):
            cdf = np.cumsum(P[:, lo:lo + 256], axis=0)
            idx[lo:lo + 256] = (cdf < U[None, lo:lo + 256] * cdf[-1][None, :]).sum(axis=0)
        out = z1[np.minimum(idx, L - 1)]
    return Ensemble(out, info=info)


def homotopy_kalman_update(prior: Ensemble, obs: ObservationModel, n_steps=100) -> Ensemble:
    """Deterministic Kalman-Bucy homotopy over s in [0, 1].

    dz_i = -P^zh R^-1 (0.5 (h(z_i) + hbar) - y) ds, gain recomputed each of
    the ``n_steps`` Euler steps.
    """
    z = prior.states.copy()
    M = z.shape[0]
    if M < 2:
        raise ValueError("homotopy update needs M >= 2")
    ds = 1.0 / n_steps
    Rfac = sla.cho_factor(obs.R)
    scale0 = max(np.abs(z).max(), 1.0)
    for k in range(n_steps):
        hz = obs.apply(z)
        hbar = hz.mean(axis=0)
        Pzh = (z - z.mean(axis=0)).T @ (hz - hbar) / (M - 1)
        dI = (0.5 * (hz + hbar) - obs.y) * ds
        z = z - sla.cho_solve(Rfac, dI.T).T @ Pzh.T
        if not np.all(np.isfinite(z)) or np.abs(z).max() > 1e6 * scale0:
            raise StepError(f"homotopy update blew up at step {k}; increase n_steps", step=k)
    return Ensemble(z, info={"n_steps": n_steps})
