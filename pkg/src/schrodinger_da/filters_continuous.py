"""Continuous-time filters driven by observation increments dy.

Observation model: dY = h(Z) dt + R^1/2 dV. Each step advances the
ensemble by ``model.dt`` given the increment ``dy`` over that step.
"""
import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.linalg as sla
from scipy.special import logsumexp

from .ensemble import Ensemble, effective_sample_size, normalize_log_weights
from .exceptions import ConvergenceError, StepError
from .models import ObservationModel, SdeModel
from .transport import sample_columns, sinkhorn, sq_distances

log = logging.getLogger(__name__)

VARIANTS = ("enkbf-smooth", "enkbf-stoch-mean", "enkbf-stoch-perturbed", "fpf",
            "schroedinger-transform", "schroedinger-resample", "bootstrap")


@dataclass(frozen=True)
class ContinuousFilterConfig:
    variant: str = "enkbf-stoch-mean"
    dt: float = 0.01
    eps: Optional[float] = None  # diffusion-map bandwidth, None = median rule
    K: int = 1

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.eps is not None and not self.eps > 0:
            raise ValueError("eps must be positive")
        if self.K < 1:
            raise ValueError("K must be >= 1")


def _drift(model, t, z):
    f = model.drift(t, z)
    if not np.all(np.isfinite(f)):
        raise StepError(f"non-finite drift at t={t:g}")
    return f


def _enkbf_increment(z, hz, obs, dy, variant, dt, rng, ddof):
    M = z.shape[0]
    hbar = hz.mean(axis=0)
    Pzh = (z - z.mean(axis=0)).T @ (hz - hbar) / (M - ddof)
    if variant == "enkbf-smooth":
        dI = 0.5 * (hz + hbar - 2.0 * obs.y) * dt
    elif variant == "enkbf-stoch-mean":
        dI = 0.5 * (hz + hbar) * dt - dy
    elif variant == "enkbf-stoch-perturbed":
        dU = np.sqrt(dt) * rng.standard_normal(hz.shape) @ obs.chol.T
        dI = hz * dt + dU - dy
    else:
        raise ValueError(f"not an EnKBF variant: {variant!r}")
    return sla.cho_solve((obs.chol, True), dI.T).T @ Pzh.T


def enkbf_step(ensemble: Ensemble, model: SdeModel, obs: ObservationModel, dy, variant, rng,
               t=0.0, ddof=1, noise=None) -> Ensemble:
    """Euler-Maruyama step of dZ = f dt + gamma^1/2 dW - K dI.

    K = P^zh R^-1 with P^zh = sum z_i (h_i - hbar)^T / (M - ddof). For
    ``enkbf-smooth`` the current value y_t is taken from ``obs.y``. If the
    correction is larger than the state itself the step is redone with four
    sub-steps (the increment dy is split evenly).
    """
    z = ensemble.states
    M = z.shape[0]
    if M < 2:
        raise ValueError("EnKBF needs M >= 2")
    dt = model.dt
    dy = np.atleast_1d(np.asarray(dy, dtype=float))
    if noise is None:
        noise = rng.standard_normal(z.shape)
    f = _drift(model, t, z)
    hz = obs.apply(z)
    corr = _enkbf_increment(z, hz, obs, dy, variant, dt, rng, ddof)
    if np.linalg.norm(corr) <= np.linalg.norm(z):
        out = z + dt * f + np.sqrt(model.gamma * dt) * noise - corr
        substeps = 1
    else:
        substeps = 4
        h = dt / substeps
        out = z
        for k in range(substeps):
            tk = t + k * h
            hz = obs.apply(out)
            corr = _enkbf_increment(out, hz, obs, dy / substeps, variant, h, rng, ddof)
            out = out + h * _drift(model, tk, out) + np.sqrt(model.gamma * h) * rng.standard_normal(z.shape) - corr
    if not np.all(np.isfinite(out)) or np.abs(out).max() > 1e8:
        raise StepError(f"EnKBF step unstable at t={t:g}; reduce dt or use sub-stepping")
    return Ensemble(out, info={"substeps": substeps})


# -- feedback particle filter ----------------------------------------------------

def default_bandwidth(states):
    """eps = median pairwise squared distance / (2 log M)."""
    z = np.atleast_2d(states)
    M = z.shape[0]
    d2 = sq_distances(z, z)[np.triu_indices(M, 1)]
    med = np.median(d2)
    return med / (2.0 * np.log(M)) if med > 0 and M > 1 else 1.0


def _markov_kernel(d2, eps, sqrt_p):
    """Rows k(z, z^i) = n_eps(z - z^i) / (c(z) p(z^i)^1/2), normalised to one."""
    logG = -d2 / (4.0 * eps)
    logG -= logG.max(axis=1, keepdims=True)
    T = np.exp(logG) / sqrt_p[None, :]
    return T / T.sum(axis=1, keepdims=True)


class GainField:
    """Diffusion-map approximation of the FPF gain.

    ``phi`` solves phi = K phi + eps dh with sum(phi) = 0 (dh = h - hbar);
    ``gain`` holds grad phi~ at the particles. :meth:`evaluate` gives
    grad phi~ at arbitrary points using the same particle cloud.
    """

    def __init__(self, states, phi, r, eps, sqrt_p, kernel, gain):
        self.states = states
        self.phi = phi
        self.r = r
        self.eps = eps
        self.sqrt_p = sqrt_p
        self.kernel = kernel
        self.gain = gain

    def evaluate(self, z):
        z = np.atleast_2d(z)
        k = _markov_kernel(sq_distances(z, self.states), self.eps, self.sqrt_p)
        return _gain_from_kernel(k, self.r, self.eps, self.states)


def _gain_from_kernel(k, r, eps, states):
    # a_ij = k(z^j, z^i) (r_i - sum_l k(z^j, z^l) r_l) / (2 eps); gain_j = sum_i z^i a_ij
    A = k * (r[None, :] - (k @ r)[:, None]) / (2.0 * eps)
    return A @ states


def fpf_gain_diffusion_map(states, h_values, eps=None, direct_max=2000, tol=1e-12,
                           max_iter=100_000) -> GainField:
    """Solve the diffusion-map fixed point and return the gain field.

    The zero-mean constraint is built into the system (I - Pi K) phi = eps dh
    with Pi the centring projector; this is the fixed point of the Richardson
    iteration phi <- Pi (K phi + eps dh). Direct solve for M <= direct_max.
    """
    z = np.atleast_2d(np.asarray(states, dtype=float))
    h = np.asarray(h_values, dtype=float).ravel()
    M = z.shape[0]
    if M < 2:
        raise ValueError("gain approximation needs M >= 2")
    if h.size != M:
        raise ValueError("one h value per particle required")
    if eps is None:
        eps = default_bandwidth(z)
    if not eps > 0:
        raise ValueError("eps must be positive")
    dh = h - h.mean()
    d2 = sq_distances(z, z)
    logG = -d2 / (4.0 * eps)
    p = np.exp(logsumexp(logG, axis=1) - np.log(M))
    sqrt_p = np.sqrt(p / p.max())
    k = _markov_kernel(d2, eps, sqrt_p)
    if not np.any(dh):
        phi = np.zeros(M)
    elif M <= direct_max:
        A = np.eye(M) - (k - k.mean(axis=0, keepdims=True))
        cond = np.linalg.cond(A)
        if not np.isfinite(cond) or cond > 1e14:
            raise np.linalg.LinAlgError(f"fixed-point system is singular (condition {cond:.2e})")
        phi = np.linalg.solve(A, eps * dh)
    else:
        phi = eps * dh
        for _ in range(max_iter):
            nxt = k @ phi + eps * dh
            nxt -= nxt.mean()
            if np.abs(nxt - phi).max() <= tol * max(np.abs(nxt).max(), 1e-300):
                phi = nxt
                break
            phi = nxt
        else:
            raise ConvergenceError("Richardson iteration for the gain did not converge")
    phi = phi - phi.mean()
    r = phi + eps * dh
    gain = _gain_from_kernel(k, r, eps, z)
    return GainField(z, phi, r, eps, sqrt_p, k, gain)


def _whiten(obs, hz, dy):
    hw = sla.solve_triangular(obs.chol, hz.T, lower=True).T
    dyw = sla.solve_triangular(obs.chol, np.atleast_1d(dy), lower=True)
    return hw, dyw


def fpf_step_euler_heun(ensemble: Ensemble, model: SdeModel, obs: ObservationModel, dy, eps=None,
                        rng=None, t=0.0, noise=None) -> Ensemble:
    """Euler-Heun step of the feedback particle filter.

    Vector observations are whitened with R^-1/2 and their components
    handled independently (the gain term is summed over components).
    """
    z = ensemble.states
    M, nz = z.shape
    dt = model.dt
    if noise is None:
        noise = rng.standard_normal(z.shape)
    hz = obs.apply(z)
    hw, dyw = _whiten(obs, hz, dy)
    base = z + dt * _drift(model, t, z) + np.sqrt(model.gamma * dt) * noise
    fields = []
    corr = np.zeros_like(z)
    for k in range(hw.shape[1]):
        g = fpf_gain_diffusion_map(z, hw[:, k], eps)
        dI = 0.5 * (hw[:, k] + hw[:, k].mean()) * dt - dyw[k]
        fields.append((g, dI))
        corr += g.gain * dI[:, None]
    z_pred = base - corr
    corr2 = np.zeros_like(z)
    for g, dI in fields:
        corr2 += 0.5 * (g.gain + g.evaluate(z_pred)) * dI[:, None]
    out = base - corr2
    if not np.all(np.isfinite(out)):
        raise StepError(f"FPF step produced non-finite states at t={t:g}")
    return Ensemble(out, info={"eps": fields[0][0].eps if fields else eps})


# -- Schroedinger and bootstrap ------------------------------------------------------

def continuous_log_weights(obs: ObservationModel, hz, dy, dt):
    """log w = -(dt/2) h^T R^-1 h + dy^T R^-1 h for each row of hz."""
    Rinv_h = sla.cho_solve((obs.chol, True), hz.T).T
    return -0.5 * dt * np.sum(hz * Rinv_h, axis=1) + Rinv_h @ np.atleast_1d(dy)


def schroedinger_continuous_step(ensemble: Ensemble, model: SdeModel, obs: ObservationModel, dy, K=1,
                                 rng=None, mode="transform", t=0.0, tol=1e-8,
                                 max_iter=10_000) -> Ensemble:
    """Schroedinger filter step over one time increment.

    Particles are pushed by the drift only, L = K*M proposals are drawn from
    the Gaussian mixture around them (K per particle), weighted by the
    increment likelihood, and coupled to the pushed particles by Sinkhorn
    (columns sum to one, row means w/L). ``mode="transform"`` returns the
    column means plus fresh noise, ``mode="resample"`` draws one proposal
    per column. ``info["coupling"]`` holds the column-stochastic coupling,
    with ``info["proposals"]`` and their ``info["weights"]`` (summing to L).
    """
    if mode not in ("transform", "resample"):
        raise ValueError("mode must be 'transform' or 'resample'")
    z = ensemble.states
    M, nz = z.shape
    dt = model.dt
    sd = np.sqrt(model.gamma * dt)
    zhat = z + dt * _drift(model, t, z)
    L = K * M
    zt = np.repeat(zhat, K, axis=0) + sd * rng.standard_normal((L, nz))
    logw = continuous_log_weights(obs, obs.apply(zt), dy, dt)
    w = normalize_log_weights(logw)
    logQ = -0.5 * sq_distances(zt, zhat) / (sd * sd)
    try:
        c = sinkhorn(logQ, w / L, np.full(M, 1.0 / M), tol=tol, max_iter=max_iter, log_domain=True,
                      newton_after=0 if L <= 200 else 20)
    except ConvergenceError as err:
        log.warning("Sinkhorn failed at t=%g (%s); weighted bootstrap fallback", t, err)
        idx = systematic_resample(w, M, rng)
        return Ensemble(zt[idx], info={"fallback": True, "ess": effective_sample_size(w)})
    P = M * c.P
    info = {"fallback": False, "ess": effective_sample_size(w), "n_iter": c.n_iter,
            "coupling": P, "proposals": zt, "weights": w}
    if mode == "transform":
        out = P.T @ zt + sd * rng.standard_normal((M, nz))
    else:
        out = zt[sample_columns(P, rng)]
    return Ensemble(out, info=info)


def systematic_resample(weights, n, rng):
    """Systematic resampling of ``n`` indices from weights (any positive scale)."""
    w = np.asarray(weights, dtype=float)
    cdf = np.cumsum(w)
    cdf /= cdf[-1]
    u = (rng.random() + np.arange(n)) / n
    return np.minimum(np.searchsorted(cdf, u, side="right"), w.size - 1)


def bootstrap_continuous_step(ensemble: Ensemble, model: SdeModel, obs: ObservationModel, dy, rng,
                              t=0.0) -> Ensemble:
    """Standard particle filter: propagate, weight by the increment, resample."""
    z = ensemble.states
    M = z.shape[0]
    dt = model.dt
    zn = z + dt * _drift(model, t, z) + np.sqrt(model.gamma * dt) * rng.standard_normal(z.shape)
    logw = continuous_log_weights(obs, obs.apply(zn), dy, dt)
    w = normalize_log_weights(logw)
    idx = systematic_resample(w, M, rng)
    return Ensemble(zn[idx], info={"ess": effective_sample_size(w)})


def continuous_step(cfg: ContinuousFilterConfig, ensemble, model, obs, dy, rng, t=0.0):
    """Dispatch on ``cfg.variant``."""
    v = cfg.variant
    if v.startswith("enkbf"):
        return enkbf_step(ensemble, model, obs, dy, v, rng, t=t)
    if v == "fpf":
        return fpf_step_euler_heun(ensemble, model, obs, dy, cfg.eps, rng, t=t)
    if v == "bootstrap":
        return bootstrap_continuous_step(ensemble, model, obs, dy, rng, t=t)
    mode = v.split("-")[1]
    return schroedinger_continuous_step(ensemble, model, obs, dy, cfg.K, rng, mode=mode, t=t)
