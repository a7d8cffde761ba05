"""Single-cycle smoothing: t=0 weights, path densities and HMC path sampling."""
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import scipy.linalg as sla
from scipy.special import logsumexp

from .ensemble import Ensemble, normalize_log_weights
from .filters_discrete import optimal_proposal_step
from .models import GaussianMapModel, ObservationModel, SdeModel, log_likelihood, twisted_gaussian_kernel


def smoothing_weights(prior: Ensemble, model: GaussianMapModel, obs: ObservationModel):
    """gamma^i proportional to int l(z1) q(z1 | z0^i) dz1, normalised to sum M."""
    if obs.H is None:
        raise TypeError("closed-form smoothing weights need a linear observation operator")
    tk = twisted_gaussian_kernel(model, obs.H, obs.y, obs.R)
    lg = np.atleast_1d(tk.log_psi_hat(prior.states))
    if prior.log_weights is not None:
        lg = lg + np.log(prior.weights)
    return normalize_log_weights(lg)


def smoothing_resample_and_propagate(prior, model, obs, rng):
    """Same as :func:`optimal_proposal_step`; t=0 ensemble in ``info["smoothed"]``."""
    return optimal_proposal_step(prior, model, obs, rng)


@dataclass(frozen=True)
class PathPosterior:
    """Posterior over Euler-Maruyama paths z_0..z_N given y at t = N dt.

    ``anchors`` are the atoms of pi_0 (with optional weights summing to M).
    With ``relaxation`` = eps > 0 the atoms are replaced by the mixture
    (1/M) sum n(z; z0^i, eps I), which gives a smooth density in z_0.
    ``drift_jacobian(t, z)`` returns (M, Nz, Nz); if omitted it is
    approximated by central differences.
    """

    model: SdeModel
    anchors: np.ndarray
    obs: ObservationModel
    anchor_weights: Optional[np.ndarray] = None
    relaxation: Optional[float] = None
    drift_jacobian: Optional[Callable] = None

    def __post_init__(self):
        a = np.asarray(self.anchors, dtype=float)
        object.__setattr__(self, "anchors", a[:, None] if a.ndim == 1 else a)
        n = self.model.n_steps
        if abs(n * self.model.dt - self.model.interval) > 1e-9:
            raise ValueError("dt * N must equal the interval")

    @property
    def n_steps(self):
        return self.model.n_steps

    @property
    def dim(self):
        return self.anchors.shape[1]

    def log_prior0(self, z0):
        M = self.anchors.shape[0]
        w = np.ones(M) if self.anchor_weights is None else np.asarray(self.anchor_weights, float)
        logw = np.log(w / w.sum())
        if self.relaxation:
            eps = self.relaxation
            d2 = ((z0[None, :] - self.anchors) ** 2).sum(1)
            return logsumexp(logw - 0.5 * d2 / eps) - 0.5 * self.dim * np.log(2 * np.pi * eps)
        hit = np.all(np.abs(self.anchors - z0[None, :]) <= 1e-12 * (1 + np.abs(z0)), axis=1)
        if not hit.any():
            return -np.inf
        return logsumexp(logw[hit])


def residuals(path, model: SdeModel, t0=0.0):
    """eta_n = gamma^-1/2 (z_{n+1} - z_n - f(z_n) dt) for a (N+1, Nz) path."""
    z = np.asarray(path, dtype=float)
    t = t0 + model.dt * np.arange(z.shape[0] - 1)
    f = np.stack([model.drift(tn, zn[None, :])[0] for tn, zn in zip(t, z[:-1])])
    return (z[1:] - z[:-1] - model.dt * f) / np.sqrt(model.gamma)


def path_log_posterior(path, post: PathPosterior):
    """log of exp(-sum |eta_n|^2 / (2 dt)) pi_0(z_0) l(z_N), up to a constant."""
    z = np.asarray(path, dtype=float)
    if z.ndim == 1:
        z = z[:, None]
    eta = residuals(z, post.model)
    kinetic = -0.5 * np.sum(eta * eta) / post.model.dt
    return kinetic + post.log_prior0(z[0]) + log_likelihood(post.obs, z[-1])


def girsanov_log_weight(paths, controls, model: SdeModel, t0=0.0):
    """Log importance weight log(dQ/dQ^u) of controlled Euler-Maruyama paths.

    ``paths`` is (N+1, Nz) or (M, N+1, Nz); ``controls`` holds u at z_n,
    shaped like ``paths[..., :-1, :]``. The controlled residual is
    eta^u_n = gamma^-1/2 (z_{n+1} - z_n - (f + u) dt) and the returned value
    is -(1/(2 gamma)) sum (|u|^2 dt + 2 gamma^1/2 u . eta^u).
    """
    z = np.asarray(paths, dtype=float)
    u = np.asarray(controls, dtype=float)
    single = z.ndim == 2
    if single:
        z, u = z[None], u[None]
    M, N1, nz = z.shape
    dt, g = model.dt, model.gamma
    out = np.zeros(M)
    for n in range(N1 - 1):
        f = model.drift(t0 + n * dt, z[:, n])
        eta = (z[:, n + 1] - z[:, n] - (f + u[:, n]) * dt) / np.sqrt(g)
        out += (u[:, n] ** 2).sum(1) * dt + 2.0 * np.sqrt(g) * (u[:, n] * eta).sum(1)
    out *= -0.5 / g
    return out[0] if single else out


# -- HMC -----------------------------------------------------------------------

@dataclass(frozen=True)
class HmcConfig:
    """Step size, leapfrog steps per proposal, quadratic precision, iterations."""

    dtau: float
    n_leapfrog: int = 10
    precision: Optional[np.ndarray] = None
    n_iter: int = 1000

    def __post_init__(self):
        if not self.dtau > 0:
            raise ValueError("dtau must be positive")


def stormer_verlet(x, p, grad_V, dtau, mass_solve):
    """One regularised Stormer-Verlet step.

    p_{1/2} = p - dtau/2 grad V(x); x' = x + dtau Mt^-1 p_{1/2};
    p' = p_{1/2} - dtau/2 grad V(x'), with Mt = I + dtau^2/4 B^-1 applied
    through ``mass_solve``.
    """
    p_half = p - 0.5 * dtau * grad_V(x)
    x_new = x + dtau * mass_solve(p_half)
    p_new = p_half - 0.5 * dtau * grad_V(x_new)
    return x_new, p_new


def _mass_solver(precision, dtau, n):
    if precision is None:
        c = 1.0 / (1.0 + 0.25 * dtau * dtau)
        return lambda p: c * p
    A = np.eye(n) + 0.25 * dtau * dtau * np.asarray(precision, dtype=float)
    Lf = np.linalg.cholesky(A)
    return lambda p: sla.cho_solve((Lf, True), p)


class HmcResult:
    def __init__(self, samples, acceptance_rate, n_nonfinite, energy_errors):
        self.samples = samples
        self.acceptance_rate = acceptance_rate
        self.n_nonfinite = n_nonfinite
        self.energy_errors = energy_errors
        self.anchor = None


def hmc_chain(x0, V, grad_V, cfg: HmcConfig, rng):
    """Metropolis-adjusted HMC with H(x, p) = |p|^2/2 + V(x), p ~ N(0, I).

    Proposals use ``cfg.n_leapfrog`` regularised Stormer-Verlet steps with
    the modified mass built from ``cfg.precision``. Non-finite energies are
    rejected and counted.
    """
    x = np.array(x0, dtype=float).ravel()
    n = x.size
    solve = _mass_solver(cfg.precision, cfg.dtau, n)
    Vx = V(x)
    samples = np.empty((cfg.n_iter, n))
    accepted = 0
    bad = 0
    errs = np.empty(cfg.n_iter)
    for k in range(cfg.n_iter):
        p = rng.standard_normal(n)
        H0 = 0.5 * p @ p + Vx
        xn, pn = x, p
        for _ in range(cfg.n_leapfrog):
            xn, pn = stormer_verlet(xn, pn, grad_V, cfg.dtau, solve)
        with np.errstate(all="ignore"):
            Vn = V(xn)
            H1 = 0.5 * pn @ pn + Vn
        errs[k] = H1 - H0
        if not np.isfinite(H1):
            bad += 1
        elif np.log(rng.random()) < H0 - H1:
            x, Vx = xn, Vn
            accepted += 1
        samples[k] = x
    return HmcResult(samples, accepted / cfg.n_iter, bad, errs)


def _fd_jacobian(drift, t, z, h=1e-6):
    M, nz = z.shape
    J = np.empty((M, nz, nz))
    for k in range(nz):
        e = np.zeros(nz)
        e[k] = h
        J[:, :, k] = (drift(t, z + e) - drift(t, z - e)) / (2 * h)
    return J


def path_potential(post: PathPosterior, anchor=None):
    """V, grad V and the Brownian precision for HMC over a path.

    With ``anchor`` set (an atom index) z_0 is fixed and x = (z_1..z_N);
    otherwise the prior must be relaxed and x = (z_0..z_N). The quadratic
    part is |z_{n+1} - z_n|^2 / (2 gamma dt); drift and likelihood terms
    form U.

    Returns (V, grad_V, precision, unpack) where ``unpack(x)`` gives the
    (N+1, Nz) path.
    """
    model = post.model
    N, nz, dt, g = post.n_steps, post.dim, model.dt, model.gamma
    fixed = anchor is not None
    if not fixed and not post.relaxation:
        raise ValueError("free z_0 needs a relaxed prior (relaxation > 0)")
    z0 = post.anchors[anchor] if fixed else None
    jac = post.drift_jacobian or (lambda t, z: _fd_jacobian(model.drift, t, z))
    times = dt * np.arange(N)
    obs = post.obs
    Rinv = np.linalg.inv(obs.R)

    def unpack(x):
        x = x.reshape(-1, nz)
        return np.vstack([z0[None, :], x]) if fixed else x

    def V(x):
        z = unpack(x)
        return -path_log_posterior(z, post) if not fixed else \
            -(-0.5 * np.sum(residuals(z, model) ** 2) / dt + log_likelihood(obs, z[-1]))

    def grad_V(x):
        z = unpack(x)
        f = np.stack([model.drift(t, zn[None, :])[0] for t, zn in zip(times, z[:-1])])
        J = np.stack([jac(t, zn[None, :])[0] for t, zn in zip(times, z[:-1])])
        r = (z[1:] - z[:-1] - dt * f) / (g * dt)  # d/dz_{n+1} of the kinetic term
        G = np.zeros_like(z)
        G[1:] += r
        G[:-1] -= r + dt * np.einsum("nij,ni->nj", J, r)
        # likelihood
        if obs.H is not None:
            G[-1] += obs.H.T @ Rinv @ (obs.H @ z[-1] - obs.y)
        else:
            e = 1e-6
            for k in range(nz):
                d = np.zeros(nz)
                d[k] = e
                G[-1, k] -= (log_likelihood(obs, z[-1] + d) - log_likelihood(obs, z[-1] - d)) / (2 * e)
        if not fixed:
            lp = lambda z0_: post.log_prior0(z0_)
            e = 1e-6
            for k in range(nz):
                d = np.zeros(nz)
                d[k] = e
                G[0, k] -= (lp(z[0] + d) - lp(z[0] - d)) / (2 * e)
            return G.ravel()
        return G[1:].ravel()

    # Brownian precision: tridiagonal / (gamma dt) on the free variables
    n_free = N if fixed else N + 1
    T = np.zeros((n_free, n_free))
    for n in range(N):
        i, j = (n - 1, n) if fixed else (n, n + 1)
        if i >= 0:
            T[i, i] += 1.0
            T[i, j] -= 1.0
            T[j, i] -= 1.0
        T[j, j] += 1.0
    precision = np.kron(T, np.eye(nz)) / (g * dt)
    return V, grad_V, precision, unpack


def hmc_sample_paths(post: PathPosterior, cfg: HmcConfig, rng, anchor=None, x0=None):
    """HMC over discretised paths targeting :func:`path_log_posterior`.

    Without relaxation the start is an atom: ``anchor`` if given, otherwise
    drawn from ``post.anchor_weights``. The chain starts from ``x0`` or
    from a noise-free forward run. Returns an :class:`HmcResult` whose
    ``samples`` have shape (n_iter, N+1, Nz).
    """
    model = post.model
    if not post.relaxation and anchor is None:
        M = post.anchors.shape[0]
        w = np.ones(M) if post.anchor_weights is None else np.asarray(post.anchor_weights, float)
        anchor = int(rng.choice(M, p=w / w.sum()))
    V, grad_V, precision, unpack = path_potential(post, anchor)
    if cfg.precision is None:
        cfg = HmcConfig(cfg.dtau, cfg.n_leapfrog, precision, cfg.n_iter)
    if x0 is None:
        z = np.empty((post.n_steps + 1, post.dim))
        z[0] = post.anchors[anchor if anchor is not None else 0]
        for n in range(post.n_steps):
            z[n + 1] = z[n] + model.dt * model.drift(n * model.dt, z[n][None, :])[0]
        x0 = z[1:].ravel() if anchor is not None else z.ravel()
    res = hmc_chain(x0, V, grad_V, cfg, rng)
    res.samples = np.stack([unpack(x) for x in res.samples])
    res.anchor = anchor
    return res


def default_hmc_config(model: SdeModel, n_iter=1000):
    return HmcConfig(dtau=0.5 * np.sqrt(model.dt), n_leapfrog=10, n_iter=n_iter)
