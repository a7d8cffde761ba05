"""Backward value iteration on sample-based Markov chains.

Given M Euler-Maruyama paths z_n^j and per-step chains Q_{n+1} (rows:
particles at n+1, columns: particles at n), the backward sweep

    y_n^j = sum_i y_{n+1}^i (Q_{n+1})_ij

approximates psi_{t_n}(z_n^j), and a local regression on the scaled
increments xi_ij = (z_{n+1}^i - z_n^j - dt f(z_n^j)) / sqrt(gamma dt)
gives v_n^j ~ gamma^1/2 grad psi. In log form y approximates log psi and
picks up the quadratic term dt/2 |v|^2.
"""
import logging
import warnings
from dataclasses import dataclass
from typing import List, Optional

import numpy as np
from scipy.special import logsumexp

from .models import SdeModel
from .transport import gaussian_log_kernel, markov_from_samples, sq_distances

log = logging.getLogger(__name__)

_CHUNK = 512


@dataclass
class BackwardSolution:
    values: np.ndarray       # (N+1, M)
    gradients: np.ndarray    # (N, M, Nz)
    chains: Optional[List[np.ndarray]]   # None when not kept
    paths: np.ndarray        # (M, N+1, Nz)
    dt: float
    gamma: float
    form: str = "linear"
    drift: Optional[object] = None


def _Q(c):
    return c.Q if hasattr(c, "Q") else np.asarray(c, dtype=float)


def backward_value_iteration(paths, chains, final_values):
    """Linear backward sweep y_n = Q_{n+1}^T y_{n+1}; returns (N+1, M)."""
    yN = np.asarray(final_values, dtype=float)
    N = len(chains)
    y = np.empty((N + 1, yN.size))
    y[N] = yN
    for n in range(N - 1, -1, -1):
        y[n] = _Q(chains[n]).T @ y[n + 1]
    return y


def _increments(z_next, z_now, drift, t, dt, gamma, cols):
    mean = z_now[cols] + (dt * drift(t, z_now[cols]) if drift is not None else 0.0)
    return (z_next[:, None, :] - mean[None, :, :]) / np.sqrt(gamma * dt)


def _gradient_step(z_next, z_now, y_next, y_now, Q, drift, t, dt, gamma):
    M, nz = z_now.shape
    v = np.empty((M, nz))
    for start in range(0, M, _CHUNK):
        cols = slice(start, min(start + _CHUNK, M))
        xi = _increments(z_next, z_now, drift, t, dt, gamma, cols)  # (M_i, m, nz)
        q = Q[:, cols]
        S = np.einsum("ija,ijb,ij->jab", xi, xi, q)
        b = np.einsum("ij,ija->ja", q * (y_next[:, None] - y_now[None, cols]), xi)
        for k, j in enumerate(range(cols.start, cols.stop)):
            Sj = S[k]
            cond = np.linalg.cond(Sj)
            if not np.isfinite(cond) or cond > 1e12:
                log.info("moment matrix ill-conditioned (cond %.2e) at particle %d; ridge applied", cond, j)
                Sj = Sj + 1e-10 * max(np.trace(Sj), 1e-300) * np.eye(nz)
            v[j] = np.linalg.solve(Sj, b[k])
    return v / np.sqrt(dt)


def backward_gradient(paths, chains, values, dt, gamma, drift=None, t0=0.0):
    """Gradient estimates v_n^j for n = 0..N-1, shape (N, M, Nz).

    v_n^j = dt^-1/2 (sum_i xi xi^T Q_ij)^-1 sum_i (y_{n+1}^i - y_n^j) xi Q_ij,
    with a ridge of 1e-10 trace when the moment matrix is ill-conditioned.
    """
    paths = np.asarray(paths, dtype=float)
    values = np.asarray(values, dtype=float)
    M, N1, nz = paths.shape
    N = N1 - 1
    out = np.empty((N, M, nz))
    for n in range(N):
        out[n] = _gradient_step(paths[:, n + 1], paths[:, n], values[n + 1], values[n],
                                _Q(chains[n]), drift, t0 + n * dt, dt, gamma)
    return out


def _chain_at(paths, model, n, t0, tol):
    zprev = paths[:, n]
    means = zprev + model.dt * model.drift(t0 + n * model.dt, zprev)
    log_q = gaussian_log_kernel(means, model.gamma * model.dt)
    return markov_from_samples(log_q, paths[:, n + 1], zprev, tol=tol).Q


def solve_backward(paths, model: SdeModel, log_l, chains=None, form="log", t0=0.0, tol=1e-8,
                   keep_chains="auto"):
    """Full backward sweep from final log-likelihood values at t_N.

    ``form="linear"`` starts from y_N = l / beta~ and iterates values
    linearly. ``form="log"`` starts from log l - log beta~ and adds the
    quadratic term dt/2 |v_n^j|^2 at each step.

    Chains not supplied are built one step at a time from the paths and
    dropped after use unless ``keep_chains`` (by default they are kept when
    they fit in 256 MB).
    """
    paths = np.asarray(paths, dtype=float)
    log_l = np.asarray(log_l, dtype=float)
    M, N1, nz = paths.shape
    N = N1 - 1
    dt, g = model.dt, model.gamma
    if form not in ("linear", "log"):
        raise ValueError("form must be 'linear' or 'log'")
    if keep_chains == "auto":
        keep_chains = chains is not None or N * M * M * 8 <= 256 * 2 ** 20
    kept = [None] * N
    log_beta = logsumexp(log_l) - np.log(M)
    y = np.empty((N + 1, M))
    v = np.empty((N, M, nz))
    y[N] = np.exp(log_l - log_beta) if form == "linear" else log_l - log_beta
    for n in range(N - 1, -1, -1):
        Q = _Q(chains[n]) if chains is not None else _chain_at(paths, model, n, t0, tol)
        lin = Q.T @ y[n + 1]
        v[n] = _gradient_step(paths[:, n + 1], paths[:, n], y[n + 1], lin, Q,
                              model.drift, t0 + n * dt, dt, g)
        y[n] = lin if form == "linear" else lin + 0.5 * dt * np.sum(v[n] ** 2, axis=1)
        if keep_chains:
            kept[n] = Q
    return BackwardSolution(y, v, kept if keep_chains else None, paths, dt, g, form, model.drift)


def control_from_values(solution: BackwardSolution, form=None):
    """Control samples u_{t_n}(z_n^j), shape (N, M, Nz).

    Ratio form (linear values): u = gamma^1/2 v / y. Log form: u = gamma^1/2 v.
    A ratio request with non-positive values falls back to the log form
    (recomputed from the same paths and chains) with a warning.
    """
    form = form or ("log" if solution.form == "log" else "ratio")
    sg = np.sqrt(solution.gamma)
    if form == "log":
        if solution.form != "log":
            solution = _as_log(solution)
        return sg * solution.gradients
    if form != "ratio":
        raise ValueError("form must be 'ratio' or 'log'")
    if solution.form != "linear":
        raise ValueError("ratio form needs a linear-value solution")
    y = solution.values[:-1]
    if np.any(y <= 0):
        warnings.warn("non-positive values in ratio-form control; using log form", RuntimeWarning)
        return sg * _as_log(solution).gradients
    return sg * solution.gradients / y[:, :, None]


def _as_log(solution):
    N = solution.values.shape[0] - 1
    y = solution.values[N]
    if np.any(y <= 0):
        raise ValueError("final values must be positive")
    model = SdeModel(solution.drift or (lambda t, z: np.zeros_like(z)), solution.gamma, solution.dt, N,
                     interval=N * solution.dt)
    return solve_backward(solution.paths, model, np.log(y), chains=solution.chains, form="log")


def twisted_chains(solution: BackwardSolution):
    """Q^_{n+1} = D(y_{n+1}) Q_{n+1} D(y_n)^-1 using psi-values."""
    if solution.chains is None:
        raise ValueError("solution was computed without keeping its chains")
    y = solution.values if solution.form == "linear" else np.exp(solution.values)
    out = []
    for n, Q in enumerate(solution.chains):
        out.append(y[n + 1][:, None] * Q / y[n][None, :])
    return out


def drift_correction(solution: BackwardSolution):
    """Control estimate from twisted chains, shape (N, M, Nz).

    sum_i z_{n+1}^i (Q^ - Q)_ij is the change of the conditional mean
    increment over one step, so it is divided by dt to give a drift.
    """
    paths = solution.paths
    out = []
    for n, (Qh, Q) in enumerate(zip(twisted_chains(solution), solution.chains)):
        out.append((Qh - Q).T @ paths[:, n + 1] / solution.dt)
    return np.stack(out)


def interpolate_control(nodes, controls, x, bandwidth):
    """Nadaraya-Watson regression of control samples onto new points."""
    lw = -0.5 * sq_distances(np.atleast_2d(x), nodes) / bandwidth ** 2
    lw -= lw.max(axis=1, keepdims=True)
    w = np.exp(lw)
    w /= w.sum(axis=1, keepdims=True)
    return w @ controls


def simulate_controlled(model: SdeModel, z0s, solution: BackwardSolution, rng, controls=None, t0=0.0):
    """Euler-Maruyama run of dZ = (f + u) dt + gamma^1/2 dW.

    The control at the new particle locations is interpolated from the
    backward solution with bandwidth sqrt(gamma dt). Returns the paths and
    the controls that were applied (for Girsanov reweighting).
    """
    if controls is None:
        controls = control_from_values(solution)
    z = np.atleast_2d(np.asarray(z0s, dtype=float)).copy()
    M, nz = z.shape
    N = model.n_steps
    bw = np.sqrt(model.gamma * model.dt)
    paths = np.empty((M, N + 1, nz))
    used = np.empty((M, N, nz))
    paths[:, 0] = z
    for n in range(N):
        u = interpolate_control(solution.paths[:, n], controls[n], z, bw)
        used[:, n] = u
        z = z + model.dt * (model.drift(t0 + n * model.dt, z) + u) \
            + np.sqrt(model.gamma * model.dt) * rng.standard_normal((M, nz))
        paths[:, n + 1] = z
    return paths, used
