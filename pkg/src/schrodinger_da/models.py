"""Dynamical and observation models.

States are handled as 2-D arrays of shape (M, Nz), one particle per row.
Forward maps, drifts and observation operators act row-wise on such arrays.

Random numbers come from numpy's counter-based Philox generator keyed by a
``SeedSequence``; see :func:`make_rng`.
"""
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Optional

import numpy as np
import scipy.linalg as sla

from .exceptions import ModelError, StepError

LOG2PI = np.log(2.0 * np.pi)


def make_rng(seed, *keys):
    """Philox generator for ``(seed, *keys)``.

    The same tuple always yields the same stream, on every platform.
    """
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in keys))
    return np.random.Generator(np.random.Philox(ss))


def _as_rows(z):
    z = np.asarray(z, dtype=float)
    if z.ndim == 0:
        return z.reshape(1, 1)
    if z.ndim == 1:
        return z[None, :]
    return z


def _spd_matrix(A, name):
    A = np.atleast_2d(np.asarray(A, dtype=float))
    if A.shape[0] != A.shape[1]:
        raise ModelError(f"{name} must be square, got shape {A.shape}")
    if not np.allclose(A, A.T, rtol=1e-10, atol=1e-14):
        raise ModelError(f"{name} must be symmetric")
    try:
        chol = np.linalg.cholesky(A)
    except np.linalg.LinAlgError:
        raise ModelError(f"{name} is not positive definite") from None
    return A, chol


@dataclass(frozen=True)
class GaussianMapModel:
    """Z1 = forward_map(Z0) + sqrt(gamma) * Xi with Xi ~ N(0, B)."""

    forward_map: Callable
    B: np.ndarray
    gamma: float
    chol: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if not self.gamma > 0:
            raise ModelError("gamma must be positive")
        B, chol = _spd_matrix(self.B, "B")
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "chol", chol)

    @property
    def dim(self):
        return self.B.shape[0]

    def mean(self, z0):
        return np.asarray(self.forward_map(_as_rows(z0)), dtype=float)

    def sample(self, z0, rng, noise=None):
        """One forecast draw per row of ``z0``."""
        m = self.mean(z0)
        if noise is None:
            noise = rng.standard_normal(m.shape)
        return m + np.sqrt(self.gamma) * noise @ self.chol.T


@dataclass(frozen=True)
class SdeModel:
    """dZ = f_t(Z) dt + sqrt(gamma) dW, stepped with Euler-Maruyama.

    ``drift(t, z)`` receives a (M, Nz) array. ``interval`` is the length of
    one assimilation window; by default it is 1 and ``n_steps = 1/dt``.
    """

    drift: Callable
    gamma: float
    dt: float
    n_steps: Optional[int] = None
    interval: float = 1.0

    def __post_init__(self):
        if not self.dt > 0:
            raise ModelError("dt must be positive")
        if self.gamma < 0:
            raise ModelError("gamma must be non-negative")
        n = self.n_steps
        if n is None:
            n = int(round(self.interval / self.dt))
            object.__setattr__(self, "n_steps", n)
        if n < 1 or abs(n * self.dt - self.interval) > 1e-9 * max(1.0, self.interval):
            raise ModelError(f"n_steps * dt = {n * self.dt} does not match interval {self.interval}")

    def step(self, t, z, noise):
        """One Euler-Maruyama step given standard normal ``noise``."""
        return z + self.dt * self.drift(t, z) + np.sqrt(self.gamma * self.dt) * noise


@dataclass(frozen=True)
class ObservationModel:
    """Observation y = h(z) + noise with noise ~ N(0, R).

    ``H`` is set for linear operators; the Gaussian closed forms need it.
    For continuous-time filters ``y`` is ignored and increments are passed
    explicitly.
    """

    h: Callable
    R: np.ndarray
    y: np.ndarray
    H: Optional[np.ndarray] = None
    chol: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        R, chol = _spd_matrix(self.R, "R")
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "chol", chol)
        object.__setattr__(self, "y", np.atleast_1d(np.asarray(self.y, dtype=float)))
        if self.H is not None:
            object.__setattr__(self, "H", np.atleast_2d(np.asarray(self.H, dtype=float)))
        if self.y.shape[0] != R.shape[0]:
            raise ModelError("datum and R have incompatible sizes")

    @classmethod
    def linear(cls, H, R, y):
        H = np.atleast_2d(np.asarray(H, dtype=float))
        return cls(h=lambda z: _as_rows(z) @ H.T, R=R, y=y, H=H)

    @property
    def dim(self):
        return self.R.shape[0]

    def with_datum(self, y):
        return ObservationModel(h=self.h, R=self.R, y=y, H=self.H)

    def apply(self, z):
        return np.asarray(self.h(_as_rows(z)), dtype=float).reshape(-1, self.dim)

    def sample(self, z, rng):
        hz = self.apply(z)
        return hz + rng.standard_normal(hz.shape) @ self.chol.T


def gaussian_logpdf(x, mean, chol):
    """log n(x; mean, C) for rows of x with C = chol @ chol.T."""
    r = np.atleast_2d(x - mean)
    w = sla.solve_triangular(chol, r.T, lower=True)
    n = chol.shape[0]
    logdet = 2.0 * np.sum(np.log(np.diag(chol)))
    return -0.5 * (np.sum(w * w, axis=0) + n * LOG2PI + logdet)


def gaussian_transition_logdensity(model: GaussianMapModel, z1, z0):
    """log n(z1; Psi(z0), gamma B)."""
    z1 = np.asarray(z1, dtype=float)
    z0 = np.asarray(z0, dtype=float)
    if z1.shape[-1] != model.dim or z0.shape[-1] != model.dim:
        raise ValueError("state dimension does not match B")
    mean = model.mean(z0)
    out = gaussian_logpdf(_as_rows(z1), mean, np.sqrt(model.gamma) * model.chol)
    return out[0] if z1.ndim == 1 and z0.ndim == 1 else out


class TwistedKernel(NamedTuple):
    K: np.ndarray
    Bbar: np.ndarray
    mean_map: Callable
    log_psi_hat: Callable


def twisted_gaussian_kernel(model: GaussianMapModel, H, d, R) -> TwistedKernel:
    """Kernel n(l * q)(.|z0) for a linear Gaussian likelihood.

    Returns the gain K = B H^T (H B H^T + R/gamma)^-1, the covariance
    Bbar = B - K H B (the kernel covariance is gamma * Bbar), the map
    z0 -> Psi(z0) - K (H Psi(z0) - d), and the log of the unnormalised
    weight -0.5 r^T (R + gamma H B H^T)^-1 r with r = H Psi(z0) - d.
    """
    H = np.atleast_2d(np.asarray(H, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    d = np.atleast_1d(np.asarray(d, dtype=float))
    B, g = model.B, model.gamma
    S = H @ B @ H.T + R / g
    try:
        S_fac = sla.cho_factor(S)
    except np.linalg.LinAlgError:
        raise np.linalg.LinAlgError("innovation matrix H B H^T + R/gamma is singular") from None
    K = sla.cho_solve(S_fac, H @ B).T
    Bbar = B - K @ H @ B
    Bbar = 0.5 * (Bbar + Bbar.T)
    C_fac = sla.cho_factor(g * S)

    def mean_map(z0):
        m = model.mean(z0)
        return m - (m @ H.T - d) @ K.T

    def log_psi_hat(z0):
        r = model.mean(z0) @ H.T - d
        q = np.sum(r * sla.cho_solve(C_fac, r.T).T, axis=1)
        out = -0.5 * q
        return out[0] if np.ndim(z0) == 1 else out

    return TwistedKernel(K, Bbar, mean_map, log_psi_hat)


def euler_maruyama_paths(model: SdeModel, z0s, rng_seed, t0=0.0, noise=None):
    """Simulate one Euler-Maruyama path per row of ``z0s``.

    Particle i draws its increments from ``make_rng(rng_seed, i)``, so the
    result does not depend on how particles are scheduled. ``noise`` of
    shape (M, N, Nz) overrides the random draws.

    Returns an array of shape (M, N+1, Nz).
    """
    z0s = _as_rows(z0s)
    M, nz = z0s.shape
    N = model.n_steps
    if noise is None:
        noise = np.empty((M, N, nz))
        for i in range(M):
            noise[i] = make_rng(rng_seed, i).standard_normal((N, nz))
    paths = np.empty((M, N + 1, nz))
    paths[:, 0] = z0s
    z = z0s.copy()
    for n in range(N):
        t = t0 + n * model.dt
        f = model.drift(t, z)
        if not np.all(np.isfinite(f)):
            raise StepError(f"non-finite drift at step {n} (t={t:g})", step=n)
        z = z + model.dt * f + np.sqrt(model.gamma * model.dt) * noise[:, n]
        paths[:, n + 1] = z
    return paths


def double_well_drift(t, z):
    return z * (1.0 - z * z)


def lorenz63_drift(t, z, sigma=10.0, rho=28.0, beta=8.0 / 3.0):
    x, y, w = z[..., 0], z[..., 1], z[..., 2]
    return np.stack([sigma * (y - x), x * (rho - w) - y, x * y - beta * w], axis=-1)


def linear_drift(A):
    A = np.atleast_2d(np.asarray(A, dtype=float))
    return lambda t, z: z @ A.T


def builtin_models():
    """Catalogue of named drifts with their state dimension."""
    return {
        "double_well": {"drift": double_well_drift, "dim": 1},
        "lorenz63": {"drift": lorenz63_drift, "dim": 3,
                     "params": {"sigma": 10.0, "rho": 28.0, "beta": 8.0 / 3.0}},
    }


def log_likelihood(obs: ObservationModel, z):
    """Gaussian log-likelihood log n(y; h(z), R), including the normalizer."""
    z = np.asarray(z, dtype=float)
    out = gaussian_logpdf(obs.apply(z), obs.y, obs.chol)
    return out[0] if z.ndim <= 1 else out
