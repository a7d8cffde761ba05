"""Particle ensembles, weight algebra and diagnostics.

Weights follow the sum-to-M convention: an ensemble of M particles carries
weights w with sum(w) == M, so uniform weights are all ones. Probability
vectors (sum 1) only appear at coupling boundaries, where the conversion
w / M is made explicit.
"""
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import logsumexp

from .exceptions import DegeneracyError
from .models import ObservationModel, log_likelihood, gaussian_logpdf

__all__ = [
    "Ensemble", "RunRecord", "normalize_weights", "normalize_log_weights",
    "effective_sample_size", "evidence_estimate", "gaussian_evidence_approx",
    "empirical_moments",
]


@dataclass(frozen=True)
class Ensemble:
    """M particles (rows of ``states``) with optional log-weights.

    ``log_weights`` is None for an equally weighted ensemble. Otherwise it
    holds unnormalised log-weights; :attr:`weights` returns them normalised
    to sum to M. Filter steps put their diagnostics in ``info``.
    """

    states: np.ndarray
    log_weights: Optional[np.ndarray] = None
    info: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        s = np.asarray(self.states, dtype=float)
        if s.ndim == 1:
            s = s[:, None]
        if s.ndim != 2 or s.shape[0] < 1:
            raise ValueError("states must be an (M, Nz) array with M >= 1")
        object.__setattr__(self, "states", s)
        if self.log_weights is not None:
            lw = np.asarray(self.log_weights, dtype=float).reshape(-1)
            if lw.shape[0] != s.shape[0]:
                raise ValueError("one log-weight per particle required")
            object.__setattr__(self, "log_weights", lw)

    @classmethod
    def weighted(cls, states, weights):
        w = np.asarray(weights, dtype=float)
        if np.any(w < 0):
            raise ValueError("weights must be non-negative")
        with np.errstate(divide="ignore"):
            return cls(states, np.log(w))

    @property
    def size(self):
        return self.states.shape[0]

    @property
    def dim(self):
        return self.states.shape[1]

    @property
    def weights(self):
        if self.log_weights is None:
            return np.ones(self.size)
        return normalize_log_weights(self.log_weights)

    @property
    def is_weighted(self):
        return self.log_weights is not None

    def uniform(self):
        return Ensemble(self.states)


def normalize_weights(raw):
    """Scale non-negative ``raw`` so that it sums to its length M."""
    raw = np.asarray(raw, dtype=float)
    if np.any(raw < 0) or not np.all(np.isfinite(raw)):
        raise ValueError("weights must be finite and non-negative")
    total = raw.sum()
    if not total > 0:
        raise DegeneracyError("all weights are zero")
    return raw * (raw.size / total)


def normalize_log_weights(logw):
    """Weights exp(logw) normalised to sum M, computed with log-sum-exp."""
    logw = np.asarray(logw, dtype=float)
    if logw.size == 0 or not np.any(np.isfinite(logw)) or np.any(logw == np.inf):
        raise DegeneracyError("no finite log-weight")
    lse = logsumexp(logw)
    return np.exp(logw - lse + np.log(logw.size))


def effective_sample_size(weights):
    """M_eff = M^2 / sum(w^2) for weights summing to M."""
    w = np.asarray(weights, dtype=float)
    M = w.size
    return M * M / np.dot(w, w)


def evidence_estimate(ensemble: Ensemble, obs: ObservationModel):
    """Return (beta, log beta) with beta = mean of l over the forecast sample."""
    ll = np.atleast_1d(log_likelihood(obs, ensemble.states))
    logbeta = logsumexp(ll) - np.log(ll.size)
    return np.exp(logbeta), logbeta


def gaussian_evidence_approx(ensemble: Ensemble, obs: ObservationModel):
    """n(y; hbar, R + P^hh) with the empirical 1/(M-1) covariance of h."""
    if ensemble.size < 2:
        raise ValueError("need at least two particles")
    hz = obs.apply(ensemble.states)
    hbar = hz.mean(axis=0)
    Phh = np.atleast_2d(np.cov(hz, rowvar=False))
    Pyy = obs.R + Phh
    try:
        chol = np.linalg.cholesky(Pyy)
    except np.linalg.LinAlgError:
        raise np.linalg.LinAlgError("P^yy is singular") from None
    return float(np.exp(gaussian_logpdf(obs.y, hbar, chol)[0]))


def empirical_moments(ensemble: Ensemble, convention="auto"):
    """Mean and covariance of an ensemble.

    convention
        "unbiased": equal weights, 1/(M-1) normalisation (Kalman gains).
        "weighted": (1/M) sum w^i (z^i - zbar)(z^i - zbar)^T with the
        weighted mean zbar = (1/M) sum w^i z^i.
        "auto": "weighted" if the ensemble carries weights, else "unbiased".
    """
    z = ensemble.states
    M = ensemble.size
    if convention == "auto":
        convention = "weighted" if ensemble.is_weighted else "unbiased"
    if convention == "unbiased":
        mean = z.mean(axis=0)
        if M < 2:
            raise ValueError("covariance needs M >= 2")
        dz = z - mean
        return mean, dz.T @ dz / (M - 1)
    if convention == "weighted":
        w = ensemble.weights
        mean = w @ z / M
        if M < 2:
            raise ValueError("covariance needs M >= 2")
        dz = z - mean
        return mean, (dz * w[:, None]).T @ dz / M
    raise ValueError(f"unknown convention {convention!r}")


@dataclass(frozen=True)
class RunRecord:
    step: int
    time: float
    rmse: float
    ess: float
    log_evidence: float

    HEADER = "step,time,rmse,ess,log_evidence"

    def csv_row(self):
        return f"{self.step},{self.time:.6f},{self.rmse:.10e},{self.ess:.10e},{self.log_evidence:.10e}"
