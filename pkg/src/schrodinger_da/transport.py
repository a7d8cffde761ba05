"""Sinkhorn scaling, optimal transport resampling and sample-based chains.

Conventions
-----------
:func:`sinkhorn` works with probability marginals: ``P @ 1 = p1`` and
``P.T @ 1 = p0`` with both vectors summing to one. Filters use the
column-stochastic scaling instead (columns sum to one); the conversion is a
multiplication by M and is done at each call site.
"""
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.optimize import linprog

from ._newton import newton_semidual
from .exceptions import ConvergenceError

KERNEL_FLOOR = 1e-300
LOG_KERNEL_FLOOR = np.log(KERNEL_FLOOR)
EXACT_THRESHOLD = 256
ENTROPIC_SCALE = 0.05

# scaling vectors are folded back into the kernel once they leave e^{+-ABSORB}
_ABSORB = 200.0
_NEWTON_MAX_STEP = 1e3


@dataclass
class Coupling:
    """Coupling matrix with its marginals and diagonal scalings.

    For Sinkhorn output P = D(u) Q D(v)^-1 with Q the (floored) kernel,
    normalised so that p0 . log v = 0.
    ``log_u``/``log_v`` are kept because u and v themselves may overflow.
    Exact OT couplings have no scalings (u, v are None).
    """

    P: np.ndarray
    p1: np.ndarray
    p0: np.ndarray
    u: Optional[np.ndarray] = None
    v: Optional[np.ndarray] = None
    log_u: Optional[np.ndarray] = None
    log_v: Optional[np.ndarray] = None
    n_iter: int = 0
    violation: float = 0.0
    history: list = field(default_factory=list)

    def marginal_violation(self):
        P = self.P
        r = np.asarray(P.sum(axis=1)).ravel()
        c = np.asarray(P.sum(axis=0)).ravel()
        return max(np.abs(r - self.p1).sum(), np.abs(c - self.p0).sum())


@dataclass
class MarkovChain:
    """Column-stochastic L x M transition matrix (column j: law given z0^j)."""

    Q: np.ndarray
    coupling: Optional[Coupling] = None

    def __post_init__(self):
        self.Q = np.asarray(self.Q, dtype=float)


def _log_kernel(Q, log_domain):
    if log_domain:
        logK = np.asarray(Q, dtype=float)
        if np.isnan(logK).any():
            raise ValueError("log-kernel contains NaN")
        # finite log-values are exact here; only log(0) needs the floor
        if np.isneginf(logK).any():
            logK = np.where(np.isneginf(logK), LOG_KERNEL_FLOOR, logK)
        return logK
    Q = np.asarray(Q, dtype=float)
    if np.any(Q < 0) or not np.all(np.isfinite(Q)):
        raise ValueError("kernel entries must be finite and non-negative")
    return np.log(np.maximum(Q, KERNEL_FLOOR))


def logsumexp(x, axis):
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    return np.log(np.sum(np.exp(x - m), axis=axis)) + np.squeeze(m, axis=axis)


def _check_marginal(p, name):
    p = np.asarray(p, dtype=float).ravel()
    if np.any(p <= 0) or not np.all(np.isfinite(p)):
        raise ValueError(f"{name} must be strictly positive")
    if abs(p.sum() - 1.0) > 1e-9:
        raise ValueError(f"{name} must sum to one (got {p.sum()!r})")
    return p


def _fill_kernel(out, logK, a, b):
    np.add(logK, a[:, None], out=out)
    out -= b[None, :]
    np.exp(out, out=out)
    return out


class _Anderson:
    """Type-II Anderson mixing for the fixed point x = g(x)."""

    def __init__(self, memory=10):
        self.memory = memory
        self.X = []
        self.F = []

    def reset(self):
        self.X.clear()
        self.F.clear()

    def __call__(self, x, g):
        self.X.append(g)
        self.F.append(g - x)
        if len(self.X) > self.memory + 1:
            self.X.pop(0)
            self.F.pop(0)
        if len(self.X) < 2:
            return g
        dF = np.diff(np.asarray(self.F), axis=0).T
        dX = np.diff(np.asarray(self.X), axis=0).T
        coef = np.linalg.lstsq(dF, self.F[-1], rcond=1e-12)[0]
        out = g - dX @ coef
        if not np.all(np.isfinite(out)):
            self.reset()
            return g
        return out


def _newton_semidual(logK, p1, p0, a, tol, max_iter=100):
    """Newton on the semi-dual in the row potentials (compiled kernel).

    Returns (a, P, iterations, violation) with P None if it stalled.
    """
    try:
        a, P, it, viol, ok = newton_semidual(np.ascontiguousarray(logK), p1, p0,
                                             np.ascontiguousarray(a, dtype=float),
                                             float(tol), int(max_iter), _NEWTON_MAX_STEP)
    except (np.linalg.LinAlgError, ZeroDivisionError):
        return a, None, 0, np.inf
    return a, (P if ok else None), it, viol


def sinkhorn(Q, p1, p0, tol=1e-8, max_iter=10_000, log_domain=False,
             record_history=False, accelerate=True, newton_after=20,
             newton_max_size=1000) -> Coupling:
    """Solve min KL(P || Q) subject to P 1 = p1, P^T 1 = p0.

    Parameters
    ----------
    Q : (L, M) array
        Positive kernel, or its logarithm when ``log_domain`` is True.
        Zero entries (or -inf logs) are floored; finite log entries are used as given.
    p1, p0 : probability vectors of length L and M.
    tol : stop once max(|P1 - p1|_1, |P^T 1 - p0|_1) < tol.

    Each sweep is the column step v = (D(u) Q)^T 1 / p0 followed by the
    row update u = p1 / (Q D(v)^-1 1), so the column marginal is exact on
    return and the reported violation is the row one.

    With ``accelerate`` the row log-scaling is Anderson-mixed over the last
    ten sweeps. This has the same fixed point and cuts the sweep count by
    one to two orders of magnitude on narrow kernels. A mixing step that
    makes the violation blow up clears the mixing memory.

    Problems with at most ``newton_max_size`` rows that are still not
    converged after ``newton_after`` sweeps are finished by Newton's method
    on the semi-dual in the row potentials. Narrow kernels on well separated
    points (scalings of e^50 and more) need thousands of sweeps but only a
    few dozen Newton steps. The iteration count then includes the Newton
    steps.

    The scalings live in the log domain (P = exp(log u + log Q - log v)).
    Sweeps run in plain arithmetic on the rescaled kernel and the scalings
    are folded back into the logs once they grow past e^200; if anything
    underflows the solver continues with log-sum-exp sweeps.
    """
    logK = _log_kernel(Q, log_domain)
    L, M = logK.shape
    p1 = _check_marginal(p1, "p1")
    p0 = _check_marginal(p0, "p0")
    if p1.size != L or p0.size != M:
        raise ValueError("marginal sizes do not match the kernel")

    a = -logK.max(axis=1)
    b = np.zeros(M)
    K = _fill_kernel(np.empty_like(logK), logK, a, b)
    s = p1 / K.sum(axis=1)
    t = np.ones(M)
    mix = _Anderson() if accelerate else None
    history = []
    viol = best = np.inf
    it = 0
    fast = True
    with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
        while it < max_iter:
            if it >= newton_after and L <= newton_max_size:
                a0 = a + np.log(s) if fast else a
                if not np.all(np.isfinite(a0)):
                    a0 = np.log(p1) - logsumexp(logK, axis=1)
                a_n, P_n, k, viol_n = _newton_semidual(logK, p1, p0, a0, tol,
                                                       max_iter=min(500, max_iter - it))
                it += k
                if P_n is not None:
                    b_n = logsumexp(a_n[:, None] + logK, axis=0) - np.log(p0)
                    if record_history:
                        history.append(viol_n)
                    return _coupling(P_n, p1, p0, a_n, b_n, it, viol_n, history)
                newton_after = max_iter
                continue
            if fast:
                t = (K.T @ s) / p0
                kt = K @ (1.0 / t)
                it += 1
                ok = np.all(np.isfinite(t)) and np.all(t > 0) and np.all(np.isfinite(kt)) and np.all(kt > 0)
                if not ok:
                    fast = False
                    continue
                viol = np.abs(s * kt - p1).sum()
                if record_history:
                    history.append(viol)
                if viol < tol:
                    break
                s_new = p1 / kt
                if mix is None:
                    s = s_new
                else:
                    if viol > 1e3 * best:
                        mix.reset()
                    best = min(best, viol)
                    with np.errstate(over="ignore", divide="ignore"):
                        s = np.exp(mix(np.log(s), np.log(s_new)))
                    if not (np.all(np.isfinite(s)) and np.all(s > 0)):
                        mix.reset()
                        s = s_new
                if max(np.abs(np.log(s)).max(), np.abs(np.log(t)).max()) > _ABSORB:
                    a += np.log(s)
                    b += np.log(t)
                    _fill_kernel(K, logK, a, b)
                    s = np.ones(L)
                    t = np.ones(M)
                    if mix is not None:
                        mix.reset()
            else:
                a = np.log(p1) - logsumexp(logK - b[None, :], axis=1)
                b = logsumexp(a[:, None] + logK, axis=0) - np.log(p0)
                r = np.exp(logsumexp(a[:, None] + logK - b[None, :], axis=1))
                viol = np.abs(r - p1).sum()
                it += 1
                if record_history:
                    history.append(viol)
                if viol < tol:
                    break
    if not viol < tol:
        raise ConvergenceError(
            f"Sinkhorn did not reach tol={tol:g} in {max_iter} iterations "
            f"(violation {viol:.3e})", violation=viol, n_iter=it)
    if fast:
        a += np.log(s)
        b += np.log(t)
        P = K
        P *= s[:, None]
        P /= t[None, :]
    else:
        P = _fill_kernel(K, logK, a, b)
    return _coupling(P, p1, p0, a, b, it, viol, history)


def _coupling(P, p1, p0, a, b, it, viol, history):
    # (u, v) are fixed up to a common factor; pick p0 . log v = 0
    shift = p0 @ b
    a = a - shift
    b = b - shift
    with np.errstate(over="ignore"):
        u, v = np.exp(a), np.exp(b)
    return Coupling(P=P, p1=p1, p0=p0, u=u, v=v, log_u=a, log_v=b,
                    n_iter=it, violation=viol, history=history)


def kl_bistochastic(P, Q):
    """KL(P || Q) = sum p log(p / q), with 0 log 0 = 0."""
    P = np.asarray(P, dtype=float)
    Q = np.asarray(Q, dtype=float)
    mask = P > 0
    if np.any(Q[mask] <= 0):
        raise ValueError("P is not absolutely continuous with respect to Q")
    return float(np.sum(P[mask] * (np.log(P[mask]) - np.log(Q[mask]))))


def markov_from_samples(log_density: Callable, z1s, z0s, tol=1e-8, max_iter=10_000) -> MarkovChain:
    """Sample-based chain Q+ = M P* with uniform marginals.

    ``log_density(z1s, z0s)`` must return the (L, M) matrix of
    log q+(z1^l | z0^j).
    """
    z1s = np.atleast_2d(z1s)
    z0s = np.atleast_2d(z0s)
    L, M = z1s.shape[0], z0s.shape[0]
    if L < M:
        raise ValueError("need at least as many forecast samples as prior samples")
    logQ = np.asarray(log_density(z1s, z0s), dtype=float)
    c = sinkhorn(logQ, np.full(L, 1.0 / L), np.full(M, 1.0 / M), tol=tol,
                 max_iter=max_iter, log_domain=True)
    return MarkovChain(M * c.P, c)


def gaussian_log_kernel(means, cov_scale):
    """(z1s, _) -> log n(z1^l; means[j], cov_scale * I) as an (L, M) matrix.

    Normalisation constants are dropped; they cancel in Sinkhorn.
    """
    means = np.atleast_2d(means)

    def log_q(z1s, z0s=None):
        d2 = sq_distances(np.atleast_2d(z1s), means)
        return -0.5 * d2 / cov_scale

    return log_q


def sq_distances(x, y):
    """Matrix of squared Euclidean distances between rows of x and y."""
    x = np.atleast_2d(x)
    y = np.atleast_2d(y)
    if x.shape[1] == 1:
        return (x - y.T) ** 2
    d2 = (x * x).sum(1)[:, None] + (y * y).sum(1)[None, :] - 2.0 * x @ y.T
    return np.maximum(d2, 0.0)


def twist_markov(chain, u):
    """Twisted chain D(u) Q+ D(v)^-1 with v = (D(u) Q+)^T 1.

    Returns the twisted :class:`MarkovChain` and v.
    """
    Q = chain.Q if isinstance(chain, MarkovChain) else np.asarray(chain, dtype=float)
    u = np.asarray(u, dtype=float)
    if np.any(u <= 0):
        raise ValueError("twisting potential must be positive")
    uQ = u[:, None] * Q
    v = uQ.sum(axis=0)
    if np.any(v <= 0):
        raise ValueError("twisting produced an empty column")
    return MarkovChain(uQ / v[None, :]), v


def compose_sde_markov(chains: Sequence) -> MarkovChain:
    """Q+ = Q_N ... Q_1 for per-step chains ordered n = 1..N.

    Each Q_n maps the time-(n-1) particles (columns) to the time-n
    particles (rows), so later steps multiply from the left.
    """
    mats = [c.Q if isinstance(c, MarkovChain) else np.asarray(c, dtype=float) for c in chains]
    if not mats:
        raise ValueError("empty chain list")
    out = mats[0]
    for Qn in mats[1:]:
        out = Qn @ out
    return MarkovChain(out)


def sde_markov_chains(paths, drift, gamma, dt, t0=0.0, tol=1e-8):
    """Per-step chains Q_n^+ (n = 1..N) from M Euler-Maruyama paths.

    ``paths`` has shape (M, N+1, Nz). Kernel entries are
    n(z_n^l; z_{n-1}^j + dt f(z_{n-1}^j), gamma dt I).
    """
    paths = np.asarray(paths, dtype=float)
    M, N1, _ = paths.shape
    chains = []
    for n in range(1, N1):
        zprev = paths[:, n - 1]
        means = zprev + dt * drift(t0 + (n - 1) * dt, zprev)
        log_q = gaussian_log_kernel(means, gamma * dt)
        chains.append(markov_from_samples(log_q, paths[:, n], zprev, tol=tol))
    return chains


# -- optimal transport resampling -------------------------------------------

def _monotone_coupling(x, a, b):
    """Monotone rearrangement on sorted 1-D support: exact OT for convex cost."""
    order = np.argsort(x, kind="stable")
    ca = np.cumsum(a[order])
    cb = np.cumsum(b[order])
    ca[-1] = cb[-1] = 1.0
    brk = np.union1d(ca, cb)
    brk = brk[brk <= 1.0]
    lo = np.concatenate([[0.0], brk[:-1]])
    mass = brk - lo
    keep = mass > 1e-300
    mid = 0.5 * (lo + brk)[keep]
    n = x.size
    i = np.minimum(np.searchsorted(ca, mid, side="right"), n - 1)
    j = np.minimum(np.searchsorted(cb, mid, side="right"), n - 1)
    P = sp.coo_matrix((mass[keep], (order[i], order[j])), shape=(n, n)).tocsc()
    P.sum_duplicates()
    return P


def _exact_lp(C, a, b):
    n = a.size
    eye = sp.identity(n, format="csr")
    ones = np.ones((1, n))
    A_eq = sp.vstack([sp.kron(eye, ones), sp.kron(ones, eye)], format="csr")
    b_eq = np.concatenate([a, b])
    res = linprog(C.ravel(), A_eq=A_eq, b_eq=b_eq, bounds=(0, None), method="highs")
    if res.status != 0:
        raise RuntimeError(f"transport LP failed: {res.message}")
    return np.maximum(res.x.reshape(n, n), 0.0)


def ot_resampling_matrix(states, weights, exact_threshold=EXACT_THRESHOLD, reg=None) -> Coupling:
    """Optimal coupling between weighted and equally weighted particles.

    Minimises sum p_ij |z^i - z^j|^2 with row sums w^i and column sums 1
    (w sums to M). The returned ``P`` is in this column-stochastic scaling;
    ``p1 = w/M`` and ``p0 = 1/M`` record the probability marginals, so
    ``P / M`` is the probability coupling.

    Scalar states are solved exactly at any M by the monotone rearrangement
    (sparse output). Otherwise an exact LP is used for M <= exact_threshold
    and an entropic approximation with ``reg`` (default 0.05 times the
    median squared distance) above.
    """
    z = np.asarray(states, dtype=float)
    if z.ndim == 1:
        z = z[:, None]
    w = np.asarray(weights, dtype=float).ravel()
    M = z.shape[0]
    if w.size != M:
        raise ValueError("one weight per particle required")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValueError("weights must be finite and non-negative")
    if abs(w.sum() - M) > 1e-9 * M:
        raise ValueError("weights must sum to M")
    p1 = w / M
    p0 = np.full(M, 1.0 / M)
    if z.shape[1] == 1:
        P = _monotone_coupling(z[:, 0], p1, p0)
        if M <= exact_threshold:
            P = P.toarray()
        return Coupling(P=M * P, p1=p1, p0=p0)
    C = sq_distances(z, z)
    if M <= exact_threshold:
        return Coupling(P=M * _exact_lp(C, p1, p0), p1=p1, p0=p0)
    if reg is None:
        off = C[np.triu_indices(M, 1)]
        reg = ENTROPIC_SCALE * np.median(off)
        if not reg > 0:
            reg = 1.0
    keep = p1 > 0
    c = sinkhorn(-C[keep] / reg, p1[keep] / p1[keep].sum(), p0, log_domain=True)
    P = np.zeros((M, M))
    P[keep] = c.P
    u = np.zeros(M)
    u[keep] = c.u
    return Coupling(P=M * P, p1=p1, p0=p0, u=u, v=c.v, n_iter=c.n_iter, violation=c.violation)


def sample_columns(P, rng):
    """Draw one row index per column of a column-stochastic matrix.

    Inverse-CDF with a single uniform per column. Works for dense arrays
    and scipy sparse matrices.
    """
    U = rng.random(P.shape[1])
    if sp.issparse(P):
        P = sp.csc_matrix(P)
        P.sort_indices()
        out = np.empty(P.shape[1], dtype=int)
        for j in range(P.shape[1]):
            lo, hi = P.indptr[j], P.indptr[j + 1]
            cdf = np.cumsum(P.data[lo:hi])
            k = np.searchsorted(cdf, U[j] * cdf[-1], side="right")
            out[j] = P.indices[lo + min(k, hi - lo - 1)]
        return out
    P = np.asarray(P)
    cdf = np.cumsum(P, axis=0)
    idx = (cdf < U[None, :] * cdf[-1][None, :]).sum(axis=0)
    return np.minimum(idx, P.shape[0] - 1)
