"""Compiled Newton solver for the semi-dual of the entropic coupling problem.

The solver is used by :func:`schrodinger_da.transport.sinkhorn` on small
problems, where interpreter overhead would otherwise dominate.
"""
import numpy as np
from numba import njit


@njit(cache=True)
def _evaluate(logK, p0, p1, a, out):
    # fills out with the column-normalised coupling, returns G(a)
    L, M = logK.shape
    G = 0.0
    for j in range(M):
        m = -np.inf
        for l in range(L):
            x = a[l] + logK[l, j]
            if x > m:
                m = x
        S = 0.0
        for l in range(L):
            e = np.exp(a[l] + logK[l, j] - m)
            out[l, j] = e
            S += e
        c = p0[j] / S
        for l in range(L):
            out[l, j] *= c
        G += p0[j] * (m + np.log(S))
    for l in range(L):
        G -= a[l] * p1[l]
    return G


@njit(cache=True)
def _row_residual(P, p1):
    L, M = P.shape
    v = 0.0
    for l in range(L):
        r = 0.0
        for j in range(M):
            r += P[l, j]
        v += abs(r - p1[l])
    return v


@njit(cache=True)
def newton_semidual(logK, p1, p0, a0, tol, max_iter, max_step):
    """Newton on G(a) = sum_j p0_j logsumexp_l(a_l + logK_lj) - a . p1.

    Returns (a, P, iterations, violation, converged). Columns of P sum to
    p0 exactly; the violation is the L1 row residual.
    """
    L, M = logK.shape
    a = a0.copy()
    P = np.empty((L, M))
    Pn = np.empty((L, M))
    G = _evaluate(logK, p0, p1, a, P)
    r = np.empty(L)
    g = np.empty(L)
    H = np.empty((L, L))
    viol = np.inf
    it = 0
    while it < max_iter:
        it += 1
        rmax = 0.0
        viol = 0.0
        for l in range(L):
            s = 0.0
            for j in range(M):
                s += P[l, j]
            r[l] = s
            g[l] = s - p1[l]
            viol += abs(g[l])
            if s > rmax:
                rmax = s
        if viol < tol:
            return a, P, it, viol, True
        for l in range(L):
            for k in range(l + 1):
                s = 0.0
                for j in range(M):
                    s += P[l, j] * P[k, j] / p0[j]
                H[l, k] = -s
                H[k, l] = -s
            H[l, l] += r[l] + 1e-12 * rmax
        d = np.linalg.solve(H, -g)
        gd = 0.0
        dmax = 0.0
        for l in range(L):
            gd += g[l] * d[l]
            if abs(d[l]) > dmax:
                dmax = abs(d[l])
        if not gd < 0.0:
            break
        step = min(1.0, max_step / dmax)
        accepted = False
        an = np.empty(L)
        Gn = np.inf
        while step > 1e-12:
            for l in range(L):
                an[l] = a[l] + step * d[l]
            Gn = _evaluate(logK, p0, p1, an, Pn)
            if np.isfinite(Gn):
                if Gn <= G + 1e-4 * step * gd:
                    accepted = True
                # near the solution G is flat to round-off; judge by the residual
                elif step == 1.0 and _row_residual(Pn, p1) < 0.5 * viol:
                    accepted = True
            if accepted:
                break
            step *= 0.5
        if not accepted:
            break
        a = an
        P, Pn = Pn, P
        G = Gn
    return a, P, it, viol, False
