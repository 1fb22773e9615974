"""Independent reference implementations used by the test suite."""

import itertools
import math

import numpy as np
from scipy.optimize import linprog


def naive_mmd2(x, y, sigma):
    k = lambda a, b: math.exp(-sum((ai - bi) ** 2 for ai, bi in zip(a, b)) / (2 * sigma * sigma))
    n, m = len(x), len(y)
    xx = sum(k(a, b) for a in x for b in x) / n ** 2
    yy = sum(k(a, b) for a in y for b in y) / m ** 2
    xy = sum(k(a, b) for a in x for b in y) / (n * m)
    return xx + yy - 2 * xy


def perm_oracle(c):
    """Uniform square OT optimum by enumerating permutation matrices (Birkhoff vertices)."""
    n = len(c)
    return min(sum(c[i][p[i]] for i in range(n)) for p in itertools.permutations(range(n))) / n


def lp_oracle(c):
    """Uniform-marginal OT by a dual-simplex LP built from Kronecker constraint blocks."""
    c = np.asarray(c, dtype=float)
    n, m = c.shape
    rows = np.kron(np.eye(n), np.ones((1, m)))
    cols = np.kron(np.ones((1, n)), np.eye(m))
    res = linprog(c.reshape(-1), A_eq=np.vstack([rows, cols]),
                  b_eq=np.r_[np.full(n, 1 / n), np.full(m, 1 / m)], method="highs-ds")
    return res.fun


def bisection_expectile(y, zeta, weights=None, tol=1e-12):
    """Root of the ALS balance condition  zeta*sum_{y>m} w(y-m) = (1-zeta)*sum_{y<m} w(m-y)."""
    y = np.asarray(y, dtype=float)
    w = np.ones_like(y) if weights is None else np.asarray(weights, dtype=float)

    def balance(m):
        return zeta * np.sum(w * np.maximum(y - m, 0)) - (1 - zeta) * np.sum(w * np.maximum(m - y, 0))

    lo, hi = y.min(), y.max()
    while hi - lo > tol * (1 + abs(lo) + abs(hi)):
        mid = 0.5 * (lo + hi)
        if balance(mid) > 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def direct_td(rewards, gamma, bootstrap, i, t):
    return sum(gamma ** (j - i) * rewards[j] for j in range(i, t)) + gamma ** (t - i) * bootstrap


def central_diff(f, x, h=1e-6):
    """Central finite differences of scalar ``f`` at flat vector ``x`` (float64)."""
    g = np.zeros_like(x)
    for i in range(len(x)):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g
