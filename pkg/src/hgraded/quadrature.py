"""Quadrature rules on the reference d-simplex {x in [0,1]^d : sum(x) <= 1}.

Two families are provided:

* ``conical_rule`` -- collapsed-coordinate (Duffy) Gauss-Jacobi product rule.
  Positive weights, exact for total degree ``2n - 1`` with ``n`` points per
  direction.  Used for FEM assembly.
* ``grundmann_moeller_rule`` -- the Grundmann-Moeller family, exact for
  degree ``2s + 1``.  Weights alternate in sign; fine for the moderate degrees
  used by the polynomial operators.

``simplex_moment`` gives the exact monomial integrals and serves as the
reference the rules are checked against.
"""
from functools import lru_cache
from itertools import combinations_with_replacement
from math import factorial

import numpy as np
from scipy.special import roots_jacobi

__all__ = ["conical_rule", "grundmann_moeller_rule", "simplex_rule", "simplex_moment",
           "MAX_GM_DEGREE"]

# Beyond this the alternating weights of Grundmann-Moeller lose too many digits.
MAX_GM_DEGREE = 25


def simplex_moment(q):
    """Exact integral of ``x**q`` over the reference simplex: ``prod(q!) / (|q| + d)!``."""
    q = tuple(int(v) for v in q)
    num = 1
    for v in q:
        num *= factorial(v)
    return num / factorial(sum(q) + len(q))


@lru_cache(maxsize=None)
def _conical(d, degree):
    n = max(1, (degree + 2) // 2)
    pts_1d, wts_1d = [], []
    for i in range(d):
        a = d - 1 - i  # weight (1 - u)^a in direction i
        t, w = roots_jacobi(n, a, 0)
        pts_1d.append((1.0 + t) / 2.0)
        wts_1d.append(w / 2.0 ** (a + 1))
    grids = np.meshgrid(*pts_1d, indexing="ij")
    wgrid = np.meshgrid(*wts_1d, indexing="ij")
    u = np.stack([g.ravel() for g in grids], axis=1)
    w = np.prod(np.stack([g.ravel() for g in wgrid], axis=1), axis=1)
    x = np.empty_like(u)
    scale = np.ones(u.shape[0])
    for i in range(d):
        x[:, i] = scale * u[:, i]
        scale = scale * (1.0 - u[:, i])
    return x, w


def conical_rule(d, degree):
    """Collapsed Gauss-Jacobi rule on the reference d-simplex, exact to ``degree``.

    Returns ``(points, weights)`` with ``points`` of shape ``(n, d)``.
    """
    if d == 0:
        return np.zeros((1, 0)), np.ones(1)
    x, w = _conical(int(d), int(degree))
    return x.copy(), w.copy()


@lru_cache(maxsize=None)
def _gm(d, s):
    pts, wts = [], []
    for i in range(s + 1):
        m = 2 * s + 1 + d - 2 * i
        coef = (-1) ** i * 2.0 ** (-2 * s) * m ** (2 * s + 1) / (factorial(i) * factorial(2 * s + 1 + d - i))
        k = s - i
        # compositions of k into d+1 nonnegative parts
        for combo in combinations_with_replacement(range(d + 1), k):
            beta = np.bincount(np.asarray(combo, dtype=int), minlength=d + 1) if k else np.zeros(d + 1, int)
            pts.append((2.0 * beta[1:] + 1.0) / m)
            wts.append(coef)
    return np.array(pts).reshape(-1, d), np.array(wts)


def grundmann_moeller_rule(d, degree):
    """Grundmann-Moeller rule on the reference d-simplex, exact to ``degree``.

    Raises ``ValueError`` above ``MAX_GM_DEGREE``.
    """
    if d == 0:
        return np.zeros((1, 0)), np.ones(1)
    if degree > MAX_GM_DEGREE:
        raise ValueError(f"Grundmann-Moeller degree {degree} exceeds table limit {MAX_GM_DEGREE}")
    s = max(0, int(degree) // 2)
    x, w = _gm(int(d), s)
    return x.copy(), w.copy()


def simplex_rule(d, degree, kind="conical"):
    if kind == "conical":
        return conical_rule(d, degree)
    if kind in ("gm", "grundmann-moeller"):
        return grundmann_moeller_rule(d, degree)
    raise ValueError(f"unknown quadrature kind {kind!r}")
