"""Polynomials on the reference d-simplex and the operators built on them.

``T^d = {x in [0,1]^d : sum(x) <= 1}`` has nodes ``N_0 = 0`` and
``N_j = e_j``.  Face ``i`` is the (d-1)-simplex opposite node ``i``; its
parametrization runs over the remaining nodes in ascending order,
``gamma_i(t) = N_a0 + sum_j t_j (N_aj - N_a0)``.

Provided operators:

* ``lift_face``      -- ray lifting from one face, vanishing at the opposite node
* ``lift_sum``       -- sum of the face liftings of boundary data
* ``combined_lift``  -- exact-trace polynomial lifting of boundary data
* ``degree_reduce``  -- projection P_{p+2} -> P_p whose traces on every
                        sub-simplex only see the input's trace there
* ``elementwise_reduce`` -- the same projection applied element by element
                        to a continuous spline on a triangle mesh

Polynomials use dense monomial coefficients.  At 64-bit precision the
coefficient-level identities hold to 1e-9 for p <= 6 in dimensions 1 to 3
(``MAX_RELIABLE_DEGREE``).  Beyond that the monomial basis loses accuracy:
the projection identity degrades to about 1e-9 at p = 7 and 3e-8 at p = 8.
"""
from functools import lru_cache
from itertools import combinations, product
from math import comb, factorial

import numpy as np
from scipy.signal import convolve

from .quadrature import conical_rule, grundmann_moeller_rule

__all__ = [
    "SimplexPoly", "BoundaryPoly", "IncompatibleTraceError", "MAX_RELIABLE_DEGREE",
    "nodes", "face_nodes", "face_map", "subsimplex_map", "sample_subsimplex",
    "face_measure", "volume_factor", "lift_face", "lift_sum", "combined_lift",
    "lift_coefficients", "telescoping_residual", "bubble_basis", "homogeneous_projection",
    "degree_reduce", "reduction_matrix", "reduction_constants", "vanishing_on_k_simplices",
    "best_approximation_error",
    "poly_quadrature_norm", "l2_inner", "Spline", "spline_from_bernstein",
    "elementwise_reduce", "spline_jumps", "reduction_error_ratios",
]

MAX_RELIABLE_DEGREE = 6


class IncompatibleTraceError(ValueError):
    pass


def _grid(d, p):
    """Multi-indices q with |q| <= p, as an int array (m, d)."""
    if d == 0:
        return np.zeros((1, 0), dtype=int)
    g = np.array(list(product(range(p + 1), repeat=d)), dtype=int)
    return g[g.sum(axis=1) <= p]


@lru_cache(maxsize=None)
def _mask(d, p):
    if d == 0:
        return np.array(True)
    tot = np.zeros((p + 1,) * d, dtype=int)
    for ax in range(d):
        shape = [1] * d
        shape[ax] = p + 1
        tot = tot + np.arange(p + 1).reshape(shape)
    return tot <= p


class SimplexPoly:
    """Polynomial of total degree <= p in d variables, monomial basis.

    ``coef[q]`` multiplies ``x**q``; the array has shape ``(p+1,)*d`` with
    zeros wherever ``|q| > p``.  ``d = 0`` gives constants.
    """
    __slots__ = ("d", "p", "coef")

    def __init__(self, coef, p=None):
        coef = np.asarray(coef, dtype=float)
        d = coef.ndim
        if p is None:
            p = coef.shape[0] - 1 if d else 0
        if d and coef.shape != (p + 1,) * d:
            raise ValueError(f"coefficient shape {coef.shape} does not match degree {p}")
        if d and np.any(coef[~_mask(d, p)] != 0.0):
            raise ValueError("coefficients beyond total degree p")
        self.d, self.p, self.coef = d, int(p), coef

    @classmethod
    def zeros(cls, d, p):
        return cls(np.zeros((p + 1,) * d), p)

    @classmethod
    def constant(cls, d, p, value):
        out = cls.zeros(d, p)
        out.coef[(0,) * d] = value
        return out

    @classmethod
    def monomial(cls, d, p, q):
        out = cls.zeros(d, p)
        out.coef[tuple(q)] = 1.0
        return out

    @classmethod
    def from_dict(cls, d, p, terms):
        out = cls.zeros(d, p)
        for q, v in terms.items():
            if sum(q) > p:
                raise ValueError(f"multi-index {q} exceeds degree {p}")
            out.coef[tuple(q)] += v
        return out

    @classmethod
    def random(cls, d, p, rng):
        out = cls.zeros(d, p)
        m = _mask(d, p)
        out.coef[m] = rng.standard_normal(int(np.sum(m)))
        return out

    @classmethod
    def linear(cls, d, const, grad, p=1):
        """const + grad . x"""
        out = cls.constant(d, p, const)
        for j, g in enumerate(grad):
            q = [0] * d
            q[j] = 1
            out.coef[tuple(q)] = g
        return out

    def to_dict(self, tol=0.0):
        return {tuple(int(v) for v in q): float(self.coef[tuple(q)])
                for q in _grid(self.d, self.p) if abs(self.coef[tuple(q)]) > tol}

    @property
    def degree(self):
        """Actual total degree (-1 for the zero polynomial)."""
        nz = [int(np.sum(q)) for q in _grid(self.d, self.p) if self.coef[tuple(q)] != 0.0]
        return max(nz, default=-1)

    def copy(self):
        return SimplexPoly(self.coef.copy(), self.p)

    def with_degree(self, p):
        """Same polynomial stored at nominal degree ``p``."""
        if p == self.p:
            return self.copy()
        if p < self.p and self.degree > p:
            raise ValueError(f"cannot truncate a degree-{self.degree} polynomial to degree {p}")
        out = SimplexPoly.zeros(self.d, p)
        n = min(p, self.p) + 1
        sl = (slice(0, n),) * self.d
        out.coef[sl] = self.coef[sl]
        return out

    def _binary(self, other, op):
        if np.isscalar(other):
            other = SimplexPoly.constant(self.d, 0, other)
        if other.d != self.d:
            raise ValueError("dimension mismatch")
        p = max(self.p, other.p)
        return SimplexPoly(op(self.with_degree(p).coef, other.with_degree(p).coef), p)

    def __add__(self, other):
        return self._binary(other, np.add)

    __radd__ = __add__

    def __sub__(self, other):
        return self._binary(other, np.subtract)

    def __rsub__(self, other):
        return (-self) + other

    def __neg__(self):
        return SimplexPoly(-self.coef, self.p)

    def __mul__(self, other):
        if np.isscalar(other):
            return SimplexPoly(self.coef * other, self.p)
        if other.d != self.d:
            raise ValueError("dimension mismatch")
        if self.d == 0:
            return SimplexPoly(self.coef * other.coef, 0)
        return SimplexPoly(convolve(self.coef, other.coef, method="direct"), self.p + other.p)

    __rmul__ = __mul__

    def __call__(self, x):
        """Evaluate at points ``x`` of shape ``(n, d)``."""
        x = np.asarray(x, dtype=float)
        if self.d == 0:
            return np.full(x.shape[0] if x.ndim else 1, float(self.coef))
        x = x.reshape(-1, self.d)
        powers = x[:, :, None] ** np.arange(self.p + 1)[None, None, :]
        operands = [self.coef, list(range(1, self.d + 1))]
        for j in range(self.d):
            operands += [powers[:, j, :], [0, j + 1]]
        return np.einsum(*operands, [0], optimize=True)

    def grad(self):
        """List of partial derivatives."""
        out = []
        for j in range(self.d):
            c = np.zeros_like(self.coef)
            src = [slice(None)] * self.d
            dst = [slice(None)] * self.d
            src[j] = slice(1, None)
            dst[j] = slice(0, -1)
            k = np.arange(1, self.p + 1).reshape([-1 if a == j else 1 for a in range(self.d)])
            c[tuple(dst)] = self.coef[tuple(src)] * k
            out.append(SimplexPoly(c, self.p))
        return out

    def compose_affine(self, A, b):
        """``t -> self(A @ t + b)`` as a polynomial in ``A.shape[1]`` variables."""
        A = np.asarray(A, dtype=float).reshape(self.d, -1)
        b = np.asarray(b, dtype=float).reshape(self.d)
        T = _composition_matrix(self.d, A.shape[1], self.p, A.tobytes(), b.tobytes())
        k = A.shape[1]
        shape = (self.p + 1,) * k
        return SimplexPoly((T @ self.coef.ravel()).reshape(shape), self.p)

    def allclose(self, other, atol):
        return bool(np.max(np.abs((self - other).coef), initial=0.0) <= atol)

    def __repr__(self):
        return f"SimplexPoly(d={self.d}, p={self.p}, terms={len(self.to_dict())})"


def _times_linear(P, const, slope):
    """Multiply coefficient array P (degree < p, stored at size p+1) by
    const + slope . t."""
    out = const * P
    for j, s in enumerate(slope):
        if s == 0.0:
            continue
        src = [slice(None)] * P.ndim
        dst = [slice(None)] * P.ndim
        src[j] = slice(0, -1)
        dst[j] = slice(1, None)
        out[tuple(dst)] += s * P[tuple(src)]
    return out


@lru_cache(maxsize=4096)
def _composition_matrix(d, k, p, A_bytes, b_bytes):
    A = np.frombuffer(A_bytes).reshape(d, k)
    b = np.frombuffer(b_bytes)
    n_in = (p + 1) ** d
    n_out = (p + 1) ** k
    T = np.zeros((n_out, n_in))
    cache = {(0,) * d: np.zeros((p + 1,) * k)}
    cache[(0,) * d][(0,) * k] = 1.0
    for q in sorted(map(tuple, _grid(d, p)), key=sum):
        if q not in cache:
            i = next(j for j in range(d) if q[j] > 0)
            prev = list(q)
            prev[i] -= 1
            cache[q] = _times_linear(cache[tuple(prev)], b[i], A[i])
        T[:, np.ravel_multi_index(q, (p + 1,) * d) if d else 0] = cache[q].ravel()
    T.setflags(write=False)
    return T


# --------------------------------------------------------------------------
# reference geometry

def nodes(d):
    """(d+1, d) node coordinates 0, e_1, ..., e_d."""
    return np.vstack([np.zeros(d), np.eye(d)])


def face_nodes(d, i):
    return tuple(j for j in range(d + 1) if j != i)


def subsimplex_map(d, node_ids):
    """Affine parametrization ``(A, b)`` of the sub-simplex on ``node_ids``
    (ascending order), ``sigma(t) = A t + b``."""
    ids = sorted(node_ids)
    N = nodes(d)
    b = N[ids[0]]
    A = (N[ids[1:]] - b).T.reshape(d, len(ids) - 1)
    return A, b


def face_map(d, i):
    return subsimplex_map(d, face_nodes(d, i))


def face_measure(d, i):
    """Surface element C1 = sqrt(det(E^T E)) of the parametrization of face i."""
    A, _ = face_map(d, i)
    return float(np.sqrt(np.linalg.det(A.T @ A))) if A.shape[1] else 1.0


def volume_factor(d, i):
    """C2 = |det(N_a1 - N_a0 | ... | N_i - N_a0)| for the lift off face i."""
    A, b = face_map(d, i)
    M = np.column_stack([A, nodes(d)[i] - b])
    return float(abs(np.linalg.det(M)))


def sample_subsimplex(d, node_ids, n, rng):
    """``n`` random points on the sub-simplex spanned by ``node_ids``."""
    ids = sorted(node_ids)
    w = rng.dirichlet(np.ones(len(ids)), size=n)
    return w @ nodes(d)[ids]


def barycentric(x):
    x = np.atleast_2d(x)
    return np.concatenate([1.0 - x.sum(axis=1, keepdims=True), x], axis=1)


# --------------------------------------------------------------------------
# boundary data

class BoundaryPoly:
    """Piecewise polynomial on the boundary of T^d: ``faces[i]`` is the
    pull-back ``f o gamma_i`` (a (d-1)-variate polynomial)."""

    def __init__(self, d, faces, check=True, tol=1e-11):
        if len(faces) != d + 1:
            raise ValueError(f"need {d + 1} faces, got {len(faces)}")
        if any(f.d != d - 1 for f in faces):
            raise ValueError("face polynomials must have dimension d-1")
        self.d = d
        p = max(f.p for f in faces)
        self.faces = [f.with_degree(p) for f in faces]
        if check:
            gap = self.compatibility_gap()
            scale = max(1.0, max(np.abs(f.coef).max() for f in self.faces))
            if gap > tol * scale:
                raise IncompatibleTraceError(f"face traces disagree by {gap:.3e} on shared sub-simplices")

    @property
    def p(self):
        return self.faces[0].p

    @classmethod
    def trace_of(cls, f):
        return cls(f.d, [f.compose_affine(*face_map(f.d, i)) for i in range(f.d + 1)], check=False)

    def compatibility_gap(self, n_samples=8, seed=0):
        d = self.d
        if d < 2:
            return 0.0
        rng = np.random.default_rng(seed)
        gap = 0.0
        for i, j in combinations(range(d + 1), 2):
            shared = [k for k in range(d + 1) if k not in (i, j)]
            x = sample_subsimplex(d, shared, n_samples, rng)
            gap = max(gap, float(np.abs(self.face_values(i, x) - self.face_values(j, x)).max()))
        return gap

    def face_values(self, i, x):
        """Evaluate face ``i``'s polynomial at ambient points ``x`` on that face."""
        lam = barycentric(x)
        t = lam[:, list(face_nodes(self.d, i))[1:]]
        return self.faces[i](t)

    def __call__(self, x):
        """Evaluate at ambient boundary points (face picked by the smallest
        barycentric coordinate)."""
        x = np.atleast_2d(x)
        lam = barycentric(x)
        which = np.argmin(lam, axis=1)
        out = np.empty(len(x))
        for i in np.unique(which):
            sel = which == i
            out[sel] = self.face_values(i, x[sel])
        return out

    def node_value(self, n):
        """Value at node ``n`` read from the first face containing it."""
        i = next(k for k in range(self.d + 1) if k != n)
        return float(self.face_values(i, nodes(self.d)[n][None, :])[0])

    def _combine(self, other, op):
        return BoundaryPoly(self.d, [op(a, b) for a, b in zip(self.faces, other.faces)], check=False)

    def __add__(self, other):
        return self._combine(other, lambda a, b: a + b)

    def __sub__(self, other):
        return self._combine(other, lambda a, b: a - b)

    def __mul__(self, s):
        return BoundaryPoly(self.d, [f * s for f in self.faces], check=False)

    __rmul__ = __mul__

    def max_abs_coef(self):
        return max(float(np.abs(f.coef).max()) for f in self.faces)

    def max_abs_sampled(self, n=200, seed=0):
        rng = np.random.default_rng(seed)
        worst = 0.0
        for i in range(self.d + 1):
            x = sample_subsimplex(self.d, face_nodes(self.d, i), n, rng)
            worst = max(worst, float(np.abs(self.face_values(i, x)).max()))
        return worst


# --------------------------------------------------------------------------
# liftings

@lru_cache(maxsize=None)
def _lift_local_to_ambient(d, i):
    """Affine map x -> u with u the coordinates of x relative to
    (N_a0; N_a1 - N_a0, ..., N_i - N_a0)."""
    A, b = face_map(d, i)
    M = np.column_stack([A, nodes(d)[i] - b])
    Minv = np.linalg.inv(M)
    return Minv, -Minv @ b


def lift_face(f, i, p, d=None):
    """Lift ``f`` (polynomial on face ``i`` in its parametrization) into T^d.

    In coordinates ``u`` adapted to the face (last coordinate pointing at the
    opposite node) the lift is ``(1 - u_d)^p f(u' / (1 - u_d))``, i.e. the value
    of f is carried along rays to the opposite node and scaled so the result
    is a polynomial of degree ``p`` vanishing at that node.
    """
    d = f.d + 1 if d is None else d
    if f.d != d - 1:
        raise ValueError("face polynomial must have dimension d-1")
    if f.degree > p:
        raise ValueError(f"face data of degree {f.degree} exceeds lift degree {p}")
    F = f.with_degree(p)
    G = np.zeros((p + 1,) * d)
    for beta in _grid(d - 1, p):
        c = F.coef[tuple(beta)]
        if c == 0.0:
            continue
        m = p - int(beta.sum())
        for j in range(m + 1):
            G[tuple(beta) + (j,)] += c * comb(m, j) * (-1) ** j
    Minv, shift = _lift_local_to_ambient(d, i)
    return SimplexPoly(G, p).compose_affine(Minv, shift)


def lift_sum(g, p=None):
    """Sum of the face liftings of boundary data ``g``."""
    p = g.p if p is None else p
    out = SimplexPoly.zeros(g.d, p)
    for i, f in enumerate(g.faces):
        out = out + lift_face(f, i, p, g.d)
    return out


def lift_coefficients(d):
    """Expansion coefficients ``ct[k]``, k = 1..d, of
    prod_{k<d} (1 - c_k z) = 1 - sum_k ct[k] z^k with c_k = 1/(d-k)."""
    return _expanded(tuple(1.0 / (d - k) for k in range(d)))


def _expanded(c):
    poly = np.array([1.0])
    for ck in c:
        poly = np.convolve(poly, [1.0, -ck])
    ct = -poly
    ct[0] = 0.0
    return ct


def combined_lift(g, p=None, c=None):
    """Polynomial lifting with exact trace ``g`` on the whole boundary.

    ``c`` overrides the telescoping coefficients (used for mutation checks).
    """
    d = g.d
    p = g.p if p is None else p
    ct = lift_coefficients(d) if c is None else _expanded(tuple(c))
    acc = g * ct[1]
    term = g
    for k in range(1, d):
        term = BoundaryPoly.trace_of(lift_sum(term, p))
        acc = acc + term * ct[k + 1]
    return lift_sum(acc, p)


def telescoping_residual(g, p=None, c=None):
    """Apply prod_k (id - c_k R M) to ``g``; returns the resulting boundary data."""
    d = g.d
    p = g.p if p is None else p
    c = [1.0 / (d - k) for k in range(d)] if c is None else list(c)
    out = g
    for ck in c:
        out = out - BoundaryPoly.trace_of(lift_sum(out, p)) * ck
    return out


# --------------------------------------------------------------------------
# degree reduction

@lru_cache(maxsize=None)
def _bernstein_monomials(d, p):
    """Bernstein polynomials of degree p on T^d in monomial form, keyed by
    barycentric multi-index (alpha_0, ..., alpha_d)."""
    lam = [SimplexPoly.linear(d, 1.0, -np.ones(d))] + \
          [SimplexPoly.linear(d, 0.0, np.eye(d)[j]) for j in range(d)]
    out = {}
    for alpha in product(range(p + 1), repeat=d + 1):
        if sum(alpha) != p:
            continue
        term = SimplexPoly.constant(d, 0, factorial(p) / np.prod([factorial(a) for a in alpha]))
        for j, a in enumerate(alpha):
            for _ in range(a):
                term = term * lam[j]
        out[alpha] = term.with_degree(p)
    return out


def bubble_basis(d, p):
    """Basis of polynomials of degree p vanishing on the boundary of T^d:
    Bernstein polynomials with every barycentric exponent >= 1."""
    return [b for a, b in _bernstein_monomials(d, p).items() if min(a) >= 1]


@lru_cache(maxsize=None)
def _projection_data(d, p, q):
    basis = bubble_basis(d, p)
    if not basis:
        return None
    x, w = conical_rule(d, p + q)
    V = np.column_stack([b(x) for b in basis])
    gram = V.T @ (w[:, None] * V)
    # bubble coefficients in the monomial basis, embedded at degree max(p, q)
    top = max(p, q)
    B = np.column_stack([b.with_degree(top).coef.ravel() for b in basis])
    return x, w, V, np.linalg.cholesky(gram), B, np.linalg.pinv(B), top


def homogeneous_projection(r, p):
    """L2-orthogonal projection of ``r`` onto the degree-p polynomials
    vanishing on the boundary of T^d.

    The part of ``r`` already lying in that space is split off first by a
    coefficient-space least-squares fit; the L2 solve then only sees the
    remainder.  Both steps are exact for the true projection, and bubble
    inputs come back to coefficient precision instead of picking up the
    cancellation error of evaluating large monomial expansions.
    """
    data = _projection_data(r.d, p, r.p)
    if data is None:
        return SimplexPoly.zeros(r.d, p)
    x, w, V, L, B, Bpinv, top = data
    rc = r.with_degree(top).coef.ravel()
    c0 = Bpinv @ rc
    rest = SimplexPoly((rc - B @ c0).reshape((top + 1,) * r.d), top)
    rhs = V.T @ (w * rest(x))
    c1 = np.linalg.solve(L.T, np.linalg.solve(L, rhs))
    coef = B @ (c0 + c1)
    return SimplexPoly(coef.reshape((top + 1,) * r.d), top).with_degree(p)


def degree_reduce(f, p):
    """Reduce ``f`` (degree <= p+2) to degree ``p``.

    Built by induction on the dimension: reduce every face trace one
    dimension down, lift the resulting boundary data with
    ``combined_lift`` and correct the interior by the orthogonal projection
    onto the zero-trace polynomials.  The result equals ``f`` whenever
    ``f`` already has degree <= p, and its trace on any sub-simplex depends
    only on the trace of ``f`` there.
    """
    if f.degree > p + 2:
        raise ValueError(f"input degree {f.degree} exceeds p + 2 = {p + 2}")
    if f.d == 0:
        return SimplexPoly(f.coef.copy(), p)
    faces = [degree_reduce(f.compose_affine(*face_map(f.d, i)), p) for i in range(f.d + 1)]
    g = BoundaryPoly(f.d, faces, check=False)
    G = combined_lift(g, p)
    # one refinement sweep: the trace of G equals g exactly in exact
    # arithmetic, so this only removes rounding noise that the bubble
    # projection below would otherwise amplify
    G = G + combined_lift(g - BoundaryPoly.trace_of(G), p)
    return G + homogeneous_projection(f - G, p)


@lru_cache(maxsize=None)
def reduction_matrix(d, p, q=None):
    """Matrix of ``degree_reduce(., p)`` acting on flattened monomial
    coefficients of degree-``q`` inputs (default q = p + 2)."""
    q = p + 2 if q is None else q
    cols = []
    for idx in np.ndindex(*((q + 1,) * d)):
        if sum(idx) > q:
            cols.append(np.zeros((p + 1) ** d))
            continue
        cols.append(degree_reduce(SimplexPoly.monomial(d, q, idx), p).coef.ravel())
    M = np.column_stack(cols)
    M.setflags(write=False)
    return M


def reduction_constants(d, p, n_samples=20, seed=0):
    """Empirical constants of ``degree_reduce`` on random degree-(p+2) inputs.

    Returns ``(stability, error_constant)``: the max of ||J f|| / ||f|| and
    of ||f - J f|| / (p^{d(d+1)/4} inf_g ||f - g||).
    """
    rng = np.random.default_rng(seed)
    R = reduction_matrix(d, p)
    x, w = conical_rule(d, 2 * (p + 2))
    stab = err = 0.0
    for _ in range(n_samples):
        f = SimplexPoly.random(d, p + 2, rng)
        g = SimplexPoly((R @ f.coef.ravel()).reshape((p + 1,) * d), p)
        nf = np.sqrt(w @ f(x) ** 2)
        stab = max(stab, np.sqrt(w @ g(x) ** 2) / nf)
        best = best_approximation_error(f, p)
        err = max(err, np.sqrt(w @ (f(x) - g(x)) ** 2) / (p ** (d * (d + 1) / 4) * best))
    return float(stab), float(err)


def vanishing_on_k_simplices(d, k, p, rng):
    """Random degree-p polynomial on T^d vanishing on every k-simplex of T^d:
    a sum over node sets B with |B| = k + 2 of prod_{j in B} lambda_j times
    a random polynomial."""
    if k + 2 > p:
        raise ValueError("degree too low for the requested vanishing order")
    lam = [SimplexPoly.linear(d, 1.0, -np.ones(d))] + \
          [SimplexPoly.linear(d, 0.0, np.eye(d)[j]) for j in range(d)]
    out = SimplexPoly.zeros(d, p)
    for B in combinations(range(d + 1), k + 2):
        term = SimplexPoly.random(d, p - k - 2, rng)
        for j in B:
            term = term * lam[j]
        out = out + term.with_degree(p)
    return out


def best_approximation_error(f, p):
    """inf over g in P_p of ||f - g||_{L2(T^d)} via weighted least squares."""
    x, w = conical_rule(f.d, 2 * max(f.p, p))
    basis = list(_bernstein_monomials(f.d, p).values())
    V = np.column_stack([b(x) for b in basis]) * np.sqrt(w)[:, None]
    rhs = f(x) * np.sqrt(w)
    coef, *_ = np.linalg.lstsq(V, rhs, rcond=None)
    return float(np.linalg.norm(V @ coef - rhs))


# --------------------------------------------------------------------------
# norms

def poly_quadrature_norm(f, face=None, d=None):
    """L2 norm on T^d (``face is None``) or on face ``face`` of T^d, using a
    Grundmann-Moeller rule exact for the squared integrand.

    For a face, ``f`` is given in the face parametrization and the surface
    element is included.  Zero-dimensional faces use the counting measure.
    """
    if face is None:
        x, w = grundmann_moeller_rule(f.d, 2 * f.p)
        return float(np.sqrt(max(w @ f(x) ** 2, 0.0)))
    d = f.d + 1 if d is None else d
    if f.d == 0:
        return float(abs(f.coef))
    x, w = grundmann_moeller_rule(f.d, 2 * f.p)
    return float(np.sqrt(max(face_measure(d, face) * (w @ f(x) ** 2), 0.0)))


def l2_inner(f, g):
    x, w = conical_rule(f.d, f.p + g.p)
    return float(w @ (f(x) * g(x)))


# --------------------------------------------------------------------------
# splines on triangle meshes

class Spline:
    """Piecewise polynomial on a triangle mesh; ``pieces[e]`` is the
    pull-back to the reference triangle through the element's affine map
    ``x = v0 + [v1 - v0, v2 - v0] xi``."""

    def __init__(self, mesh, pieces):
        if len(pieces) != mesh.n_elements:
            raise ValueError("one polynomial per element required")
        self.mesh = mesh
        self.pieces = list(pieces)

    @property
    def p(self):
        return max(pc.p for pc in self.pieces)

    def element_values(self, e, xi):
        return self.pieces[e](xi)


def spline_from_bernstein(mesh, dofmap, u_global):
    """Convert a global Bernstein dof vector (see ``fem.build_dofmap``) into
    elementwise monomial pieces."""
    from .fem import multi_indices
    p = dofmap.p
    table = _bernstein_monomials(2, p)
    basis = [table[a] for a in multi_indices(2, p)]
    stack = np.stack([b.coef for b in basis])
    coefs = u_global[dofmap.element_dofs]
    return Spline(mesh, [SimplexPoly(np.tensordot(c, stack, axes=1), p) for c in coefs])


def elementwise_reduce(spline, p, check_tol=1e-9):
    """Apply ``degree_reduce`` to every element of a continuous spline of
    degree p+2.  Raises ``IncompatibleTraceError`` on a discontinuous input."""
    jump = spline_jumps(spline)
    scale = max(1.0, max(float(np.abs(pc.coef).max()) for pc in spline.pieces))
    if jump > check_tol * scale:
        raise IncompatibleTraceError(f"input spline jumps by {jump:.3e} across an interior edge")
    q = p + 2
    R = reduction_matrix(2, p, q)
    out = []
    for pc in spline.pieces:
        if pc.degree > q:
            raise ValueError(f"element polynomial degree {pc.degree} exceeds p + 2")
        c = R @ pc.with_degree(q).coef.ravel()
        out.append(SimplexPoly(c.reshape((p + 1,) * 2), p))
    return Spline(spline.mesh, out)


def _local_edge_params(k, s):
    """Reference coordinates of the point at parameter ``s`` along the edge
    opposite local vertex ``k``, running from its lower to higher local vertex."""
    ref = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    a, b = [m for m in range(3) if m != k]
    return ref[a] + s[:, None] * (ref[b] - ref[a]), (a, b)


def spline_jumps(spline, n=20):
    """Max jump across interior edges at ``n`` equispaced points per edge."""
    mesh = spline.mesh
    s = (np.arange(n) + 0.5) / n
    el = mesh.elements
    owners = {}
    for e in range(mesh.n_elements):
        for k in range(3):
            owners.setdefault(int(mesh.element_edges[e, k]), []).append((e, k))
    worst = 0.0
    for pairs in owners.values():
        if len(pairs) != 2:
            continue
        vals = []
        for e, k in pairs:
            a, b = [m for m in range(3) if m != k]
            # orient along increasing global vertex id
            ss = s if el[e, a] < el[e, b] else 1.0 - s
            xi, _ = _local_edge_params(k, ss)
            vals.append(spline.pieces[e](xi))
        worst = max(worst, float(np.abs(vals[0] - vals[1]).max()))
    return worst


def reduction_error_ratios(mesh, p, kappa_const, kappa_grad, u_pieces):
    """Per-element ratio

        (||w||_{L2(T)} + h_T |w|_{H1(T)}) / (p^s h_T |kappa^2|_{W1,inf(T)} ||u||_{L2(T)})

    with ``w = (id - J)(kappa^2 u)``, ``kappa`` the global affine function
    ``kappa_const + kappa_grad . x`` and ``s = d(d+1)/4 + 2`` for d = 2.
    """
    s = 2 * 3 / 4 + 2
    q = p + 2
    R = reduction_matrix(2, p, q)
    x, w = conical_rule(2, 2 * q)
    kg = np.asarray(kappa_grad, float)
    ratios = np.empty(mesh.n_elements)
    for e, u in enumerate(u_pieces):
        v0, v1, v2 = mesh.corners[e]
        J = np.column_stack([v1 - v0, v2 - v0])
        det = abs(np.linalg.det(J))
        invJT = np.linalg.inv(J).T
        kap = SimplexPoly.linear(2, kappa_const + kg @ v0, J.T @ kg)
        v = (kap * kap * u).with_degree(q)
        red = SimplexPoly((R @ v.coef.ravel()).reshape((p + 1,) * 2), p)
        err = v - red
        l2 = np.sqrt(det * (w @ err(x) ** 2))
        g = np.stack([gp(x) for gp in err.grad()], axis=1) @ invJT.T
        h1 = np.sqrt(det * (w @ np.sum(g ** 2, axis=1)))
        h = mesh.diameters[e]
        kv = kappa_const + mesh.corners[e] @ kg
        w1inf = 2.0 * np.abs(kv).max() * np.linalg.norm(kg)
        unorm = np.sqrt(det * (w @ u(x) ** 2))
        denom = p ** s * h * w1inf * unorm
        ratios[e] = (l2 + h * h1) / denom if denom > 0 else 0.0
    return ratios
