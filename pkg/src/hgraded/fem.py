"""Continuous Bernstein-Bezier finite elements on triangle meshes.

The bilinear form is

    a(u, v) = (a1 grad u, grad v) + (a2 . grad u, v) + (a3 u, v)

with homogeneous Dirichlet conditions imposed by dropping boundary dofs.
Matrices follow the row = test, column = trial convention, i.e.
``A[m, n] = a(phi_n, phi_m)``.
"""
import os
import struct
from dataclasses import dataclass
from itertools import product
from math import factorial

import numpy as np
import scipy.io
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .quadrature import conical_rule

__all__ = [
    "Coefficients", "DofMap", "SingularMatrixError", "MAX_DEGREE",
    "multi_indices", "bernstein_basis", "build_dofmap",
    "assemble_stiffness", "assemble_load", "assemble_mass",
    "solve_dense_inverse", "inverse_residual", "fem_solve", "l2_error",
    "evaluate_spline", "dual_shape_functions", "dual_stability_probe",
    "export_matrix_market", "write_dense_binary", "read_dense_binary",
]

MAX_DEGREE = 4
DENSE_GUARD = 32000
BINARY_MAGIC = b"HGRD"
BINARY_VERSION = 1


class SingularMatrixError(np.linalg.LinAlgError):
    def __init__(self, pivot):
        super().__init__(f"matrix is singular: zero pivot at index {pivot}")
        self.pivot = pivot


def _as_field(value, shape):
    """Wrap a constant into a callable returning it broadcast over points."""
    if callable(value):
        return value
    const = np.asarray(value, dtype=float).reshape(shape)

    def field(x):
        return np.broadcast_to(const, x.shape[:-1] + shape)
    return field


@dataclass(frozen=True)
class Coefficients:
    """PDE coefficients.  Each of ``a1``, ``a2``, ``a3`` is either a constant
    or a callable taking points of shape ``(..., 2)`` and returning arrays of
    shape ``(..., 2, 2)``, ``(..., 2)`` and ``(...)`` respectively."""
    a1: object = None
    a2: object = None
    a3: object = None
    alpha1: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "a1", _as_field(np.eye(2) if self.a1 is None else self.a1, (2, 2)))
        object.__setattr__(self, "a2", _as_field(np.zeros(2) if self.a2 is None else self.a2, (2,)))
        object.__setattr__(self, "a3", _as_field(0.0 if self.a3 is None else self.a3, ()))
        if not self.alpha1 > 0:
            raise ValueError("alpha1 must be positive")

    @classmethod
    def laplace(cls):
        return cls()

    @classmethod
    def convection_diffusion(cls, a2=(0.5, 0.5), a3=1.0):
        # Poincare constant of the unit square is at most 1/(pi*sqrt(2)); with
        # a1 = I the coercivity margin alpha1 > C_P^2 (|a2| + |a3|) holds for
        # the default preset.
        return cls(a2=np.asarray(a2, float), a3=float(a3), alpha1=1.0)

    def check_coercivity(self, n=200, seed=0):
        """Spot-check y^T a1(x) y >= alpha1 |y|^2 at random (x, y)."""
        rng = np.random.default_rng(seed)
        x = rng.random((n, 2))
        y = rng.standard_normal((n, 2))
        quad = np.einsum("ni,nij,nj->n", y, np.asarray(self.a1(x)), y)
        return bool(np.all(quad >= self.alpha1 * np.einsum("ni,ni->n", y, y) * (1 - 1e-12)))


def multi_indices(d, p):
    """All (d+1)-tuples of nonnegative ints summing to p, in lexicographic order."""
    return [a for a in product(range(p + 1), repeat=d + 1) if sum(a) == p][::-1]


def bernstein_basis(d, p, x):
    """Bernstein polynomials of degree ``p`` on the reference d-simplex.

    Returns ``(values, grads)`` of shapes ``(n, nloc)`` and ``(n, nloc, d)``;
    the basis order is ``multi_indices(d, p)`` with barycentric coordinates
    ``lambda_0 = 1 - sum(x)``, ``lambda_i = x_i``.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    lam = np.concatenate([1.0 - x.sum(axis=1, keepdims=True), x], axis=1)
    idx = np.array(multi_indices(d, p), dtype=int).reshape(-1, d + 1)
    coef = np.array([factorial(p) / np.prod([factorial(a) for a in al]) for al in idx])
    powers = lam[:, None, :] ** idx[None, :, :]
    vals = coef * np.prod(powers, axis=2)
    # d/d lambda_i of lambda^alpha
    dlam = np.empty(powers.shape)
    for i in range(d + 1):
        ai = idx[:, i]
        pi = np.where(ai > 0, ai * lam[:, None, i] ** np.maximum(ai - 1, 0), 0.0)
        others = np.prod(np.delete(powers, i, axis=2), axis=2)
        dlam[:, :, i] = coef * pi * others
    # chain rule: d lambda_0 / d x_j = -1, d lambda_i / d x_j = delta_ij
    grads = dlam[:, :, 1:] - dlam[:, :, :1]
    return vals, grads


@dataclass(eq=False)
class DofMap:
    """Global dof numbering for continuous degree-p Bernstein elements.

    Global ids: vertices first, then ``p-1`` per edge, then interior
    bubbles per element.  ``interior`` lists the free (non-boundary) global
    ids; the system matrix uses that order.  ``support_lo/hi`` and
    ``char_element`` describe free dofs only.
    """
    p: int
    n_global: int
    element_dofs: np.ndarray      # (ne, nloc) global ids
    is_boundary: np.ndarray       # (n_global,)
    interior: np.ndarray          # (N,) global ids of free dofs
    global_to_free: np.ndarray    # (n_global,) -1 on boundary
    char_element: np.ndarray      # (N,)
    support_lo: np.ndarray        # (N, 2)
    support_hi: np.ndarray        # (N, 2)
    points: np.ndarray            # (n_global, 2) Bezier domain points

    @property
    def N(self):
        return len(self.interior)

    @property
    def support_boxes(self):
        return np.stack([self.support_lo, self.support_hi], axis=1)

    def expand(self, u_free):
        """Free-dof vector -> global vector with zeros on the boundary."""
        u = np.zeros(self.n_global)
        u[self.interior] = u_free
        return u


def build_dofmap(mesh, p):
    if not 1 <= p:
        raise ValueError(f"polynomial degree must be >= 1, got {p}")
    nv, ne = mesh.n_vertices, mesh.n_elements
    edges = mesh.edges
    n_edges = len(edges)
    n_int = (p - 1) * (p - 2) // 2
    idx = multi_indices(2, p)
    el = mesh.elements
    eedges = mesh.element_edges
    dofs = np.empty((ne, len(idx)), dtype=np.int64)
    int_counter = 0
    int_pos = {}
    for loc, a in enumerate(idx):
        zeros = [i for i in range(3) if a[i] == 0]
        if max(a) == p:
            dofs[:, loc] = el[:, a.index(p)]
        elif len(zeros) == 1:
            i = zeros[0]
            j, k = [m for m in range(3) if m != i]
            # position along the edge counted from the lower global vertex id
            t = np.where(el[:, j] < el[:, k], a[j], a[k])
            dofs[:, loc] = nv + eedges[:, i] * (p - 1) + (t - 1)
        else:
            int_pos[loc] = int_counter
            dofs[:, loc] = nv + n_edges * (p - 1) + np.arange(ne) * n_int + int_counter
            int_counter += 1
    n_global = nv + n_edges * (p - 1) + ne * n_int

    is_bnd = np.zeros(n_global, dtype=bool)
    is_bnd[:nv] = mesh.boundary
    bedge = np.flatnonzero(mesh.edge_multiplicity == 1)
    for t in range(p - 1):
        is_bnd[nv + bedge * (p - 1) + t] = True
    interior = np.flatnonzero(~is_bnd)
    g2f = np.full(n_global, -1, dtype=np.int64)
    g2f[interior] = np.arange(len(interior))

    # domain points and carrier-element bounding boxes
    lam = np.array(idx, dtype=float) / p
    corners = mesh.corners
    pts = np.empty((n_global, 2))
    pts[dofs.ravel()] = np.einsum("lk,ekd->eld", lam, corners).reshape(-1, 2)
    elo = corners.min(axis=1)
    ehi = corners.max(axis=1)
    lo = np.full((n_global, 2), np.inf)
    hi = np.full((n_global, 2), -np.inf)
    char = np.full(n_global, np.iinfo(np.int64).max)
    for loc in range(dofs.shape[1]):
        g = dofs[:, loc]
        np.minimum.at(lo, g, elo)
        np.maximum.at(hi, g, ehi)
        np.minimum.at(char, g, np.arange(ne))
    return DofMap(p=p, n_global=n_global, element_dofs=dofs, is_boundary=is_bnd,
                  interior=interior, global_to_free=g2f, char_element=char[interior],
                  support_lo=lo[interior], support_hi=hi[interior], points=pts)


def _element_geometry(mesh):
    c = mesh.corners
    J = np.stack([c[:, 1] - c[:, 0], c[:, 2] - c[:, 0]], axis=2)  # (ne, 2, 2), columns
    det = J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0]
    invJT = np.linalg.inv(J).transpose(0, 2, 1)
    return c[:, 0], J, np.abs(det), invJT


def _check_degree(p):
    if not (isinstance(p, (int, np.integer)) and 1 <= p <= MAX_DEGREE):
        raise ValueError(f"polynomial degree must be in 1..{MAX_DEGREE}, got {p}")


def _finite(name, arr):
    arr = np.asarray(arr, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"coefficient {name} evaluated to a non-finite value")
    return arr


def _local_matrices(mesh, coeffs, p, chunk=4096, terms=("a1", "a2", "a3")):
    qx, qw = conical_rule(2, 2 * p + 2)
    B, dB = bernstein_basis(2, p, qx)
    x0, J, absdet, invJT = _element_geometry(mesh)
    out = np.empty((mesh.n_elements, B.shape[1], B.shape[1]))
    for s in range(0, mesh.n_elements, chunk):
        e = slice(s, s + chunk)
        X = x0[e, None, :] + np.einsum("eij,qj->eqi", J[e], qx)
        wq = absdet[e, None] * qw[None, :]
        G = np.einsum("eij,qlj->eqli", invJT[e], dB)
        K = np.zeros((X.shape[0], B.shape[1], B.shape[1]))
        if "a1" in terms:
            a1 = _finite("a1", coeffs.a1(X))
            K += np.einsum("eq,eqij,eqnj,eqmi->emn", wq, a1, G, G, optimize=True)
        if "a2" in terms:
            a2 = _finite("a2", coeffs.a2(X))
            K += np.einsum("eq,eqj,eqnj,qm->emn", wq, a2, G, B, optimize=True)
        if "a3" in terms:
            a3 = _finite("a3", coeffs.a3(X))
            K += np.einsum("eq,eq,qn,qm->emn", wq, a3, B, B, optimize=True)
        out[e] = K
    return out


def _scatter(local, dofmap):
    dofs = dofmap.element_dofs
    nloc = dofs.shape[1]
    rows = np.repeat(dofs, nloc, axis=1).ravel()
    cols = np.tile(dofs, (1, nloc)).ravel()
    A = sp.coo_matrix((local.ravel(), (rows, cols)), shape=(dofmap.n_global,) * 2).tocsr()
    A = A[dofmap.interior][:, dofmap.interior].tocsr()
    A.eliminate_zeros()
    A.sort_indices()
    return A


def assemble_stiffness(mesh, coeffs, p):
    """Galerkin matrix over free dofs.  Returns ``(A, dofmap)`` with ``A`` a
    scipy CSR matrix, ``A[m, n] = a(phi_n, phi_m)``."""
    _check_degree(p)
    dofmap = build_dofmap(mesh, p)
    return _scatter(_local_matrices(mesh, coeffs, p), dofmap), dofmap


def assemble_mass(mesh, p):
    _check_degree(p)
    dofmap = build_dofmap(mesh, p)
    coeffs = Coefficients(a3=1.0)
    return _scatter(_local_matrices(mesh, coeffs, p, terms=("a3",)), dofmap), dofmap


def assemble_load(mesh, f, p, dofmap=None):
    """Vector ``(f, phi_m)`` over free dofs."""
    _check_degree(p)
    dofmap = dofmap or build_dofmap(mesh, p)
    qx, qw = conical_rule(2, 2 * p + 2)
    B, _ = bernstein_basis(2, p, qx)
    x0, J, absdet, _ = _element_geometry(mesh)
    X = x0[:, None, :] + np.einsum("eij,qj->eqi", J, qx)
    fx = _finite("f", f(X))
    local = np.einsum("e,q,eq,qm->em", absdet, qw, fx, B)
    b = np.bincount(dofmap.element_dofs.ravel(), weights=local.ravel(), minlength=dofmap.n_global)
    return b[dofmap.interior]


def solve_dense_inverse(A, max_n=DENSE_GUARD):
    """Explicit inverse by dense LU with partial pivoting (LAPACK getrf/getri)."""
    n = A.shape[0]
    if A.shape != (n, n):
        raise ValueError("matrix must be square")
    if n > max_n:
        raise MemoryError(f"N={n} exceeds dense-inverse guard {max_n}")
    dense = A.toarray() if sp.issparse(A) else np.array(A, dtype=float)
    dense = np.asfortranarray(dense, dtype=float)
    getrf, getri, getri_lwork = scipy.linalg.lapack.get_lapack_funcs(
        ("getrf", "getri", "getri_lwork"), (dense,))
    lu, piv, info = getrf(dense, overwrite_a=True)
    if info > 0:
        raise SingularMatrixError(info - 1)
    if info < 0:
        raise ValueError(f"getrf: illegal argument {-info}")
    lwork, _ = getri_lwork(n)
    inv, info = getri(lu, piv, lwork=int(lwork), overwrite_lu=True)
    if info > 0:
        raise SingularMatrixError(info - 1)
    return np.ascontiguousarray(inv)


def inverse_residual(A, A_inv):
    """max-norm of A @ A_inv - I."""
    R = A @ A_inv
    R = np.asarray(R)
    R[np.diag_indices_from(R)] -= 1.0
    return float(np.abs(R).max())


def _element_values(mesh, dofmap, u_global, qx):
    B, _ = bernstein_basis(2, dofmap.p, qx)
    return u_global[dofmap.element_dofs] @ B.T


def l2_error(mesh, dofmap, u_free, u_exact, extra_degree=4):
    """||u_h - u_exact||_{L2} by elementwise quadrature."""
    qx, qw = conical_rule(2, 2 * dofmap.p + extra_degree)
    x0, J, absdet, _ = _element_geometry(mesh)
    X = x0[:, None, :] + np.einsum("eij,qj->eqi", J, qx)
    uh = _element_values(mesh, dofmap, dofmap.expand(u_free), qx)
    diff = uh - u_exact(X)
    return float(np.sqrt(np.einsum("e,q,eq->", absdet, qw, diff ** 2)))


def fem_solve(mesh, coeffs, f, p, u_exact=None):
    """Galerkin solution on free dofs and, optionally, its L2 error."""
    A, dofmap = assemble_stiffness(mesh, coeffs, p)
    b = assemble_load(mesh, f, p, dofmap)
    try:
        u = spla.splu(A.tocsc()).solve(b)
    except RuntimeError as exc:
        raise SingularMatrixError(-1) from exc
    err = None if u_exact is None else l2_error(mesh, dofmap, u, u_exact)
    return u, err


def evaluate_spline(mesh, dofmap, u_global, points, tol=1e-12):
    """Evaluate a global dof vector at arbitrary points (brute-force location)."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    x0, J, _, _ = _element_geometry(mesh)
    invJ = np.linalg.inv(J)
    out = np.full(len(points), np.nan)
    for i, x in enumerate(points):
        ref = np.einsum("eij,ej->ei", invJ, x[None, :] - x0)
        inside = (ref.min(axis=1) >= -tol) & (ref.sum(axis=1) <= 1 + tol)
        e = int(np.flatnonzero(inside)[0])
        B, _ = bernstein_basis(2, dofmap.p, ref[e][None, :])
        out[i] = B[0] @ u_global[dofmap.element_dofs[e]]
    return out


def dual_shape_functions(p, d=2):
    """Dual Bernstein shape functions on the reference d-simplex.

    Returns ``(C, residual)``: column j of ``C`` holds the Bernstein
    coefficients of lambda_j, and ``residual`` is
    ``max |<phi_i, lambda_j> - delta_ij|`` measured by quadrature.
    """
    qx, qw = conical_rule(d, 2 * p)
    B, _ = bernstein_basis(d, p, qx)
    gram = B.T @ (qw[:, None] * B)
    C = np.linalg.solve(gram, np.eye(len(gram)))
    lam_vals = B @ C
    pairing = B.T @ (qw[:, None] * lam_vals)
    return C, float(np.abs(pairing - np.eye(len(gram))).max())


def dual_stability_probe(p, d=2):
    """max_j ||lambda_j||_{L2} over the dual Bernstein shape functions."""
    if not 0 <= p <= 8:
        raise ValueError("probe supports 0 <= p <= 8")
    C, residual = dual_shape_functions(p, d)
    if residual > 1e-8:
        raise np.linalg.LinAlgError(f"Gram matrix numerically singular (duality residual {residual:.2e})")
    qx, qw = conical_rule(d, 2 * p)
    B, _ = bernstein_basis(d, p, qx)
    norms = np.sqrt(qw @ (B @ C) ** 2)
    return float(norms.max())


def export_matrix_market(A, path):
    scipy.io.mmwrite(os.fspath(path), sp.coo_matrix(A), field="real", symmetry="general")


def write_dense_binary(M, path):
    """Row-major float64 with a 16-byte header: magic, version, rows, cols."""
    M = np.ascontiguousarray(M, dtype="<f8")
    with open(os.fspath(path), "wb") as fh:
        fh.write(BINARY_MAGIC + struct.pack("<III", BINARY_VERSION, *M.shape))
        fh.write(M.tobytes(order="C"))


def read_dense_binary(path):
    with open(os.fspath(path), "rb") as fh:
        header = fh.read(16)
        if header[:4] != BINARY_MAGIC:
            raise ValueError("not an HGRD dense matrix file")
        version, rows, cols = struct.unpack("<III", header[4:])
        if version != BINARY_VERSION:
            raise ValueError(f"unsupported HGRD version {version}")
        data = np.frombuffer(fh.read(), dtype="<f8")
    return data.reshape(rows, cols).copy()
