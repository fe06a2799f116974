import math

import numpy as np
import pytest
import scipy.sparse as sp

from hgraded.fem import (Coefficients, SingularMatrixError, assemble_load, assemble_mass,
                         assemble_stiffness, bernstein_basis, build_dofmap, dual_shape_functions,
                         dual_stability_probe, evaluate_spline, export_matrix_market, fem_solve,
                         inverse_residual, multi_indices, read_dense_binary, solve_dense_inverse,
                         write_dense_binary)
from hgraded.mesh import GradingSpec, make_graded_mesh
from hgraded.quadrature import conical_rule


def uniform(n):
    return make_graded_mesh(GradingSpec(1.0, 1.0 / n, "none"))


EXP = make_graded_mesh(GradingSpec(math.inf, 0.25, "left", layers=10))


def u_exact(x):
    return np.sin(np.pi * x[..., 0]) * np.sin(np.pi * x[..., 1])


def f_rhs(x):
    return 2 * np.pi ** 2 * u_exact(x)


def test_bernstein_partition_of_unity_and_gradients():
    rng = np.random.default_rng(0)
    x = rng.dirichlet(np.ones(3), 20)[:, 1:]
    for p in range(1, 5):
        vals, grads = bernstein_basis(2, p, x)
        np.testing.assert_allclose(vals.sum(axis=1), 1.0, atol=1e-14)
        np.testing.assert_allclose(grads.sum(axis=1), 0.0, atol=1e-12)
        # finite difference check
        eps = 1e-6
        for j in range(2):
            dx = np.zeros(2)
            dx[j] = eps
            fd = (bernstein_basis(2, p, x + dx)[0] - bernstein_basis(2, p, x - dx)[0]) / (2 * eps)
            np.testing.assert_allclose(grads[:, :, j], fd, atol=1e-7)


def test_multi_indices_count():
    assert len(multi_indices(2, 3)) == 10
    assert all(sum(a) == 3 for a in multi_indices(2, 3))


def test_five_point_stencil():
    n = 8
    m = uniform(n)
    A, dm = assemble_stiffness(m, Coefficients.laplace(), 1)
    A = A.toarray()
    pts = dm.points[dm.interior]
    h = 1.0 / n
    for row in range(dm.N):
        x = pts[row]
        if not np.all((x > 1.5 * h) & (x < 1 - 1.5 * h)):
            continue
        assert A[row, row] == pytest.approx(4.0, abs=1e-13)
        for col in np.flatnonzero(np.abs(A[row]) > 1e-14):
            if col == row:
                continue
            d = np.abs(pts[col] - x) / h
            np.testing.assert_allclose(sorted(d), [0.0, 1.0], atol=1e-9)
            assert A[row, col] == pytest.approx(-1.0, abs=1e-13)
        assert np.sum(np.abs(A[row]) > 1e-14) == 5


@pytest.mark.parametrize("p", [1, 2, 3])
def test_symmetric_positive_definite(p):
    A, _ = assemble_stiffness(EXP, Coefficients(a3=2.0), p)
    D = A.toarray()
    assert np.abs(D - D.T).max() <= 1e-13 * np.abs(D).max()
    np.linalg.cholesky(D)


def test_convection_gives_antisymmetric_part():
    A0, _ = assemble_stiffness(EXP, Coefficients.laplace(), 1)
    A1, _ = assemble_stiffness(EXP, Coefficients(a2=(1.0, 0.0)), 1)
    skew = (A1 - A0).toarray()
    assert np.abs(skew + skew.T).max() <= 1e-14 * max(1.0, np.abs(skew).max())
    assert np.abs(skew).max() > 1e-3


def test_ritz_values_positive():
    A, _ = assemble_stiffness(EXP, Coefficients.laplace(), 2)
    rng = np.random.default_rng(1)
    for _ in range(50):
        v = rng.standard_normal(A.shape[0])
        assert v @ (A @ v) > 0


def test_sparsity_pattern_is_local():
    A, dm = assemble_stiffness(EXP, Coefficients.laplace(), 2)
    carriers = [set() for _ in range(dm.n_global)]
    for e, dofs in enumerate(dm.element_dofs):
        for g in dofs:
            carriers[g].add(e)
    coo = A.tocoo()
    for i, j in zip(coo.row, coo.col):
        assert carriers[dm.interior[i]] & carriers[dm.interior[j]]
    assert np.all(coo.data != 0.0)
    pattern = (A != 0).astype(int)
    assert (pattern - pattern.T).nnz == 0


def test_support_boxes_contain_support():
    _, dm = assemble_stiffness(EXP, Coefficients.laplace(), 2)
    for k, g in enumerate(dm.interior):
        elems = np.flatnonzero((dm.element_dofs == g).any(axis=1))
        corners = EXP.vertices[EXP.elements[elems]].reshape(-1, 2)
        np.testing.assert_allclose(corners.min(axis=0), dm.support_lo[k])
        np.testing.assert_allclose(corners.max(axis=0), dm.support_hi[k])
        assert dm.char_element[k] in elems


def test_constant_load_p1():
    m = uniform(4)
    _, dm = assemble_stiffness(m, Coefficients.laplace(), 1)
    b = assemble_load(m, lambda x: np.ones(x.shape[:-1]), 1, dm)
    for k, g in enumerate(dm.interior):
        adj = np.flatnonzero((m.elements == g).any(axis=1))
        assert b[k] == pytest.approx(m.areas[adj].sum() / 3)
    np.testing.assert_array_equal(assemble_load(m, lambda x: np.zeros(x.shape[:-1]), 1, dm), 0.0)


def test_load_of_basis_function_equals_mass_diagonal():
    m = uniform(4)
    M, dm = assemble_mass(m, 2)
    k = dm.N // 2
    g = dm.interior[k]
    e = int(np.flatnonzero((dm.element_dofs == g).any(axis=1))[0])

    def phi(x):
        shape = x.shape[:-1]
        return evaluate_spline(m, dm, np.eye(dm.n_global)[g], x.reshape(-1, 2)).reshape(shape)

    b = assemble_load(m, phi, 2, dm)
    assert b[k] == pytest.approx(M[k, k], rel=1e-10)
    assert e >= 0


def test_dense_inverse_small_cases():
    np.testing.assert_allclose(solve_dense_inverse(np.eye(4)), np.eye(4))
    np.testing.assert_allclose(solve_dense_inverse(np.array([[2.0, 1.0], [1.0, 2.0]])),
                               np.array([[2.0, -1.0], [-1.0, 2.0]]) / 3, atol=1e-15)
    A, _ = assemble_stiffness(uniform(4), Coefficients.laplace(), 1)
    assert A.shape == (9, 9)
    assert inverse_residual(A, solve_dense_inverse(A)) <= 1e-12


def test_dense_inverse_graded():
    A, _ = assemble_stiffness(EXP, Coefficients.convection_diffusion(), 2)
    assert inverse_residual(A, solve_dense_inverse(A)) <= 1e-7


def test_singular_pivot_reported():
    S = np.array([[1.0, 2.0, 0.0], [2.0, 4.0, 0.0], [0.0, 0.0, 1.0]])
    with pytest.raises(SingularMatrixError) as info:
        solve_dense_inverse(S)
    assert info.value.pivot == 1
    with pytest.raises(MemoryError):
        solve_dense_inverse(sp.eye(10), max_n=5)


@pytest.mark.parametrize("p,target,tol", [(1, 2.0, 0.2), (2, 3.0, 0.3)])
def test_convergence_rates(p, target, tol):
    hs, errs = [], []
    for n in (4, 8, 16, 32):
        _, err = fem_solve(uniform(n), Coefficients.laplace(), f_rhs, p, u_exact)
        hs.append(1.0 / n)
        errs.append(err)
    slopes = np.diff(np.log(errs)) / np.diff(np.log(hs))
    assert abs(slopes[-1] - target) <= tol
    assert abs(np.polyfit(np.log(hs[1:]), np.log(errs[1:]), 1)[0] - target) <= tol


def test_zero_rhs_gives_zero_solution():
    u, _ = fem_solve(uniform(4), Coefficients.laplace(), lambda x: np.zeros(x.shape[:-1]), 2)
    np.testing.assert_array_equal(u, 0.0)


def test_galerkin_consistency():
    m = EXP
    coeffs = Coefficients.convection_diffusion()
    A, dm = assemble_stiffness(m, coeffs, 2)
    b = assemble_load(m, f_rhs, 2, dm)
    u, _ = fem_solve(m, coeffs, f_rhs, 2)
    assert np.abs(A @ u - b).max() <= 1e-10 * np.linalg.norm(b)


def test_polynomial_reproduction():
    # quadratic vanishing on the boundary is not in S_0, but x(1-x)y(1-y) is in S^4_0
    m = uniform(2)
    _, dm = assemble_stiffness(m, Coefficients.laplace(), 4)
    M, _ = assemble_mass(m, 4)
    target = lambda x: x[..., 0] * (1 - x[..., 0]) * x[..., 1] * (1 - x[..., 1])
    b = assemble_load(m, target, 4, dm)
    import scipy.sparse.linalg as spla
    u = spla.spsolve(M.tocsc(), b)
    pts = np.random.default_rng(0).random((20, 2))
    np.testing.assert_allclose(evaluate_spline(m, dm, dm.expand(u), pts), target(pts), atol=1e-12)


def test_coefficient_checks():
    assert Coefficients.laplace().check_coercivity()
    assert Coefficients.convection_diffusion().check_coercivity()
    assert not Coefficients(a1=np.diag([1.0, 0.1]), alpha1=0.5).check_coercivity()
    with pytest.raises(ValueError):
        assemble_stiffness(EXP, Coefficients.laplace(), 5)
    with pytest.raises(ValueError):
        assemble_stiffness(EXP, Coefficients(a3=lambda x: np.full(x.shape[:-1], np.nan)), 1)


def test_dual_functions():
    assert dual_stability_probe(0) == pytest.approx(math.sqrt(2))
    norms = [dual_stability_probe(p) for p in range(1, 7)]
    assert all(b > a for a, b in zip(norms, norms[1:]))
    slope = np.polyfit(np.log(range(1, 7)), np.log(norms), 1)[0]
    assert np.isfinite(slope) and slope > 0
    for p in range(7):
        _, residual = dual_shape_functions(p)
        assert residual < 1e-10


def test_dual_pairing_independent_quadrature():
    C, _ = dual_shape_functions(3)
    x, w = conical_rule(2, 10)
    B, _ = bernstein_basis(2, 3, x)
    np.testing.assert_allclose(B.T @ (w[:, None] * (B @ C)), np.eye(10), atol=1e-11)


def test_matrix_io(tmp_path):
    import scipy.io
    A, _ = assemble_stiffness(uniform(4), Coefficients.laplace(), 1)
    export_matrix_market(A, tmp_path / "A.mtx")
    np.testing.assert_array_equal(scipy.io.mmread(tmp_path / "A.mtx").toarray(), A.toarray())
    inv = solve_dense_inverse(A)
    write_dense_binary(inv, tmp_path / "inv.bin")
    raw = (tmp_path / "inv.bin").read_bytes()
    assert raw[:4] == b"HGRD" and len(raw) == 16 + 8 * inv.size
    np.testing.assert_array_equal(read_dense_binary(tmp_path / "inv.bin"), inv)
    (tmp_path / "bad.bin").write_bytes(b"NOPE" + raw[4:])
    with pytest.raises(ValueError):
        read_dense_binary(tmp_path / "bad.bin")


def test_dofmap_counts():
    m = uniform(4)
    for p in range(1, 5):
        dm = build_dofmap(m, p)
        # interior dofs of the continuous space on a 4x4 grid of squares
        assert dm.N == (4 * p - 1) ** 2
