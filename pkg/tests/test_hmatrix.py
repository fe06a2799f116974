import math

import numpy as np
import pytest

from hgraded.fem import Coefficients, assemble_stiffness, build_dofmap
from hgraded.hmatrix import (ADMISSIBLE, SMALL, Box, SVDConvergenceError, build_block_partition,
                             build_cluster_tree, compress, default_c_small, dump_hmatrix,
                             fit_decay, hmatvec, jacobi_svd, load_hmatrix, rank_sweep,
                             spectral_error, spectral_norm, truncated_svd, write_error_csv)
from hgraded.mesh import GradingSpec, make_graded_mesh

RNG = np.random.default_rng(3)


def point_boxes(pts, half=0.0):
    pts = np.asarray(pts, float)
    return np.stack([pts - half, pts + half], axis=1)


def grid_boxes(n):
    g = (np.arange(n) + 0.5) / n
    return point_boxes(np.array([(x, y) for y in g for x in g]), 0.5 / n)


def random_partition(rng):
    n = int(rng.integers(1, 300))
    dim = int(rng.integers(1, 4))
    pts = rng.random((n, dim)) ** rng.uniform(0.5, 4.0)
    boxes = point_boxes(pts, rng.uniform(0.0, 0.05, (n, 1)))
    c_small = int(rng.integers(1, 40))
    root, perm = build_cluster_tree(boxes, c_small)
    return build_block_partition(root, perm, c_adm=float(rng.uniform(0.5, 4.0)), c_small=c_small)


def exp_system(L, p=1):
    m = make_graded_mesh(GradingSpec(math.inf, 0.25, "left", layers=L))
    A, dm = assemble_stiffness(m, Coefficients.laplace(), p)
    return m, A.toarray(), dm


# ----------------------------------------------------------------- geometry

def test_box_metrics():
    a = Box(np.zeros(2), np.ones(2))
    b = Box(np.array([2.0, 0.0]), np.array([3.0, 1.0]))
    assert a.diam == pytest.approx(math.sqrt(2))
    assert a.dist(b) == pytest.approx(1.0)
    assert a.dist(a) == 0.0
    c = Box(np.array([4.0, 5.0]), np.array([4.0, 5.0]))
    assert a.dist(c) == pytest.approx(5.0)
    with pytest.raises(ValueError):
        Box(np.ones(2), np.zeros(2))


def test_single_leaf():
    root, perm = build_cluster_tree(point_boxes([[0.3, 0.4]]), 1)
    assert root.is_leaf and root.size == 1 and root.depth == 0
    np.testing.assert_array_equal(perm, [0])
    part = build_block_partition(root, perm)
    assert len(part.blocks) == 1 and part.blocks[0].kind == SMALL


def test_sixteen_grid_dofs():
    root, perm = build_cluster_tree(grid_boxes(4), 4)
    assert root.depth == 2
    leaves = list(root.leaves())
    assert [lf.size for lf in leaves] == [4, 4, 4, 4]
    # each leaf is a 2x2 quadrant of the grid
    centres = grid_boxes(4).mean(axis=1)
    for lf in leaves:
        pts = centres[perm[lf.start:lf.stop]]
        assert np.ptp(pts[:, 0]) == pytest.approx(0.25) and np.ptp(pts[:, 1]) == pytest.approx(0.25)
    assert sorted(perm) == list(range(16))


def test_small_problem_is_one_block():
    root, perm = build_cluster_tree(grid_boxes(5), 32)
    part = build_block_partition(root, perm)
    assert len(part.blocks) == 1 and part.blocks[0].shape == (25, 25)


def test_far_clusters_admissible_at_first_level():
    pts = np.vstack([0.1 * RNG.random((20, 2)), 0.9 + 0.1 * RNG.random((20, 2))])
    root, perm = build_cluster_tree(point_boxes(pts), 8)
    part = build_block_partition(root, perm, c_adm=2.0, c_small=8)
    first = [b for b in part.admissible if b.row.level == 1 and b.col.level == 1]
    assert len(first) == 2
    for b in first:
        assert b.row.box.diam <= 0.1 * math.sqrt(2) + 1e-12
        assert b.row.box.dist(b.col.box) == pytest.approx(0.8 * math.sqrt(2), rel=0.1)


def test_degenerate_split_falls_back_to_median():
    boxes = point_boxes(np.zeros((10, 2)))
    root, perm = build_cluster_tree(boxes, 3)
    assert all(lf.size <= 3 for lf in root.leaves())
    assert sorted(perm) == list(range(10))


def test_tree_errors():
    with pytest.raises(ValueError):
        build_cluster_tree(np.zeros((0, 2, 2)), 4)
    with pytest.raises(ValueError):
        build_cluster_tree(grid_boxes(2), 0)
    root, perm = build_cluster_tree(grid_boxes(2), 1)
    with pytest.raises(ValueError):
        build_block_partition(root, perm, c_adm=0.0)


def test_partition_100_dofs():
    root, perm = build_cluster_tree(grid_boxes(10), 4)
    part = build_block_partition(root, perm, c_small=4)
    np.testing.assert_array_equal(part.coverage(), 1)
    part.check()
    assert part.admissible and part.small


def test_partition_invariants_random_configs():
    rng = np.random.default_rng(11)
    for _ in range(50):
        part = random_partition(rng)
        cover = part.coverage()
        np.testing.assert_array_equal(cover, 1)
        # random membership probes against the block list
        for i, j in rng.integers(0, part.N, (20, 2)):
            hits = [b for b in part.blocks
                    if b.row.start <= i < b.row.stop and b.col.start <= j < b.col.stop]
            assert len(hits) == 1
        for b in part.admissible:
            dist = b.row.box.dist(b.col.box)
            assert dist > 0 and b.row.box.diam <= part.c_adm * dist


def test_cluster_boxes_contain_members():
    boxes = point_boxes(RNG.random((200, 2)), 0.01)
    root, perm = build_cluster_tree(boxes, 10)
    for c in root.walk():
        members = boxes[perm[c.start:c.stop]]
        assert np.all(members[:, 0] >= c.box.lo - 1e-15)
        assert np.all(members[:, 1] <= c.box.hi + 1e-15)


def test_default_c_small():
    assert default_c_small(1) == 32
    assert default_c_small(8) == 45


# ----------------------------------------------------------------- SVD

def test_jacobi_against_lapack_and_reconstruction():
    for shape in [(1, 1), (5, 4), (4, 5), (30, 30), (50, 7)]:
        M = RNG.standard_normal(shape)
        U, s, Vt = jacobi_svd(M)
        np.testing.assert_allclose(U * s @ Vt, M, atol=1e-13 * np.abs(M).max() * max(shape))
        np.testing.assert_allclose(s, np.linalg.svd(M, compute_uv=False), rtol=1e-12, atol=1e-14)
        np.testing.assert_allclose(U.T @ U, np.eye(len(s)), atol=1e-12)
        assert np.all(np.diff(s) <= 0)


def test_jacobi_rank_deficient_and_zero():
    M = np.outer(RNG.standard_normal(6), RNG.standard_normal(4))
    s = jacobi_svd(M)[1]
    assert s[1] <= 1e-14 * s[0]
    np.testing.assert_array_equal(jacobi_svd(np.zeros((3, 2)))[1], 0.0)


def test_jacobi_reports_nonconvergence():
    with pytest.raises(SVDConvergenceError) as info:
        jacobi_svd(RNG.standard_normal((40, 40)), max_sweeps=1)
    assert info.value.sweeps == 1


@pytest.mark.parametrize("method", ["jacobi", "lapack"])
def test_truncated_svd_examples(method):
    M = np.outer([1.0, 2.0, 3.0], [4.0, 5.0])
    X, Y, _ = truncated_svd(M, 1, method)
    np.testing.assert_allclose(X @ Y.T, M, atol=1e-13)
    M = RNG.standard_normal((5, 4))
    X, Y, s = truncated_svd(M, 2, method)
    oracle = np.linalg.svd(M, compute_uv=False)
    assert np.linalg.norm(M - X @ Y.T, 2) == pytest.approx(oracle[2], rel=1e-12)
    X, Y, _ = truncated_svd(M, 9, method)
    np.testing.assert_allclose(X @ Y.T, M, atol=1e-13)
    with pytest.raises(ValueError):
        truncated_svd(M, 0, method)


def test_eckart_young_oracle():
    rng = np.random.default_rng(5)
    for _ in range(100):
        m, n = rng.integers(1, 51, 2)
        M = rng.standard_normal((m, n)) * rng.uniform(0.1, 10)
        r = int(rng.integers(1, min(m, n) + 1))
        X, Y, _ = truncated_svd(M, r, "jacobi")
        oracle = np.linalg.svd(M, compute_uv=False)
        expected = oracle[r] if r < len(oracle) else 0.0
        err = np.linalg.norm(M - X @ Y.T, 2)
        assert abs(err - expected) <= 1e-10 * oracle[0]


# ----------------------------------------------------------------- compression

@pytest.fixture(scope="module")
def system():
    m, A, dm = exp_system(10)
    A_inv = np.linalg.inv(A)
    root, perm = build_cluster_tree(dm.support_boxes, 8)
    part = build_block_partition(root, perm, c_small=8)
    return A_inv, part


def test_full_rank_compression_is_exact(system):
    A_inv, part = system
    H, errs = compress(A_inv, part, part.N)
    np.testing.assert_allclose(H.to_dense(), A_inv, atol=1e-12 * np.abs(A_inv).max())
    np.testing.assert_array_equal(errs, 0.0)
    assert spectral_error(A_inv, H)[0] <= 1e-12 * np.linalg.norm(A_inv, 2)


def test_hmatvec_matches_reconstruction(system):
    A_inv, part = system
    H, _ = compress(A_inv, part, 2, method="jacobi")
    D = H.to_dense()
    for _ in range(5):
        x = RNG.standard_normal(part.N)
        y = hmatvec(H, x)
        assert np.linalg.norm(y - D @ x) <= 1e-12 * np.linalg.norm(D @ x)
    np.testing.assert_array_equal(hmatvec(H, np.zeros(part.N)), 0.0)
    Dp = H.to_dense(original_order=False)
    x = RNG.standard_normal(part.N)
    np.testing.assert_allclose(hmatvec(H, x, original_order=False), Dp @ x, rtol=1e-12)
    with pytest.raises(ValueError):
        hmatvec(H, np.zeros(part.N + 1))
    with pytest.raises(ValueError):
        compress(A_inv[:-1, :-1], part, 2)


def test_block_errors_are_singular_values(system):
    A_inv, part = system
    r = 2
    H, errs = compress(A_inv, part, r)
    Pm = A_inv[np.ix_(part.perm, part.perm)]
    for b, e in zip(part.admissible, errs):
        s = np.linalg.svd(Pm[b.rows, b.cols], compute_uv=False)
        assert e == pytest.approx(s[r] if r < len(s) else 0.0, abs=1e-15)
    assert H.memory_units == part.memory_units(r)


def test_rank_sweep_bound_and_memory(system):
    A_inv, part = system
    ranks = range(1, 9)
    rep = rank_sweep(A_inv, part, ranks, spectral=True)
    assert np.all(np.diff(rep.bound) <= 0)
    assert np.all(rep.bound >= rep.max_block_error)
    np.testing.assert_allclose(rep.bound, part.depth * rep.max_block_error)
    c = max(b.row.size + b.col.size for b in part.blocks)
    for r, mem in zip(rep.ranks, rep.memory_units):
        assert mem <= c * (r + part.c_small) * part.depth * part.N
        assert mem <= part.N ** 2 * 2
    # power iteration approaches the exact norm from below
    for r, s in zip(rep.ranks[:3], rep.spectral_error[:3]):
        H, _ = compress(A_inv, part, int(r))
        exact = np.linalg.norm(A_inv - H.to_dense(), 2)
        assert 0.99 * exact <= s <= exact * (1 + 1e-12)
    # ||R||_2 <= sparsity * levels * max block error, up to rounding
    levels = part.depth + 1
    limit = part.sparsity_constant * levels * rep.max_block_error + 1e-12 * rep.spectral_error[0]
    assert np.all(rep.spectral_error <= limit)


def test_rank_sweep_jacobi_matches_lapack(system):
    A_inv, part = system
    a = rank_sweep(A_inv, part, range(1, 6), method="lapack")
    b = rank_sweep(A_inv, part, range(1, 6), method="jacobi")
    np.testing.assert_allclose(a.bound, b.bound, rtol=1e-9, atol=1e-15 * a.bound[0])


def test_rank_sweep_errors(system):
    A_inv, part = system
    with pytest.raises(ValueError):
        rank_sweep(A_inv, part, [])
    with pytest.raises(ValueError):
        rank_sweep(A_inv[:3, :3], part, [1])


def test_spectral_norm_oracle():
    M = np.diag([3.0, 1.0, 0.5])
    M[0, 1] = 0.0
    val, it = spectral_norm(lambda v: M @ v, lambda v: M.T @ v, 3)
    assert val == pytest.approx(3.0, rel=1e-9) and it <= 200
    B = RNG.standard_normal((20, 3)) @ RNG.standard_normal((3, 20))
    val, _ = spectral_norm(lambda v: B @ v, lambda v: B.T @ v, 20)
    assert val == pytest.approx(np.linalg.svd(B, compute_uv=False)[0], rel=1e-8)
    assert spectral_norm(lambda v: 0 * v, lambda v: 0 * v, 4)[0] == 0.0


# ----------------------------------------------------------------- fitting

def test_fit_decay_synthetic():
    r = np.arange(1, 11)
    fit = fit_decay(r, np.exp(-2.5 * r))
    assert fit.rate == pytest.approx(-2.5, abs=1e-9) and fit.r2 == pytest.approx(1.0)
    fit = fit_decay(r, np.full(10, 0.3))
    assert fit.rate == pytest.approx(0.0, abs=1e-12)
    # samples at the floor are excluded
    errs = np.exp(-2.5 * r)
    errs[6:] = 1e-20
    fit = fit_decay(r, errs)
    assert fit.n_used == 6 and fit.rate == pytest.approx(-2.5, abs=1e-9)


def test_fit_decay_errors():
    with pytest.raises(ValueError):
        fit_decay([1, 2, 3], [1.0, 0.5, 0.2])
    with pytest.raises(ValueError):
        fit_decay([1, 2, 3, 4], [0.0, 0.0, 0.0, 0.0])
    with pytest.raises(ValueError):
        fit_decay([1, 2, 3, 4], [1.0, 1e-20, 1e-20, 1e-20])


# ----------------------------------------------------------------- I/O

def test_dump_round_trip(system, tmp_path):
    A_inv, part = system
    H, _ = compress(A_inv, part, 3)
    dump_hmatrix(H, tmp_path / "h.bin")
    perm, records = load_hmatrix(tmp_path / "h.bin")
    np.testing.assert_array_equal(perm, part.perm)
    assert len(records) == len(part.blocks)
    out = np.zeros((part.N, part.N))
    for (ilo, ilen, jlo, jlen, kind, payload), b in zip(records, part.blocks):
        assert (ilo, ilen, jlo, jlen, kind) == (b.row.start, b.row.size, b.col.start, b.col.size, b.kind)
        out[ilo:ilo + ilen, jlo:jlo + jlen] = payload[0] @ payload[1].T if kind == ADMISSIBLE else payload
    np.testing.assert_array_equal(out, H.to_dense(original_order=False))
    raw = (tmp_path / "h.bin").read_bytes()
    (tmp_path / "bad.bin").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(ValueError):
        load_hmatrix(tmp_path / "bad.bin")


def test_error_csv(system, tmp_path):
    A_inv, part = system
    rep = rank_sweep(A_inv, part, [1, 2, 3])
    write_error_csv(rep, tmp_path / "e.csv")
    lines = (tmp_path / "e.csv").read_text().splitlines()
    assert lines[0] == "r,bound,spectral_error,memory_units"
    assert len(lines) == 4
    r, bound, spec, mem = lines[1].split(",")
    assert int(r) == 1 and float(bound) == rep.bound[0] and spec == "nan"
    assert int(mem) == rep.memory_units[0]


# ----------------------------------------------------------------- scaling

def test_depth_scaling_on_exponential_meshes():
    xs, depths = [], []
    for L in range(6, 15):
        m = make_graded_mesh(GradingSpec(math.inf, 0.25, "left", layers=L))
        dm = build_dofmap(m, 1)
        root, _ = build_cluster_tree(dm.support_boxes, 4)
        xs.append(math.log(m.diameters.min() ** -2))
        depths.append(root.depth)
    ratio = np.array(depths) / np.array(xs)
    slope, _ = np.polyfit(xs, depths, 1)
    curvature = np.polyfit(xs, depths, 2)[0]
    print(f"\n  depth / ln(h_min^-2) in [{ratio.min():.3f}, {ratio.max():.3f}], slope {slope:.3f}")
    assert ratio.max() <= 1.6
    assert abs(curvature) <= 0.2
