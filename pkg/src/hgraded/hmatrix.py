"""Cluster trees, admissible block partitions and blockwise truncated SVD.

Indices are clustered by the centres of their support boxes with geometric
midpoint bisection.  A block ``(I, J)`` is admissible when

    diam(B_I) <= C_adm * dist(B_I, B_J)

for the cluster bounding boxes ``B_I``, ``B_J``.  Admissible blocks are
stored as ``X @ Y.T`` with at most ``r`` columns, all other blocks densely.

Tree depth is the largest level, with the root at level 0.
"""
import csv
import struct
from dataclasses import dataclass, field
from math import comb

import numpy as np
from scipy.linalg import svd as lapack_svd

__all__ = [
    "Box", "Cluster", "Block", "BlockPartition", "HMatrix", "ErrorReport", "DecayFit",
    "SVDConvergenceError", "default_c_small", "build_cluster_tree", "build_block_partition",
    "jacobi_svd", "truncated_svd", "compress", "rank_sweep", "hmatvec", "spectral_norm",
    "spectral_error", "fit_decay", "write_error_csv", "dump_hmatrix", "load_hmatrix",
    "SMALL", "ADMISSIBLE",
]

SMALL, ADMISSIBLE = 0, 1
ERROR_FLOOR = 1e-13


class SVDConvergenceError(np.linalg.LinAlgError):
    def __init__(self, sweeps, off):
        super().__init__(f"Jacobi SVD did not converge after {sweeps} sweeps (off-diagonal {off:.2e})")
        self.sweeps = sweeps


def default_c_small(p):
    return max(32, comb(p + 2, 2))


@dataclass(frozen=True)
class Box:
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lo, dtype=float)
        hi = np.asarray(self.hi, dtype=float)
        if lo.shape != hi.shape or np.any(lo > hi):
            raise ValueError("box needs lo <= hi componentwise")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @classmethod
    def bounding(cls, lo, hi):
        """Smallest box containing boxes with corners ``lo[k]``, ``hi[k]``."""
        return cls(np.min(lo, axis=0), np.max(hi, axis=0))

    @property
    def diam(self):
        return float(np.linalg.norm(self.hi - self.lo))

    def dist(self, other):
        gap = np.maximum(0.0, np.maximum(self.lo - other.hi, other.lo - self.hi))
        return float(np.linalg.norm(gap))


@dataclass(eq=False)
class Cluster:
    """Node of the cluster tree covering ``perm[start:stop]``."""
    start: int
    stop: int
    box: Box
    level: int
    children: list = field(default_factory=list)

    @property
    def size(self):
        return self.stop - self.start

    @property
    def is_leaf(self):
        return not self.children

    def walk(self):
        yield self
        for c in self.children:
            yield from c.walk()

    @property
    def depth(self):
        return max(c.level for c in self.walk()) - self.level

    def leaves(self):
        return [c for c in self.walk() if c.is_leaf]


def build_cluster_tree(boxes, c_small):
    """Binary cluster tree over ``N`` indices with support boxes ``boxes``
    of shape ``(N, 2, dim)`` (lower and upper corners).

    Returns ``(root, perm)`` with ``perm[k]`` the original index at
    position ``k`` of the cluster ordering.
    """
    boxes = np.asarray(boxes, dtype=float)
    if boxes.ndim != 3 or boxes.shape[1] != 2 or len(boxes) == 0:
        raise ValueError("boxes must have shape (N, 2, dim) with N >= 1")
    if c_small < 1:
        raise ValueError("c_small must be >= 1")
    lo, hi = boxes[:, 0], boxes[:, 1]
    centers = 0.5 * (lo + hi)
    perm = np.arange(len(boxes))

    def build(start, stop, level):
        idx = perm[start:stop]
        box = Box.bounding(lo[idx], hi[idx])
        node = Cluster(start, stop, box, level)
        if stop - start <= c_small:
            return node
        axis = int(np.argmax(box.hi - box.lo))
        c = centers[idx, axis]
        mid = 0.5 * (box.lo[axis] + box.hi[axis])
        left = c <= mid
        if left.all() or not left.any():
            # every centre on one side: split at the median instead
            order = np.argsort(c, kind="stable")
            left = np.zeros(len(idx), dtype=bool)
            left[order[: len(idx) // 2]] = True
        perm[start:stop] = np.concatenate([idx[left], idx[~left]])
        split = start + int(left.sum())
        node.children = [build(start, split, level + 1), build(split, stop, level + 1)]
        return node

    root = build(0, len(boxes), 0)
    return root, perm


@dataclass(frozen=True)
class Block:
    row: Cluster
    col: Cluster
    kind: int

    @property
    def shape(self):
        return self.row.size, self.col.size

    @property
    def rows(self):
        return slice(self.row.start, self.row.stop)

    @property
    def cols(self):
        return slice(self.col.start, self.col.stop)


@dataclass(eq=False)
class BlockPartition:
    blocks: list
    perm: np.ndarray
    root: Cluster
    c_adm: float
    c_small: int

    @property
    def N(self):
        return len(self.perm)

    @property
    def depth(self):
        """Depth of the block cluster tree (levels below the root block)."""
        return max(b.row.level for b in self.blocks)

    @property
    def admissible(self):
        return [b for b in self.blocks if b.kind == ADMISSIBLE]

    @property
    def small(self):
        return [b for b in self.blocks if b.kind == SMALL]

    @property
    def sparsity_constant(self):
        """Max number of blocks sharing a row cluster or a column cluster."""
        rows, cols = {}, {}
        for b in self.blocks:
            rows[id(b.row)] = rows.get(id(b.row), 0) + 1
            cols[id(b.col)] = cols.get(id(b.col), 0) + 1
        return max(max(rows.values()), max(cols.values()))

    def coverage(self):
        """Integer matrix counting how often each entry is covered."""
        cover = np.zeros((self.N, self.N), dtype=np.int32)
        for b in self.blocks:
            cover[b.rows, b.cols] += 1
        return cover

    def check(self):
        """Raise ``AssertionError`` unless the blocks tile the index square
        once and every block satisfies its admissibility or size condition."""
        total = sum(b.row.size * b.col.size for b in self.blocks)
        assert total == self.N ** 2, "block areas do not sum to N^2"
        if self.N <= 4096:
            assert np.all(self.coverage() == 1), "blocks overlap or leave gaps"
        for b in self.blocks:
            if b.kind == ADMISSIBLE:
                dist = b.row.box.dist(b.col.box)
                assert dist > 0 and b.row.box.diam <= self.c_adm * dist, "inadmissible block"
            else:
                assert min(b.shape) <= self.c_small or b.row.is_leaf or b.col.is_leaf

    def memory_units(self, r):
        adm = sum(min(r, *b.shape) * (b.row.size + b.col.size) for b in self.admissible)
        return int(adm + sum(b.row.size * b.col.size for b in self.small))


def is_admissible(s, t, c_adm):
    dist = s.box.dist(t.box)
    return dist > 0.0 and s.box.diam <= c_adm * dist


def build_block_partition(root, perm, c_adm=2.0, c_small=32):
    if c_adm <= 0:
        raise ValueError("c_adm must be positive")
    blocks = []

    def descend(s, t):
        if is_admissible(s, t, c_adm):
            blocks.append(Block(s, t, ADMISSIBLE))
        elif s.is_leaf or t.is_leaf:
            blocks.append(Block(s, t, SMALL))
        else:
            for sc in s.children:
                for tc in t.children:
                    descend(sc, tc)

    descend(root, root)
    return BlockPartition(blocks, perm, root, float(c_adm), int(c_small))


# --------------------------------------------------------------------------
# SVD

def jacobi_svd(M, tol=1e-15, max_sweeps=60):
    """One-sided Jacobi SVD, ``M = U @ diag(s) @ Vt`` (economy size).

    Columns are orthogonalized pairwise in round-robin order, all disjoint
    pairs of a round at once.  Stops when every pair satisfies
    ``|a_i . a_j| <= tol * |a_i| |a_j|`` or the columns are below
    ``1e-14 * ||M||_F``.
    """
    M = np.asarray(M, dtype=float)
    transpose = M.shape[0] < M.shape[1]
    A = (M.T if transpose else M).copy()
    m, n = A.shape
    V = np.eye(n)
    if n == 0 or m == 0:
        return np.zeros((M.shape[0], 0)), np.zeros(0), np.zeros((0, M.shape[1]))
    fro = np.linalg.norm(A)
    negligible = (1e-14 * fro) ** 2
    # round-robin schedule on an even number of slots (slot n is a dummy)
    slots = n + (n % 2)
    players = list(range(slots))
    rounds = []
    for _ in range(slots - 1):
        pairs = [(players[k], players[slots - 1 - k]) for k in range(slots // 2)]
        pairs = [(min(a, b), max(a, b)) for a, b in pairs if a < n and b < n]
        if pairs:
            rounds.append(np.array(pairs).T)
        players = [players[0]] + [players[-1]] + players[1:-1]
    off = np.inf
    for sweep in range(max_sweeps):
        off = 0.0
        rotated = False
        for i, j in rounds:
            ai, aj = A[:, i], A[:, j]
            alpha = np.einsum("ij,ij->j", ai, ai)
            beta = np.einsum("ij,ij->j", aj, aj)
            gamma = np.einsum("ij,ij->j", ai, aj)
            scale = np.sqrt(alpha * beta)
            active = (np.abs(gamma) > tol * scale) & (alpha > negligible) & (beta > negligible)
            with np.errstate(divide="ignore", invalid="ignore"):
                off = max(off, float(np.max(np.where(scale > 0, np.abs(gamma) / scale, 0.0))))
            if not active.any():
                continue
            rotated = True
            i, j = i[active], j[active]
            alpha, beta, gamma = alpha[active], beta[active], gamma[active]
            zeta = (beta - alpha) / (2.0 * gamma)
            t = np.sign(zeta) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            t[zeta == 0] = 1.0
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            ai, aj = A[:, i].copy(), A[:, j].copy()
            A[:, i] = c * ai - s * aj
            A[:, j] = s * ai + c * aj
            vi, vj = V[:, i].copy(), V[:, j].copy()
            V[:, i] = c * vi - s * vj
            V[:, j] = s * vi + c * vj
        if not rotated:
            break
    else:
        raise SVDConvergenceError(max_sweeps, off)
    sig = np.linalg.norm(A, axis=0)
    order = np.argsort(-sig, kind="stable")
    sig = sig[order]
    U = A[:, order]
    nz = sig > 0
    U[:, nz] /= sig[nz]
    V = V[:, order]
    if transpose:
        return V, sig, U.T
    return U, sig, V.T


def _svd(M, method):
    if method == "jacobi":
        return jacobi_svd(M)
    if method == "lapack":
        return lapack_svd(M, full_matrices=False, lapack_driver="gesvd", check_finite=False)
    raise ValueError(f"unknown SVD method {method!r}")


def truncated_svd(M, r, method="jacobi"):
    """Best rank-``r`` factors ``(X, Y)`` with ``M ~ X @ Y.T`` and the
    singular values of ``M``."""
    if r < 1:
        raise ValueError("rank must be >= 1")
    U, s, Vt = _svd(M, method)
    k = min(r, len(s))
    return U[:, :k] * s[:k], Vt[:k].T.copy(), s


# --------------------------------------------------------------------------
# H-matrices

@dataclass(eq=False)
class HMatrix:
    partition: BlockPartition
    rank: int
    payload: list   # (X, Y) for admissible blocks, dense arrays otherwise

    @property
    def N(self):
        return self.partition.N

    def to_dense(self, original_order=True):
        out = np.zeros((self.N, self.N))
        for b, data in zip(self.partition.blocks, self.payload):
            out[b.rows, b.cols] = data[0] @ data[1].T if b.kind == ADMISSIBLE else data
        if original_order:
            perm = self.partition.perm
            res = np.empty_like(out)
            res[np.ix_(perm, perm)] = out
            return res
        return out

    @property
    def memory_units(self):
        total = 0
        for b, data in zip(self.partition.blocks, self.payload):
            total += data[0].size + data[1].size if b.kind == ADMISSIBLE else data.size
        return int(total)


def permuted(dense, perm):
    return np.asarray(dense)[np.ix_(perm, perm)]


def compress(dense, partition, r, method="lapack", original_order=True):
    """Blockwise truncation of ``dense`` to an H-matrix of rank ``r``.

    Returns ``(H, block_errors)`` where ``block_errors`` lists sigma_{r+1}
    of every admissible block (0 when the block has rank <= r).
    """
    dense = np.asarray(dense, dtype=float)
    if dense.shape != (partition.N, partition.N):
        raise ValueError(f"matrix shape {dense.shape} does not match partition size {partition.N}")
    P = permuted(dense, partition.perm) if original_order else dense
    payload, errs = [], []
    for b in partition.blocks:
        blk = P[b.rows, b.cols]
        if b.kind == ADMISSIBLE:
            X, Y, s = truncated_svd(blk, r, method)
            payload.append((X, Y))
            errs.append(float(s[r]) if r < len(s) else 0.0)
        else:
            payload.append(blk.copy())
    return HMatrix(partition, r, payload), np.array(errs)


def hmatvec(H, x, original_order=True):
    x = np.asarray(x, dtype=float)
    if x.shape[0] != H.N:
        raise ValueError(f"vector length {x.shape[0]} does not match matrix size {H.N}")
    perm = H.partition.perm
    xp = x[perm] if original_order else x
    yp = np.zeros_like(xp)
    for b, data in zip(H.partition.blocks, H.payload):
        if b.kind == ADMISSIBLE:
            yp[b.rows] += data[0] @ (data[1].T @ xp[b.cols])
        else:
            yp[b.rows] += data @ xp[b.cols]
    if not original_order:
        return yp
    y = np.empty_like(yp)
    y[perm] = yp
    return y


def spectral_norm(matvec, rmatvec, n, max_iter=200, rtol=1e-10, seed=0):
    """||D||_2 by power iteration on D D^T.  Returns ``(estimate, iterations)``."""
    x = np.random.default_rng(seed).standard_normal(n)
    nx = np.linalg.norm(x)
    x /= nx
    est = 0.0
    for it in range(1, max_iter + 1):
        y = matvec(rmatvec(x))
        ny = np.linalg.norm(y)
        if ny == 0.0:
            return 0.0, it
        new = np.sqrt(ny)
        x = y / ny
        if abs(new - est) <= rtol * new:
            return float(new), it
        est = new
    return float(est), max_iter


def spectral_error(A_inv, H, **kw):
    """||A_inv - H||_2 (both in original ordering); returns ``(value, iterations)``."""
    D = np.asarray(A_inv, dtype=float) - H.to_dense()
    return spectral_norm(lambda v: D @ v, lambda v: D.T @ v, D.shape[0], **kw)


@dataclass
class DecayFit:
    rate: float
    intercept: float
    r2: float
    n_used: int


def fit_decay(ranks, errors, floor=ERROR_FLOOR):
    """Least-squares fit ``ln(error) ~ intercept + rate * r``.

    Samples at or below ``floor`` times the first error are dropped.
    """
    ranks = np.asarray(ranks, dtype=float)
    errors = np.asarray(errors, dtype=float)
    if len(ranks) < 4 or len(ranks) != len(errors):
        raise ValueError("need at least 4 (rank, error) samples")
    if not errors[0] > 0:
        raise ValueError("all errors at floor")
    keep = errors > floor * errors[0]
    if keep.sum() < 2:
        raise ValueError("all errors at floor")
    r, y = ranks[keep], np.log(errors[keep])
    rate, intercept = np.polyfit(r, y, 1)
    resid = y - (intercept + rate * r)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid ** 2)) / ss_tot if ss_tot > 0 else 1.0
    return DecayFit(float(rate), float(intercept), r2, int(keep.sum()))


@dataclass
class ErrorReport:
    ranks: np.ndarray
    bound: np.ndarray
    max_block_error: np.ndarray
    memory_units: np.ndarray
    depth: int
    spectral_error: np.ndarray | None = None
    fit: DecayFit | None = None


def rank_sweep(dense, partition, ranks, method="lapack", spectral=False, original_order=True,
               power_iterations=200, seed=0):
    """Compress for every rank in ``ranks`` with one SVD per admissible block.

    The bound is ``depth * max_blocks sigma_{r+1}``.  With ``spectral`` the
    true error ``||dense - H_r||_2`` is estimated by power iteration on the
    blockwise remainder.
    """
    ranks = np.asarray(sorted(ranks), dtype=int)
    if len(ranks) == 0 or ranks[0] < 1:
        raise ValueError("rank range must be nonempty and start at >= 1")
    dense = np.asarray(dense, dtype=float)
    if dense.shape != (partition.N, partition.N):
        raise ValueError(f"matrix shape {dense.shape} does not match partition size {partition.N}")
    P = permuted(dense, partition.perm) if original_order else dense
    adm = partition.admissible
    rmax = int(ranks[-1])
    sig = np.zeros((len(adm), rmax + 1))
    factors = []
    for k, b in enumerate(adm):
        U, s, Vt = _svd(P[b.rows, b.cols], method)
        m = min(len(s), rmax + 1)
        sig[k, :m] = s[:m]
        factors.append((U[:, :rmax] * s[:rmax], Vt[:rmax].T))
    block_max = sig[:, ranks].max(axis=0) if len(adm) else np.zeros(len(ranks))
    depth = partition.depth
    spec = None
    if spectral:
        # remainder on admissible blocks; small blocks are exact
        R = np.zeros_like(P)
        for b in adm:
            R[b.rows, b.cols] = P[b.rows, b.cols]
        spec = np.empty(len(ranks))
        done = 0
        for n, r in enumerate(ranks):
            for b, (X, Y) in zip(adm, factors):
                k = min(r, X.shape[1])
                if k > done:
                    R[b.rows, b.cols] -= X[:, done:k] @ Y[:, done:k].T
            done = r
            spec[n], _ = spectral_norm(lambda v: R @ v, lambda v: R.T @ v, len(R),
                                       max_iter=power_iterations, seed=seed)
    return ErrorReport(
        ranks=ranks,
        bound=depth * block_max,
        max_block_error=block_max,
        memory_units=np.array([partition.memory_units(int(r)) for r in ranks]),
        depth=depth,
        spectral_error=spec,
    )


def write_error_csv(report, path):
    spec = report.spectral_error
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["r", "bound", "spectral_error", "memory_units"])
        for n, r in enumerate(report.ranks):
            s = "nan" if spec is None else repr(float(spec[n]))
            w.writerow([int(r), repr(float(report.bound[n])), s, int(report.memory_units[n])])


_MAGIC = b"HMAT"


def dump_hmatrix(H, path):
    """Binary dump: magic, ``<I`` version, ``<qq`` (N, n_blocks), the
    permutation as int64, then per block an int64 record
    ``(I_lo, I_len, J_lo, J_len, kind, r)`` followed by its float64 payload
    (X then Y for admissible blocks, the dense block otherwise), all
    little-endian and row-major."""
    part = H.partition
    with open(path, "wb") as fh:
        fh.write(_MAGIC + struct.pack("<I", 1) + struct.pack("<qq", part.N, len(part.blocks)))
        fh.write(np.asarray(part.perm, dtype="<i8").tobytes())
        for b, data in zip(part.blocks, H.payload):
            r = data[0].shape[1] if b.kind == ADMISSIBLE else 0
            fh.write(struct.pack("<6q", b.row.start, b.row.size, b.col.start, b.col.size, b.kind, r))
            arrays = data if b.kind == ADMISSIBLE else (data,)
            for a in arrays:
                fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_hmatrix(path):
    """Read a dump back as ``(perm, records)``; each record is
    ``(I_lo, I_len, J_lo, J_len, kind, payload)``."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != _MAGIC:
        raise ValueError("not an H-matrix dump")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != 1:
        raise ValueError(f"unsupported dump version {version}")
    N, nb = struct.unpack_from("<qq", buf, 8)
    pos = 24
    perm = np.frombuffer(buf, dtype="<i8", count=N, offset=pos).copy()
    pos += 8 * N
    records = []
    for _ in range(nb):
        ilo, ilen, jlo, jlen, kind, r = struct.unpack_from("<6q", buf, pos)
        pos += 48
        if kind == ADMISSIBLE:
            X = np.frombuffer(buf, "<f8", ilen * r, pos).reshape(ilen, r).copy()
            pos += 8 * ilen * r
            Y = np.frombuffer(buf, "<f8", jlen * r, pos).reshape(jlen, r).copy()
            pos += 8 * jlen * r
            payload = (X, Y)
        else:
            payload = np.frombuffer(buf, "<f8", ilen * jlen, pos).reshape(ilen, jlen).copy()
            pos += 8 * ilen * jlen
        records.append((ilo, ilen, jlo, jlen, kind, payload))
    return perm, records
