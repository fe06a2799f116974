"""End-to-end rank-decay experiment and the polynomial identity suite.

Pipeline: mesh -> assemble -> invert -> cluster -> partition -> compress
(rank sweep) -> fit.  Configuration is a flat ``key = value`` text file.
"""
import json
import math
import time
from dataclasses import asdict, dataclass, field, fields
from itertools import combinations
from pathlib import Path

import numpy as np

from . import fem, hmatrix, mesh as meshmod, polyops
from .hmatrix import SVDConvergenceError

__all__ = [
    "ConfigError", "PhaseError", "ExperimentConfig", "RunReport", "SuiteResult",
    "parse_config", "load_config", "run_experiment", "run_identity_suite",
    "compare_three_sizes", "ComparisonReport", "format_suite", "DESK_GUARD",
]

DESK_GUARD = 8000
NUMERIC_ERRORS = (np.linalg.LinAlgError, FloatingPointError, SVDConvergenceError,
                  ZeroDivisionError, OverflowError)


class ConfigError(ValueError):
    pass


class PhaseError(RuntimeError):
    """A pipeline phase failed; ``phase`` names it, ``__cause__`` holds the error."""

    def __init__(self, phase, exc):
        super().__init__(f"phase '{phase}' failed: {type(exc).__name__}: {exc}")
        self.phase = phase
        self.numeric = isinstance(exc, NUMERIC_ERRORS)


@dataclass
class ExperimentConfig:
    alpha: float = math.inf
    H: float = 0.25
    edge: str = "left"
    layers: int | None = 22
    p: int = 1
    coefficients: str = "laplace"
    a2: tuple = (0.5, 0.5)
    a3: float = 1.0
    c_small: int | None = None
    c_adm: float = 2.0
    r_min: int = 1
    r_max: int = 10
    svd: str = "lapack"
    spectral: str = "auto"
    deterministic: bool = True
    seed: int = 0
    large: bool = False
    output_dir: str = "results"

    def __post_init__(self):
        if self.coefficients not in ("laplace", "convection_diffusion"):
            raise ConfigError(f"unknown coefficients {self.coefficients!r}")
        if self.svd not in ("lapack", "jacobi"):
            raise ConfigError(f"unknown svd method {self.svd!r}")
        if self.spectral not in ("auto", "true", "false"):
            raise ConfigError("spectral must be auto, true or false")
        if not 1 <= self.r_min <= self.r_max:
            raise ConfigError(f"empty rank range [{self.r_min}, {self.r_max}]")
        if not 1 <= self.p <= fem.MAX_DEGREE:
            raise ConfigError(f"p must be in 1..{fem.MAX_DEGREE}")
        if self.c_adm <= 0:
            raise ConfigError("c_adm must be positive")
        if self.c_small is not None and self.c_small < 1:
            raise ConfigError("c_small must be >= 1")
        try:
            self.grading()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def grading(self):
        return meshmod.GradingSpec(alpha=self.alpha, H=self.H, target_edge=self.edge,
                                   layers=self.layers)

    def coefficient_set(self):
        if self.coefficients == "laplace":
            return fem.Coefficients.laplace()
        return fem.Coefficients.convection_diffusion(a2=tuple(self.a2), a3=self.a3)

    @property
    def c_small_value(self):
        return self.c_small if self.c_small is not None else hmatrix.default_c_small(self.p)

    @property
    def ranks(self):
        return list(range(self.r_min, self.r_max + 1))

    @property
    def guard(self):
        return fem.DENSE_GUARD if self.large else DESK_GUARD

    def as_dict(self):
        d = asdict(self)
        d["alpha"] = "inf" if math.isinf(self.alpha) else self.alpha
        d["a2"] = list(self.a2)
        return d


def _convert(key, raw):
    """Parse one config value according to the field's type."""
    types = {f.name: f.type for f in fields(ExperimentConfig)}
    if key not in types:
        raise ConfigError(f"unknown config key {key!r}")
    raw = raw.strip().strip('"').strip("'")
    t = str(types[key])
    try:
        if key == "alpha":
            return math.inf if raw.lower() in ("inf", "infinity") else float(raw)
        if key == "a2":
            vals = tuple(float(v) for v in raw.strip("()[]").split(","))
            if len(vals) != 2:
                raise ValueError("a2 needs two components")
            return vals
        if key in ("layers", "c_small"):
            return None if raw.lower() in ("none", "") else int(raw)
        if t in ("int", "<class 'int'>"):
            return int(raw)
        if t in ("float", "<class 'float'>"):
            return float(raw)
        if t in ("bool", "<class 'bool'>"):
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(f"not a boolean: {raw}")
            return raw.lower() in ("true", "1", "yes")
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {exc}") from exc


def parse_config(text, overrides=()):
    """Parse ``key = value`` lines (``#`` comments) plus ``key=value`` overrides."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, raw = line.split("=", 1)
        values[key.strip()] = _convert(key.strip(), raw)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r}: expected key=value")
        key, raw = item.split("=", 1)
        values[key.strip()] = _convert(key.strip(), raw)
    return ExperimentConfig(**values)


def load_config(path, overrides=()):
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, overrides)


@dataclass
class RunReport:
    N: int
    n_elements: int
    h_min: float
    h_max: float
    depth: int
    sparsity_constant: int
    n_admissible: int
    n_small: int
    c_small: int
    c_adm: float
    ranks: list
    bound: list
    max_block_error: list
    spectral_error: list | None
    memory_units: list
    memory_ratio: float
    rate: float
    intercept: float
    r2: float
    inverse_residual: float
    timings: dict = field(default_factory=dict)
    total_time: float = 0.0
    config: dict = field(default_factory=dict)
    csv_path: str = ""

    def summary(self):
        lines = [
            f"N = {self.N}  elements = {self.n_elements}  h_min = {self.h_min:.3e}  h_max = {self.h_max:.3e}",
            f"depth = {self.depth}  sparsity = {self.sparsity_constant}  "
            f"blocks: {self.n_admissible} admissible, {self.n_small} small  "
            f"(C_small = {self.c_small}, C_adm = {self.c_adm:g})",
            f"||A A^-1 - I||_max = {self.inverse_residual:.2e}",
            "   r        bound  max block err   spectral err   memory",
        ]
        for n, r in enumerate(self.ranks):
            spec = "n/a" if self.spectral_error is None else f"{self.spectral_error[n]:.4e}"
            lines.append(f"{r:4d}  {self.bound[n]:.4e}    {self.max_block_error[n]:.4e}"
                         f"    {spec:>11}  {self.memory_units[n]:8d}")
        lines.append(f"fitted rate {self.rate:.4f} (R^2 = {self.r2:.4f}), "
                     f"memory / ((r + C_small) depth N) <= {self.memory_ratio:.3f}")
        lines.append("time: " + ", ".join(f"{k} {v:.2f}s" for k, v in self.timings.items())
                     + f", total {self.total_time:.2f}s")
        return "\n".join(lines)


class _Phases:
    def __init__(self):
        self.timings = {}

    def run(self, name, fn, *args, **kw):
        t0 = time.perf_counter()
        try:
            return fn(*args, **kw)
        except (ConfigError, PhaseError):
            raise
        except Exception as exc:
            raise PhaseError(name, exc) from exc
        finally:
            self.timings[name] = self.timings.get(name, 0.0) + time.perf_counter() - t0


def run_experiment(config, write=True):
    """Run the full pipeline for one configuration."""
    t_start = time.perf_counter()
    ph = _Phases()
    m = ph.run("mesh", meshmod.make_graded_mesh, config.grading())

    def assemble():
        A, dofmap = fem.assemble_stiffness(m, config.coefficient_set(), config.p)
        if dofmap.N > config.guard:
            raise ConfigError(f"N = {dofmap.N} exceeds the dense-inverse guard {config.guard}"
                              + ("" if config.large else "; set large = true to raise it"))
        if dofmap.N == 0:
            raise ConfigError("mesh has no interior degrees of freedom")
        return A, dofmap

    A, dofmap = ph.run("assemble", assemble)
    A_inv = ph.run("invert", fem.solve_dense_inverse, A, config.guard)
    resid = ph.run("invert", fem.inverse_residual, A, A_inv)
    c_small = config.c_small_value
    root, perm = ph.run("cluster", hmatrix.build_cluster_tree, dofmap.support_boxes, c_small)
    part = ph.run("partition", hmatrix.build_block_partition, root, perm, config.c_adm, c_small)
    spectral = config.spectral == "true" or (config.spectral == "auto" and dofmap.N <= 4000)
    seed = config.seed if config.deterministic else None
    report = ph.run("compress", _sweep, A_inv, part, config, spectral, seed)
    fit = ph.run("fit", hmatrix.fit_decay, report.ranks, report.bound)

    ranks = [int(r) for r in report.ranks]
    denom = np.array([(r + c_small) * max(part.depth, 1) * dofmap.N for r in ranks])
    out = RunReport(
        N=int(dofmap.N), n_elements=int(m.n_elements),
        h_min=float(m.diameters.min()), h_max=float(m.diameters.max()),
        depth=int(part.depth), sparsity_constant=int(part.sparsity_constant),
        n_admissible=len(part.admissible), n_small=len(part.small),
        c_small=int(c_small), c_adm=float(config.c_adm),
        ranks=ranks, bound=[float(v) for v in report.bound],
        max_block_error=[float(v) for v in report.max_block_error],
        spectral_error=None if report.spectral_error is None else [float(v) for v in report.spectral_error],
        memory_units=[int(v) for v in report.memory_units],
        memory_ratio=float(np.max(report.memory_units / denom)),
        rate=fit.rate, intercept=fit.intercept, r2=fit.r2,
        inverse_residual=float(resid), config=config.as_dict(),
    )
    if write:
        ph.run("write", _write_outputs, out, report, config)
    out.timings = dict(ph.timings)
    out.total_time = time.perf_counter() - t_start
    if write:
        # rewrite the JSON so it carries the final timings; the CSV is untouched
        _write_json(out, Path(config.output_dir))
    return out


def _sweep(A_inv, part, config, spectral, seed):
    if seed is None:
        seed = int(np.random.SeedSequence().entropy % (2 ** 32))
    return hmatrix.rank_sweep(A_inv, part, config.ranks, method=config.svd,
                              spectral=spectral, seed=seed)


def _write_outputs(out, report, config):
    d = Path(config.output_dir)
    d.mkdir(parents=True, exist_ok=True)
    out.csv_path = str(d / "errors.csv")
    hmatrix.write_error_csv(report, out.csv_path)
    _write_json(out, d)


def _write_json(out, d):
    (d / "report.json").write_text(json.dumps(asdict(out), indent=2, sort_keys=True) + "\n")
    (d / "report.txt").write_text(out.summary() + "\n")


# --------------------------------------------------------------------------
# size comparison

@dataclass
class ComparisonReport:
    reports: list
    rates: list
    spread: float
    stable: bool
    csv_path: str = ""


def compare_three_sizes(configs, output_dir="results/compare", tolerance=0.3):
    """Run three configurations and overlay their bounds in one CSV.

    ``spread`` is ``(max rate - min rate) / min |rate|``; the runs count as
    size-stable when it is at most ``tolerance``.
    """
    if len(configs) != 3:
        raise ConfigError("exactly three configurations required")
    if len({(c.r_min, c.r_max) for c in configs}) != 1:
        raise ConfigError("configurations use different rank ranges")
    reports = [run_experiment(c, write=False) for c in configs]
    rates = [r.rate for r in reports]
    mags = [abs(r) for r in rates]
    spread = (max(rates) - min(rates)) / min(mags) if min(mags) > 0 else math.inf
    d = Path(output_dir)
    d.mkdir(parents=True, exist_ok=True)
    path = d / "compare.csv"
    with open(path, "w") as fh:
        fh.write("r," + ",".join(f"bound_{k + 1}_N{rep.N}" for k, rep in enumerate(reports)) + "\n")
        for n, r in enumerate(reports[0].ranks):
            fh.write(f"{r}," + ",".join(repr(rep.bound[n]) for rep in reports) + "\n")
    summary = {"N": [r.N for r in reports], "rates": rates, "r2": [r.r2 for r in reports],
               "spread": spread, "stable": spread <= tolerance}
    (d / "compare.json").write_text(json.dumps(summary, indent=2) + "\n")
    return ComparisonReport(reports, rates, float(spread), bool(spread <= tolerance), str(path))


# --------------------------------------------------------------------------
# identity suite

@dataclass
class SuiteResult:
    name: str
    d: int
    p: int
    value: float
    tol: float
    status: str        # "pass", "fail" or "skip"
    note: str = ""

    @property
    def passed(self):
        return self.status != "fail"


def _lift_norm_error(d, p, rng, n):
    worst = 0.0
    for k in range(n):
        i = k % (d + 1)
        f = polyops.SimplexPoly.random(d - 1, p, rng)
        lhs = polyops.poly_quadrature_norm(polyops.lift_face(f, i, p, d)) ** 2
        rhs = (polyops.volume_factor(d, i) / polyops.face_measure(d, i) / (2 * p + d)
               * polyops.poly_quadrature_norm(f, face=i, d=d) ** 2)
        worst = max(worst, abs(lhs - rhs) / rhs)
    return worst


def _lift_trace_error(d, p, rng):
    worst = 0.0
    for i in range(d + 1):
        f = polyops.SimplexPoly.random(d - 1, p, rng)
        L = polyops.lift_face(f, i, p, d)
        x = polyops.sample_subsimplex(d, polyops.face_nodes(d, i), 200, rng)
        tr = polyops.BoundaryPoly.trace_of(L)
        t = polyops.barycentric(x)[:, list(polyops.face_nodes(d, i))[1:]]
        worst = max(worst, float(np.abs(tr.face_values(i, x) - f(t)).max()))
        worst = max(worst, abs(float(L(polyops.nodes(d)[i][None])[0])))
    g = polyops.BoundaryPoly.trace_of(polyops.SimplexPoly.random(d, p, rng))
    G = polyops.combined_lift(g, p)
    worst = max(worst, (polyops.BoundaryPoly.trace_of(G) - g).max_abs_sampled(200))
    return worst


def _node_scaling_error(d, p, rng):
    g = polyops.BoundaryPoly.trace_of(polyops.SimplexPoly.random(d, p, rng))
    M = polyops.lift_sum(g, p)
    return max(abs(float(M(polyops.nodes(d)[n][None])[0]) - d * g.node_value(n)) for n in range(d + 1))


def _zero_scaling_error(d, p, rng):
    worst = 0.0
    for k in range(d - 1):
        if k + 2 > p:
            continue
        F = polyops.vanishing_on_k_simplices(d, k, p, rng)
        M = polyops.lift_sum(polyops.BoundaryPoly.trace_of(F), p)
        for S in combinations(range(d + 1), k + 2):
            x = polyops.sample_subsimplex(d, S, 50, rng)
            worst = max(worst, float(np.abs(M(x) - (d - k - 1) * F(x)).max()))
    return worst


def _zero_propagation_error(d, p, rng):
    """Face data vanishing on a sub-simplex of the face lifts to a polynomial
    vanishing on the hull of that sub-simplex and the opposite node."""
    worst = 0.0
    for i in range(d + 1):
        fn = polyops.face_nodes(d, i)
        for k in range(0, d - 1):
            for S in combinations(fn, k + 1):
                # face barycentrics not in S vanish on S
                others = [j for j, a in enumerate(fn) if a not in S]
                f = polyops.SimplexPoly.zeros(d - 1, p)
                for j in others:
                    mu = (polyops.SimplexPoly.linear(d - 1, 1.0, -np.ones(d - 1)) if j == 0
                          else polyops.SimplexPoly.linear(d - 1, 0.0, np.eye(d - 1)[j - 1]))
                    f = f + (mu * polyops.SimplexPoly.random(d - 1, p - 1, rng)).with_degree(p)
                L = polyops.lift_face(f, i, p, d)
                x = polyops.sample_subsimplex(d, list(S) + [i], 100, rng)
                worst = max(worst, float(np.abs(L(x)).max()))
    return worst


def _telescoping_error(d, p, rng, c=None):
    g = polyops.BoundaryPoly.trace_of(polyops.SimplexPoly.random(d, p, rng))
    return polyops.telescoping_residual(g, p, c=c).max_abs_sampled(200)


def _projection_error(d, p, rng, n):
    worst = 0.0
    for _ in range(n):
        f = polyops.SimplexPoly.random(d, p, rng)
        worst = max(worst, float(np.abs(polyops.degree_reduce(f, p).coef - f.coef).max()))
    return worst


def _continuity_errors(p, rng):
    """Jump of the reduced spline and its size on an element where the
    input vanishes, on the three-patch mesh."""
    m = meshmod.three_patch_mesh()
    dm = fem.build_dofmap(m, p + 2)
    u = np.zeros(dm.n_global)
    u[dm.interior] = rng.standard_normal(dm.N)
    out = polyops.elementwise_reduce(polyops.spline_from_bernstein(m, dm, u), p)
    jump = polyops.spline_jumps(out)
    u[dm.element_dofs[1]] = 0.0
    out = polyops.elementwise_reduce(polyops.spline_from_bernstein(m, dm, u), p)
    return jump, float(np.abs(out.pieces[1].coef).max())


def run_identity_suite(dims=(1, 2, 3), degrees=range(1, 7), n_random=20, seed=0,
                       lift_coefficients=None):
    """Check the lifting and reduction identities over a (d, p) grid.

    ``lift_coefficients`` overrides the telescoping coefficients (mutation
    testing).  Degrees above ``polyops.MAX_RELIABLE_DEGREE`` are skipped.
    """
    rng = np.random.default_rng(seed)
    results = []
    for d in dims:
        for p in degrees:
            if p > polyops.MAX_RELIABLE_DEGREE:
                results.append(SuiteResult("all", d, p, math.nan, math.nan, "skip",
                                           "monomial coefficients lose the 1e-9 tolerance above "
                                           f"degree {polyops.MAX_RELIABLE_DEGREE}"))
                continue
            c = None if lift_coefficients is None else lift_coefficients(d)
            checks = [
                ("lift_norm", _lift_norm_error(d, p, rng, n_random), 1e-8),
                ("lift_trace", _lift_trace_error(d, p, rng), 1e-10),
                ("node_scaling", _node_scaling_error(d, p, rng), 1e-12),
                ("zero_scaling", _zero_scaling_error(d, p, rng), 1e-10),
                ("zero_propagation", _zero_propagation_error(d, p, rng), 1e-11),
                ("telescoping", _telescoping_error(d, p, rng, c), 1e-9),
                ("projection", _projection_error(d, p, rng, n_random), 1e-9),
            ]
            if d == 2:
                jump, leak = _continuity_errors(p, rng)
                checks += [("continuity", jump, 1e-9), ("support", leak, 1e-12)]
            for name, val, tol in checks:
                results.append(SuiteResult(name, d, p, float(val), tol,
                                           "pass" if val <= tol else "fail"))
    return results


def format_suite(results):
    lines = [f"{'check':<18}{'d':>3}{'p':>3}{'value':>12}{'tol':>10}  status"]
    for r in results:
        val = "-" if math.isnan(r.value) else f"{r.value:.2e}"
        tol = "-" if math.isnan(r.tol) else f"{r.tol:.0e}"
        lines.append(f"{r.name:<18}{r.d:>3}{r.p:>3}{val:>12}{tol:>10}  {r.status}"
                     + (f"  ({r.note})" if r.note else ""))
    n_fail = sum(r.status == "fail" for r in results)
    lines.append(f"{len(results) - n_fail}/{len(results)} passed or skipped, {n_fail} failed")
    return "\n".join(lines)
