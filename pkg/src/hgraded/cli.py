"""Command line interface.

Exit codes: 0 success, 1 suite or comparison failure, 2 configuration
error, 3 numeric failure.
"""
import argparse
import math
import sys

from . import experiment as ex
from .mesh import GradingSpec, MeshError, export_mesh, make_graded_mesh

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3


def _alpha(text):
    return math.inf if text.lower() in ("inf", "infinity") else float(text)


def _overrides(args):
    items = list(args.set or [])
    if getattr(args, "large", False):
        items.append("large=true")
    if getattr(args, "output", None):
        items.append(f"output_dir={args.output}")
    return items


def cmd_run(args):
    cfg = ex.load_config(args.config, _overrides(args))
    report = ex.run_experiment(cfg)
    print(report.summary())
    print(f"wrote {report.csv_path}")
    return EXIT_OK


def cmd_compare(args):
    cfgs = [ex.load_config(path, args.set or []) for path in args.configs]
    cmp = ex.compare_three_sizes(cfgs, output_dir=args.output or "results/compare")
    for rep in cmp.reports:
        print(f"N = {rep.N:6d}  rate = {rep.rate:.4f}  R^2 = {rep.r2:.4f}")
    verdict = "within" if cmp.stable else "NOT within"
    print(f"rate spread {cmp.spread:.3f} ({verdict} 30%); wrote {cmp.csv_path}")
    return EXIT_OK if cmp.stable else EXIT_FAIL


def _suite(dims, degrees, n_random):
    results = ex.run_identity_suite(dims=dims, degrees=degrees, n_random=n_random)
    print(ex.format_suite(results))
    return EXIT_OK if all(r.passed for r in results) else EXIT_FAIL


def cmd_verify(args):
    return _suite((1, 2, 3), range(1, 7), args.samples)


def cmd_polyops_verify(args):
    return _suite((args.d,), (args.p,), args.samples)


def cmd_mesh_gen(args):
    spec = GradingSpec(alpha=args.alpha, H=args.H, target_edge=args.edge, layers=args.layers)
    m = make_graded_mesh(spec)
    export_mesh(m, args.output)
    print(f"{m.n_vertices} vertices, {m.n_elements} elements, "
          f"h in [{m.diameters.min():.3e}, {m.diameters.max():.3e}], "
          f"shape constant {m.shape_constant:.3f}; wrote {args.output}")
    return EXIT_OK


def build_parser():
    ap = argparse.ArgumentParser(prog="hgraded", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run the rank-decay experiment")
    run.add_argument("--config", required=True)
    run.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    run.add_argument("--large", action="store_true", help="raise the dense-inverse size guard")
    run.add_argument("--output", help="output directory")
    run.set_defaults(func=cmd_run)

    ver = sub.add_parser("verify", help="run the polynomial identity suite")
    ver.add_argument("--samples", type=int, default=20)
    ver.set_defaults(func=cmd_verify)

    mesh = sub.add_parser("mesh", help="mesh utilities")
    msub = mesh.add_subparsers(dest="mesh_command", required=True)
    gen = msub.add_parser("gen", help="generate a graded mesh")
    gen.add_argument("--alpha", type=_alpha, default=math.inf)
    gen.add_argument("--H", type=float, default=0.25)
    gen.add_argument("--edge", default="left")
    gen.add_argument("--layers", type=int, default=None)
    gen.add_argument("-o", "--output", required=True)
    gen.set_defaults(func=cmd_mesh_gen)

    cmp = sub.add_parser("compare", help="compare three problem sizes")
    cmp.add_argument("configs", nargs=3)
    cmp.add_argument("--set", action="append", metavar="KEY=VALUE")
    cmp.add_argument("--output")
    cmp.set_defaults(func=cmd_compare)

    poly = sub.add_parser("polyops", help="polynomial operator utilities")
    psub = poly.add_subparsers(dest="poly_command", required=True)
    pv = psub.add_parser("verify", help="identity suite for one (d, p)")
    pv.add_argument("--d", type=int, default=2, choices=(1, 2, 3))
    pv.add_argument("--p", type=int, default=4)
    pv.add_argument("--samples", type=int, default=20)
    pv.set_defaults(func=cmd_polyops_verify)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ex.ConfigError, MeshError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ex.PhaseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        if not exc.numeric and isinstance(exc.__cause__, ValueError):
            return EXIT_CONFIG
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
