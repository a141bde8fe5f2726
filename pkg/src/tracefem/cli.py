"""Command line front end for the convergence experiments.

Exit codes: 0 on success, 2 for configuration errors, 3 when the linear
solver fails and 4 when the cut-cell geometry processing fails.
"""

import argparse
import sys

from . import benchmark
from .errors import ConfigError, GeometryError, SolverError


def build_parser():
    parser = argparse.ArgumentParser(
        prog="tracefem",
        description="Adaptive stabilized trace finite elements on the unit sphere.")
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run a convergence experiment")
    run.add_argument("--degree", type=int, choices=(1, 2), default=1,
                     help="polynomial degree of the bulk space")
    run.add_argument("--stab", choices=("nv", "jf"), default="nv",
                     help="stabilization: normal-volume or jumps over faces")
    run.add_argument("--lambda", dest="lam", type=float, default=1.0,
                     help="smoothness parameter of the manufactured solution")
    run.add_argument("--theta", type=float, default=0.5,
                     help="bulk marking fraction")
    run.add_argument("--mode", choices=("uniform", "adaptive"), default="adaptive")
    run.add_argument("--cycles", type=int, default=5,
                     help="number of solve/refine cycles")
    run.add_argument("--rho-scale", type=float, default=10.0,
                     help="normal-volume weight: rho = rho_scale / h")
    run.add_argument("--sigma", type=float, default=10.0,
                     help="face/normal jump weight")
    run.add_argument("--sigma-face", dest="sigma_face", type=float, default=None,
                     help="override for the first-order face jump weight only")
    run.add_argument("--out", default=None, help="CSV output path")
    run.add_argument("--vtk-dir", dest="vtk_dir", default=None,
                     help="directory for per-cycle VTK dumps")
    run.add_argument("--n0", type=int, default=8,
                     help="cells per axis of the initial grid")
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = benchmark.RunConfig(
            degree=args.degree, stab=args.stab, lam=args.lam, theta=args.theta,
            mode=args.mode, cycles=args.cycles, rho_scale=args.rho_scale,
            sigma=args.sigma, sigma_face=args.sigma_face, out=args.out,
            vtk_dir=args.vtk_dir, n0=args.n0)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2

    def report(rec):
        print(f"cycle {rec.cycle:3d}  dofs {rec.dofs:8d}  "
              f"L2 {rec.l2_error:.4e}  H1 {rec.h1_error:.4e}  "
              f"eta {rec.estimator:.4e}  cg {rec.cg_iters:5d}  "
              f"{rec.wall_seconds:7.2f}s", flush=True)

    try:
        benchmark.run(config, progress=report)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except SolverError as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return 3
    except GeometryError as exc:
        print(f"geometry failure: {exc}", file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
