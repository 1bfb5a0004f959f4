"""Command-line interface: estimate, iv, varcomp, ftest, simulate, diagnose.

All subcommands read headered CSV, emit schema-validated JSON, and map
errors to exit codes: 0 success, 2 input validation, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
import warnings as _warnings

import numpy as np

from . import applications as apps
from . import simulation as sim
from .design import read_design_csv, write_design_csv
from .errors import ClusterQFError, ClusterQFWarning, ValidationError
from .projection import ProjectionWorkspace, leverage_diagnostics
from .quadform import QuadFormEngine, QuadFormTarget
from .results import SCHEMA_VERSION, build_result, dump_result, validate_result
from .variance import l2co_variance, l3co_terms, t_test

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NUMERICAL = 3


def _write_json(obj: dict, path: str | None) -> None:
    if path is None or path == "-":
        dump_result(obj, sys.stdout) if "theta_hat" in obj else json.dump(
            obj, sys.stdout, indent=2, sort_keys=True)
        if "theta_hat" not in obj:
            sys.stdout.write("\n")
    else:
        with open(path, "w", encoding="utf-8") as fh:
            if "theta_hat" in obj:
                dump_result(obj, fh)
            else:
                json.dump(obj, fh, indent=2, sort_keys=True)
                fh.write("\n")


def _split_cols(spec: str | None) -> list[str] | None:
    if spec is None:
        return None
    return [c for c in spec.split(",") if c]


def _expand_cols(df_columns, spec: str) -> list[str]:
    out = []
    for item in spec.split(","):
        if not item:
            continue
        if item.endswith("*"):
            out.extend(c for c in df_columns if c.startswith(item[:-1]))
        else:
            if item not in df_columns:
                raise ValidationError(f"input CSV is missing column {item!r}")
            out.append(item)
    if not out:
        raise ValidationError(f"column spec {spec!r} matched nothing")
    return out


def _variance_suite(engine, Y, methods, primary):
    """Compute the requested variance estimates once; return dict + flags."""
    omega2: dict = {}
    warns: list = []
    split_bad = False
    if "l3co" in methods or "l3co_nonneg" in methods:
        t = l3co_terms(engine, Y=Y)
        if t.reg_pair or t.reg_triple:
            warns.append(f"RegularizedSolves:{t.reg_pair + t.reg_triple}")
        omega2["l3co"] = t.value
        omega2["l3co_nonneg"] = abs(t.tilde1) + abs(t.tilde2)
        split_bad = t.tilde1 < 0.0 or t.tilde2 < 0.0
    if "l2co" in methods:
        est = l2co_variance(engine, Y=Y)
        omega2["l2co"] = est.value
        warns.extend(est.flags)
    primary_value = omega2[primary]
    if primary == "l3co" and split_bad:
        warns.append("NegativeL3COComponent:UsedNonnegVariant")
        primary_value = omega2["l3co_nonneg"]
    return omega2, primary_value, warns


def _engine_diagnostics(engine) -> dict:
    ws = engine.ws
    return {
        "n": ws.design.n,
        "G": ws.design.G,
        "d": ws.design.d,
        "h_n": engine.h_n,
        "r_n": engine.r_n,
        "kappa_n": engine.kappa_n,
        "min_eig_M_diag": float(min(np.linalg.eigvalsh(Mgg)[0]
                                    for Mgg in ws.M_diag)),
        "ridge_threshold": ws.t_n,
        "regularized_solves": ws.guard_stats.count,
    }


def cmd_estimate(args) -> int:
    t0 = time.perf_counter()
    design = read_design_csv(
        args.input, cluster_col=args.cluster_col, y_col=args.y_col,
        x_col=args.x_col, regressor_cols=_split_cols(args.regressors),
        regressor_prefix=args.regressor_prefix)
    theta0 = args.theta0
    if args.a0 is not None:
        A0 = np.loadtxt(args.a0, delimiter=",", ndmin=2)
        ws = ProjectionWorkspace(design)
        target = QuadFormTarget.from_dense(A0)
    elif args.restrictions is not None:
        R = np.loadtxt(args.restrictions, delimiter=",", ndmin=2)
        q = np.loadtxt(args.q, delimiter=",").ravel() if args.q else np.zeros(R.shape[0])
        design = design.with_outcomes(X=design.Y)
        ws = ProjectionWorkspace(design)
        target, theta0 = apps.restriction_target(ws, R, q)
    else:
        raise ValidationError("provide --a0, or --restrictions (with optional --q)")
    engine = QuadFormEngine(ws, target, strict=args.strict)
    theta = engine.theta_leaveout()
    methods = _split_cols(args.variance) or ["l3co", "l3co_nonneg", "l2co"]
    omega2, primary_value, warns = _variance_suite(
        engine, design.Y, methods, args.primary)
    test = t_test(theta, primary_value, theta0=theta0, alpha=args.alpha)
    result = build_result(
        theta, test, omega2, theta0, _engine_diagnostics(engine),
        {"wall_s": time.perf_counter() - t0}, warns)
    _write_json(result, args.out)
    return EXIT_OK


def _load_iv_problem(args) -> apps.IVProblem:
    import pandas as pd

    df = pd.read_csv(args.input)
    for col in (args.cluster_col, args.outcome, args.treatment):
        if col not in df.columns:
            raise ValidationError(f"input CSV is missing column {col!r}")
    zcols = _expand_cols(df.columns, args.instruments)
    ccols = _expand_cols(df.columns, args.controls) if args.controls else []
    return apps.IVProblem(
        df[args.cluster_col].tolist(),
        df[args.outcome].to_numpy(dtype=np.float64),
        df[args.treatment].to_numpy(dtype=np.float64),
        df[zcols].to_numpy(dtype=np.float64),
        df[ccols].to_numpy(dtype=np.float64) if ccols else None,
    )


def cmd_iv(args) -> int:
    t0 = time.perf_counter()
    problem = _load_iv_problem(args)
    warns: list = []
    if args.wald:
        with _warnings.catch_warnings(record=True) as caught:
            _warnings.simplefilter("always", ClusterQFWarning)
            point = apps.iv_point_estimate(problem, alpha=args.alpha,
                                           variance_method=args.primary)
        warns.extend(str(w.message) for w in caught
                     if issubclass(w.category, ClusterQFWarning))
        test = point.wald(args.beta0)
        theta = point.beta_hat
        theta0 = args.beta0
        omega2 = {args.primary: point.omega2}
    else:
        Y = problem.adjusted_outcome(args.beta0)
        theta = problem.xby - args.beta0 * problem.xbx
        methods = _split_cols(args.variance) or ["l3co", "l3co_nonneg", "l2co"]
        omega2, primary_value, warns2 = _variance_suite(
            problem.engine, Y, methods, args.primary)
        warns.extend(warns2)
        test = t_test(theta, primary_value, theta0=0.0, alpha=args.alpha)
        theta0 = 0.0
    result = build_result(
        theta, test, omega2, theta0, _engine_diagnostics(problem.engine),
        {"wall_s": time.perf_counter() - t0}, warns)
    if args.ci_grid:
        lo, hi, steps = args.ci_grid.split(":")
        cs = apps.iv_confidence_set(
            problem, alpha=args.alpha, grid=(float(lo), float(hi), int(steps)),
            variance_method=args.primary)
        result["confidence_set"] = {
            "intervals": cs.intervals,
            "unbounded_low": cs.unbounded_low,
            "unbounded_high": cs.unbounded_high,
        }
    _write_json(result, args.out)
    return EXIT_OK


def cmd_varcomp(args) -> int:
    import pandas as pd

    t0 = time.perf_counter()
    df = pd.read_csv(args.input)
    for col in (args.worker_col, args.firm_col, args.y_col):
        if col not in df.columns:
            raise ValidationError(f"input CSV is missing column {col!r}")
    ccols = _expand_cols(df.columns, args.controls) if args.controls else []
    structure = apps.MatchStructure(
        df[args.worker_col].tolist(), df[args.firm_col].tolist(),
        df[args.y_col].to_numpy(dtype=np.float64),
        df[ccols].to_numpy(dtype=np.float64) if ccols else None)
    targets = apps.varcomp_targets(structure)
    if args.target not in targets:
        raise ValidationError(f"--target must be one of {sorted(targets)}")
    design = structure.to_design()
    ws = ProjectionWorkspace(design)
    engine = QuadFormEngine(ws, targets[args.target])
    theta = engine.theta_leaveout()
    methods = _split_cols(args.variance) or ["l3co", "l3co_nonneg", "l2co"]
    omega2, primary_value, warns = _variance_suite(
        engine, design.Y, methods, args.primary)
    test = t_test(theta, primary_value, theta0=args.theta0, alpha=args.alpha)
    result = build_result(
        theta, test, omega2, args.theta0, _engine_diagnostics(engine),
        {"wall_s": time.perf_counter() - t0}, warns)
    _write_json(result, args.out)
    return EXIT_OK


def cmd_ftest(args) -> int:
    args.a0 = None
    if args.restrictions is None:
        raise ValidationError("ftest requires --restrictions R.csv")
    return cmd_estimate(args)


def cmd_diagnose(args) -> int:
    design = read_design_csv(
        args.input, cluster_col=args.cluster_col, y_col=args.y_col,
        x_col=args.x_col, regressor_cols=_split_cols(args.regressors),
        regressor_prefix=args.regressor_prefix)
    ws = ProjectionWorkspace(design)
    report = leverage_diagnostics(ws, triple_budget=args.triple_budget,
                                  seed=args.seed)
    out = {
        "schema_version": SCHEMA_VERSION,
        "diagnostics": report.to_dict(),
        "violators": report.violators(args.c),
        "c": args.c,
    }
    _write_json(out, args.out)
    return EXIT_OK


def cmd_simulate(args) -> int:
    methods = tuple(_split_cols(args.methods) or ("l3co", "tsls"))
    grid: tuple = ()
    if args.power_grid:
        lo, hi, steps = args.power_grid.split(":")
        grid = tuple(np.linspace(float(lo), float(hi), int(steps)).tolist())
    config = sim.DesignConfig(
        design=args.design, dims=args.dims, reps=args.reps, seed=args.seed,
        alphas=tuple(float(a) for a in args.alpha.split(",")),
        power_grid=grid, methods=methods)
    if args.dump_data:
        import pathlib

        outdir = pathlib.Path(args.dump_data)
        outdir.mkdir(parents=True, exist_ok=True)
        for rep in range(min(args.dump_reps, config.reps)):
            problem, estimand = sim.generate_problem(config, rep)
            dumped = problem.design.with_outcomes(
                Y=problem.adjusted_outcome(estimand))
            write_design_csv(dumped, outdir / f"data_rep{rep}.csv")
            np.savetxt(outdir / f"a0_rep{rep}.csv",
                       problem.target.materialize(), delimiter=",", fmt="%.17g")
    report = sim.run_size_power(config, workers=args.threads)
    _write_json(report.to_dict(), args.out)
    if args.curves:
        import csv as _csv

        rows = report.curves_rows()
        with open(args.curves, "w", newline="", encoding="utf-8") as fh:
            writer = _csv.DictWriter(fh, fieldnames=[
                "design", "method", "alpha", "beta_offset", "reject_rate", "mc_se"])
            writer.writeheader()
            writer.writerows(rows)
    return EXIT_OK


def _add_io_args(p, with_xy=True):
    p.add_argument("--input", required=True, help="input CSV path")
    p.add_argument("--cluster-col", default="cluster")
    if with_xy:
        p.add_argument("--y-col", default="y")
        p.add_argument("--x-col", default="x")
        p.add_argument("--regressors", default=None,
                       help="comma-separated regressor columns")
        p.add_argument("--regressor-prefix", default="w_")
    p.add_argument("--out", default=None, help="output JSON path (default stdout)")


def _add_test_args(p):
    p.add_argument("--variance", default=None,
                   help="comma list from l3co,l3co_nonneg,l2co (default all)")
    p.add_argument("--primary", default="l3co",
                   choices=["l3co", "l3co_nonneg", "l2co"],
                   help="variance estimate feeding the reported test")
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--strict", action="store_true",
                   help="error instead of ridge-regularizing singular blocks")
    p.add_argument("--threads", type=int, default=1)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="clusterqf",
        description="Cluster-robust inference for quadratic forms of "
                    "regression coefficients.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("estimate", help="estimate theta = pi' A0 gamma from CSV")
    _add_io_args(p)
    p.add_argument("--a0", default=None, help="dense A0 matrix CSV")
    p.add_argument("--restrictions", default=None, help="R matrix CSV (r x d)")
    p.add_argument("--q", default=None, help="q vector CSV (length r)")
    p.add_argument("--theta0", type=float, default=0.0)
    _add_test_args(p)
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("iv", help="IV inference with many instruments/controls")
    _add_io_args(p, with_xy=False)
    p.add_argument("--outcome", required=True)
    p.add_argument("--treatment", required=True)
    p.add_argument("--instruments", required=True,
                   help="comma list of columns; items ending in * expand by prefix")
    p.add_argument("--controls", default=None)
    p.add_argument("--beta0", type=float, default=0.0)
    mode = p.add_mutually_exclusive_group()
    mode.add_argument("--lm", dest="wald", action="store_false",
                      help="null-imposed LM test (default)")
    mode.add_argument("--wald", dest="wald", action="store_true",
                      help="Wald test at the point estimate")
    p.set_defaults(wald=False)
    p.add_argument("--ci-grid", default=None, metavar="LO:HI:STEPS",
                   help="invert the test over this beta grid")
    _add_test_args(p)
    p.set_defaults(func=cmd_iv)

    p = sub.add_parser("varcomp", help="variance components of two-way models")
    _add_io_args(p, with_xy=False)
    p.add_argument("--worker-col", required=True)
    p.add_argument("--firm-col", required=True)
    p.add_argument("--y-col", default="y")
    p.add_argument("--controls", default=None)
    p.add_argument("--target", default="psi", choices=["psi", "alpha", "cov"])
    p.add_argument("--theta0", type=float, default=0.0)
    _add_test_args(p)
    p.set_defaults(func=cmd_varcomp)

    p = sub.add_parser("ftest", help="test many linear restrictions R gamma = q")
    _add_io_args(p)
    p.add_argument("--restrictions", required=True, help="R matrix CSV")
    p.add_argument("--q", default=None, help="q vector CSV (default zeros)")
    p.add_argument("--theta0", type=float, default=0.0)
    _add_test_args(p)
    p.set_defaults(func=cmd_ftest)

    p = sub.add_parser("simulate", help="size/power experiments")
    p.add_argument("--design", type=int, required=True, choices=[1, 2, 3])
    p.add_argument("--dims", type=int, default=50,
                   help="design 1 instrument/control count (50, 100, or 150)")
    p.add_argument("--reps", type=int, default=100)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--alpha", default="0.05,0.10")
    p.add_argument("--power-grid", default=None, metavar="LO:HI:STEPS")
    p.add_argument("--methods", default="l3co,tsls")
    p.add_argument("--out", default=None)
    p.add_argument("--curves", default=None, help="power-curve CSV path")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--dump-data", default=None, metavar="DIR",
                   help="write per-replication data/a0 CSV dumps")
    p.add_argument("--dump-reps", type=int, default=1)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("diagnose", help="leverage and leave-out diagnostics")
    _add_io_args(p)
    p.add_argument("--c", type=float, default=0.01,
                   help="flag clusters with lambda_min(M_gg) below this")
    p.add_argument("--triple-budget", type=int, default=10_000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_diagnose)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValidationError, FileNotFoundError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (ClusterQFError, np.linalg.LinAlgError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
