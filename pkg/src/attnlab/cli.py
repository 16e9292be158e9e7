"""Command line front end.

Exit codes: 0 success, 1 tolerance failure, 2 usage error, 3 unreadable
or unwritable input, 4 shape mismatch. Reports go to stdout as JSON (or
CSV for sweep); diagnostics go to stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import instrumentation as inst
from . import kernels as K
from . import tensorio as tio
from .nonlinear import (
    LN_TABLE_LO,
    SIGMOID_TABLE_HI,
    SIGMOID_TABLE_LO,
    default_ln_table,
    default_sigmoid_table,
    fit_pwl,
    sigmoid_exact,
)
from .precision import Precision, get_format

EXIT_OK = 0
EXIT_TOLERANCE = 1
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_SHAPE = 4

PRECISIONS = ("fp64", "bf16", "fp8e4m3")
SWEEP_DIMS = (16, 64, 256)


def _err(msg: str) -> None:
    print(f"attnlab: {msg}", file=sys.stderr)


def parse_dist(text: str) -> tuple[str, tuple]:
    """Parse 'gaussian:0,1', 'uniform:-1,1' or 'adversarial:10000'."""
    name, _, rest = text.partition(":")
    defaults = {"gaussian": (0.0, 1.0), "uniform": (0.0, 1.0), "adversarial": (1e4,)}
    if name not in defaults:
        raise ValueError(f"unknown distribution {name!r}")
    if not rest:
        return name, defaults[name]
    try:
        params = tuple(float(p) for p in rest.split(","))
    except ValueError:
        raise ValueError(f"bad distribution parameters in {text!r}") from None
    return name, params


def _gen_spec_from_args(args) -> tio.GenSpec:
    name, params = parse_dist(args.dist)
    return tio.GenSpec(
        seed=args.seed,
        n_keys=args.n,
        d=args.d,
        n_queries=args.queries,
        distribution=name,
        params=params,
    )


def cmd_gen(args) -> int:
    try:
        spec = _gen_spec_from_args(args)
    except ValueError as e:
        _err(str(e))
        return EXIT_USAGE
    problem = tio.generate(spec)
    out = Path(args.out)
    try:
        tio.save_problem(out, problem, args.dtype)
    except OSError as e:
        _err(f"cannot write {out}: {e}")
        return EXIT_IO
    print(
        json.dumps(
            {
                "seed": spec.seed,
                "n_keys": spec.n_keys,
                "d": spec.d,
                "n_queries": spec.n_queries,
                "distribution": spec.distribution,
                "params": list(spec.params),
                "dtype": args.dtype,
                "files": [str(out / f) for f in ("q.atn", "k.atn", "v.atn")],
            },
            indent=2,
        )
    )
    return EXIT_OK


def _resolve_run_problem(args, parser) -> K.AttnProblem:
    has_dir = args.input_dir is not None
    has_gen = args.seed is not None
    if has_dir == has_gen:
        parser.error("provide exactly one input source: --in DIR, or --seed with --n/--d")
    if has_dir:
        return tio.load_problem(args.input_dir)
    if args.n is None or args.d is None:
        parser.error("--seed input needs --n and --d")
    return tio.generate(_gen_spec_from_args(args))


def _build_run_config(args, parser):
    if args.mode == "log" and args.nonlinear == "pwl":
        parser.error("--mode log carries ln(w) exactly and has no pwl variant")
    prec = Precision(get_format(args.precision), wide_accumulate=args.wide_accumulate)
    skip = K.SkipConfig(enabled=args.skip == "on", lo=args.skip_lo, hi=args.skip_hi)
    tables = None
    if args.nonlinear == "pwl":
        tables = K.PwlTables(sigmoid=default_sigmoid_table(), ln=default_ln_table())
    return prec, skip, tables


def cmd_run(args, parser) -> int:
    try:
        problem = _resolve_run_problem(args, parser)
    except (tio.TensorFileError, OSError) as e:
        _err(str(e))
        return EXIT_IO
    except ValueError as e:
        _err(str(e))
        return EXIT_USAGE
    prec, skip, tables = _build_run_config(args, parser)

    result = None
    best_ns = None
    for _ in range(max(args.reps, 1)):
        result = K.run_kernel(problem, args.kernel, prec=prec, skip=skip, tables=tables, mode=args.mode)
        best_ns = result.runtime_ns if best_ns is None else min(best_ns, result.runtime_ns)

    if args.out:
        try:
            tio.write_tensor(args.out, result.outputs, "fp64")
        except OSError as e:
            _err(f"cannot write {args.out}: {e}")
            return EXIT_IO

    summary = inst.summarize_run(result.ops, result.skip_stats, problem.n_keys, problem.d)
    report = {
        "kernel": args.kernel,
        "precision": args.precision,
        "n_keys": problem.n_keys,
        "d": problem.d,
        "n_queries": problem.n_queries,
        "skip": {"enabled": skip.enabled, "lo": skip.lo, "hi": skip.hi},
        "mode": args.mode,
        "nonlinear": args.nonlinear,
        "wide_accumulate": args.wide_accumulate,
        "runtime_ns": best_ns,
        "all_finite": bool(np.isfinite(result.outputs).all()),
        "ops": result.ops.as_dict(),
        "update_ops": result.update_ops.as_dict(),
        "skip_stats": result.skip_stats.as_dict(),
        "summary": summary,
    }
    print(json.dumps(report, indent=2))
    return EXIT_OK


def cmd_compare(args) -> int:
    try:
        a, _ = tio.read_tensor(args.a)
        b, _ = tio.read_tensor(args.b)
    except (tio.TensorFileError, OSError) as e:
        _err(str(e))
        return EXIT_IO
    if a.shape != b.shape:
        _err(f"shape mismatch: {a.shape} vs {b.shape}")
        return EXIT_SHAPE
    report = inst.compare_outputs(a, b)
    out = report.as_dict()
    out["tol"] = args.tol
    out["metric"] = "max_rel_norm"
    out["within_tol"] = report.max_rel_norm <= args.tol
    print(json.dumps(out, indent=2))
    return EXIT_OK if report.max_rel_norm <= args.tol else EXIT_TOLERANCE


def cmd_fit_pwl(args) -> int:
    if args.function == "sigmoid":
        f = sigmoid_exact
        lo = SIGMOID_TABLE_LO if args.lo is None else args.lo
        hi = SIGMOID_TABLE_HI if args.hi is None else args.hi
        grid = args.grid or "uniform"
    else:
        f = np.log
        lo = LN_TABLE_LO if args.lo is None else args.lo
        hi = 1.0 if args.hi is None else args.hi
        grid = args.grid or "log"
    try:
        table = fit_pwl(f, lo, hi, args.segments, objective=args.objective, grid=grid, name=args.function)
    except ValueError as e:
        _err(str(e))
        return EXIT_USAGE
    print(json.dumps(table.to_dict(), indent=2))
    return EXIT_OK


def _sweep_rows(args):
    skip_settings = []
    for token in args.skip_settings.split(","):
        token = token.strip()
        if token not in ("off", "on"):
            raise ValueError(f"bad skip setting {token!r}")
        skip_settings.append(token)
    dims = tuple(int(t) for t in args.dims.split(","))
    rows = []
    for kernel in K.KERNEL_KINDS:
        for precision in PRECISIONS:
            for d in dims:
                for skip in skip_settings:
                    rows.append((kernel, precision, d, skip))
    return rows


def _sweep_one(row, args, problems, references, tables):
    kernel, precision, d, skip_token = row
    problem = problems[d]
    prec = Precision(get_format(precision), wide_accumulate=args.wide_accumulate)
    skip = K.SkipConfig(enabled=skip_token == "on")
    run_tables = tables if args.nonlinear == "pwl" else None
    result = K.run_kernel(problem, kernel, prec=prec, skip=skip, tables=run_tables, mode="paper")
    err = inst.norm_rel_error(result.outputs, references[d])
    return {
        "kernel": kernel,
        "precision": precision,
        "N": problem.n_keys,
        "d": d,
        "skip": skip_token,
        "mode": "paper",
        "nonlinear": args.nonlinear,
        "mul": result.ops.mul,
        "add": result.ops.add,
        "sub": result.ops.sub,
        "div": result.ops.div,
        "exp": result.ops.exp,
        "max_cmp": result.ops.max_cmp,
        "vec_loads": result.ops.vec_loads,
        "skipped_low": result.skip_stats.skipped_low,
        "skipped_high": result.skip_stats.skipped_high,
        "max_rel_err": err,
        "runtime_ns": result.runtime_ns,
    }


def cmd_sweep(args, parser) -> int:
    if args.nonlinear == "pwl" and args.mode == "log":
        parser.error("--mode log carries ln(w) exactly and has no pwl variant")
    try:
        rows = _sweep_rows(args)
    except ValueError as e:
        _err(str(e))
        return EXIT_USAGE

    dims = sorted({d for _, _, d, _ in rows})
    problems = {}
    references = {}
    for d in dims:
        spec = tio.GenSpec(seed=args.seed, n_keys=args.n, d=d, n_queries=args.queries)
        problems[d] = tio.generate(spec)
        references[d] = K.run_kernel(problems[d], K.REFERENCE).outputs

    tables = None
    if args.nonlinear == "pwl":
        tables = K.PwlTables(sigmoid=default_sigmoid_table(), ln=default_ln_table())

    def work(row):
        try:
            return inst.csv_row(_sweep_one(row, args, problems, references, tables))
        except Exception as e:  # record the failure, keep sweeping
            kernel, precision, d, skip_token = row
            _err(f"row {kernel}/{precision}/d={d}/skip={skip_token} failed: {e}")
            stub = {
                "kernel": kernel,
                "precision": precision,
                "N": args.n,
                "d": d,
                "skip": skip_token,
                "mode": "paper",
                "nonlinear": args.nonlinear,
            }
            return inst.csv_row(stub)

    if args.jobs > 1:
        with ThreadPoolExecutor(max_workers=args.jobs) as pool:
            lines = list(pool.map(work, rows))
    else:
        lines = [work(row) for row in rows]

    text = "\n".join([inst.csv_header(), *lines]) + "\n"
    if args.out:
        try:
            Path(args.out).write_text(text)
        except OSError as e:
            _err(f"cannot write {args.out}: {e}")
            return EXIT_IO
    else:
        sys.stdout.write(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="attnlab", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a deterministic problem and write q/k/v tensor files")
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--n", type=int, required=True, help="number of key/value pairs")
    g.add_argument("--d", type=int, required=True, help="feature dimension")
    g.add_argument("--queries", type=int, default=1)
    g.add_argument("--dist", default="gaussian:0,1", help="gaussian:mu,sigma | uniform:a,b | adversarial:scale")
    g.add_argument("--dtype", default="fp64", choices=sorted(tio.DTYPE_CODES))
    g.add_argument("--out", required=True, help="output directory")

    r = sub.add_parser("run", help="run one kernel and print its instrumentation report")
    r.add_argument("--kernel", required=True, choices=K.KERNEL_KINDS)
    r.add_argument("--precision", default="fp64", choices=PRECISIONS)
    r.add_argument("--skip", default="off", choices=("off", "on"))
    r.add_argument("--skip-lo", type=float, default=-6.0)
    r.add_argument("--skip-hi", type=float, default=11.0)
    r.add_argument("--nonlinear", default="exact", choices=("exact", "pwl"))
    r.add_argument("--mode", default="paper", choices=("paper", "log"))
    r.add_argument("--wide-accumulate", action="store_true")
    r.add_argument("--in", dest="input_dir", help="directory holding q.atn/k.atn/v.atn")
    r.add_argument("--seed", type=int, help="generate the input instead of reading it")
    r.add_argument("--n", type=int)
    r.add_argument("--d", type=int)
    r.add_argument("--queries", type=int, default=1)
    r.add_argument("--dist", default="gaussian:0,1")
    r.add_argument("--reps", type=int, default=1, help="repetitions; runtime_ns reports the best")
    r.add_argument("--out", help="write outputs as an fp64 tensor file")

    c = sub.add_parser("compare", help="compare two tensor files")
    c.add_argument("a")
    c.add_argument("b")
    c.add_argument("--tol", type=float, default=1e-12, help="gate on per-query inf-norm relative error")

    f = sub.add_parser("fit-pwl", help="fit a piecewise-linear table and print it as JSON")
    f.add_argument("--function", required=True, choices=("sigmoid", "ln"))
    f.add_argument("--lo", type=float)
    f.add_argument("--hi", type=float)
    f.add_argument("--segments", type=int, default=8)
    f.add_argument("--objective", default="maxerr", choices=("maxerr", "lsq"))
    f.add_argument("--grid", choices=("uniform", "log"))

    s = sub.add_parser("sweep", help="kernel x precision x dimension x skip matrix, CSV output")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--n", type=int, default=64)
    s.add_argument("--queries", type=int, default=2)
    s.add_argument("--dims", default=",".join(str(d) for d in SWEEP_DIMS))
    s.add_argument("--skip-settings", default="off,on")
    s.add_argument("--nonlinear", default="exact", choices=("exact", "pwl"))
    s.add_argument("--mode", default="paper", choices=("paper", "log"))
    s.add_argument("--wide-accumulate", action="store_true")
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("--out", help="CSV path (stdout when omitted)")

    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "gen":
        return cmd_gen(args)
    if args.command == "run":
        return cmd_run(args, parser)
    if args.command == "compare":
        return cmd_compare(args)
    if args.command == "fit-pwl":
        return cmd_fit_pwl(args)
    if args.command == "sweep":
        return cmd_sweep(args, parser)
    parser.error(f"unknown command {args.command!r}")
    return EXIT_USAGE


def main_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
