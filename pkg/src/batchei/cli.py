"""Command line entry point: ``batchei <command> [flags]``.

Exit codes: 0 success, 2 invalid input, 3 numerical failure, 64 bad usage.
Single results are printed as JSON, tables as CSV; ``--format`` overrides.
Wall-clock measurements go into a separate ``timings`` field so the rest of
the output is reproducible.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from .bench import PROBLEMS, ExperimentSpec, lhs_design, run_experiment, timing_bench, write_table
from .errors import ContractError, NumericalError
from .gp import Design, GpModel, fit
from .mvn import CallCounter, CdfEvaluator, mvn_cdf, mvn_cdf_grad
from .optimize import STRATEGIES, OptimizerConfig, cl_mix, maximize_qei
from .qei import MODES, QeiConfig, qei_error_bound, qei_value_and_grad
from .truncmoments import GaussianView, MomentConfig, moment, tangent_moments_batch

EXIT_CONTRACT = 2
EXIT_NUMERICAL = 3
EXIT_USAGE = 64


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# Input helpers
# ---------------------------------------------------------------------------

def _floats(text: str) -> np.ndarray:
    try:
        return np.array([float(t) for t in text.split(",") if t.strip()])
    except ValueError as exc:
        raise ContractError(f"expected comma-separated numbers, got {text!r}") from exc


def _ints(text: str) -> list:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise ContractError(f"expected comma-separated integers, got {text!r}") from exc


def _read_matrix(source: str) -> np.ndarray:
    """CSV file (optional header row) or inline ``a,b;c,d``."""
    path = Path(source)
    if path.exists():
        lines = [ln for ln in path.read_text().splitlines() if ln.strip()]
        rows = list(csv.reader(lines))
        try:
            [float(v) for v in rows[0]]
        except ValueError:
            rows = rows[1:]
        except IndexError:
            raise ContractError(f"{source} is empty") from None
    else:
        rows = [r.split(",") for r in source.split(";")]
    try:
        out = np.array([[float(v) for v in r] for r in rows], dtype=float)
    except ValueError as exc:
        raise ContractError(f"could not read a numeric matrix from {source!r}") from exc
    if out.ndim != 2:
        raise ContractError(f"rows of {source!r} have different lengths")
    return out


def _load_model(args) -> GpModel:
    if not args.model:
        raise ContractError("--model is required")
    return GpModel.load(args.model)


def _qei_config(args) -> QeiConfig:
    return QeiConfig(alpha=args.alpha, mode=args.mode, epsilon=args.eps, cdf_abs_tol=args.tol,
                     seed=args.seed)


def _calls(counter: CallCounter) -> dict:
    return {str(dim): n for dim, n in counter.report().items()}


# ---------------------------------------------------------------------------
# Output
# ---------------------------------------------------------------------------

def _emit(result, fmt: str, stream=None) -> None:
    stream = stream or sys.stdout
    if fmt == "json":
        stream.write(json.dumps(result, sort_keys=True) + "\n")
        return
    rows = result if isinstance(result, list) else [result]
    buf = io.StringIO()
    write = csv.writer(buf, lineterminator="\n")
    cols = list(rows[0].keys()) if rows else []
    write.writerow(cols)
    for r in rows:
        write.writerow([json.dumps(r[c], sort_keys=True) if isinstance(r[c], (dict, list)) else r[c]
                        for c in cols])
    stream.write(buf.getvalue())


def _matrix_rows(mat) -> list:
    mat = np.asarray(mat)
    return [{f"x{j + 1}": float(v) for j, v in enumerate(row)} for row in mat]


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_mvn_cdf(args):
    x, sigma = _floats(args.x), _read_matrix(args.cov)
    res = mvn_cdf(x, sigma, abs_tol=args.tol, seed=args.seed)
    out = {"value": res.value, "error_estimate": res.error_estimate, "n_evals": res.n_evals}
    if args.grad:
        out["gradient"] = mvn_cdf_grad(x, sigma, cdf=CdfEvaluator(args.tol, args.seed)).tolist()
    return out


def cmd_moments(args):
    g = GaussianView(_floats(args.mean), _read_matrix(args.cov))
    counter = CallCounter()
    if args.mode == "tangent":
        if args.alpha != 1:
            raise ContractError("tangent moments exist for alpha=1 only")
        cfg = MomentConfig(epsilon=args.eps, cdf_abs_tol=args.tol, seed=args.seed)
        value = tangent_moments_batch([g], [args.k], cfg, with_grads=False,
                                      cdf=cfg.evaluator(counter))[0].value
    elif args.mode == "analytic":
        value = moment(args.k, args.alpha, g, CdfEvaluator(args.tol, args.seed, counter))
    else:
        raise ContractError("moments supports --mode analytic or tangent")
    return {"value": value, "k": args.k, "alpha": args.alpha, "calls": _calls(counter)}


def cmd_qei_eval(args):
    model, batch, cfg = _load_model(args), _read_matrix(args.batch), _qei_config(args)
    counter = CallCounter()
    start = time.perf_counter()
    value, _ = qei_value_and_grad(model, batch, cfg, counter, with_grad=False)
    elapsed = time.perf_counter() - start
    return {"value": value, "calls": _calls(counter), "error_bound": qei_error_bound(model, batch, cfg),
            "timings": {"seconds": elapsed}}


def cmd_qei_grad(args):
    model, batch, cfg = _load_model(args), _read_matrix(args.batch), _qei_config(args)
    counter = CallCounter()
    start = time.perf_counter()
    _, grad = qei_value_and_grad(model, batch, cfg, counter, with_value=False)
    elapsed = time.perf_counter() - start
    if args.format == "csv":
        return _matrix_rows(grad)
    return {"gradient": grad.tolist(), "calls": _calls(counter), "timings": {"seconds": elapsed}}


def cmd_maximize(args):
    model = _load_model(args)
    cfg = OptimizerConfig(n_starts=args.starts, grad_mode=args.mode, epsilon=args.eps,
                          max_iters=args.max_iters, seed=args.seed)
    counter = CallCounter()
    start = time.perf_counter()
    if args.strategy == "cl-mix":
        batch, value, diag = cl_mix(model, args.q, cfg, counter)
    else:
        batch, value, diag = maximize_qei(model, args.q, cfg, counter)
    elapsed = time.perf_counter() - start
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with (out / "batch.csv").open("w") as fh:
            _emit(_matrix_rows(batch), "csv", fh)
    if args.format == "csv":
        return _matrix_rows(batch)
    return {"batch": batch.tolist(), "value": value, "calls": _calls(counter), "diagnostics": diag,
            "timings": {"seconds": elapsed}}


def cmd_run(args):
    if args.problem not in PROBLEMS:
        raise ContractError(f"unknown problem {args.problem!r}; known: {sorted(PROBLEMS)}")
    strategies = tuple(s.strip() for s in args.strategy.split(",") if s.strip())
    cfg = OptimizerConfig(n_starts=args.starts, epsilon=args.eps, max_iters=args.max_iters)
    spec = ExperimentSpec(problem=PROBLEMS[args.problem], q=args.q, n_iterations=args.iters,
                          n_seeds=args.seeds, strategies=strategies, n_init=args.n_init,
                          optimizer=cfg, first_seed=args.seed)
    out = args.out or f"results/{args.problem}_q{args.q}_seed{args.seed}"
    run_experiment(spec, out, n_jobs=args.jobs)
    summary = json.loads((Path(out) / "summary.json").read_text())
    if summary["failures"]:
        raise NumericalError(f"{len(summary['failures'])} run(s) failed; see {out}/summary.json")
    return {"out": str(out), "summary": summary}


def cmd_bench_timing(args):
    q_list = _ints(args.q)
    modes = list(MODES) if args.modes == "all" else [m.strip() for m in args.modes.split(",")]
    for m in modes:
        if m not in MODES:
            raise ContractError(f"unknown mode {m!r}")
    if args.model:
        model = GpModel.load(args.model)
    else:
        problem = PROBLEMS["borehole"]
        x = lhs_design(args.n_init, problem.dim, args.seed)
        model = fit(Design(x, problem(x)), seed=args.seed)
    cfg = replace(QeiConfig().fast(), epsilon=args.eps, seed=args.seed)
    rows = timing_bench(model, q_list, modes, args.batches, args.seed, cfg)
    for r in rows:
        r["calls"] = {str(k): v for k, v in r["calls"].items()}
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_table(rows, out / f"timing.{args.format}", args.format)
    return rows


def cmd_lhs(args):
    x = lhs_design(args.n, args.d, args.seed, args.improve)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with (out / "lhs.csv").open("w") as fh:
            _emit(_matrix_rows(x), "csv", fh)
    return _matrix_rows(x) if args.format == "csv" else {"points": x.tolist()}


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="batchei", description="Batch expected improvement toolkit.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def command(name, func, help_text, default_format="json"):
        p = sub.add_parser(name, help=help_text)
        p.set_defaults(func=func)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--format", choices=("json", "csv"), default=default_format)
        return p

    def qei_flags(p, default_tol=1e-7):
        p.add_argument("--mode", default="analytic", help="analytic, tangent or proxy")
        p.add_argument("--alpha", type=int, default=1, help="improvement exponent, 1 or 2")
        p.add_argument("--eps", type=float, default=1e-4, help="tangent step")
        p.add_argument("--tol", type=float, default=default_tol, help="absolute CDF tolerance")

    p = command("mvn-cdf", cmd_mvn_cdf, "Gaussian orthant probability P(X <= x)")
    p.add_argument("--x", required=True, help="upper limits, comma separated")
    p.add_argument("--cov", required=True, help="CSV file or inline 'a,b;c,d'")
    p.add_argument("--tol", type=float, default=1e-7)
    p.add_argument("--grad", action="store_true", help="also report the gradient in x")

    p = command("moments", cmd_moments, "truncated moment E[Z_k^alpha 1{Z <= 0}]")
    p.add_argument("--mean", required=True)
    p.add_argument("--cov", required=True)
    p.add_argument("--k", type=int, default=0)
    qei_flags(p)

    for name, func, text in (("qei-eval", cmd_qei_eval, "q-EI of a batch"),
                             ("qei-grad", cmd_qei_grad, "q-EI gradient of a batch")):
        p = command(name, func, text)
        p.add_argument("--model", required=True, help="model snapshot JSON")
        p.add_argument("--batch", required=True, help="CSV with one point per row")
        qei_flags(p)

    p = command("maximize", cmd_maximize, "select a batch by multistart q-EI maximization")
    p.add_argument("--model", required=True)
    p.add_argument("--q", type=int, required=True)
    p.add_argument("--mode", default="tangent", help="gradient mode of the local searches")
    p.add_argument("--strategy", choices=("qei", "cl-mix"), default="qei")
    p.add_argument("--eps", type=float, default=1e-4)
    p.add_argument("--starts", type=int, default=10)
    p.add_argument("--max-iters", type=int, default=200)
    p.add_argument("--out", help="directory for batch.csv")

    p = command("run", cmd_run, "batch-sequential optimization of a test problem")
    p.add_argument("--problem", default="borehole")
    p.add_argument("--q", type=int, default=4)
    p.add_argument("--iters", type=int, default=20)
    p.add_argument("--strategy", default="qei-proxy", help=f"comma list from {', '.join(STRATEGIES)}")
    p.add_argument("--seeds", type=int, default=1, help="number of consecutive seeds from --seed")
    p.add_argument("--n-init", type=int, default=80)
    p.add_argument("--starts", type=int, default=10)
    p.add_argument("--max-iters", type=int, default=200)
    p.add_argument("--eps", type=float, default=1e-4)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", help="results directory")

    p = command("bench-timing", cmd_bench_timing, "time q-EI values and gradients", "csv")
    p.add_argument("--q", default="2,4,8", help="comma-separated batch sizes")
    p.add_argument("--modes", default="all", help="'all' or a comma list of modes")
    p.add_argument("--batches", type=int, default=10)
    p.add_argument("--model", help="model snapshot; defaults to Borehole on an LHS design")
    p.add_argument("--n-init", type=int, default=80)
    p.add_argument("--eps", type=float, default=1e-4)
    p.add_argument("--out", help="directory for the timing table")

    p = command("lhs", cmd_lhs, "maximin Latin hypercube design", "csv")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--d", type=int, required=True)
    p.add_argument("--improve", type=int, default=1000)
    p.add_argument("--out", help="directory for lhs.csv")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        result = args.func(args)
    except (ContractError, OSError, json.JSONDecodeError, KeyError) as exc:
        print(f"batchei: invalid input: {exc}", file=sys.stderr)
        return EXIT_CONTRACT
    except NumericalError as exc:
        print(f"batchei: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    _emit(result, args.format)
    return 0


if __name__ == "__main__":
    sys.exit(main())
