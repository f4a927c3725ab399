"""Test problems, space-filling designs, timing tables and regret experiments."""
from __future__ import annotations

import csv
import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.spatial.distance import pdist

from .errors import ContractError
from .gp import GpModel
from .mvn import CallCounter
from .optimize import STRATEGIES, OptimizerConfig, RunHistory, run_strategy
from .qei import QeiConfig, qei_value_and_grad

BOREHOLE_LOWER = np.array([0.05, 100.0, 63070.0, 990.0, 63.1, 700.0, 1120.0, 1500.0])
BOREHOLE_UPPER = np.array([0.15, 50000.0, 115600.0, 1110.0, 116.0, 820.0, 1680.0, 15000.0])
BOREHOLE_ARGMIN = np.array([0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0])
BOREHOLE_MIN = 1.1918
BOREHOLE_CENTER = 53.468658062575145   # direct evaluation at (0.5, ..., 0.5), pinned


@dataclass(frozen=True)
class Problem:
    """A deterministic objective on a box, exposed through the unit cube."""

    name: str
    lower: np.ndarray
    upper: np.ndarray
    physical: Callable[[np.ndarray], np.ndarray]
    known_optimum: Optional[tuple] = None

    @property
    def dim(self) -> int:
        return self.lower.size

    def to_physical(self, x) -> np.ndarray:
        return self.lower + np.asarray(x, dtype=float) * (self.upper - self.lower)

    def to_unit(self, z) -> np.ndarray:
        return (np.asarray(z, dtype=float) - self.lower) / (self.upper - self.lower)

    def __call__(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if x.shape[1] != self.dim or (x < -1e-12).any() or (x > 1 + 1e-12).any():
            raise ContractError(f"{self.name} expects points in [0,1]^{self.dim}")
        return self.physical(self.to_physical(np.clip(x, 0.0, 1.0)))

    def regret(self, value) -> np.ndarray:
        if self.known_optimum is None:
            raise ContractError(f"{self.name} has no known optimum")
        return np.asarray(value) - self.known_optimum[1]


def _borehole_flow(z: np.ndarray) -> np.ndarray:
    rw, r, tu, hu, tl, hl, length, kw = z.T
    log_ratio = np.log(r / rw)
    return 2 * np.pi * tu * (hu - hl) / (
        log_ratio * (1 + 2 * length * tu / (log_ratio * rw ** 2 * kw) + tu / tl))


BOREHOLE = Problem("borehole", BOREHOLE_LOWER, BOREHOLE_UPPER, _borehole_flow,
                   (BOREHOLE_ARGMIN, BOREHOLE_MIN))
PROBLEMS = {"borehole": BOREHOLE}


def borehole(x) -> float | np.ndarray:
    """Water flow rate through a borehole, inputs in ``[0,1]^8`` (rows for a batch)."""
    x = np.asarray(x, dtype=float)
    out = BOREHOLE(x)
    return float(out[0]) if x.ndim == 1 else out


# ---------------------------------------------------------------------------
# Designs
# ---------------------------------------------------------------------------

def lhs_design(n: int, d: int, seed: int = 0, n_improve: int = 1000, trace: Optional[list] = None):
    """Random Latin hypercube improved by maximin column swaps.

    A swap exchanges two entries of one column and is kept only if the
    smallest pairwise distance does not decrease. ``trace`` collects that
    distance after each iteration.
    """
    if n < 2 or d < 1:
        raise ContractError("lhs_design needs n >= 2 and d >= 1")
    rng = np.random.default_rng(seed)
    perms = np.stack([rng.permutation(n) for _ in range(d)], axis=1)
    x = (perms + rng.random((n, d))) / n
    best = pdist(x).min()
    for _ in range(n_improve):
        j = rng.integers(d)
        a, b = rng.choice(n, size=2, replace=False)
        x[[a, b], j] = x[[b, a], j]
        score = pdist(x).min()
        if score >= best:
            best = score
        else:
            x[[a, b], j] = x[[b, a], j]
        if trace is not None:
            trace.append(best)
    return x


# ---------------------------------------------------------------------------
# Timing
# ---------------------------------------------------------------------------

def timing_bench(model: GpModel, q_list: Sequence[int], modes: Sequence[str], n_batches: int,
                 seed: int = 0, config: Optional[QeiConfig] = None,
                 kinds: Sequence[str] = ("value", "grad")) -> list:
    """Mean wall time of q-EI values and gradients over uniform random batches.

    Uses the loose CDF settings of the optimizer's inner loop unless
    ``config`` is given. Rows hold ``q, mode, kind, mean_seconds`` and the CDF
    call tallies of one evaluation. ``kinds`` restricts the table to values
    or gradients.
    """
    if not set(kinds) <= {"value", "grad"}:
        raise ContractError("kinds must be drawn from 'value' and 'grad'")
    base = config or QeiConfig().fast()
    rng = np.random.default_rng(seed)
    d = model.design.d
    rows = []
    for q in q_list:
        batches = [rng.random((q, d)) for _ in range(n_batches)]
        for mode in modes:
            cfg = replace(base, mode=mode)
            for kind in kinds:
                calls = CallCounter()
                qei_value_and_grad(model, batches[0], cfg, calls, with_grad=kind == "grad",
                                   with_value=kind == "value")
                start = time.perf_counter()
                for b in batches:
                    qei_value_and_grad(model, b, cfg, with_grad=kind == "grad",
                                       with_value=kind == "value")
                elapsed = (time.perf_counter() - start) / n_batches
                rows.append({"q": q, "mode": mode, "kind": kind, "mean_seconds": elapsed,
                             "calls": calls.report()})
    return rows


def write_table(rows: list, path, fmt: str = "csv") -> None:
    path = Path(path)
    if fmt == "json":
        path.write_text(json.dumps(rows, indent=1, sort_keys=True) + "\n")
        return
    cols = list(rows[0].keys()) if rows else []
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for r in rows:
            w.writerow([json.dumps(r[c], sort_keys=True) if isinstance(r[c], dict) else r[c]
                        for c in cols])


# ---------------------------------------------------------------------------
# Experiments
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ExperimentSpec:
    problem: Problem = BOREHOLE
    q: int = 4
    n_iterations: int = 20
    n_seeds: int = 5
    strategies: tuple = ("qei-proxy", "qei-tangent", "cl-mix")
    n_init: int = 80
    eval_time_model: tuple = (0.0, 120.0, 3600.0)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    lhs_improve: int = 1000
    first_seed: int = 0

    def __post_init__(self):
        if self.n_init < self.problem.dim + 2:
            raise ContractError("initial design needs at least d + 2 points")
        bad = [s for s in self.strategies if s not in STRATEGIES]
        if bad:
            raise ContractError(f"unknown strategies {bad}")


def _one_run(args):
    spec, strategy, seed, out = args
    init = lhs_design(spec.n_init, spec.problem.dim, seed, spec.lhs_improve)
    path = Path(out) / f"{strategy}_seed{seed}.jsonl"
    try:
        run_strategy(spec.problem, strategy, spec.q, spec.n_iterations, init, seed,
                     spec.optimizer, history_path=path)
        return strategy, seed, None
    except Exception as exc:            # keep the campaign going; the partial history is on disk
        return strategy, seed, f"{type(exc).__name__}: {exc}"


def run_experiment(spec: ExperimentSpec, out_dir, n_jobs: int = 1) -> Path:
    """Run every (strategy, seed) pair and write histories plus regret tables.

    Files: one ``<strategy>_seed<k>.jsonl`` history per run, ``regret.csv``
    (per run and iteration), ``regret_summary.csv`` (median over seeds),
    ``wallclock.csv`` (regret against selection time plus an assumed batch
    evaluation cost) and ``summary.json``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seeds = range(spec.first_seed, spec.first_seed + spec.n_seeds)
    jobs = [(spec, s, k, str(out)) for k in seeds for s in spec.strategies]
    if n_jobs > 1:
        with ProcessPoolExecutor(n_jobs) as pool:
            outcomes = list(pool.map(_one_run, jobs))
    else:
        outcomes = [_one_run(j) for j in jobs]
    failures = [{"strategy": s, "seed": k, "error": e} for s, k, e in outcomes if e]
    write_reports(spec, out, failures)
    return out


def load_histories(out_dir) -> dict:
    hists = {}
    for path in sorted(Path(out_dir).glob("*_seed*.jsonl")):
        h = RunHistory.read(path)
        hists[(h.strategy, h.seed)] = h
    return hists


def write_reports(spec: ExperimentSpec, out: Path, failures: list) -> dict:
    hists = load_histories(out)
    regret_rows, clock_rows = [], []
    for (strategy, seed), h in sorted(hists.items()):
        regrets = spec.problem.regret(h.best_values())
        elapsed = 0.0
        for it, reg in enumerate(regrets):
            regret_rows.append({"strategy": strategy, "seed": seed, "iteration": it, "regret": reg})
        for rec, reg in zip(h.records, regrets[1:]):
            elapsed += rec["timings"]["select"]
            for cost in spec.eval_time_model:
                clock_rows.append({"strategy": strategy, "seed": seed, "iteration": rec["iteration"],
                                   "eval_cost": cost, "seconds": elapsed + cost * rec["iteration"],
                                   "regret": reg})
    write_table(regret_rows, out / "regret.csv")
    write_table(clock_rows, out / "wallclock.csv")
    summary_rows = []
    summary = {"failures": failures, "strategies": {}}
    for strategy in spec.strategies:
        runs = [h for (s, _), h in hists.items() if s == strategy]
        if not runs:
            continue
        lengths = min(len(h.records) for h in runs)
        regs = np.array([spec.problem.regret(h.best_values()[:lengths + 1]) for h in runs])
        for it in range(lengths + 1):
            summary_rows.append({"strategy": strategy, "iteration": it,
                                 "median_regret": float(np.median(regs[:, it])),
                                 "mean_regret": float(regs[:, it].mean())})
        first = [h.records[0]["qei"] for h in runs if h.records]
        summary["strategies"][strategy] = {
            "runs": len(runs),
            "median_final_regret": float(np.median(regs[:, -1])),
            "first_iteration_mean_qei": float(np.mean(first)) if first else None,
            "mean_select_seconds": float(np.mean([r["timings"]["select"] for h in runs for r in h.records])),
        }
    write_table(summary_rows, out / "regret_summary.csv")
    (out / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    return summary
