"""Batch selection: multistart bound-constrained quasi-Newton q-EI maximization,
Constant Liar heuristics and the batch-sequential loop.
"""
from __future__ import annotations

import json
import time
import warnings
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, List, Optional, Sequence

import numpy as np
from scipy.linalg import cho_solve
from scipy.optimize import minimize
from scipy.stats import norm

from .errors import ContractError, NumericalError
from .gp import Design, GpModel, fit, posterior, update
from .mvn import CallCounter
from .qei import QeiConfig, best_observed, qei_value_and_grad

STRATEGIES = ("qei-analytic", "qei-tangent", "qei-proxy", "cl-mix")
CL_MIX_LEVELS = (0.025, 0.1, 0.5, 0.9, 0.975)
START_JITTER = 1e-3


@dataclass(frozen=True)
class OptimizerConfig:
    """Multistart settings; ``grad_mode`` is one of ``analytic``, ``tangent``, ``proxy``.

    Each start runs L-BFGS-B until the relative decrease falls below
    ``stop_factr``, the projected gradient of the normalized criterion drops
    below ``grad_tol`` or ``max_iters`` is reached.
    """

    n_starts: int = 10
    grad_mode: str = "tangent"
    epsilon: float = 1e-4
    stop_factr: float = 2.2e-7
    grad_tol: float = 1e-8
    max_iters: int = 200
    seed: int = 0

    def __post_init__(self):
        if self.n_starts < 1 or not self.stop_factr > 0 or self.max_iters < 1:
            raise ContractError("n_starts >= 1, stop_factr > 0 and max_iters >= 1 are required")
        QeiConfig(mode=self.grad_mode, epsilon=self.epsilon)

    def inner(self) -> QeiConfig:
        return QeiConfig(mode=self.grad_mode, epsilon=self.epsilon, seed=self.seed).fast()


@dataclass(frozen=True)
class LiePolicy:
    """Pseudo-observation rule for Constant Liar.

    ``fixed`` lies with ``value``; ``quantile`` with the conditional quantile
    at ``level``; ``random`` with a draw from the conditional distribution.
    """

    kind: str
    value: Optional[float] = None
    level: Optional[float] = None

    def __post_init__(self):
        if self.kind == "fixed" and self.value is None:
            raise ContractError("a fixed lie needs a value")
        if self.kind == "quantile" and not (self.level is not None and 0 < self.level < 1):
            raise ContractError("quantile level must lie in (0, 1)")
        if self.kind not in ("fixed", "quantile", "random"):
            raise ContractError(f"unknown lie policy {self.kind!r}")

    @classmethod
    def fixed(cls, value: float) -> "LiePolicy":
        return cls("fixed", value=float(value))

    @classmethod
    def quantile(cls, level: float) -> "LiePolicy":
        return cls("quantile", level=float(level))

    @classmethod
    def random(cls) -> "LiePolicy":
        return cls("random")


def _tight_config(cfg: Optional[OptimizerConfig] = None) -> QeiConfig:
    seed = 0 if cfg is None else cfg.seed
    eps = 1e-4 if cfg is None else cfg.epsilon
    return QeiConfig(mode="tangent", epsilon=eps, seed=seed)


def final_qei(model: GpModel, batch, cfg: Optional[OptimizerConfig] = None,
              counter: Optional[CallCounter] = None) -> float:
    """Arbitration value: tangent q-EI at the tight CDF tolerance."""
    return qei_value_and_grad(model, batch, _tight_config(cfg), counter, with_grad=False)[0]


# ---------------------------------------------------------------------------
# Single-point expected improvement
# ---------------------------------------------------------------------------

def _ei_many(model: GpModel, pts: np.ndarray) -> np.ndarray:
    x = model.design.points
    kxb = model.kernel(x, pts)
    mean = model.trend + kxb.T @ model.weights
    var = model.kernel.variance - np.einsum("nm,nm->m", kxb, cho_solve((model.chol, True), kxb))
    s = np.sqrt(np.clip(var, 0.0, None))
    gap = best_observed(model).value - mean
    with np.errstate(divide="ignore", invalid="ignore"):
        u = np.where(s > 0, gap / s, 0.0)
    ei = np.where(s > 0, gap * norm.cdf(u) + s * norm.pdf(u), np.maximum(gap, 0.0))
    return np.maximum(ei, 0.0)


def _ei_and_grad(model: GpModel, x: np.ndarray):
    post = posterior(model, x[None, :])
    var = post.cov[0, 0]
    gap = best_observed(model).value - post.mean[0]
    if var <= 1e-14 * model.kernel.variance:
        return max(gap, 0.0), np.zeros_like(x)
    s = np.sqrt(var)
    u = gap / s
    ei = gap * norm.cdf(u) + s * norm.pdf(u)
    ds = post.cov_jac[0, 0] / s
    return ei, -norm.cdf(u) * post.mean_jac[0] + norm.pdf(u) * ds


def maximize_ei(model: GpModel, rng: np.random.Generator, n_candidates: Optional[int] = None,
                n_refine: int = 3) -> np.ndarray:
    """Maximizer of single-point EI: random screening then L-BFGS-B refinement."""
    d = model.design.d
    cand = rng.random((n_candidates or 100 * d, d))
    ei = _ei_many(model, cand)
    best_x, best_v = cand[np.argmax(ei)], ei.max()
    scale = best_v if best_v > 0 else 1.0
    bounds = [(0.0, 1.0)] * d
    for i in np.argsort(-ei)[:n_refine]:
        def obj(z):
            v, g = _ei_and_grad(model, np.clip(z, 0.0, 1.0))
            return -v / scale, -g / scale
        res = minimize(obj, cand[i], jac=True, method="L-BFGS-B", bounds=bounds,
                       options={"maxiter": 100})
        x = np.clip(res.x, 0.0, 1.0)
        v = _ei_and_grad(model, x)[0]
        if v > best_v:
            best_x, best_v = x, v
    return best_x


# ---------------------------------------------------------------------------
# Constant Liar
# ---------------------------------------------------------------------------

def _lie_value(model: GpModel, x: np.ndarray, lie: LiePolicy, rng) -> float:
    if lie.kind == "fixed":
        return lie.value
    post = posterior(model, x[None, :])
    m, s = post.mean[0], np.sqrt(max(post.cov[0, 0], 0.0))
    if lie.kind == "quantile":
        return float(m + s * norm.ppf(lie.level))
    return float(m + s * rng.standard_normal())


def constant_liar(model: GpModel, q: int, lie: LiePolicy, seed: int = 0) -> np.ndarray:
    """Greedy batch: maximize single-point EI, then pretend the lie was observed there."""
    if q < 1:
        raise ContractError("q must be at least 1")
    rng = np.random.default_rng(seed)
    current = model
    noise = float(np.median(model.design.noise_vars))
    batch = []
    for j in range(q):
        x = maximize_ei(current, rng)
        batch.append(x)
        if j == q - 1:
            break
        dist = np.linalg.norm(current.design.points - x, axis=1).min()
        if dist > 1e-12:
            current = update(current, x[None, :], [_lie_value(current, x, lie, rng)], [noise])
    return np.array(batch)


def cl_mix(model: GpModel, q: int, cfg: OptimizerConfig = OptimizerConfig(),
           counter: Optional[CallCounter] = None):
    """Constant Liar with seven lie levels; keeps the batch of largest q-EI.

    Lies: the largest and smallest observation, then conditional quantiles at
    2.5, 10, 50, 90 and 97.5 percent.
    """
    values = model.design.values
    lies = [LiePolicy.fixed(values.max()), LiePolicy.fixed(values.min())]
    lies += [LiePolicy.quantile(level) for level in CL_MIX_LEVELS]
    batches, scores = [], []
    for lie in lies:
        b = constant_liar(model, q, lie, seed=cfg.seed)
        batches.append(b)
        scores.append(final_qei(model, b, cfg, counter))
    best = int(np.argmax(scores))
    diag = {"candidates": [b.tolist() for b in batches], "values": scores,
            "lies": [asdict(lie) for lie in lies], "chosen": best}
    return batches[best], scores[best], diag


# ---------------------------------------------------------------------------
# Multistart q-EI maximization
# ---------------------------------------------------------------------------

def generate_starts(model: GpModel, q: int, n_starts: int, seed: int = 0) -> List[np.ndarray]:
    """Constant Liar batches with random lies, one seed stream per start.

    Starts (or points within a start) that coincide with earlier ones are
    moved by a uniform jitter of ``1e-3`` per coordinate.
    """
    seeds = np.random.SeedSequence(seed).generate_state(n_starts)
    jitter_rng = np.random.default_rng([seed, 1])
    starts = []
    for s in seeds:
        b = constant_liar(model, q, LiePolicy.random(), seed=int(s))
        for i in range(q):
            clash = any(np.abs(b[i] - b[j]).max() <= 1e-8 for j in range(i))
            if clash:
                b[i] = np.clip(b[i] + jitter_rng.uniform(-START_JITTER, START_JITTER, b.shape[1]), 0, 1)
        if any(np.abs(b - other).max() <= 1e-8 for other in starts):
            b = np.clip(b + jitter_rng.uniform(-START_JITTER, START_JITTER, b.shape), 0.0, 1.0)
        starts.append(b)
    return starts


def _local_search(model, start, cfg: OptimizerConfig, qcfg: QeiConfig, counter):
    q, d = start.shape
    v0 = qei_value_and_grad(model, start, qcfg, counter, with_grad=False)[0]
    scale = v0 if v0 > 0 else 1.0

    def obj(z):
        v, g = qei_value_and_grad(model, np.clip(z.reshape(q, d), 0.0, 1.0), qcfg, counter)
        return -v / scale, -g.ravel() / scale

    res = minimize(obj, start.ravel(), jac=True, method="L-BFGS-B", bounds=[(0.0, 1.0)] * (q * d),
                   options={"maxiter": cfg.max_iters, "ftol": cfg.stop_factr, "gtol": cfg.grad_tol})
    return np.clip(res.x.reshape(q, d), 0.0, 1.0), res


def maximize_qei(model: GpModel, q: int, cfg: OptimizerConfig = OptimizerConfig(),
                 counter: Optional[CallCounter] = None, starts: Optional[Sequence] = None):
    """Multistart L-BFGS-B over ``[0,1]^{q d}``.

    Local searches use ``cfg.grad_mode`` at the loose CDF tolerance. Every
    start and every local optimum is then scored by tangent q-EI at the tight
    tolerance, and the best is returned, so the result never scores below a
    start. Returns ``(batch, value, diagnostics)``.
    """
    starts = generate_starts(model, q, cfg.n_starts, cfg.seed) if starts is None else \
        [np.asarray(s, dtype=float) for s in starts]
    qcfg = cfg.inner()
    cands, origins, failures, iters = [], [], [], []
    for i, s in enumerate(starts):
        cands.append(s)
        origins.append(("start", i))
        try:
            x, res = _local_search(model, s, cfg, qcfg, counter)
        except NumericalError as exc:
            failures.append({"start": i, "error": str(exc)})
            continue
        cands.append(x)
        origins.append(("local", i))
        iters.append(int(res.nit))
    scores = [final_qei(model, c, cfg, counter) for c in cands]
    best = int(np.argmax(scores))
    diag = {
        "start_values": [sc for sc, o in zip(scores, origins) if o[0] == "start"],
        "local_values": [sc for sc, o in zip(scores, origins) if o[0] == "local"],
        "iterations": iters,
        "failures": failures,
        "chosen": {"kind": origins[best][0], "start": origins[best][1]},
        "warning": None,
    }
    if len(failures) == len(starts):
        diag["warning"] = "all local searches failed; returning the best start"
        warnings.warn(diag["warning"], RuntimeWarning, stacklevel=2)
    return cands[best], scores[best], diag


# ---------------------------------------------------------------------------
# Batch-sequential loop
# ---------------------------------------------------------------------------

@dataclass
class RunHistory:
    """Per-iteration records of a batch-sequential run, persisted as JSON lines."""

    strategy: str
    q: int
    seed: int
    initial_best: float
    n_initial: int
    records: list = field(default_factory=list)

    def header(self) -> dict:
        return {"kind": "header", "strategy": self.strategy, "q": self.q, "seed": self.seed,
                "initial_best": self.initial_best, "n_initial": self.n_initial}

    def best_values(self) -> np.ndarray:
        return np.array([self.initial_best] + [r["best"] for r in self.records])

    def write(self, path) -> None:
        lines = [self.header()] + self.records
        Path(path).write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in lines))

    @classmethod
    def read(cls, path) -> "RunHistory":
        rows = [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
        head = rows[0]
        if head.get("kind") != "header":
            raise ContractError(f"{path}: first line is not a history header")
        return cls(head["strategy"], head["q"], head["seed"], head["initial_best"],
                   head["n_initial"], rows[1:])


def _sub_seed(seed: int, *tags: int) -> int:
    return int(np.random.SeedSequence([seed, *tags]).generate_state(1)[0])


def select_batch(model: GpModel, strategy: str, q: int, cfg: OptimizerConfig,
                 counter: Optional[CallCounter] = None):
    if strategy == "cl-mix":
        batch, value, _ = cl_mix(model, q, cfg, counter)
        return batch, value
    if strategy not in STRATEGIES:
        raise ContractError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
    mode = strategy.split("-", 1)[1]
    batch, value, _ = maximize_qei(model, q, replace(cfg, grad_mode=mode), counter)
    return batch, value


def run_strategy(problem: Callable, strategy: str, q: int, n_iterations: int, init_points,
                 seed: int = 0, cfg: OptimizerConfig = OptimizerConfig(),
                 history_path=None, n_restarts: int = 5) -> RunHistory:
    """Select, evaluate, append, refit; ``problem`` maps unit-cube rows to objective values.

    With ``history_path`` the history is rewritten after every iteration, so
    a failing objective leaves the completed iterations on disk.
    """
    if strategy not in STRATEGIES:
        raise ContractError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
    x0 = np.atleast_2d(np.asarray(init_points, dtype=float))
    design = Design(x0, np.asarray(problem(x0), dtype=float))
    model = fit(design, n_restarts, seed=_sub_seed(seed, 0, 0))
    hist = RunHistory(strategy, q, seed, float(design.values.min()), design.n)
    counter = CallCounter()
    for it in range(1, n_iterations + 1):
        sel_seed = _sub_seed(seed, it, 1)
        t0 = time.perf_counter()
        batch, value = select_batch(model, strategy, q, replace(cfg, seed=sel_seed), counter)
        t1 = time.perf_counter()
        try:
            obs = np.asarray(problem(batch), dtype=float)
        except Exception:
            if history_path is not None:
                hist.write(history_path)
            raise
        t2 = time.perf_counter()
        design = Design(np.vstack([model.design.points, batch]),
                        np.concatenate([model.design.values, obs]))
        fit_seed = _sub_seed(seed, it, 2)
        model = fit(design, n_restarts, seed=fit_seed)
        t3 = time.perf_counter()
        hist.records.append({
            "kind": "iteration", "iteration": it, "batch": batch.tolist(), "qei": value,
            "observations": obs.tolist(), "best": float(design.values.min()),
            "hyperparameters": {"variance": model.kernel.variance,
                                "lengthscales": model.kernel.lengthscales.tolist(),
                                "trend": model.trend},
            "cdf_calls": counter.total(), "seeds": {"select": sel_seed, "fit": fit_seed},
            "timings": {"select": t1 - t0, "evaluate": t2 - t1, "fit": t3 - t2},
        })
        if history_path is not None:
            hist.write(history_path)
    return hist

