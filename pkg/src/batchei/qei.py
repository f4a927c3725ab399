"""Multipoint expected improvement and its gradient.

For a noiseless model with best observation ``T`` the batch criterion
``E[(T - min_k Y(x_k))_+^alpha]`` splits over the point ``k`` attaining the
batch minimum, each piece being a truncated moment of the vector
``Z^(k)`` with entries ``Y_k - Y_j`` (``j != k``) and ``Y_k - T`` at position
``k``. With noisy observations the threshold is itself random and the sum also
runs over the design point ``l`` attaining the design minimum.

Moments are taken of ``Z_target = Y_k - threshold`` on ``{Z <= 0}``, so the
improvement contribution is ``(-1)^alpha`` times the moment.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
from scipy.stats import norm

from .errors import ContractError
from .gp import GpModel, noisy_joint_jacobians, posterior, posterior_noisy_joint, _pinned_values
from .mvn import DEFAULT_MAX_EVALS, CallCounter, CdfEvaluator
from .truncmoments import (GaussianView, MomentConfig, MomentDerivatives, moment1_derivatives,
                           moment2, tangent_moments_batch)

MODES = ("analytic", "tangent", "proxy")
DEDUP_TOL = 1e-8
NOISY_MAX_DIM = 24
FAST_ABS_TOL = 1e-6
FAST_MAX_EVALS = 4000

__all__ = ["BestObserved", "CallCounter", "QeiConfig", "ZSystem", "best_observed",
           "build_z_noiseless", "build_z_noisy", "counter_report", "ei_closed_form", "qei",
           "qei_error_bound", "qei_gaussian", "qei_grad", "qei_mc", "qei_value_and_grad"]


@dataclass(frozen=True)
class BestObserved:
    value: float
    index: int


def best_observed(model: GpModel) -> BestObserved:
    i = int(np.argmin(model.design.values))
    return BestObserved(float(model.design.values[i]), i)


@dataclass(frozen=True)
class ZSystem:
    """``Z = transform @ Y + offset`` and its Gaussian law; ``target_index`` carries the moment."""

    transform: np.ndarray
    offset: np.ndarray
    view: GaussianView
    target_index: int


@dataclass(frozen=True)
class QeiConfig:
    """Evaluation settings.

    ``mode`` selects how moments and gradients are computed: ``analytic``
    (closed form), ``tangent`` (difference quotients of the generating
    function, step ``epsilon``) or ``proxy`` (gradient with the truncation
    event frozen; noiseless, ``alpha=1`` only).
    """

    alpha: int = 1
    mode: str = "analytic"
    epsilon: float = 1e-4
    cdf_abs_tol: float = 1e-7
    max_evals: int = DEFAULT_MAX_EVALS
    seed: int = 0
    dedup_tol: float = DEDUP_TOL

    def __post_init__(self):
        if self.mode not in MODES:
            raise ContractError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.alpha not in (1, 2):
            raise ContractError("closed-form q-EI supports alpha 1 and 2; use qei_mc beyond")
        if self.alpha == 2 and self.mode != "analytic":
            raise ContractError(f"mode {self.mode!r} is defined for alpha=1 only")
        if not self.epsilon > 0 or not self.cdf_abs_tol > 0:
            raise ContractError("epsilon and cdf_abs_tol must be positive")

    def fast(self) -> "QeiConfig":
        """Looser CDF settings for use inside line searches."""
        return replace(self, cdf_abs_tol=FAST_ABS_TOL, max_evals=FAST_MAX_EVALS)

    def evaluator(self, counter: Optional[CallCounter] = None) -> CdfEvaluator:
        return CdfEvaluator(self.cdf_abs_tol, self.seed, counter, self.max_evals)


# ---------------------------------------------------------------------------
# Z systems
# ---------------------------------------------------------------------------

def _noiseless_transform(q: int, k: int) -> np.ndarray:
    a = -np.eye(q)
    a[:, k] += 1.0
    a[k, k] = 1.0
    return a


def build_z_noiseless(mean, cov, best: BestObserved, k: int) -> ZSystem:
    """``Z^(k)`` from the batch posterior mean and covariance."""
    mean, cov = np.asarray(mean, dtype=float), np.asarray(cov, dtype=float)
    q = mean.size
    if not 0 <= k < q:
        raise ContractError(f"k={k} outside the batch")
    a = _noiseless_transform(q, k)
    offset = np.zeros(q)
    offset[k] = -best.value
    cz = a @ cov @ a.T
    return ZSystem(a, offset, GaussianView(a @ mean + offset, 0.5 * (cz + cz.T)), k)


def _noisy_transform(n: int, q: int, l: int, k: int) -> np.ndarray:
    a = np.zeros((n + q - 1, n + q))
    others = [i for i in range(n) if i != l]
    for r, i in enumerate(others):
        a[r, l], a[r, i] = 1.0, -1.0
    for j in range(q):
        r = n - 1 + j
        a[r, n + k] = 1.0
        a[r, l if j == k else n + j] = -1.0
    return a


def build_z_noisy(joint: GaussianView, n_design: int, l: int, k: int) -> ZSystem:
    """``Z^(l,k)`` from the joint latent law of the design followed by the batch."""
    n = n_design
    q = joint.dim - n
    if not (0 <= l < n and 0 <= k < q):
        raise ContractError(f"(l, k) = ({l}, {k}) outside 0..{n - 1} x 0..{q - 1}")
    a = _noisy_transform(n, q, l, k)
    cz = a @ joint.cov @ a.T
    return ZSystem(a, np.zeros(n + q - 1), GaussianView(a @ joint.mean, 0.5 * (cz + cz.T)), n - 1 + k)


def _shared_keyer(k: int):
    """Names conditional CDF calls of ``Z^(k)`` so that coinciding ones are shared across ``k``.

    Conditioning ``Z^(k)_a = 0`` pins ``Y_k`` to ``Y_a`` (or to ``T`` when ``a = k``);
    the resulting probability only depends on the unordered pair of nodes.
    """
    def node(c):
        return "T" if c == k else c

    def keyer(path):
        if not path:
            return None
        head = frozenset((k, node(path[0])))
        if len(path) == 1:
            return head
        if len(path) == 2:
            return head, node(path[1])
        return head, frozenset(node(c) for c in path[1:])
    return keyer


# ---------------------------------------------------------------------------
# Batch preprocessing
# ---------------------------------------------------------------------------

def _check_batch(model: GpModel, batch) -> np.ndarray:
    pts = np.atleast_2d(np.asarray(batch, dtype=float))
    if pts.ndim != 2 or pts.shape[1] != model.design.d or pts.shape[0] < 1:
        raise ContractError(f"batch must be q x {model.design.d} with q >= 1")
    if not np.isfinite(pts).all() or (pts < -1e-12).any() or (pts > 1 + 1e-12).any():
        raise ContractError("batch points must lie in the unit cube")
    return np.clip(pts, 0.0, 1.0)


def _reduce(model: GpModel, pts: np.ndarray, tol: float, drop_observed: bool):
    """Collapse near-duplicates; optionally drop points sitting on noiseless observations.

    Returns the kept rows and, for each original row, the index of its
    representative (``-1`` for dropped rows).
    """
    owner = np.full(len(pts), -1)
    kept = []
    design = model.design
    for i, p in enumerate(pts):
        if drop_observed:
            dist = np.linalg.norm(design.points - p, axis=1)
            if ((dist <= tol) & (design.noise_vars == 0)).any():
                continue
        for r, j in enumerate(kept):
            if np.linalg.norm(pts[j] - p) <= tol:
                owner[i] = r
                break
        else:
            owner[i] = len(kept)
            kept.append(i)
    return pts[kept], owner


def _expand(grad_red: np.ndarray, owner: np.ndarray, d: int) -> np.ndarray:
    out = np.zeros((owner.size, d))
    live = owner >= 0
    out[live] = grad_red[owner[live]]
    return out


# ---------------------------------------------------------------------------
# Criterion
# ---------------------------------------------------------------------------

def _assemble(systems, grads_mean, grads_cov, mean_jac, cov_jac, offset: int) -> np.ndarray:
    """Chain rule from moment derivatives to batch coordinates.

    ``a = sum A' g`` and ``W = sum A' G A`` collect the moment derivatives in
    the coordinates of the latent vector; batch point ``i`` sits at ``offset + i``.
    """
    dim = systems[0].transform.shape[1]
    a = np.zeros(dim)
    w = np.zeros((dim, dim))
    for z, g, gc in zip(systems, grads_mean, grads_cov):
        a += z.transform.T @ g
        w += z.transform.T @ gc @ z.transform
    q = mean_jac.shape[0]
    rows = offset + np.arange(q)
    return a[rows, None] * mean_jac + 2.0 * np.einsum("iu,iud->id", w[rows], cov_jac)


def _moments(systems, cfg: QeiConfig, cdf: CdfEvaluator, with_grad: bool, keyers=None):
    """Values and derivatives of the target moments of each system."""
    # a value-only proxy request falls back to tangent moments
    if cfg.mode == "tangent" or (cfg.mode == "proxy" and not with_grad):
        mcfg = MomentConfig(epsilon=cfg.epsilon, cdf_abs_tol=cfg.cdf_abs_tol, seed=cfg.seed)
        res = tangent_moments_batch([z.view for z in systems], [z.target_index for z in systems],
                                    mcfg, with_grad, cdf)
        return res
    out = []
    for idx, z in enumerate(systems):
        keyer = None if keyers is None else keyers[idx]
        if cfg.alpha == 2:
            out.append(MomentDerivatives(moment2(z.target_index, z.view, cdf, keyer)))
        else:
            out.append(moment1_derivatives(z.target_index, z.view, cdf, keyer, with_grad))
    return out


def _proxy(post, systems, cfg: QeiConfig, cdf: CdfEvaluator, with_value: bool):
    """Frozen-truncation gradient, with the forward tangent value sharing ``Phi_q(-m)``."""
    q, d = post.mean_jac.shape
    eps = cfg.epsilon
    xs, covs = [], []
    for j, z in enumerate(systems):
        base = -z.view.mean
        xs.append(base)
        c = z.transform @ post.cov_jac[j]                     # cov(Z^(j), dY(x_j)/dx), q x d
        xs.extend(base - eps * c.T)
        if with_value:
            xs.append(base - eps * z.view.cov[:, j])
        covs.extend([z.view.cov] * (d + 1 + with_value))
    vals = cdf.batch(np.array(xs), np.array(covs)).reshape(q, d + 1 + with_value)
    grad = np.empty((q, d))
    value = 0.0
    for j, z in enumerate(systems):
        base = vals[j, 0]
        grad[j] = -(np.exp(eps * post.mean_jac[j]) * vals[j, 1:d + 1] - base) / eps
        if with_value:
            value -= (np.exp(eps * z.view.mean[j]) * vals[j, d + 1] - base) / eps
    return value, grad


def _noiseless_systems(mean, cov, best: BestObserved):
    return [build_z_noiseless(mean, cov, best, k) for k in range(len(mean))]


def qei_gaussian(mean, cov, threshold: float, config: QeiConfig = QeiConfig(),
                 counter: Optional[CallCounter] = None) -> float:
    """Noiseless criterion for a batch whose joint law is ``N(mean, cov)``."""
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    systems = _noiseless_systems(mean, cov, BestObserved(float(threshold), 0))
    keyers = [_shared_keyer(k) for k in range(mean.size)] if config.mode == "analytic" else None
    res = _moments(systems, config, config.evaluator(counter), False, keyers)
    sign = -1.0 if config.alpha == 1 else 1.0
    return max(sign * sum(r.value for r in res), 0.0)


def _noiseless(model, pts, cfg, cdf, with_grad, with_value=True):
    post = posterior(model, pts)
    q = len(pts)
    systems = _noiseless_systems(post.mean, post.cov, best_observed(model))
    sign = -1.0 if cfg.alpha == 1 else 1.0
    if cfg.mode == "proxy" and with_grad:
        return _proxy(post, systems, cfg, cdf, with_value)
    keyers = [_shared_keyer(k) for k in range(q)] if cfg.mode == "analytic" else None
    res = _moments(systems, cfg, cdf, with_grad, keyers)
    value = sign * sum(r.value for r in res)
    if not with_grad:
        return value, None
    grad = sign * _assemble(systems, [r.grad_mean for r in res], [r.grad_cov for r in res],
                            post.mean_jac, post.cov_jac, 0)
    return value, grad


def _noisy(model, pts, cfg, cdf, with_grad):
    n, q = model.design.n, len(pts)
    if n + q > NOISY_MAX_DIM:
        raise ContractError(f"noisy q-EI needs n + q <= {NOISY_MAX_DIM}, got {n + q}")
    if cfg.mode == "proxy":
        raise ContractError("proxy gradients are defined for noiseless models only")
    joint = posterior_noisy_joint(model, pts)
    systems = [build_z_noisy(joint, n, l, k) for l in range(n) for k in range(q)]
    sign = -1.0 if cfg.alpha == 1 else 1.0
    res = _moments(systems, cfg, cdf, with_grad)
    value = sign * sum(r.value for r in res)
    if not with_grad:
        return value, None
    mean_jac, cov_jac = noisy_joint_jacobians(model, pts)
    grad = sign * _assemble(systems, [r.grad_mean for r in res], [r.grad_cov for r in res],
                            mean_jac, cov_jac, n)
    return value, grad


def qei_value_and_grad(model: GpModel, batch, config: QeiConfig = QeiConfig(),
                       counter: Optional[CallCounter] = None, with_grad: bool = True,
                       with_value: bool = True):
    """q-EI of ``batch`` and, optionally, its ``q x d`` gradient.

    Near-duplicate batch points are collapsed before evaluation and receive the
    gradient of their representative. For noiseless models, batch points on
    observed design points carry no improvement and get a zero gradient.
    """
    pts = _check_batch(model, batch)
    if with_grad and config.alpha != 1:
        raise ContractError("gradients are available for alpha=1 only")
    noisy = model.design.noisy
    reduced, owner = _reduce(model, pts, config.dedup_tol, drop_observed=not noisy)
    d = model.design.d
    if len(reduced) == 0:
        return 0.0, (np.zeros((len(pts), d)) if with_grad else None)
    cdf = config.evaluator(counter)
    if noisy:
        value, grad = _noisy(model, reduced, config, cdf, with_grad)
    else:
        value, grad = _noiseless(model, reduced, config, cdf, with_grad, with_value)
    value = float(value) if value > 0 else 0.0
    return value, (_expand(grad, owner, d) + 0.0 if with_grad else None)


def qei(model: GpModel, batch, alpha: int = 1, mode: str = "analytic",
        counter: Optional[CallCounter] = None, *, config: Optional[QeiConfig] = None) -> float:
    cfg = config or QeiConfig(alpha=alpha, mode=mode)
    return qei_value_and_grad(model, batch, cfg, counter, with_grad=False)[0]


def qei_grad(model: GpModel, batch, mode: str = "analytic",
             counter: Optional[CallCounter] = None, *, config: Optional[QeiConfig] = None) -> np.ndarray:
    """Gradient only; in proxy mode this costs ``q (d + 1)`` q-variate CDF calls."""
    cfg = config or QeiConfig(mode=mode)
    return qei_value_and_grad(model, batch, cfg, counter, with_value=False)[1]


def counter_report(counter: CallCounter) -> dict:
    return counter.report()


# ---------------------------------------------------------------------------
# References
# ---------------------------------------------------------------------------

def ei_closed_form(model: GpModel, x, alpha: int = 1) -> float:
    """Single-point ``E[(T - Y(x))_+^alpha]`` for a noiseless model."""
    pts = _check_batch(model, x)
    if len(pts) != 1:
        raise ContractError("ei_closed_form takes a single point")
    if model.design.noisy:
        raise ContractError("the single-point closed form assumes noiseless observations")
    t = best_observed(model).value
    if _reduce(model, pts, DEDUP_TOL, drop_observed=True)[0].size == 0:
        return 0.0
    post = posterior(model, pts)
    m, s = post.mean[0], np.sqrt(max(post.cov[0, 0], 0.0))
    gap = t - m
    if s == 0.0:
        return max(gap, 0.0) ** alpha
    u = gap / s
    if alpha == 1:
        return float(gap * norm.cdf(u) + s * norm.pdf(u))
    if alpha == 2:
        return float((gap * gap + s * s) * norm.cdf(u) + gap * s * norm.pdf(u))
    raise ContractError("closed form available for alpha 1 and 2")


def qei_mc(model: GpModel, batch, alpha: int = 1, n_sims: int = 100_000, seed: int = 0,
           chunk: int = 200_000):
    """Monte Carlo estimate of q-EI and its standard error.

    Noiseless models use the observed minimum as threshold. Noisy models draw
    the latent design values jointly with the batch and use their minimum.
    """
    if n_sims < 1000:
        raise ContractError("n_sims must be at least 1000")
    if int(alpha) != alpha or alpha < 1:
        raise ContractError("alpha must be a positive integer")
    pts = _check_batch(model, batch)
    rng = np.random.default_rng(seed)
    n = model.design.n
    if model.design.noisy:
        view = posterior_noisy_joint(model, pts)
        mean, cov = view.mean, view.cov
        fixed = {}
    else:
        fixed = _pinned_values(model, pts)
        free = [i for i in range(len(pts)) if i not in fixed]
        post = posterior(model, pts[free]) if free else None
        mean = post.mean if free else np.zeros(0)
        cov = post.cov if free else np.zeros((0, 0))
    chol = _robust_cholesky(cov)
    t = best_observed(model).value
    total, total_sq, done = 0.0, 0.0, 0
    while done < n_sims:
        m = min(chunk, n_sims - done)
        draws = mean + rng.standard_normal((m, mean.size)) @ chol.T
        if model.design.noisy:
            gain = draws[:, :n].min(axis=1) - draws[:, n:].min(axis=1)
        else:
            lows = [draws.min(axis=1)] if draws.shape[1] else []
            lows += [np.full(m, v) for v in fixed.values()]
            gain = t - np.min(np.stack(lows), axis=0)
        imp = np.maximum(gain, 0.0) ** alpha
        total += imp.sum()
        total_sq += (imp * imp).sum()
        done += m
    est = total / n_sims
    var = max(total_sq / n_sims - est * est, 0.0)
    return float(est), float(np.sqrt(var / n_sims))


def _robust_cholesky(cov: np.ndarray) -> np.ndarray:
    if cov.size == 0:
        return cov
    jitter = 0.0
    scale = max(np.mean(np.diag(cov)), 1e-300)
    for _ in range(6):
        try:
            return np.linalg.cholesky(cov + jitter * np.eye(len(cov)))
        except np.linalg.LinAlgError:
            jitter = max(10 * jitter, 1e-12 * scale)
    vals, vecs = np.linalg.eigh(cov)
    return vecs * np.sqrt(np.clip(vals, 0.0, None))


def qei_error_bound(model: GpModel, batch, config: QeiConfig = QeiConfig()) -> Optional[float]:
    """Worst-case effect of the CDF tolerance on the reported q-EI (alpha=1).

    Every CDF value is off by at most ``cdf_abs_tol``. In the closed form
    ``M = m_k Phi - sum_i S_ki phi_i F_i`` that moves ``M`` by at most
    ``tol (|m_k| + sum_i |S_ki| / sqrt(2 pi S_ii))``; the tangent quotient
    amplifies it by ``(e^{eps m_k} + e^{-eps m_k}) / (2 eps)``. The bound ignores
    the tangent truncation error, which is O(eps^2). Returns ``None`` where no
    bound is derived (``alpha=2``, proxy mode).
    """
    if config.alpha != 1 or config.mode == "proxy":
        return None
    pts = _check_batch(model, batch)
    noisy = model.design.noisy
    reduced, _ = _reduce(model, pts, config.dedup_tol, drop_observed=not noisy)
    if len(reduced) == 0:
        return 0.0
    if noisy:
        n = model.design.n
        joint = posterior_noisy_joint(model, reduced)
        systems = [build_z_noisy(joint, n, l, k) for l in range(n) for k in range(len(reduced))]
    else:
        post = posterior(model, reduced)
        systems = _noiseless_systems(post.mean, post.cov, best_observed(model))
    tol, eps = config.cdf_abs_tol, config.epsilon
    total = 0.0
    for z in systems:
        m, s, k = z.view.mean, z.view.cov, z.target_index
        if config.mode == "tangent":
            total += tol * (np.exp(eps * m[k]) + np.exp(-eps * m[k])) / (2 * eps)
        else:
            total += tol * (abs(m[k]) + np.sum(np.abs(s[:, k]) / np.sqrt(2 * np.pi * np.diag(s))))
    return float(total)
