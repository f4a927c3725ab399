"""Gaussian process regression with a Matern 3/2 tensor-product kernel.

The trend is a constant estimated by generalized least squares and then used
as a known mean, so posterior covariances are simple-kriging covariances. A
nugget of ``1e-8 * variance`` is always added to the Gram diagonal.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.optimize import minimize

from .errors import ContractError, DegenerateCovarianceError, NumericalError
from .truncmoments import GaussianView

NUGGET = 1e-8
LENGTHSCALE_BOUNDS = (1e-3, 1e3)
SNAPSHOT_FORMAT = "batchei-gp/1"
_SQRT3 = np.sqrt(3.0)


# ---------------------------------------------------------------------------
# Data containers
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Design:
    """Observed points in the unit cube, their values and noise variances."""

    points: np.ndarray
    values: np.ndarray
    noise_vars: Optional[np.ndarray] = None

    def __post_init__(self):
        pts = np.atleast_2d(np.asarray(self.points, dtype=float))
        vals = np.atleast_1d(np.asarray(self.values, dtype=float))
        noise = (np.zeros(vals.size) if self.noise_vars is None
                 else np.atleast_1d(np.asarray(self.noise_vars, dtype=float)))
        if pts.shape[0] < 1:
            raise ContractError("a design needs at least one point")
        if vals.shape != (pts.shape[0],) or noise.shape != vals.shape:
            raise ContractError("points, values and noise_vars must have matching lengths")
        if not (np.isfinite(pts).all() and np.isfinite(vals).all() and np.isfinite(noise).all()):
            raise ContractError("design entries must be finite")
        if (pts < -1e-12).any() or (pts > 1 + 1e-12).any():
            raise ContractError("design points must lie in the unit cube")
        if (noise < 0).any():
            raise ContractError("noise variances must be non-negative")
        object.__setattr__(self, "points", np.clip(pts, 0.0, 1.0))
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "noise_vars", noise)

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def d(self) -> int:
        return self.points.shape[1]

    @property
    def noisy(self) -> bool:
        return bool((self.noise_vars > 0).any())

    def to_csv(self, path) -> None:
        header = ",".join([f"x{j + 1}" for j in range(self.d)] + ["value", "noise_var"])
        table = np.column_stack([self.points, self.values, self.noise_vars])
        np.savetxt(path, table, delimiter=",", header=header, comments="", fmt="%.17g")

    @classmethod
    def from_csv(cls, path) -> "Design":
        with open(path) as fh:
            header = fh.readline().strip().split(",")
        table = np.atleast_2d(np.loadtxt(path, delimiter=",", skiprows=1))
        if "value" not in header:
            raise ContractError(f"{path}: missing 'value' column")
        xcols = [i for i, name in enumerate(header) if name.startswith("x")]
        noise = table[:, header.index("noise_var")] if "noise_var" in header else None
        return cls(table[:, xcols], table[:, header.index("value")], noise)


@dataclass(frozen=True)
class Kernel:
    """``k(x, x') = variance * prod_j (1 + r_j) exp(-r_j)``, ``r_j = sqrt(3) |x_j - x'_j| / l_j``."""

    variance: float
    lengthscales: np.ndarray

    def __post_init__(self):
        ls = np.atleast_1d(np.asarray(self.lengthscales, dtype=float))
        if not self.variance > 0 or (ls <= 0).any():
            raise ContractError("kernel variance and lengthscales must be positive")
        object.__setattr__(self, "lengthscales", ls)
        object.__setattr__(self, "variance", float(self.variance))

    def correlation(self, a, b) -> np.ndarray:
        r = _SQRT3 * np.abs(a[:, None, :] - b[None, :, :]) / self.lengthscales
        return np.exp(np.sum(np.log1p(r) - r, axis=2))

    def __call__(self, a, b) -> np.ndarray:
        return self.variance * self.correlation(np.atleast_2d(a), np.atleast_2d(b))

    def grad_first(self, a, b) -> np.ndarray:
        """``d k(a_i, b_j) / d a_i``, shape ``(len(a), len(b), d)``."""
        a, b = np.atleast_2d(a), np.atleast_2d(b)
        h = a[:, None, :] - b[None, :, :]
        r = _SQRT3 * np.abs(h) / self.lengthscales
        k = self.variance * np.exp(np.sum(np.log1p(r) - r, axis=2))
        return k[:, :, None] * (-3.0 * h / self.lengthscales ** 2) / (1.0 + r)


@dataclass(frozen=True)
class GpModel:
    design: Design
    kernel: Kernel
    trend: float
    chol: np.ndarray
    weights: np.ndarray

    @property
    def best_value(self) -> float:
        return float(self.design.values.min())

    def to_json(self) -> dict:
        return {
            "format": SNAPSHOT_FORMAT,
            "kernel": {"family": "matern32", "variance": self.kernel.variance,
                       "lengthscales": self.kernel.lengthscales.tolist()},
            "trend": self.trend,
            "design": {"points": self.design.points.tolist(), "values": self.design.values.tolist(),
                       "noise_vars": self.design.noise_vars.tolist()},
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1))

    @classmethod
    def from_json(cls, data: dict) -> "GpModel":
        if data.get("format") != SNAPSHOT_FORMAT:
            raise ContractError(f"unrecognized model snapshot format {data.get('format')!r}")
        d = data["design"]
        design = Design(d["points"], d["values"], d["noise_vars"])
        k = data["kernel"]
        return build_model(design, Kernel(k["variance"], k["lengthscales"]), data["trend"])

    @classmethod
    def load(cls, path) -> "GpModel":
        return cls.from_json(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class PosteriorBatch:
    """Posterior at a batch with spatial derivatives.

    ``mean_jac[i]`` is the gradient of the posterior mean at point ``i``;
    ``cov_jac[i, u]`` is the gradient, in the first argument, of the posterior
    covariance ``k_n(x, x_u)`` at ``x = x_i``.
    """

    batch_points: np.ndarray
    mean: np.ndarray
    cov: np.ndarray
    mean_jac: np.ndarray
    cov_jac: np.ndarray

    def view(self) -> GaussianView:
        return GaussianView(self.mean, self.cov)


# ---------------------------------------------------------------------------
# Model construction and likelihood
# ---------------------------------------------------------------------------

def _gram(design: Design, kernel: Kernel) -> np.ndarray:
    k = kernel(design.points, design.points)
    k[np.diag_indices_from(k)] += NUGGET * kernel.variance + design.noise_vars
    return k


def _cholesky(mat: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(mat)
    except np.linalg.LinAlgError:
        raise NumericalError("Gram matrix is not positive definite after the nugget; "
                             "check for duplicated design points") from None


def _gls_trend(chol: np.ndarray, values: np.ndarray) -> float:
    ones = np.ones(values.size)
    k1 = cho_solve((chol, True), ones)
    return float(k1 @ values / (k1 @ ones))


def build_model(design: Design, kernel: Kernel, trend: Optional[float] = None) -> GpModel:
    """Factorize the Gram matrix; the trend defaults to its GLS estimate."""
    if kernel.lengthscales.size != design.d:
        raise ContractError("kernel dimension does not match the design")
    chol = _cholesky(_gram(design, kernel))
    if trend is None:
        trend = _gls_trend(chol, design.values)
    weights = cho_solve((chol, True), design.values - trend)
    return GpModel(design, kernel, float(trend), chol, weights)


def _neg_log_likelihood(theta: np.ndarray, design: Design):
    """Negative log marginal likelihood (up to a constant) and its gradient.

    ``theta`` holds log lengthscales, followed by the log variance when the
    design is noisy. Without noise the variance is profiled out analytically.
    """
    d = design.d
    x, y = design.points, design.values
    n = y.size
    ls = np.exp(theta[:d])
    r = _SQRT3 * np.abs(x[:, None, :] - x[None, :, :]) / ls
    corr = np.exp(np.sum(np.log1p(r) - r, axis=2))
    dlog = r * r / (1.0 + r)                        # d log corr / d log l_j, per coordinate
    ones = np.ones(n)
    if design.noisy:
        var = np.exp(theta[d])
        gram = var * corr + np.diag(NUGGET * var + design.noise_vars)
    else:
        var = 1.0
        gram = corr + NUGGET * np.eye(n)
    try:
        chol = np.linalg.cholesky(gram)
    except np.linalg.LinAlgError:
        return 1e25, np.zeros_like(theta)
    inv = cho_solve((chol, True), np.eye(n))
    mu = (ones @ inv @ y) / (ones @ inv @ ones)
    resid = y - mu
    beta = inv @ resid
    logdet = 2.0 * np.sum(np.log(np.diag(chol)))
    if design.noisy:
        nll = 0.5 * (logdet + resid @ beta)
        inner = inv - np.outer(beta, beta)
        grad = np.empty_like(theta)
        for j in range(d):
            grad[j] = 0.5 * np.sum(inner * (var * corr * dlog[:, :, j]))
        grad[d] = 0.5 * np.sum(inner * (gram - np.diag(design.noise_vars)))
        return float(nll), grad
    sigma2 = max(resid @ beta / n, 1e-12 * max(np.mean(y * y), 1e-300))
    nll = 0.5 * (n * np.log(sigma2) + logdet)
    inner = inv - np.outer(beta, beta) / sigma2
    grad = np.array([0.5 * np.sum(inner * (corr * dlog[:, :, j])) for j in range(d)])
    return float(nll), grad


def _profiled_variance(design: Design, ls: np.ndarray) -> float:
    corr = Kernel(1.0, ls).correlation(design.points, design.points) + NUGGET * np.eye(design.n)
    chol = np.linalg.cholesky(corr)
    mu = _gls_trend(chol, design.values)
    resid = design.values - mu
    sigma2 = resid @ cho_solve((chol, True), resid) / design.n
    return float(max(sigma2, 1e-12 * max(np.mean(design.values ** 2), 1e-300)))


def fit(design: Design, n_restarts: int = 5, seed: int = 0) -> GpModel:
    """Maximum-likelihood hyperparameters by multistart L-BFGS-B on log parameters.

    Lengthscales are bounded to ``[1e-3, 1e3]`` (the unit cube has unit
    coordinate ranges). For noisy designs the variance is searched within
    ``1e-3`` to ``1e3`` times the sample variance of the values.
    """
    if n_restarts < 1:
        raise ContractError("n_restarts must be at least 1")
    rng = np.random.default_rng(seed)
    d = design.d
    lo, hi = np.log(LENGTHSCALE_BOUNDS[0]), np.log(LENGTHSCALE_BOUNDS[1])
    bounds = [(lo, hi)] * d
    starts = [np.full(d, np.log(0.5))]
    starts += [rng.uniform(np.log(0.05), np.log(2.0), size=d) for _ in range(n_restarts - 1)]
    if design.noisy:
        v0 = max(np.var(design.values), 1e-12)
        bounds.append((np.log(1e-3 * v0), np.log(1e3 * v0)))
        starts = [np.append(s, np.log(v0) + (0.0 if i == 0 else rng.uniform(-1, 1)))
                  for i, s in enumerate(starts)]
    best = None
    for start in starts:
        res = minimize(_neg_log_likelihood, start, args=(design,), jac=True, method="L-BFGS-B",
                       bounds=bounds, options={"maxiter": 200})
        if best is None or res.fun < best.fun:
            best = res
    if best.fun >= 1e25:
        raise NumericalError("likelihood could not be evaluated at any start; Gram matrix is singular")
    ls = np.exp(best.x[:d])
    var = float(np.exp(best.x[d])) if design.noisy else _profiled_variance(design, ls)
    return build_model(design, Kernel(var, ls))


# ---------------------------------------------------------------------------
# Prediction
# ---------------------------------------------------------------------------

def _as_batch(model: GpModel, batch) -> np.ndarray:
    pts = np.atleast_2d(np.asarray(batch, dtype=float))
    if pts.shape[1] != model.design.d:
        raise ContractError(f"batch has dimension {pts.shape[1]}, model has {model.design.d}")
    if not np.isfinite(pts).all() or (pts < -1e-12).any() or (pts > 1 + 1e-12).any():
        raise ContractError("batch points must lie in the unit cube")
    return pts


def posterior(model: GpModel, batch) -> PosteriorBatch:
    """Kriging mean, covariance and their spatial Jacobians at ``batch``."""
    pts = _as_batch(model, batch)
    x = model.design.points
    kern = model.kernel
    kxb = kern(x, pts)                                   # (n, q)
    solved = cho_solve((model.chol, True), kxb)
    mean = model.trend + kxb.T @ model.weights
    cov = kern(pts, pts) - kxb.T @ solved
    cov = 0.5 * (cov + cov.T)
    dk = kern.grad_first(pts, x)                         # (q, n, d)
    mean_jac = np.einsum("ind,n->id", dk, model.weights)
    cov_jac = kern.grad_first(pts, pts) - np.einsum("ind,nu->iud", dk, solved)
    return PosteriorBatch(pts, mean, cov, mean_jac, cov_jac)


def _joint_points(model: GpModel, batch) -> np.ndarray:
    return np.vstack([model.design.points, _as_batch(model, batch)])


def posterior_noisy_joint(model: GpModel, batch) -> GaussianView:
    """Joint posterior of the latent values at the design points followed by ``batch``."""
    pts = _joint_points(model, batch)
    x = model.design.points
    kxp = model.kernel(x, pts)
    mean = model.trend + kxp.T @ model.weights
    cov = model.kernel(pts, pts) - kxp.T @ cho_solve((model.chol, True), kxp)
    return GaussianView(mean, 0.5 * (cov + cov.T))


def noisy_joint_jacobians(model: GpModel, batch):
    """Spatial Jacobians for the joint latent posterior.

    Returns ``mean_jac`` of shape ``(q, d)`` and ``cov_jac`` of shape
    ``(q, n + q, d)``, where ``cov_jac[i, u]`` differentiates the posterior
    covariance between batch point ``i`` and joint point ``u`` in its first argument.
    """
    pts = _joint_points(model, batch)
    x = model.design.points
    b = pts[x.shape[0]:]
    dk = model.kernel.grad_first(b, x)
    solved = cho_solve((model.chol, True), model.kernel(x, pts))
    mean_jac = np.einsum("ind,n->id", dk, model.weights)
    cov_jac = model.kernel.grad_first(b, pts) - np.einsum("ind,nu->iud", dk, solved)
    return mean_jac, cov_jac


def update(model: GpModel, new_points, new_values, new_noise=None) -> GpModel:
    """Append observations and refactorize; hyperparameters and trend are kept."""
    new_values = np.atleast_1d(np.asarray(new_values, dtype=float))
    if new_values.size == 0:
        return model
    new_points = np.atleast_2d(np.asarray(new_points, dtype=float))
    new_noise = np.zeros(new_values.size) if new_noise is None else np.atleast_1d(new_noise)
    added = Design(new_points, new_values, new_noise)
    design = model.design
    keep = []
    for j in range(added.n):
        dist = np.abs(design.points - added.points[j]).max(axis=1)
        clash = np.flatnonzero((dist <= 1e-12) & (design.noise_vars == 0))
        if clash.size and added.noise_vars[j] == 0:
            old = design.values[clash[0]]
            if abs(old - added.values[j]) > 1e-10 * (1.0 + abs(old)):
                raise ContractError(f"noiseless observation {added.values[j]} conflicts with "
                                    f"existing value {old} at the same point")
            continue
        keep.append(j)
    if not keep:
        return model
    merged = Design(np.vstack([design.points, added.points[keep]]),
                    np.concatenate([design.values, added.values[keep]]),
                    np.concatenate([design.noise_vars, added.noise_vars[keep]]))
    return build_model(merged, model.kernel, model.trend)


def _pinned_values(model: GpModel, pts: np.ndarray):
    """Map batch rows that coincide with noiseless design points to their observations."""
    design = model.design
    pinned = {}
    for i, p in enumerate(pts):
        dist = np.abs(design.points - p).max(axis=1)
        hit = np.flatnonzero((dist <= 1e-12) & (design.noise_vars == 0))
        if hit.size:
            pinned[i] = float(design.values[hit[0]])
    return pinned


def sample_conditional(model: GpModel, points, n_draws: int, seed: int = 0) -> np.ndarray:
    """Posterior draws at ``points``, shape ``(n_draws, len(points))``.

    Points that coincide with noiseless design points reproduce the observation.
    """
    pts = _as_batch(model, points)
    pinned = _pinned_values(model, pts)
    free = [i for i in range(len(pts)) if i not in pinned]
    out = np.empty((n_draws, len(pts)))
    for i, v in pinned.items():
        out[:, i] = v
    if free:
        post = posterior(model, pts[free])
        cov = post.cov
        jitter = 0.0
        for _ in range(4):
            try:
                chol = np.linalg.cholesky(cov + jitter * np.eye(len(free)))
                break
            except np.linalg.LinAlgError:
                jitter = max(10 * jitter, 1e-10 * max(np.mean(np.diag(cov)), 1e-300))
        else:
            raise DegenerateCovarianceError("posterior covariance is not positive semi-definite")
        rng = np.random.default_rng(seed)
        out[:, free] = post.mean + rng.standard_normal((n_draws, len(free))) @ chol.T
    return out
