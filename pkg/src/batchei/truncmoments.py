"""Moments of a Gaussian vector restricted to the negative orthant.

For ``Z ~ N(m, S)`` of dimension ``p`` these routines compute

    M_{k,alpha}(m, S) = E[Z_k^alpha 1{Z <= 0}],   alpha in {1, 2},

through the moment generating function
``G(t) = E[exp(t'Z) 1{Z <= 0}] = exp(t'm + t'St/2) Phi_p(-m - St; S)``.
Differentiating ``G`` at ``t = 0`` gives closed forms in terms of ``Phi_p``,
its gradient and its Hessian. The tangent variant replaces the derivative
along ``e_k`` by a difference quotient of ``g(t) = exp(t m_k) Phi_p(-m - t S_k)``,
a function tangent to ``G(t e_k)`` at zero; it needs two ``p``-variate CDF
calls and no lower-dimensional ones.

Indices are zero-based. Covariance derivatives are returned as symmetric
matrices ``G`` with ``dM = sum_{r,s} G_rs dS_rs`` for symmetric perturbations.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ContractError
from .mvn import (CdfEvaluator, Keyer, _key, cdf_derivatives_batch, condition_out,
                  mvn_cdf_grad, mvn_cdf_hessian, normal_pdf)

DEFAULT_EPSILON = 1e-4


@dataclass(frozen=True)
class GaussianView:
    """Mean and covariance of a Gaussian vector."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        if cov.shape != (mean.size, mean.size):
            raise ContractError(f"covariance shape {cov.shape} does not match mean length {mean.size}")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def dim(self) -> int:
        return self.mean.size


@dataclass(frozen=True)
class MomentConfig:
    """Settings for tangent moments and the CDF calls behind them.

    ``scheme="central"`` uses ``(g(eps) - g(-eps)) / (2 eps)``, whose error is
    O(eps^2). ``scheme="forward"`` uses ``(g(eps) - Phi_p(-m)) / eps``, which is
    only O(eps) accurate but lets callers share ``Phi_p(-m)``.
    """

    epsilon: float = DEFAULT_EPSILON
    cdf_abs_tol: float = 1e-7
    seed: int = 0
    scheme: str = "central"

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ContractError("epsilon must be positive")
        if self.scheme not in ("central", "forward"):
            raise ContractError(f"unknown tangent scheme {self.scheme!r}")

    def evaluator(self, counter=None) -> CdfEvaluator:
        return CdfEvaluator(self.cdf_abs_tol, self.seed, counter)


@dataclass(frozen=True)
class MomentDerivatives:
    value: float
    grad_mean: Optional[np.ndarray] = None
    grad_cov: Optional[np.ndarray] = None


def _check_index(k: int, g: GaussianView) -> int:
    if not 0 <= k < g.dim:
        raise ContractError(f"index {k} outside 0..{g.dim - 1}")
    return int(k)


def mgf(t, g: GaussianView, cdf: Optional[CdfEvaluator] = None) -> float:
    """``E[exp(t'Z) 1{Z <= 0}]``."""
    t = np.atleast_1d(np.asarray(t, dtype=float))
    if t.shape != g.mean.shape:
        raise ContractError("t must have the dimension of the Gaussian")
    cdf = CdfEvaluator() if cdf is None else cdf
    st = g.cov @ t
    return float(np.exp(t @ g.mean + 0.5 * t @ st) * cdf(-g.mean - st, g.cov))


# ---------------------------------------------------------------------------
# Closed-form moments
# ---------------------------------------------------------------------------

def moment1(k: int, g: GaussianView, cdf: Optional[CdfEvaluator] = None) -> float:
    """``E[Z_k 1{Z <= 0}]`` (always non-positive)."""
    return moment1_derivatives(k, g, cdf, with_grads=False).value


def moment2(k: int, g: GaussianView, cdf: Optional[CdfEvaluator] = None,
            keyer: Optional[Keyer] = None) -> float:
    """``E[Z_k^2 1{Z <= 0}]``.

    Second derivative of the generating function along ``e_k``:
    ``(S_kk - m_k^2) Phi + S_k' Hess S_k + 2 m_k M_{k,1}``. In one dimension
    this is ``(1 + m^2) Phi(-m) - m phi(m)``, the familiar closed form.
    """
    k = _check_index(k, g)
    cdf = CdfEvaluator() if cdf is None else cdf
    m, s = g.mean, g.cov
    x = -m
    prob = cdf(x, s, key=_key(keyer, ()))
    grad = mvn_cdf_grad(x, s, cdf=cdf, keyer=keyer)
    hess = mvn_cdf_hessian(x, s, cdf=cdf, keyer=keyer, grad=grad)
    first = m[k] * prob - s[:, k] @ grad
    return float((s[k, k] - m[k] ** 2) * prob + s[:, k] @ hess @ s[:, k] + 2.0 * m[k] * first)


def moment1_derivatives(k: int, g: GaussianView, cdf: Optional[CdfEvaluator] = None,
                        keyer: Optional[Keyer] = None, with_grads: bool = True) -> MomentDerivatives:
    """First truncated moment with its mean and covariance derivatives.

    ``keyer`` names the conditional CDF calls so that an evaluator shared
    across several moments can reuse coinciding probabilities. The conditional
    probabilities entering the covariance derivative of the CDF gradient are
    always recomputed.
    """
    k = _check_index(k, g)
    cdf = CdfEvaluator() if cdf is None else cdf
    m, s = g.mean, g.cov
    p = m.size
    x = -m
    prob = cdf(x, s, key=_key(keyer, ()))
    grad = mvn_cdf_grad(x, s, cdf=cdf, keyer=keyer)
    value = float(m[k] * prob - s[:, k] @ grad)
    if not with_grads:
        return MomentDerivatives(value)
    hess = mvn_cdf_hessian(x, s, cdf=cdf, keyer=keyer, grad=grad)
    e_k = np.zeros(p)
    e_k[k] = 1.0
    grad_mean = prob * e_k - m[k] * grad + hess @ s[:, k]
    grad_cov = 0.5 * m[k] * hess - 0.5 * (np.outer(grad, e_k) + np.outer(e_k, grad))
    for i in range(p):
        grad_cov -= s[k, i] * _cdf_grad_component_cov_derivative(i, x, s, cdf, keyer)
    return MomentDerivatives(value, grad_mean, grad_cov)


def _cdf_grad_component_cov_derivative(i, x, s, cdf, keyer):
    """Symmetric covariance derivative of ``dPhi_p/dx_i = phi(x_i; s_ii) F_i``.

    ``F_i`` is the conditional orthant probability of the other coordinates.
    Writing ``s_ii = v``, ``c = S[-i, i]`` and ``R = S[-i, -i]``, the
    conditional limits are ``x_{-i} - c x_i / v`` and the conditional
    covariance is ``R - c c' / v``; the chain rule through both gives the
    three blocks below.
    """
    p = x.size
    rest = [j for j in range(p) if j != i]
    v = s[i, i]
    c = s[rest, i]
    xi = x[i]
    dens = normal_pdf(xi, v)
    sl = condition_out(s, [i])
    y = sl.shifted_limits(x)
    tail = cdf(y, sl.reduced_cov)
    tail_grad = mvn_cdf_grad(y, sl.reduced_cov, cdf=cdf, keyer=keyer, path=(i,), labels=rest)
    tail_hess = mvn_cdf_hessian(y, sl.reduced_cov, cdf=cdf, keyer=keyer, path=(i,), labels=rest,
                                grad=tail_grad)
    out = np.zeros((p, p))
    out[i, i] = (tail * dens * 0.5 * (xi * xi / v ** 2 - 1.0 / v)
                 + dens * ((xi / v ** 2) * (tail_grad @ c) + 0.5 * (c @ tail_hess @ c) / v ** 2))
    cross = dens * (-(xi / v) * tail_grad - (tail_hess @ c) / v)
    out[rest, i] = out[i, rest] = 0.5 * cross
    out[np.ix_(rest, rest)] = 0.5 * dens * tail_hess
    return out


def moment1_grad_mean(k: int, g: GaussianView, cdf: Optional[CdfEvaluator] = None) -> np.ndarray:
    """``dM_{k,1}/dm = Phi(-m) e_k - m_k grad Phi(-m) + Hess Phi(-m) S_k``."""
    return moment1_derivatives(k, g, cdf).grad_mean


def moment1_grad_cov(k: int, g: GaussianView, cdf: Optional[CdfEvaluator] = None) -> np.ndarray:
    """Symmetric derivative of ``M_{k,1}`` with respect to the covariance."""
    return moment1_derivatives(k, g, cdf).grad_cov


# ---------------------------------------------------------------------------
# Tangent moments
# ---------------------------------------------------------------------------

def tangent_moments_batch(views, ks, cfg: MomentConfig = MomentConfig(), with_grads: bool = True,
                          cdf: Optional[CdfEvaluator] = None) -> list:
    """Tangent approximations of ``M_{k,1}`` for several Gaussians of equal dimension.

    Every CDF, gradient and Hessian evaluation across the batch is issued as
    one vectorized call per dimension. Returns a list of :class:`MomentDerivatives`.
    """
    views = list(views)
    ks = [int(k) for k in ks]
    if not views:
        return []
    cdf = cfg.evaluator() if cdf is None else cdf
    eps = cfg.epsilon
    p = views[0].dim
    for g, k in zip(views, ks):
        if g.dim != p:
            raise ContractError("all Gaussians in a tangent batch must share a dimension")
        _check_index(k, g)
    means = np.stack([g.mean for g in views])
    covs = np.stack([g.cov for g in views])
    n = len(views)
    cols = covs[np.arange(n), :, ks]                      # S_k for each view
    mk = means[np.arange(n), ks]
    if cfg.scheme == "central":
        xs = np.concatenate([-means - eps * cols, -means + eps * cols])
        weights = np.concatenate([np.exp(eps * mk), -np.exp(-eps * mk)])
        scale = 2.0 * eps
    else:
        xs = np.concatenate([-means - eps * cols, -means])
        weights = np.concatenate([np.exp(eps * mk), -np.ones(n)])
        scale = eps
    order = 2 if with_grads else 0
    vals, grads, hess = cdf_derivatives_batch(xs, np.concatenate([covs, covs]), order, cdf)
    out = []
    for j in range(n):
        a, b = j, n + j
        wa, wb = weights[a], weights[b]
        value = float((wa * vals[a] + wb * vals[b]) / scale)
        if not with_grads:
            out.append(MomentDerivatives(value))
            continue
        e_k = np.zeros(p)
        e_k[ks[j]] = 1.0
        if cfg.scheme == "central":
            # d/dm of exp(+-eps m_k) gives +-eps, so the exponential factor
            # contributes the average of the two shifted probabilities
            level = 0.5 * (wa * vals[a] - wb * vals[b])
        else:
            level = wa * vals[a]
        grad_mean = level * e_k - (wa * grads[a] + wb * grads[b]) / scale
        # the limits move by -eps S_k (first point) and +eps S_k (central second point)
        sign_b = -1.0 if cfg.scheme == "central" else 0.0
        shifted = (wa * grads[a] + sign_b * wb * grads[b]) * (eps / scale)
        grad_cov = (wa * hess[a] + wb * hess[b]) / (2.0 * scale) \
            - 0.5 * (np.outer(shifted, e_k) + np.outer(e_k, shifted))
        out.append(MomentDerivatives(value, grad_mean, grad_cov))
    return out


def moment1_tangent(k: int, g: GaussianView, cfg: MomentConfig = MomentConfig(),
                    cdf: Optional[CdfEvaluator] = None) -> float:
    """Tangent approximation of ``E[Z_k 1{Z <= 0}]`` from two ``p``-variate CDF calls."""
    return tangent_moments_batch([g], [k], cfg, with_grads=False, cdf=cdf)[0].value


def moment1_grad_mean_tangent(k: int, g: GaussianView, cfg: MomentConfig = MomentConfig(),
                              cdf: Optional[CdfEvaluator] = None) -> np.ndarray:
    """Mean derivative of the tangent moment."""
    return tangent_moments_batch([g], [k], cfg, cdf=cdf)[0].grad_mean


def moment1_grad_cov_tangent(k: int, g: GaussianView, cfg: MomentConfig = MomentConfig(),
                             cdf: Optional[CdfEvaluator] = None) -> np.ndarray:
    """Symmetric covariance derivative of the tangent moment."""
    return tangent_moments_batch([g], [k], cfg, cdf=cdf)[0].grad_cov


def moment(k: int, alpha: int, g: GaussianView, cdf: Optional[CdfEvaluator] = None,
           n_samples: int = 1_000_000, seed: int = 0) -> float:
    """``E[Z_k^alpha 1{Z <= 0}]``: closed form for alpha 1 and 2, sampling beyond."""
    if alpha == 1:
        return moment1(k, g, cdf)
    if alpha == 2:
        return moment2(k, g, cdf)
    warnings.warn(f"no closed form for alpha={alpha}; using {n_samples} Monte Carlo draws",
                  stacklevel=2)
    return moment_mc(k, alpha, g, n_samples, seed)[0]


# ---------------------------------------------------------------------------
# Monte Carlo reference
# ---------------------------------------------------------------------------

def moment_mc(k: int, alpha: int, g: GaussianView, n_samples: int, seed: int = 0,
              chunk: int = 500_000) -> tuple:
    """Sample estimate of ``E[Z_k^alpha 1{Z <= 0}]`` and its standard error."""
    k = _check_index(k, g)
    if int(alpha) != alpha or alpha < 1:
        raise ContractError("alpha must be a positive integer")
    if n_samples < 1000:
        raise ContractError("n_samples must be at least 1000")
    rng = np.random.default_rng(seed)
    chol = np.linalg.cholesky(g.cov + 1e-14 * np.trace(g.cov) * np.eye(g.dim))
    total = 0.0
    total_sq = 0.0
    done = 0
    while done < n_samples:
        size = min(chunk, n_samples - done)
        z = g.mean + rng.standard_normal((size, g.dim)) @ chol.T
        f = np.where((z <= 0).all(axis=1), z[:, k] ** alpha, 0.0)
        total += f.sum()
        total_sq += (f * f).sum()
        done += size
    mean = total / n_samples
    var = max(total_sq / n_samples - mean * mean, 0.0)
    return float(mean), float(np.sqrt(var / (n_samples - 1)))
