"""Multivariate normal orthant probabilities and their derivatives.

``Phi_p(x; Sigma) = P(X <= x)`` for ``X ~ N(0, Sigma)``.

Dimensions up to six are integrated deterministically: the bivariate case
uses the Drezner-Wesolowsky/Genz algorithm, and three to six dimensions follow
Plackett's correlation path, whose integrand reduces to orthant probabilities
two dimensions lower. Seven dimensions and up use Genz's separation-of-variables
transform with randomly shifted rank-1 lattice rules. Everything is vectorized
over batches of problems sharing a dimension, because callers typically need
dozens of closely related probabilities at once.
"""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Hashable, Optional, Sequence

import numpy as np
from scipy.special import ndtr, ndtri

from .errors import ContractError, DegenerateCovarianceError

DEFAULT_ABS_TOL = 1e-7
MAX_DIM = 64
JITTER_SCALE = 1e-10

_TWO_PI = 2.0 * np.pi
_CLIP = 40.0  # |standardized limit| beyond which Phi is 0 or 1 in double precision

# Positive half of the 20-point Gauss-Legendre rule, as used by the bivariate code.
_bvn_nodes, _bvn_weights = np.polynomial.legendre.leggauss(20)
_BVN_X = _bvn_nodes[_bvn_nodes > 0]
_BVN_W = _bvn_weights[_bvn_nodes > 0]
_BVN_XS = np.concatenate([1.0 - _BVN_X, 1.0 + _BVN_X])
_BVN_WS = np.concatenate([_BVN_W, _BVN_W])

# Gauss-Kronrod 7/15 pair on [-1, 1].
_GK_X = np.array([
    0.991455371120812639206854697526329, 0.949107912342758524526189684047851,
    0.864864423359769072789712788640926, 0.741531185599394439863864773280788,
    0.586087235467691130294144845693013, 0.405845151377397166906606412076961,
    0.207784955007898467600689403773245, 0.0,
])
_GK_WK = np.array([
    0.022935322010529224963732008058970, 0.063092092629978553290700663189204,
    0.104790010322250183839876322541518, 0.140653259715525918745189590510238,
    0.169004726639267902826583426598550, 0.190350578064785409913256402421014,
    0.204432940075298892414161999234649, 0.209482141084727828012999174891714,
])
_GK_WG = np.array([
    0.129484966168869693270611432679082, 0.279705391489276667901467771423780,
    0.381830050505118944950369775488975, 0.417959183673469387755102040816327,
])
_KRONROD_NODES = np.concatenate([-_GK_X[:-1], _GK_X[::-1]])
_KRONROD_WEIGHTS = np.concatenate([_GK_WK[:-1], _GK_WK[::-1]])
_GAUSS_WEIGHTS = np.zeros(15)
_GAUSS_WEIGHTS[[1, 3, 5]] = _GK_WG[:3]
_GAUSS_WEIGHTS[[13, 11, 9]] = _GK_WG[:3]
_GAUSS_WEIGHTS[7] = _GK_WG[3]

_QUAD_TOL = 1e-10
PATH_MAX_DIM = 6
_MAX_PANELS = 64

_QMC_SHIFTS = 12
_QMC_START_POINTS = 256
DEFAULT_MAX_EVALS = 4_000_000
DETERMINISTIC_BUDGET = 100_000  # rough lattice-evaluation cost of a 5- or 6-dim path integral
_QMC_CHUNK = 3_000_000  # array elements processed at once


@dataclass(frozen=True)
class CdfResult:
    value: float
    error_estimate: float
    n_evals: int


@dataclass(frozen=True)
class ConditionalSlice:
    """Distribution of the remaining coordinates after pinning ``indices``.

    For pinned values ``u`` the conditional mean of the remaining block is
    ``regression_weights @ u`` and its covariance is ``reduced_cov``.
    """

    indices: tuple
    remaining: tuple
    regression_weights: np.ndarray
    reduced_cov: np.ndarray

    def shifted_limits(self, x: np.ndarray) -> np.ndarray:
        """Upper limits of the remaining block once ``x[indices]`` is pinned."""
        x = np.asarray(x, dtype=float)
        return x[list(self.remaining)] - self.regression_weights @ x[list(self.indices)]


@dataclass
class CallCounter:
    """Tally of orthant-probability evaluations keyed by dimension."""

    counts: Counter = field(default_factory=Counter)

    def record(self, dim: int, n: int = 1) -> None:
        if n:
            self.counts[int(dim)] += int(n)

    def report(self) -> dict:
        return {dim: self.counts[dim] for dim in sorted(self.counts, reverse=True)}

    def total(self) -> int:
        return sum(self.counts.values())

    def reset(self) -> None:
        self.counts.clear()


# ---------------------------------------------------------------------------
# Validation and standardization
# ---------------------------------------------------------------------------

def _as_problem(x, sigma):
    x = np.atleast_1d(np.asarray(x, dtype=float))
    sigma = np.atleast_2d(np.asarray(sigma, dtype=float))
    if x.ndim != 1:
        raise ContractError("x must be a vector")
    p = x.size
    if sigma.shape != (p, p) and not (p == 0 and sigma.size == 0):
        raise ContractError(f"sigma has shape {sigma.shape}, expected {(p, p)}")
    if p > MAX_DIM:
        raise ContractError(f"dimension {p} exceeds the supported maximum {MAX_DIM}")
    if np.isnan(x).any() or not np.isfinite(sigma).all():
        raise ContractError("x and sigma must not contain NaN; sigma must be finite")
    return x, sigma.reshape(p, p)


def _symmetrized(sigmas: np.ndarray) -> np.ndarray:
    scale = np.abs(sigmas).max(axis=(-1, -2), keepdims=True)
    asym = np.abs(sigmas - np.swapaxes(sigmas, -1, -2))
    if (asym > 1e-10 * np.maximum(scale, 1e-300)).any():
        raise ContractError("covariance matrix is not symmetric")
    return 0.5 * (sigmas + np.swapaxes(sigmas, -1, -2))


def _standardize(xs: np.ndarray, sigmas: np.ndarray):
    """Return standardized limits and correlation matrices, jittering once if needed."""
    sigmas = _symmetrized(sigmas)
    diag = np.diagonal(sigmas, axis1=-2, axis2=-1)
    if (diag <= 0).any():
        raise DegenerateCovarianceError("covariance has a non-positive variance")
    p = xs.shape[-1]
    try:
        np.linalg.cholesky(sigmas)
    except np.linalg.LinAlgError:
        sigmas = sigmas.copy()
        for j in range(sigmas.shape[0]):
            try:
                np.linalg.cholesky(sigmas[j])
            except np.linalg.LinAlgError:
                bumped = sigmas[j] + JITTER_SCALE * diag[j].mean() * np.eye(p)
                try:
                    np.linalg.cholesky(bumped)
                except np.linalg.LinAlgError:
                    raise DegenerateCovarianceError(
                        "covariance is not positive definite after jitter") from None
                sigmas[j] = bumped
        diag = np.diagonal(sigmas, axis1=-2, axis2=-1)
    sd = np.sqrt(diag)
    h = xs / sd
    corr = sigmas / (sd[:, :, None] * sd[:, None, :])
    idx = np.arange(p)
    corr[:, idx, idx] = 1.0
    return np.clip(h, -_CLIP, _CLIP), np.clip(corr, -1.0, 1.0)


# ---------------------------------------------------------------------------
# Bivariate normal
# ---------------------------------------------------------------------------

def bvn_cdf(h, k, r) -> np.ndarray:
    """Lower-orthant probability ``P(X < h, Y < k)`` for standard margins, correlation ``r``.

    Vectorized over broadcastable ``h``, ``k`` and ``r``.
    """
    h, k, r = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (h, k, r)))
    return _bvn_upper(-h.ravel(), -k.ravel(), np.clip(r.ravel(), -1.0, 1.0)).reshape(h.shape)


def _bvn_upper(dh: np.ndarray, dk: np.ndarray, r: np.ndarray) -> np.ndarray:
    """Upper-orthant probability ``P(X > dh, Y > dk)`` (Genz's BVNU)."""
    out = np.empty(dh.shape)
    done = np.zeros(dh.shape, dtype=bool)

    inf_hi = (dh == np.inf) | (dk == np.inf)
    out[inf_hi] = 0.0
    done |= inf_hi
    m = ~done & (dh == -np.inf)
    out[m] = ndtr(-dk[m])
    done |= m
    m = ~done & (dk == -np.inf)
    out[m] = ndtr(-dh[m])
    done |= m
    m = ~done & (r == 0.0)
    out[m] = ndtr(-dh[m]) * ndtr(-dk[m])
    done |= m

    low = ~done & (np.abs(r) < 0.925)
    if low.any():
        h, k, rr = dh[low], dk[low], r[low]
        hk = h * k
        hs = 0.5 * (h * h + k * k)
        asr = 0.5 * np.arcsin(rr)
        sn = np.sin(asr[:, None] * _BVN_XS[None, :])
        vals = np.exp((sn * hk[:, None] - hs[:, None]) / (1.0 - sn * sn)) @ _BVN_WS
        out[low] = vals * asr / _TWO_PI + ndtr(-h) * ndtr(-k)
        done |= low

    high = ~done
    if high.any():
        return _bvn_high(dh, dk, r, out, high)
    return np.clip(out, 0.0, 1.0)


def _bvn_high(dh, dk, r, out, high):
    """Strong-correlation branch of BVNU, ``|r| >= 0.925``."""
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        h, k, rr = dh[high], dk[high].copy(), r[high]
        neg = rr < 0
        k[neg] = -k[neg]
        hk = h * k
        bvn = np.zeros(h.shape)
        inner = np.abs(rr) < 1.0
        if inner.any():
            hi, ki, hki, ri = h[inner], k[inner], hk[inner], rr[inner]
            as_ = (1.0 - ri) * (1.0 + ri)
            a = np.sqrt(as_)
            bs = (hi - ki) ** 2
            c = (4.0 - hki) / 8.0
            d = (12.0 - hki) / 80.0
            asr = -(bs / as_ + hki) / 2.0
            val = np.where(asr > -100.0,
                           a * np.exp(asr) * (1.0 - c * (bs - as_) * (1.0 - d * bs) / 3.0
                                              + c * d * as_ * as_), 0.0)
            b = np.sqrt(bs)
            sp = np.sqrt(_TWO_PI) * ndtr(-b / a)
            val = np.where(hki > -100.0,
                           val - np.exp(-hki / 2.0) * sp * b * (1.0 - c * bs * (1.0 - d * bs) / 3.0),
                           val)
            a2 = a / 2.0
            xs = (a2[:, None] * _BVN_XS[None, :]) ** 2
            asr_n = -(bs[:, None] / xs + hki[:, None]) / 2.0
            keep = asr_n > -100.0
            sp_n = 1.0 + c[:, None] * xs * (1.0 + 5.0 * d[:, None] * xs)
            rs = np.sqrt(1.0 - xs)
            ep = np.exp(-(hki[:, None] / 2.0) * xs / (1.0 + rs) ** 2) / rs
            terms = np.where(keep, np.exp(np.where(keep, asr_n, 0.0)) * (sp_n - ep), 0.0)
            bvn[inner] = (a2 * (terms @ _BVN_WS) - val) / _TWO_PI
        pos = ~neg
        res = np.empty(h.shape)
        res[pos] = bvn[pos] + ndtr(-np.maximum(h[pos], k[pos]))
        hn, kn, bn = h[neg], k[neg], bvn[neg]
        lval = np.where(hn < 0, ndtr(kn) - ndtr(hn), ndtr(-hn) - ndtr(-kn))
        res[neg] = np.where(hn >= kn, -bn, lval - bn)
        out[high] = res
    return np.clip(out, 0.0, 1.0)


# ---------------------------------------------------------------------------
# Three to six dimensions along Plackett's correlation path
# ---------------------------------------------------------------------------

def _pivot_first(h: np.ndarray, corr: np.ndarray):
    """Reorder so the first variable has the weakest maximal correlation."""
    m, p = h.shape
    off = np.abs(corr).copy()
    off[:, np.arange(p), np.arange(p)] = 0.0
    first = np.argmin(off.max(axis=2), axis=1)
    ranks = np.broadcast_to(np.arange(p), (m, p)).copy()
    ranks[np.arange(m), first] = -1
    order = np.argsort(ranks, axis=1, kind="stable")
    rows = np.arange(m)[:, None]
    h = h[rows, order]
    corr = corr[rows[:, :, None], order[:, :, None], order[:, None, :]]
    return h, corr


def _path_integral(h: np.ndarray, corr: np.ndarray, tail: Callable, panels: int):
    """Kronrod and Gauss estimates of the correlation-path correction terms.

    The path scales the first row of ``corr`` by ``t`` in [0, 1]. Each term is
    parameterized by ``theta = asin(t * r_0j)``, which cancels the inverse
    square-root singularity of the bivariate density. ``tail`` returns the
    conditional orthant probability of the other coordinates at the nodes.
    """
    m, p = h.shape
    edges = np.linspace(0.0, 1.0, panels + 1)
    half = 0.5 * (edges[1] - edges[0])
    u = (0.5 * (edges[:-1] + edges[1:])[:, None] + half * _KRONROD_NODES[None, :]).ravel()
    wk = np.tile(_KRONROD_WEIGHTS * half, panels)
    wg = np.tile(_GAUSS_WEIGHTS * half, panels)
    h0 = h[:, :1]
    kron = np.zeros(m)
    gauss = np.zeros(m)
    for j in range(1, p):
        r0j = corr[:, 0, j]
        theta_end = np.arcsin(r0j)
        theta = theta_end[:, None] * u[None, :]
        rho = np.sin(theta)
        cos2 = np.cos(theta) ** 2
        hj = h[:, j:j + 1]
        with np.errstate(divide="ignore", invalid="ignore"):
            t = np.where(r0j[:, None] != 0.0, rho / r0j[:, None], 0.0)
            dens = np.exp(-(h0 * h0 - 2.0 * rho * h0 * hj + hj * hj) / (2.0 * cos2)) / _TWO_PI
        dens = np.where(np.isfinite(dens), dens, 0.0)
        rest = [i for i in range(1, p) if i != j]
        prob = tail(h, corr, j, rest, t, rho, cos2)
        f = dens * prob
        kron += theta_end * (f @ wk)
        gauss += theta_end * (f @ wg)
    return kron, gauss


def _path_tail(h, corr, j, rest, t, rho, cos2):
    """Conditional orthant probability of ``rest`` given coordinates 0 and j on the path."""
    m, n_nodes = t.shape
    h0 = h[:, :1, None]
    hj = h[:, j:j + 1, None]
    rho = rho[:, None, :]
    cos2 = cos2[:, None, :]
    a = t[:, None, :] * corr[:, 0, rest][:, :, None]          # (m, r, nodes)
    b = np.broadcast_to(corr[:, j, rest][:, :, None], a.shape)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        mean = ((a - rho * b) * h0 + (b - rho * a) * hj) / cos2
        cov = (corr[:, rest][:, :, rest][:, :, :, None]
               - (a[:, :, None] * a[:, None] - rho[:, None] * (a[:, :, None] * b[:, None]
                  + b[:, :, None] * a[:, None]) + b[:, :, None] * b[:, None]) / cos2[:, None])
        sd = np.sqrt(np.maximum(np.diagonal(cov, axis1=1, axis2=2), 1e-300))  # (m, nodes, r)
        z = (h[:, rest][:, :, None] - mean) / np.moveaxis(sd, 1, 2)
        sub = cov / (np.moveaxis(sd, 1, 2)[:, :, None] * np.moveaxis(sd, 1, 2)[:, None])
    z = np.nan_to_num(z, nan=_CLIP, posinf=_CLIP, neginf=-_CLIP)
    z = np.moveaxis(z, 2, 1).reshape(m * n_nodes, len(rest))
    sub = np.nan_to_num(np.moveaxis(sub, 3, 1), nan=0.0).reshape(m * n_nodes, len(rest), len(rest))
    r = len(rest)
    idx = np.arange(r)
    sub[:, idx, idx] = 1.0
    sub = np.clip(sub, -1.0, 1.0)
    return _standardized_cdf(np.clip(z, -_CLIP, _CLIP), sub)[0].reshape(m, n_nodes)


def _path_cdf(h: np.ndarray, corr: np.ndarray):
    """Orthant probabilities for standardized problems of dimension 3 to 6."""
    m, p = h.shape
    h, corr = _pivot_first(h, corr)
    sub, base_err = _standardized_cdf(h[:, 1:], corr[:, 1:, 1:])
    base = ndtr(h[:, 0]) * sub
    value = np.empty(m)
    err = np.empty(m)
    todo = np.arange(m)
    panels = 2
    while todo.size:
        kron, gauss = _path_integral(h[todo], corr[todo], _path_tail, panels)
        e = np.abs(kron - gauss)
        ok = (e <= _QUAD_TOL) | (panels >= _MAX_PANELS)
        value[todo[ok]] = base[todo[ok]] + kron[ok]
        err[todo[ok]] = e[ok] + base_err[todo[ok]]
        todo = todo[~ok]
        panels *= 4
    return np.clip(value, 0.0, 1.0), err


def _standardized_cdf(h: np.ndarray, corr: np.ndarray):
    """Deterministic orthant probabilities for standardized problems with p <= 6."""
    m, p = h.shape
    if p == 0:
        return np.ones(m), np.zeros(m)
    if p == 1:
        return ndtr(h[:, 0]), np.zeros(m)
    if p == 2:
        return bvn_cdf(h[:, 0], h[:, 1], corr[:, 0, 1]), np.zeros(m)
    value = np.zeros(m)
    err = np.zeros(m)
    live = np.flatnonzero(~(h <= -_CLIP).any(axis=1))
    if live.size:
        value[live], err[live] = _path_cdf(h[live], corr[live])
    return value, err


# ---------------------------------------------------------------------------
# Five dimensions and up: randomized lattice rules
# ---------------------------------------------------------------------------

def _is_prime(n: int) -> bool:
    if n < 2:
        return False
    d = 2
    while d * d <= n:
        if n % d == 0:
            return False
        d += 1
    return True


def _prime_below(n: int) -> int:
    while not _is_prime(n):
        n -= 1
    return n


def _primitive_root(n: int) -> int:
    factors, rest, d = set(), n - 1, 2
    while d * d <= rest:
        while rest % d == 0:
            factors.add(d)
            rest //= d
        d += 1
    if rest > 1:
        factors.add(rest)
    return next(g for g in range(2, n) if all(pow(g, (n - 1) // f, n) != 1 for f in factors))


@lru_cache(maxsize=None)
def _lattice_generator(dim: int, n_points: int) -> np.ndarray:
    """Rank-1 lattice generator built component by component (fast CBC, prime ``n_points``)."""
    half = (n_points - 1) // 2
    g = _primitive_root(n_points)
    perm = np.empty(half, dtype=np.int64)
    perm[0] = 1
    for j in range(1, half):
        perm[j] = (g * perm[j - 1]) % n_points
    perm = np.minimum(n_points - perm, perm)
    frac = perm / n_points
    kernel = frac * frac - frac + 1.0 / 6.0
    kernel_fft = np.fft.fft(kernel)
    weights = np.hstack([1.0, 0.8 ** np.arange(max(dim - 1, 0))])
    z = np.ones(dim, dtype=np.int64)
    prod = np.ones(half)
    best = 0
    for s in range(1, dim):
        shifted = np.hstack([kernel[:best + 1][::-1], kernel[best + 1:][::-1]])
        prod = prod * (1.0 + weights[s - 1] * shifted)
        best = int(np.fft.ifft(kernel_fft * np.fft.fft(prod)).real.argmin())
        z[s] = perm[best]
    return z / n_points


def _genz_reorder(h: np.ndarray, corr: np.ndarray):
    """Cholesky factor with variables ordered by increasing conditional probability."""
    p = h.size
    cov = corr.copy()
    lim = h.copy()
    chol = np.zeros((p, p))
    y = np.zeros(p)
    for k in range(p):
        s2 = np.diag(cov)[k:] - np.sum(chol[k:, :k] ** 2, axis=1)
        s = np.sqrt(np.maximum(s2, 1e-300))
        u = (lim[k:] - chol[k:, :k] @ y[:k]) / s
        j = k + int(np.argmin(ndtr(u)))
        if j != k:
            cov[[k, j], :] = cov[[j, k], :]
            cov[:, [k, j]] = cov[:, [j, k]]
            lim[[k, j]] = lim[[j, k]]
            chol[[k, j], :] = chol[[j, k], :]
            s[[0, j - k]] = s[[j - k, 0]]
        chol[k, k] = s[0]
        chol[k + 1:, k] = (cov[k + 1:, k] - chol[k + 1:, :k] @ chol[k, :k]) / chol[k, k]
        uk = (lim[k] - chol[k, :k] @ y[:k]) / chol[k, k]
        mass = max(ndtr(uk), 1e-300)
        y[k] = -np.exp(-0.5 * uk * uk) / np.sqrt(_TWO_PI) / mass
    return lim, chol


def _lattice_round(lims, chols, n_points, shifts):
    """Mean integrand value per problem and random shift for one lattice size."""
    m, p = lims.shape
    steps = np.arange(1, n_points + 1)[:, None] * _lattice_generator(p - 1, n_points)[None, :]
    out = np.empty((m, shifts.shape[0]))
    first = ndtr(lims[:, 0] / chols[:, 0, 0])[:, None]
    for s, shift in enumerate(shifts):
        w = np.abs(2.0 * np.mod(steps + shift[None, :], 1.0) - 1.0)  # tent periodization
        e = np.broadcast_to(first, (m, n_points))
        f = e.copy()
        ys = np.empty((m, n_points, p - 1))
        for i in range(1, p):
            ys[:, :, i - 1] = ndtri(np.clip(w[None, :, i - 1] * e, 1e-300, 1.0 - 1e-16))
            centre = np.einsum("mnj,mj->mn", ys[:, :, :i], chols[:, i, :i])
            e = ndtr((lims[:, i:i + 1] - centre) / chols[:, i, i][:, None])
            f *= e
        out[:, s] = f.mean(axis=1)
    return out


def _qmc_cdf(h: np.ndarray, corr: np.ndarray, abs_tol: float, seed: int, max_evals: int):
    """Randomized lattice estimates, doubling the lattice until ``3 * stderr <= abs_tol``."""
    m, p = h.shape
    lims = np.empty((m, p))
    chols = np.empty((m, p, p))
    for j in range(m):
        lims[j], chols[j] = _genz_reorder(h[j], corr[j])
    value = np.empty(m)
    err = np.empty(m)
    evals = np.zeros(m, dtype=int)
    todo = np.arange(m)
    size = _QMC_START_POINTS
    round_no = 0
    while todo.size:
        n_points = _prime_below(size)
        rng = np.random.default_rng([seed, p, round_no])
        shifts = rng.random((_QMC_SHIFTS, p - 1))
        chunk = max(1, _QMC_CHUNK // (n_points * p))
        est = np.empty((todo.size, _QMC_SHIFTS))
        for start in range(0, todo.size, chunk):
            sel = todo[start:start + chunk]
            est[start:start + chunk] = _lattice_round(lims[sel], chols[sel], n_points, shifts)
        mean = est.mean(axis=1)
        se = est.std(axis=1, ddof=1) / np.sqrt(_QMC_SHIFTS)
        evals[todo] += n_points * _QMC_SHIFTS
        ok = (3.0 * se <= abs_tol) | (evals[todo] + 2 * size * _QMC_SHIFTS > max_evals)
        value[todo[ok]] = mean[ok]
        err[todo[ok]] = 3.0 * se[ok]
        todo = todo[~ok]
        size *= 2
        round_no += 1
    return np.clip(value, 0.0, 1.0), err, evals


# ---------------------------------------------------------------------------
# Public CDF entry points
# ---------------------------------------------------------------------------

def mvn_cdf_batch(xs, sigmas, abs_tol: float = DEFAULT_ABS_TOL, seed: int = 0,
                  max_evals: int = DEFAULT_MAX_EVALS):
    """Vectorized ``Phi_p`` for ``m`` problems of a common dimension ``p``.

    Returns ``(values, error_estimates, n_evals)`` arrays of length ``m``.
    """
    xs = np.asarray(xs, dtype=float)
    sigmas = np.asarray(sigmas, dtype=float)
    if xs.ndim != 2 or sigmas.shape != xs.shape + xs.shape[-1:]:
        raise ContractError("expected xs of shape (m, p) and sigmas of shape (m, p, p)")
    m, p = xs.shape
    if p > MAX_DIM:
        raise ContractError(f"dimension {p} exceeds the supported maximum {MAX_DIM}")
    if np.isnan(xs).any() or not np.isfinite(sigmas).all():
        raise ContractError("inputs must not contain NaN")
    zeros = np.zeros(m)
    if p == 0 or m == 0:
        return np.ones(m), zeros, np.zeros(m, dtype=int)
    h, corr = _standardize(xs, sigmas)
    if p <= 4 or (p <= PATH_MAX_DIM and max_evals >= DETERMINISTIC_BUDGET):
        values, errors = _standardized_cdf(h, corr)
        return values, errors, np.full(m, 30 * max(p - 1, 1))
    dead = (h <= -_CLIP).any(axis=1)
    values = np.zeros(m)
    errors = np.zeros(m)
    evals = np.zeros(m, dtype=int)
    live = np.flatnonzero(~dead)
    if live.size:
        values[live], errors[live], evals[live] = _qmc_cdf(h[live], corr[live], abs_tol, seed, max_evals)
    return values, errors, evals


def mvn_cdf(x, sigma, abs_tol: float = DEFAULT_ABS_TOL, seed: int = 0,
            max_evals: int = DEFAULT_MAX_EVALS) -> CdfResult:
    """Orthant probability ``P(X <= x)`` for ``X ~ N(0, sigma)``.

    Parameters
    ----------
    x : array_like, shape (p,)
        Upper limits; ``+inf`` and ``-inf`` are allowed.
    sigma : array_like, shape (p, p)
        Symmetric positive-definite covariance. A single diagonal jitter of
        ``1e-10 * mean(diag)`` is tried before giving up on a singular matrix.
    abs_tol : float
        Target absolute error for the randomized rules used when ``p >= 5``.
    seed : int
        Seed for the lattice shifts; results are reproducible per seed.
    max_evals : int
        Cap on lattice integrand evaluations per problem. When the cap is hit
        the returned error estimate may exceed ``abs_tol``. Dimensions 5 and 6
        are integrated deterministically unless the cap is below the cost of
        doing so.

    Returns
    -------
    CdfResult
        The probability, an error estimate and the number of integrand evaluations.
    """
    x, sigma = _as_problem(x, sigma)
    if x.size == 0:
        return CdfResult(1.0, 0.0, 0)
    if (x == -np.inf).any():
        return CdfResult(0.0, 0.0, 0)
    finite = np.flatnonzero(x != np.inf)
    if finite.size < x.size:
        x = x[finite]
        sigma = sigma[np.ix_(finite, finite)]
        if x.size == 0:
            return CdfResult(1.0, 0.0, 0)
    v, e, n = mvn_cdf_batch(x[None, :], sigma[None, :, :], abs_tol, seed, max_evals)
    return CdfResult(float(v[0]), float(e[0]), int(n[0]))


class CdfEvaluator:
    """Callable front end to the CDF that counts calls and memoizes keyed values.

    Values requested with the same hashable ``key`` are computed once per
    evaluator; callers use keys to share probabilities that coincide for
    structural reasons. Only computed (not memoized) values are counted.
    """

    def __init__(self, abs_tol: float = DEFAULT_ABS_TOL, seed: int = 0,
                 counter: Optional[CallCounter] = None, max_evals: int = DEFAULT_MAX_EVALS):
        self.abs_tol = abs_tol
        self.seed = seed
        self.max_evals = max_evals
        self.counter = counter
        self._memo: dict = {}

    def __call__(self, x, sigma, key: Optional[Hashable] = None) -> float:
        if key is not None and key in self._memo:
            return self._memo[key]
        x, sigma = _as_problem(x, sigma)
        value = mvn_cdf(x, sigma, self.abs_tol, self.seed, self.max_evals).value
        if self.counter is not None:
            self.counter.record(x.size)
        if key is not None:
            self._memo[key] = value
        return value

    def batch(self, xs, sigmas) -> np.ndarray:
        xs = np.asarray(xs, dtype=float)
        if self.counter is not None:
            self.counter.record(xs.shape[-1], xs.shape[0])
        return mvn_cdf_batch(xs, sigmas, self.abs_tol, self.seed, self.max_evals)[0]


# ---------------------------------------------------------------------------
# Conditioning and derivatives
# ---------------------------------------------------------------------------

def condition_out(sigma, indices: Sequence[int]) -> ConditionalSlice:
    """Regression weights and Schur complement after pinning ``indices``."""
    sigma = np.atleast_2d(np.asarray(sigma, dtype=float))
    p = sigma.shape[0]
    idx = [int(i) for i in np.atleast_1d(indices)]
    if len(set(idx)) != len(idx) or any(i < 0 or i >= p for i in idx):
        raise ContractError(f"indices {idx} are not distinct positions in 0..{p - 1}")
    rest = [i for i in range(p) if i not in idx]
    s_jj = sigma[np.ix_(idx, idx)]
    s_rj = sigma[np.ix_(rest, idx)]
    try:
        weights = np.linalg.solve(s_jj, s_rj.T).T
    except np.linalg.LinAlgError:
        raise DegenerateCovarianceError("pinned block is singular") from None
    reduced = sigma[np.ix_(rest, rest)] - weights @ s_rj.T
    reduced = 0.5 * (reduced + reduced.T)
    return ConditionalSlice(tuple(idx), tuple(rest), weights, reduced)


def normal_pdf(x, var):
    """Univariate centred normal density with variance ``var``."""
    return np.exp(-0.5 * x * x / var) / np.sqrt(_TWO_PI * var)


def bivariate_pdf(xi, xj, sii, sjj, sij):
    det = sii * sjj - sij * sij
    quad = (sjj * xi * xi - 2.0 * sij * xi * xj + sii * xj * xj) / det
    return np.exp(-0.5 * quad) / (_TWO_PI * np.sqrt(det))


Keyer = Callable[[tuple], Optional[Hashable]]


def _key(keyer: Optional[Keyer], path: tuple):
    return None if keyer is None else keyer(path)


def mvn_cdf_grad(x, sigma, *, cdf: Optional[CdfEvaluator] = None, keyer: Optional[Keyer] = None,
                 path: tuple = (), labels: Optional[Sequence] = None) -> np.ndarray:
    """Gradient of ``Phi_p(x; sigma)`` with respect to ``x``.

    Component ``i`` is the marginal density of ``x_i`` times a ``(p-1)``-variate
    conditional orthant probability, so one gradient costs ``p`` lower-dimensional
    CDF calls. ``keyer``, ``path`` and ``labels`` let a caller name those calls:
    the call conditioning on coordinate ``i`` is keyed by ``keyer(path + (labels[i],))``.
    """
    x, sigma = _as_problem(x, sigma)
    p = x.size
    cdf = CdfEvaluator() if cdf is None else cdf
    labels = tuple(range(p)) if labels is None else tuple(labels)
    grad = np.zeros(p)
    for i in range(p):
        sl = condition_out(sigma, [i])
        tail = cdf(sl.shifted_limits(x), sl.reduced_cov, key=_key(keyer, path + (labels[i],)))
        grad[i] = normal_pdf(x[i], sigma[i, i]) * tail
    return grad


def mvn_cdf_hessian(x, sigma, *, cdf: Optional[CdfEvaluator] = None, keyer: Optional[Keyer] = None,
                    path: tuple = (), labels: Optional[Sequence] = None,
                    grad: Optional[np.ndarray] = None) -> np.ndarray:
    """Hessian of ``Phi_p(x; sigma)`` with respect to ``x``.

    Off-diagonal entries are bivariate densities times ``(p-2)``-variate
    conditional probabilities; the diagonal follows from the heat-equation
    identity ``Sigma_ii H_ii = -x_i g_i - sum_{j != i} Sigma_ij H_ij``.
    """
    x, sigma = _as_problem(x, sigma)
    p = x.size
    cdf = CdfEvaluator() if cdf is None else cdf
    labels = tuple(range(p)) if labels is None else tuple(labels)
    if grad is None:
        grad = mvn_cdf_grad(x, sigma, cdf=cdf, keyer=keyer, path=path, labels=labels)
    hess = np.zeros((p, p))
    for i in range(p):
        for j in range(i + 1, p):
            sl = condition_out(sigma, [i, j])
            tail = cdf(sl.shifted_limits(x), sl.reduced_cov,
                       key=_key(keyer, path + (labels[i], labels[j])))
            dens = bivariate_pdf(x[i], x[j], sigma[i, i], sigma[j, j], sigma[i, j])
            hess[i, j] = hess[j, i] = dens * tail
    for i in range(p):
        hess[i, i] = -(x[i] * grad[i] + sigma[i] @ hess[i] - sigma[i, i] * hess[i, i]) / sigma[i, i]
    return hess


def cdf_derivatives_batch(xs, sigmas, order: int = 2, cdf: Optional[CdfEvaluator] = None):
    """Values, gradients and Hessians of ``Phi_p`` for a batch of problems.

    Same quantities as :func:`mvn_cdf`, :func:`mvn_cdf_grad` and
    :func:`mvn_cdf_hessian`, with every conditional probability of a given
    dimension evaluated in one vectorized call.
    """
    xs = np.asarray(xs, dtype=float)
    sigmas = np.asarray(sigmas, dtype=float)
    m, p = xs.shape
    cdf = CdfEvaluator() if cdf is None else cdf
    values = cdf.batch(xs, sigmas)
    if order == 0:
        return values, None, None
    diag = np.diagonal(sigmas, axis1=1, axis2=2)
    grads = np.zeros((m, p))
    if p:
        sub_x, sub_s = [], []
        for i in range(p):
            rest = [j for j in range(p) if j != i]
            c = sigmas[:, rest, i]
            w = c / diag[:, i:i + 1]
            sub_x.append(xs[:, rest] - w * xs[:, i:i + 1])
            sub_s.append(sigmas[:, rest][:, :, rest] - w[:, :, None] * c[:, None, :])
        tails = cdf.batch(np.concatenate(sub_x), np.concatenate(sub_s)).reshape(p, m).T
        grads = normal_pdf(xs, diag) * tails
    if order == 1:
        return values, grads, None
    hess = np.zeros((m, p, p))
    pairs = [(i, j) for i in range(p) for j in range(i + 1, p)]
    if pairs:
        sub_x, sub_s, dens = [], [], []
        for i, j in pairs:
            pin = [i, j]
            rest = [k for k in range(p) if k not in pin]
            s_jj = sigmas[:, pin][:, :, pin]
            s_rj = sigmas[:, rest][:, :, pin]
            w = np.linalg.solve(s_jj, np.swapaxes(s_rj, 1, 2))
            w = np.swapaxes(w, 1, 2)
            sub_x.append(xs[:, rest] - np.einsum("mrj,mj->mr", w, xs[:, pin]))
            red = sigmas[:, rest][:, :, rest] - w @ np.swapaxes(s_rj, 1, 2)
            sub_s.append(0.5 * (red + np.swapaxes(red, 1, 2)))
            dens.append(bivariate_pdf(xs[:, i], xs[:, j], sigmas[:, i, i], sigmas[:, j, j],
                                      sigmas[:, i, j]))
        tails = cdf.batch(np.concatenate(sub_x), np.concatenate(sub_s)).reshape(len(pairs), m)
        for n, (i, j) in enumerate(pairs):
            hess[:, i, j] = hess[:, j, i] = dens[n] * tails[n]
    for i in range(p):
        off = np.einsum("mj,mj->m", sigmas[:, i, :], hess[:, i, :])
        hess[:, i, i] = -(xs[:, i] * grads[:, i] + off) / diag[:, i]
    return values, grads, hess
