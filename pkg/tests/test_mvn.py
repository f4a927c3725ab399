import numpy as np
import pytest
from scipy import integrate
from scipy.stats import norm

from batchei.errors import ContractError, DegenerateCovarianceError
from batchei.mvn import (CallCounter, CdfEvaluator, bvn_cdf, cdf_derivatives_batch,
                         condition_out, mvn_cdf, mvn_cdf_batch, mvn_cdf_grad, mvn_cdf_hessian)


def random_spd(rng, p, ridge=0.2):
    a = rng.normal(size=(p, p))
    return a @ a.T + ridge * np.eye(p)


def bvn_by_quadrature(h, k, r):
    def integrand(u):
        return norm.pdf(u) * norm.cdf((k - r * u) / np.sqrt(1 - r * r))
    return integrate.quad(integrand, -np.inf, h, epsabs=1e-15, epsrel=1e-13, limit=200)[0]


def orthant3(corr):
    return 0.125 + (np.arcsin(corr[0, 1]) + np.arcsin(corr[0, 2]) + np.arcsin(corr[1, 2])) / (4 * np.pi)


def to_corr(sigma):
    d = np.sqrt(np.diag(sigma))
    return sigma / np.outer(d, d)


class TestValues:
    def test_empty_dimension_is_one(self):
        assert mvn_cdf(np.zeros(0), np.zeros((0, 0))).value == 1.0

    def test_univariate_is_normal_cdf(self):
        assert mvn_cdf([0.3], [[4.0]]).value == pytest.approx(norm.cdf(0.15), abs=1e-15)

    def test_bivariate_orthant_identity(self):
        res = mvn_cdf([0.0, 0.0], [[1.0, 0.5], [0.5, 1.0]])
        assert abs(res.value - 1.0 / 3.0) <= 1e-7

    def test_bivariate_matches_quadrature(self):
        rng = np.random.default_rng(11)
        for _ in range(100):
            h, k = rng.normal(size=2) * 2
            r = rng.uniform(-0.999, 0.999)
            assert bvn_cdf(h, k, r) == pytest.approx(bvn_by_quadrature(h, k, r), abs=1e-13)

    def test_trivariate_orthant_identity(self):
        rng = np.random.default_rng(12)
        for _ in range(50):
            sigma = random_spd(rng, 3, 0.05)
            assert mvn_cdf(np.zeros(3), sigma).value == pytest.approx(orthant3(to_corr(sigma)), abs=1e-12)

    @pytest.mark.parametrize("p", [4, 5, 6])
    def test_deterministic_dims_match_lattice_rule(self, p):
        rng = np.random.default_rng(p)
        for _ in range(3):
            sigma = random_spd(rng, p, 0.5)
            x = rng.normal(size=p) + 0.5
            exact = mvn_cdf(x, sigma).value
            # pad to seven dimensions with an independent coordinate at +40 sd,
            # which forces the randomized lattice path
            pad = 7 - p
            big = np.eye(7)
            big[:p, :p] = sigma
            lattice = mvn_cdf(np.append(x, [40.0] * pad), big, abs_tol=1e-8)
            assert abs(exact - lattice.value) <= max(3e-8, lattice.error_estimate)

    @pytest.mark.parametrize("p", [7, 9, 12])
    def test_lattice_rule_on_block_diagonal(self, p):
        rng = np.random.default_rng(100 + p)
        a, b = random_spd(rng, 3, 0.5), random_spd(rng, p - 3, 0.5)
        sigma = np.zeros((p, p))
        sigma[:3, :3], sigma[3:, 3:] = a, b
        x = rng.normal(size=p) + 1.0
        truth = mvn_cdf(x[:3], a).value * mvn_cdf(x[3:], b, abs_tol=1e-8).value
        res = mvn_cdf(x, sigma, abs_tol=1e-6)
        assert abs(res.value - truth) <= max(1e-6, res.error_estimate) + 1e-8

    def test_infinite_limits(self):
        sigma = np.array([[1.0, 0.3, 0.1], [0.3, 1.0, 0.2], [0.1, 0.2, 1.0]])
        marg = mvn_cdf([0.2, 0.4], sigma[:2, :2]).value
        assert mvn_cdf([0.2, 0.4, np.inf], sigma).value == pytest.approx(marg, abs=1e-14)
        assert mvn_cdf([0.2, -np.inf, 1.0], sigma).value == 0.0

    def test_reproducible(self):
        rng = np.random.default_rng(3)
        sigma = random_spd(rng, 8)
        x = rng.normal(size=8)
        assert mvn_cdf(x, sigma, 1e-5, seed=4) == mvn_cdf(x, sigma, 1e-5, seed=4)

    def test_monotone_in_each_coordinate(self):
        rng = np.random.default_rng(5)
        for p in (2, 3, 4, 5, 8):
            sigma = random_spd(rng, p)
            x = rng.normal(size=p)
            y = x + np.abs(rng.normal(size=p)) * (rng.random(p) < 0.5)
            a, b = mvn_cdf(x, sigma, 1e-6), mvn_cdf(y, sigma, 1e-6)
            assert b.value >= a.value - (a.error_estimate + b.error_estimate) - 1e-14

    def test_batch_matches_single(self):
        rng = np.random.default_rng(6)
        sigmas = np.stack([random_spd(rng, 4) for _ in range(5)])
        xs = rng.normal(size=(5, 4))
        values = mvn_cdf_batch(xs, sigmas)[0]
        for x, s, v in zip(xs, sigmas, values):
            assert v == pytest.approx(mvn_cdf(x, s).value, abs=1e-14)

    def test_budget_cap_reports_its_error(self):
        rng = np.random.default_rng(8)
        sigma = random_spd(rng, 8, 0.5)
        x = rng.normal(size=8) + 0.5
        truth = mvn_cdf(x, sigma, 1e-8).value
        fast = mvn_cdf(x, sigma, 1e-7, max_evals=4000)
        assert fast.n_evals <= 4000
        assert abs(fast.value - truth) <= fast.error_estimate


class TestDegenerateInputs:
    def test_rank_deficient_is_jittered(self):
        res = mvn_cdf([0.1, 0.5], [[1.0, 1.0], [1.0, 1.0]])
        assert res.value == pytest.approx(norm.cdf(0.1), abs=1e-4)

    def test_indefinite_raises(self):
        with pytest.raises(DegenerateCovarianceError):
            mvn_cdf([0.0, 0.0], [[1.0, 2.0], [2.0, 1.0]])

    def test_shape_mismatch_raises(self):
        with pytest.raises(ContractError):
            mvn_cdf([0.0, 0.0], np.eye(3))

    def test_asymmetric_raises(self):
        with pytest.raises(ContractError):
            mvn_cdf([0.0, 0.0], [[1.0, 0.2], [0.1, 1.0]])


class TestConditioning:
    def test_bivariate_example(self):
        sl = condition_out([[1.0, 0.5], [0.5, 1.0]], [0])
        assert sl.regression_weights[0, 0] == pytest.approx(0.5)
        assert sl.reduced_cov[0, 0] == pytest.approx(0.75)

    def test_against_simulation(self):
        rng = np.random.default_rng(9)
        sigma = random_spd(rng, 4)
        draws = rng.multivariate_normal(np.zeros(4), sigma, size=1_000_000)
        sl = condition_out(sigma, [1, 3])
        pinned, rest = draws[:, [1, 3]], draws[:, [0, 2]]
        coef, *_ = np.linalg.lstsq(pinned, rest, rcond=None)
        resid = rest - pinned @ coef
        np.testing.assert_allclose(coef.T, sl.regression_weights, atol=5e-3 * np.abs(sigma).max())
        np.testing.assert_allclose(np.cov(resid.T), sl.reduced_cov, rtol=1e-2, atol=1e-2)


def central_difference(f, x, step):
    out = []
    for i in range(x.size):
        e = np.zeros(x.size)
        e[i] = step
        out.append((f(x + e) - f(x - e)) / (2 * step))
    return np.array(out)


class TestDerivatives:
    @pytest.mark.parametrize("p", [2, 3, 4])
    def test_gradient_matches_finite_differences(self, p):
        rng = np.random.default_rng(20 + p)
        for _ in range(10):
            sigma = random_spd(rng, p)
            x = rng.normal(size=p)
            grad = mvn_cdf_grad(x, sigma)
            fd = central_difference(lambda z: mvn_cdf(z, sigma).value, x, 1e-5)
            np.testing.assert_allclose(grad, fd, rtol=0, atol=1e-5 * np.abs(grad).max() + 1e-10)

    @pytest.mark.parametrize("p", [1, 2, 3, 4])
    def test_hessian_matches_finite_differences(self, p):
        rng = np.random.default_rng(30 + p)
        for _ in range(10):
            sigma = random_spd(rng, p)
            x = rng.normal(size=p)
            hess = mvn_cdf_hessian(x, sigma)
            fd = central_difference(lambda z: mvn_cdf_grad(z, sigma), x, 1e-5)
            np.testing.assert_allclose(hess, fd, rtol=0, atol=1e-5 * np.abs(hess).max() + 1e-10)
            np.testing.assert_allclose(hess, hess.T, atol=1e-15)

    def test_gradient_costs_p_lower_calls(self):
        counter = CallCounter()
        mvn_cdf_grad(np.zeros(4), np.eye(4) + 0.3, cdf=CdfEvaluator(counter=counter))
        assert counter.report() == {3: 4}

    def test_batch_derivatives_match_scalar(self):
        rng = np.random.default_rng(40)
        sigmas = np.stack([random_spd(rng, 4) for _ in range(3)])
        xs = rng.normal(size=(3, 4))
        vals, grads, hess = cdf_derivatives_batch(xs, sigmas)
        for j in range(3):
            assert vals[j] == pytest.approx(mvn_cdf(xs[j], sigmas[j]).value, abs=1e-15)
            np.testing.assert_allclose(grads[j], mvn_cdf_grad(xs[j], sigmas[j]), atol=1e-14)
            np.testing.assert_allclose(hess[j], mvn_cdf_hessian(xs[j], sigmas[j]), atol=1e-13)

    def test_memoized_keys_are_counted_once(self):
        counter = CallCounter()
        ev = CdfEvaluator(counter=counter)
        a = ev([0.1, 0.2], np.eye(2), key="k")
        b = ev([5.0, 5.0], np.eye(2), key="k")
        assert a == b and counter.report() == {2: 1}
