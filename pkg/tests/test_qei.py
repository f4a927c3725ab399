import numpy as np
import pytest
from scipy.stats import norm

from batchei.errors import ContractError
from batchei.gp import Design, Kernel, build_model, fit, posterior, posterior_noisy_joint
from batchei.mvn import CallCounter, condition_out, mvn_cdf, normal_pdf
from batchei.qei import (BestObserved, QeiConfig, best_observed, build_z_noiseless, build_z_noisy,
                         counter_report, ei_closed_form, qei, qei_gaussian, qei_grad, qei_mc,
                         qei_value_and_grad)


def branin_like(x):
    return np.sin(6 * x[:, 0]) + (x[:, 1] - 0.4) ** 2 * 3 + 0.5 * x[:, 0]


@pytest.fixture(scope="module")
def model():
    rng = np.random.default_rng(0)
    x = rng.random((12, 2))
    return fit(Design(x, branin_like(x)))


@pytest.fixture(scope="module")
def model3():
    rng = np.random.default_rng(1)
    x = rng.random((15, 3))
    return fit(Design(x, np.sum((x - 0.6) ** 2, axis=1) + 0.3 * np.cos(5 * x[:, 2])))


def promising_batch(model, q, rng, spread=0.15):
    """Batch scattered around the incumbent, where q-EI is not negligible."""
    centre = model.design.points[best_observed(model).index]
    return np.clip(centre + spread * rng.standard_normal((q, model.design.d)), 0.0, 1.0)


def fd_grad(f, batch, step=1e-5):
    out = np.zeros_like(batch)
    for i in range(batch.shape[0]):
        for j in range(batch.shape[1]):
            e = np.zeros_like(batch)
            e[i, j] = step
            out[i, j] = (f(batch + e) - f(batch - e)) / (2 * step)
    return out


class TestZSystems:
    def test_single_point(self):
        z = build_z_noiseless([0.3], [[2.0]], BestObserved(1.0, 0), 0)
        assert z.view.mean[0] == pytest.approx(-0.7)
        assert z.view.cov[0, 0] == pytest.approx(2.0)

    def test_pair_structure(self):
        z = build_z_noiseless([0.0, 0.0], np.eye(2), BestObserved(0.0, 0), 1)
        np.testing.assert_array_equal(z.transform, [[-1.0, 1.0], [0.0, 1.0]])
        np.testing.assert_array_equal(z.offset, [0.0, 0.0])
        assert z.target_index == 1

    def test_orthant_probability_is_improving_minimum_event(self):
        rng = np.random.default_rng(2)
        a = rng.normal(size=(3, 3))
        cov = a @ a.T + 0.2 * np.eye(3)
        mean = rng.normal(size=3)
        t = 0.1
        draws = rng.multivariate_normal(mean, cov, size=1_000_000)
        for k in range(3):
            z = build_z_noiseless(mean, cov, BestObserved(t, 0), k)
            p = mvn_cdf(-z.view.mean, z.view.cov).value
            freq = np.mean((draws[:, k] <= t) & (draws.argmin(axis=1) == k))
            assert abs(p - freq) <= 3 * np.sqrt(p * (1 - p) / 1e6)

    def test_noisy_single_design_point_matches_noiseless_layout(self):
        joint = posterior_noisy_joint(
            build_model(Design([[0.5]], [0.0], [0.1]), Kernel(1.0, [0.3])), [[0.2], [0.8]])
        z = build_z_noisy(joint, 1, 0, 1)
        np.testing.assert_array_equal(z.transform[:, 1:], _noiseless_rows(2, 1))
        np.testing.assert_array_equal(z.transform[:, 0], [0.0, -1.0])
        assert z.target_index == 1

    def test_noisy_event_by_simulation(self):
        rng = np.random.default_rng(3)
        m = build_model(Design(rng.random((3, 1)), rng.normal(size=3), [0.05] * 3), Kernel(1.0, [0.3]))
        joint = posterior_noisy_joint(m, [[0.1], [0.6]])
        draws = rng.multivariate_normal(joint.mean, joint.cov, size=1_000_000)
        for l in range(3):
            for k in range(2):
                z = build_z_noisy(joint, 3, l, k)
                p = mvn_cdf(-z.view.mean, z.view.cov).value
                event = ((draws[:, :3].argmin(axis=1) == l) & (draws[:, 3:].argmin(axis=1) == k)
                         & (draws[:, 3 + k] <= draws[:, l]))
                freq = event.mean()
                assert abs(p - freq) <= 3 * np.sqrt(p * (1 - p) / 1e6) + 1e-7


def _noiseless_rows(q, k):
    a = -np.eye(q)
    a[:, k] += 1.0
    a[k, k] = 1.0
    return a


class TestValues:
    def test_single_point_at_threshold(self):
        assert qei_gaussian([1.0], [[1.0]], 1.0) == pytest.approx(norm.pdf(0.0), abs=1e-14)
        assert norm.pdf(0.0) == pytest.approx(0.3989423, abs=1e-7)

    def test_observed_point_has_no_improvement(self, model):
        assert qei(model, model.design.points[:1]) == 0.0
        assert qei_mc(model, model.design.points[:1], n_sims=1000) == (0.0, 0.0)

    def test_independent_pair_against_sampling(self):
        value = qei_gaussian([0.0, 0.0], np.eye(2), 0.0)
        draws = np.random.default_rng(4).standard_normal((1_000_000, 2))
        imp = np.maximum(-draws.min(axis=1), 0.0)
        assert abs(value - imp.mean()) <= 3 * imp.std() / 1e3

    def test_single_point_closed_form(self, model):
        rng = np.random.default_rng(5)
        for _ in range(100):
            x = rng.random((1, 2))
            for alpha in (1, 2):
                ref = ei_closed_form(model, x, alpha)
                assert qei(model, x, alpha=alpha) == pytest.approx(ref, abs=1e-10 * (1 + abs(ref)))

    @pytest.mark.parametrize("q,alpha", [(2, 1), (3, 2), (5, 1)])
    def test_matches_simulation(self, model, q, alpha):
        rng = np.random.default_rng(10 * q + alpha)
        batch = promising_batch(model, q, rng)
        est, se = qei_mc(model, batch, alpha, 1_000_000, seed=q)
        assert abs(qei(model, batch, alpha=alpha) - est) <= 3 * se

    def test_permutation_invariance(self, model):
        rng = np.random.default_rng(6)
        for _ in range(10):
            batch = promising_batch(model, 4, rng)
            perm = rng.permutation(4)
            assert abs(qei(model, batch) - qei(model, batch[perm])) <= 1e-9

    def test_appending_never_decreases(self, model):
        rng = np.random.default_rng(7)
        for _ in range(10):
            batch = promising_batch(model, 4, rng)
            assert qei(model, batch) >= qei(model, batch[:3]) - 1e-8

    def test_duplicates_collapse(self, model):
        rng = np.random.default_rng(8)
        batch = promising_batch(model, 2, rng)
        doubled = np.vstack([batch, batch[:1] + 1e-10])
        assert qei(model, doubled) == pytest.approx(qei(model, batch), abs=1e-12)
        g = qei_grad(model, doubled)
        np.testing.assert_allclose(g[2], g[0])
        np.testing.assert_allclose(g[:2], qei_grad(model, batch), atol=1e-12)

    def test_tangent_converges_at_second_order(self, model):
        rng = np.random.default_rng(9)
        ratios = []
        for _ in range(10):
            batch = promising_batch(model, 3, rng)
            exact = qei(model, batch)
            e1 = qei(model, batch, config=QeiConfig(mode="tangent", epsilon=1e-2)) - exact
            e2 = qei(model, batch, config=QeiConfig(mode="tangent", epsilon=5e-3)) - exact
            ratios.append(e1 / e2)
        assert np.mean((np.array(ratios) > 3.5) & (np.array(ratios) < 4.5)) >= 0.8

    def test_higher_exponent_by_simulation_is_consistent(self, model):
        batch = promising_batch(model, 2, np.random.default_rng(10))
        a, sa = qei_mc(model, batch, 3, 400_000, seed=1)
        b, sb = qei_mc(model, batch, 3, 400_000, seed=2)
        assert abs(a - b) <= 4 * np.hypot(sa, sb)

    def test_alpha_three_closed_form_rejected(self, model):
        with pytest.raises(ContractError):
            qei(model, [[0.5, 0.5]], alpha=3)


class TestSharedConditionalTerms:
    def test_symmetry_of_pairwise_terms(self):
        rng = np.random.default_rng(11)
        for _ in range(10):
            a = rng.normal(size=(4, 4))
            cov = a @ a.T + 0.3 * np.eye(4)
            mean = rng.normal(size=4)
            best = BestObserved(0.2, 0)
            zs = [build_z_noiseless(mean, cov, best, k) for k in range(4)]
            for k in range(4):
                for i in range(4):
                    if i == k:
                        continue
                    # Z^(k)_i = Y_k - Y_i and Z^(i)_k = Y_i - Y_k pin the same event
                    terms = []
                    for own, other in ((k, i), (i, k)):
                        v = zs[own].view
                        sl = condition_out(v.cov, [other])
                        x = -v.mean
                        terms.append(normal_pdf(x[other], v.cov[other, other])
                                     * mvn_cdf(sl.shifted_limits(x), sl.reduced_cov).value)
                    assert terms[0] == pytest.approx(terms[1], abs=1e-8)


@pytest.fixture(scope="module")
def batch8():
    rng = np.random.default_rng(12)
    x = rng.random((20, 8))
    m = build_model(Design(x, np.sum(x ** 2, axis=1)), Kernel(1.0, np.full(8, 0.8)))
    return m, rng.random((8, 8))


class TestCallCounts:
    def test_analytic_value(self, batch8):
        m, b = batch8
        c = CallCounter()
        qei(m, b, counter=c)
        assert counter_report(c) == {8: 8, 7: 36}

    def test_tangent_value(self, batch8):
        m, b = batch8
        c = CallCounter()
        qei(m, b, mode="tangent", counter=c, config=QeiConfig(mode="tangent").fast())
        assert c.report() == {8: 16}

    def test_proxy_gradient(self, batch8):
        m, b = batch8
        c = CallCounter()
        qei_grad(m, b, counter=c, config=QeiConfig(mode="proxy").fast())
        assert c.report() == {8: 72}

    def test_tangent_gradient(self, batch8):
        m, b = batch8
        c = CallCounter()
        qei_grad(m, b, counter=c, config=QeiConfig(mode="tangent").fast())
        assert c.report() == {8: 16, 7: 128, 6: 448}

    @pytest.mark.parametrize("q", [2, 4])
    def test_analytic_gradient(self, model, q):
        from math import comb
        c = CallCounter()
        qei_grad(model, promising_batch(model, q, np.random.default_rng(q)), counter=c)
        expect = {q: q, q - 1: (3 * q * q + q) // 2, q - 2: 3 * comb(q + 1, 3)}
        if q >= 3:
            expect[q - 3] = 6 * comb(q + 1, 4)
        assert c.report() == expect


class TestGradients:
    @pytest.mark.parametrize("mode", ["analytic", "tangent"])
    def test_against_finite_differences_2d(self, model, mode):
        rng = np.random.default_rng(13)
        cfg = QeiConfig(mode=mode)
        for _ in range(5):
            batch = promising_batch(model, 2, rng)
            batch = np.clip(batch, 1e-4, 1 - 1e-4)
            g = qei_value_and_grad(model, batch, cfg)[1]
            fd = fd_grad(lambda b: qei(model, b, config=cfg), batch)
            assert np.abs(g - fd).max() <= 1e-5 * np.abs(fd).max() + 1e-12

    @pytest.mark.parametrize("mode", ["analytic", "tangent"])
    def test_against_finite_differences_3d(self, model3, mode):
        rng = np.random.default_rng(14)
        cfg = QeiConfig(mode=mode)
        for _ in range(2):
            batch = np.clip(promising_batch(model3, 3, rng), 1e-4, 1 - 1e-4)
            g = qei_value_and_grad(model3, batch, cfg)[1]
            fd = fd_grad(lambda b: qei(model3, b, config=cfg), batch)
            assert np.abs(g - fd).max() <= 1e-5 * np.abs(fd).max() + 1e-12

    def test_modes_agree(self, model):
        rng = np.random.default_rng(15)
        batch = promising_batch(model, 3, rng)
        ga = qei_grad(model, batch)
        gt = qei_grad(model, batch, mode="tangent")
        assert np.abs(ga - gt).max() <= 1e-5 * np.abs(ga).max()

    def test_vanishes_far_from_improvement(self):
        # away from the data the posterior mean reverts to a trend many deviations above T
        m = build_model(Design([[0.0, 0.0], [0.05, 0.0]], [0.0, 0.1]), Kernel(1.0, [0.02, 0.02]),
                        trend=20.0)
        g = qei_grad(m, np.array([[0.9, 0.9], [0.7, 0.95]]))
        assert np.linalg.norm(g) < 1e-8

    def test_proxy_is_close_on_promising_batches(self, model):
        rng = np.random.default_rng(16)
        errors = []
        for _ in range(20):
            batch = promising_batch(model, 2, rng, spread=0.1)
            ga = qei_grad(model, batch)
            gp_ = qei_grad(model, batch, mode="proxy")
            errors.append(np.linalg.norm(gp_ - ga) / np.linalg.norm(ga))
        assert np.median(errors) < 0.1

    def test_alpha_two_gradient_rejected(self, model):
        with pytest.raises(ContractError):
            qei_value_and_grad(model, [[0.5, 0.5]], QeiConfig(alpha=2))


class TestNoisy:
    def test_vanishing_noise_matches_noiseless(self):
        rng = np.random.default_rng(17)
        x = rng.random((4, 2))
        y = branin_like(x)
        kern = Kernel(1.0, [0.3, 0.4])
        quiet = build_model(Design(x, y), kern)
        noisy = build_model(Design(x, y, np.full(4, 1e-10)), kern, trend=quiet.trend)
        for _ in range(3):
            batch = promising_batch(quiet, 2, rng, spread=0.3)
            assert qei(noisy, batch) == pytest.approx(qei(quiet, batch), abs=1e-6)

    def test_matches_simulation(self):
        rng = np.random.default_rng(18)
        m = build_model(Design(rng.random((3, 1)), rng.normal(size=3), [0.05] * 3), Kernel(1.0, [0.3]))
        batch = np.array([[0.15], [0.55]])
        est, se = qei_mc(m, batch, 1, 1_000_000, seed=3)
        assert abs(qei(m, batch) - est) <= 3 * se

    def test_gradient_against_finite_differences(self):
        rng = np.random.default_rng(19)
        m = build_model(Design(rng.random((3, 2)), rng.normal(size=3), [0.05] * 3), Kernel(1.0, [0.3, 0.5]))
        batch = rng.random((2, 2))
        for mode in ("analytic", "tangent"):
            cfg = QeiConfig(mode=mode)
            g = qei_value_and_grad(m, batch, cfg)[1]
            fd = fd_grad(lambda b: qei(m, b, config=cfg), batch)
            assert np.abs(g - fd).max() <= 1e-5 * np.abs(fd).max() + 1e-12

    def test_size_guard(self):
        rng = np.random.default_rng(20)
        m = build_model(Design(rng.random((22, 1)), rng.normal(size=22), [0.1] * 22), Kernel(1.0, [0.2]))
        with pytest.raises(ContractError):
            qei(m, rng.random((3, 1)))

    def test_proxy_rejected(self):
        m = build_model(Design([[0.1]], [0.0], [0.1]), Kernel(1.0, [0.2]))
        with pytest.raises(ContractError):
            qei_grad(m, [[0.5]], mode="proxy")


def test_zero_variance_simulation_is_exact(model):
    pts = model.design.points[:3]
    t = best_observed(model).value
    est, se = qei_mc(model, pts, 1, 2000)
    assert est == max(t - model.design.values[:3].min(), 0.0) and se == 0.0


def test_bad_mode():
    with pytest.raises(ContractError):
        QeiConfig(mode="exact")
