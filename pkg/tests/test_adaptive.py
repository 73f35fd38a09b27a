"""Adaptive-weighting tests: tilted p.m.f.s, multipliers, annealing, estimators."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vrba import adaptive as ad
from vrba import engine as eg
from vrba import varlab


class TestTiltedPmf:
    def test_constant_residuals_uniform(self):
        r = np.full(4, 3.3)
        for pot in ("exponential", "quadratic"):
            np.testing.assert_allclose(ad.tilted_pmf(r, pot, 0.7), 0.25, atol=1e-15)

    def test_quadratic_direct_normalization(self):
        np.testing.assert_allclose(ad.tilted_pmf([1.0, 3.0], "quadratic", 1.0), [0.25, 0.75])

    def test_exponential_two_atom(self):
        got = ad.tilted_pmf([0.0, math.log(2.0)], "exponential", 1.0)
        np.testing.assert_allclose(got, [1.0 / 3.0, 2.0 / 3.0], atol=1e-15)

    def test_quadratic_all_zero_raises(self):
        with pytest.raises(ad.DegenerateResiduals):
            ad.tilted_pmf(np.zeros(5), "quadratic", 1.0)
        np.testing.assert_allclose(
            ad.tilted_pmf_or_uniform(np.zeros(5), "quadratic", 1.0), 0.2)

    def test_quadratic_epsilon_invariant(self):
        r = np.array([0.2, 1.4, 0.9])
        a = ad.tilted_pmf(r, "quadratic", 0.01)
        b = ad.tilted_pmf(r, "quadratic", 100.0)
        np.testing.assert_array_equal(a, b)

    def test_exponential_temperature_limits(self):
        rng = np.random.default_rng(0)
        r = rng.uniform(0, 1, size=50)
        r[17] = 2.0  # unique max
        hot = ad.tilted_pmf(r, "exponential", 1e4)
        np.testing.assert_allclose(hot, 1.0 / 50, rtol=1e-3)
        cold = ad.tilted_pmf(r, "exponential", 1e-3)
        assert cold[17] > 0.999

    def test_overflow_safe(self):
        p = ad.tilted_pmf(np.array([0.0, 1e6]), "exponential", 1.0)
        assert np.isfinite(p).all() and abs(p.sum() - 1.0) < 1e-12

    @given(st.lists(st.floats(0.0, 100.0), min_size=2, max_size=40).filter(lambda v: sum(v) > 0))
    @settings(max_examples=60, deadline=None)
    def test_pmf_properties(self, values):
        r = np.asarray(values)
        for pot in ("exponential", "quadratic"):
            p = ad.tilted_pmf(r, pot, 0.5)
            assert abs(p.sum() - 1.0) < 1e-12
            assert np.all(p >= 0)
            # permutation equivariance
            perm = np.argsort(r)
            np.testing.assert_allclose(ad.tilted_pmf(r[perm], pot, 0.5), p[perm], atol=1e-12)


class TestMultipliers:
    def test_memoryless_copies_pmf(self):
        state = ad.MultiplierState(lambdas=np.zeros(3), gamma=0.0, eta=1.0,
                                   phi_mix=1.0, staged=False)
        q = np.array([0.2, 0.5, 0.3])
        out = ad.update_multipliers(state, q, k=0)
        np.testing.assert_allclose(out.lambdas, q / q.max())

    def test_constant_pmf_fixed_point(self):
        q = np.array([0.1, 0.6, 0.3])
        state = ad.MultiplierState(lambdas=np.zeros(3), gamma=0.9, eta=0.05,
                                   phi_mix=1.0, staged=False)
        for k in range(4000):
            state = ad.update_multipliers(state, q, k)
        eta_star = 0.05 / q.max()
        np.testing.assert_allclose(state.lambdas, eta_star * q / 0.1, rtol=1e-10)

    def test_paper_interval_bound(self):
        """Random p.m.f. trajectories keep every weight inside (0, eta/(1-gamma))."""
        rng = np.random.default_rng(7)
        n_traj, n_pts = 500, 8
        state = ad.MultiplierState(lambdas=np.full((n_traj, n_pts), 1e-3),
                                   gamma=0.999, eta=0.01, phi_mix=1.0, staged=False)
        lam = state.lambdas
        bound = 0.01 / (1.0 - 0.999)
        for k in range(200):
            q = rng.dirichlet(np.ones(n_pts), size=n_traj)
            eta_star = 0.01 / q.max(axis=1, keepdims=True)
            lam = 0.999 * lam + eta_star * q
            assert np.all(lam > 0) and np.all(lam < bound)

    def test_staged_bound_tracks_lambda_max(self):
        state = ad.init_multipliers(4, gamma=0.999, eta=0.01, phi_mix=1.0,
                                    lambda_max0=10.0, lambda_cap=20.0,
                                    n_stage=100, staged=True)
        assert state.lambda_max(0) == 10.0
        assert state.lambda_max(500) == 15.0
        assert state.lambda_max(10_000) == 20.0
        assert abs(state.gamma_at(0) - 0.999) < 1e-12

    def test_partial_update_leaves_stale_entries(self):
        state = ad.init_multipliers(6, staged=True)
        before = state.lambdas.copy()
        q = np.array([0.5, 0.5])
        out = ad.update_multipliers(state, q, 0, indices=np.array([1, 4]))
        np.testing.assert_array_equal(out.lambdas[[0, 2, 3, 5]], before[[0, 2, 3, 5]])
        assert not np.array_equal(out.lambdas[[1, 4]], before[[1, 4]])


class TestAnnealing:
    def test_log_decay_value(self):
        sched = ad.AnnealSchedule(kind="log_decay", c=1.0)
        eps = ad.anneal_epsilon(sched, 0, np.array([0.5, 2.0]))
        assert abs(eps - 2.0 / math.log(2.0)) < 1e-12

    def test_log_decay_monotone(self):
        sched = ad.AnnealSchedule(kind="log_decay", c=0.5)
        r = np.array([1.0, 1.5])
        values = [ad.anneal_epsilon(sched, k, r) for k in range(30)]
        assert all(a > b for a, b in zip(values, values[1:]))

    def test_stall_guard(self):
        sched = ad.AnnealSchedule(kind="log_decay", c=1.0, epsilon=0.77)
        assert ad.anneal_epsilon(sched, 5, np.zeros(4)) == 0.77

    def test_quadratic_normalizer(self):
        """eps = 2 mean(r) makes mean(2 r / eps) = 1."""
        sched = ad.AnnealSchedule(kind="quadratic_normalizer")
        r = np.array([1.0, 3.0])
        eps = ad.anneal_epsilon(sched, 0, r)
        assert eps == 4.0
        assert abs(np.mean(2.0 * r / eps) - 1.0) < 1e-15


class TestWeightedLoss:
    def test_hand_value(self):
        assert ad.weighted_loss(np.array([1.0, 2.0]), np.array([1.0, 1.0])) == 2.5

    def test_zero_weights_annihilate(self):
        assert ad.weighted_loss(np.array([5.0, -3.0]), np.zeros(2)) == 0.0

    def test_unit_weights_reduce_to_mse_bitwise(self):
        rng = np.random.default_rng(3)
        r = rng.normal(size=64)
        assert ad.weighted_loss(r, np.ones(64)) == float(np.mean(r ** 2))

    def test_gradient_only_through_residuals(self):
        r = eg.Var(np.array([1.0, -2.0]))
        lam = np.array([2.0, 3.0])
        loss = ad.weighted_loss(r, lam)
        eg.backward(loss)
        np.testing.assert_allclose(r.grad, lam ** 2 * r.value, atol=1e-15)


class TestResampling:
    def test_one_hot_degenerate(self):
        rng = np.random.default_rng(0)
        lam = np.zeros(10)
        lam[3] = 2.0
        idx = ad.resample_points(lam, 50, rng)
        assert np.all(idx == 3)

    def test_uniform_frequencies(self):
        rng = np.random.default_rng(1)
        n, b = 100, 100_000
        idx = ad.resample_points(np.ones(n), b, rng)
        freq = np.bincount(idx, minlength=n) / b
        se = math.sqrt(0.01 * 0.99 / b)
        assert np.all(np.abs(freq - 0.01) < 4 * se)

    def test_one_three_ratio(self):
        rng = np.random.default_rng(2)
        idx = ad.resample_points(np.array([1.0, 3.0]), 100_000, rng)
        frac = np.mean(idx == 1)
        assert abs(frac - 0.75) < 4 * math.sqrt(0.75 * 0.25 / 100_000)

    def test_deterministic_under_seed(self):
        lam = np.array([0.3, 0.5, 0.2])
        a = ad.resample_points(lam, 20, np.random.default_rng(5))
        b = ad.resample_points(lam, 20, np.random.default_rng(5))
        np.testing.assert_array_equal(a, b)


class TestSelfNormalizedEstimate:
    def test_constant_values_exact(self):
        r = np.array([0.1, 0.9, 0.4])
        assert abs(ad.self_normalized_estimate(np.full(3, 2.2), r, "exponential", 0.5) - 2.2) < 1e-14

    def test_two_atom_hand_value(self):
        v = np.array([0.0, math.log(2.0)])
        got = ad.self_normalized_estimate(v, v, "exponential", 1.0)
        assert abs(got - (2.0 / 3.0) * math.log(2.0)) < 1e-14

    def test_monte_carlo_rate(self):
        """RMSE against dense-quadrature truth decays like n^(-1/2)."""
        rng = np.random.default_rng(11)
        field = lambda x: np.exp(np.sin(3.0 * x))
        eps = 0.5
        rule = varlab.gauss_legendre_rule(0.0, 1.0)
        r_quad = field(rule.nodes)
        weights = rule.weights * np.exp(r_quad / eps)
        truth = float(np.dot(weights, r_quad) / weights.sum())

        ns = [100, 1000, 10_000, 100_000]
        trials = [400, 200, 60, 20]
        rmse = []
        for n, m in zip(ns, trials):
            errs = np.empty(m)
            for t in range(m):
                xs = rng.uniform(0.0, 1.0, size=n)
                r = field(xs)
                errs[t] = ad.self_normalized_estimate(r, r, "exponential", eps) - truth
            rmse.append(math.sqrt(np.mean(errs ** 2)))
        slope = np.polyfit(np.log(ns), np.log(rmse), 1)[0]
        assert abs(slope + 0.5) < 0.1


class TestVarianceReductionDesignedCase:
    def test_quadratic_tilt_flattens_spike(self):
        """Sharp-peak residual: reweighted integrand has lower variance."""
        from vrba.diagnostics import estimator_variance

        n = 1000
        r = np.zeros(n)
        r[123] = 1.0
        tilt = ad.tilted_pmf(r, "quadratic", 1.0)
        assert estimator_variance(r, tilt) < estimator_variance(r, None)
