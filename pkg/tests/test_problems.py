"""Problem-definition tests: residual operators, references, training loop."""

import math

import numpy as np
import pytest

from vrba import engine as eg
from vrba import models, problems
from vrba.config import parse_config


def fd_second(u_numeric, coords, dim, h=1e-4):
    """Central second difference along one coordinate of a callable."""
    e = np.zeros(coords.shape[1])
    e[dim] = h
    return (u_numeric(coords + e) - 2 * u_numeric(coords) + u_numeric(coords - e)) / h ** 2


def fd_first(u_numeric, coords, dim, h=1e-6):
    e = np.zeros(coords.shape[1])
    e[dim] = h
    return (u_numeric(coords + e) - u_numeric(coords - e)) / (2 * h)


class TestResidualFit:
    def test_exact_fit_zero(self):
        target = lambda x: np.sin(6 * math.pi * x)
        net = lambda cols: eg.sin(eg.mul(6 * math.pi, cols[0]))
        r = problems.residual_fit(net, np.linspace(0, 1, 7).reshape(-1, 1), target)
        np.testing.assert_allclose(r, 0.0, atol=1e-12)

    def test_zero_net_unit_value(self):
        target = lambda x: np.sin(6 * math.pi * x)
        net = lambda cols: eg.mul(0.0, cols[0])
        r = problems.residual_fit(net, np.array([[1.0 / 12.0]]), target)
        assert abs(r[0] - 1.0) < 1e-12

    def test_matches_direct_recomputation(self):
        cfg = models.MlpConfig([1, 8, 1])
        theta = models.init_params(cfg, 0)
        xs = np.linspace(0, 1, 11).reshape(-1, 1)
        target = lambda x: x ** 2
        net = models.network_fn(theta, cfg)
        got = problems.residual_fit(net, xs, target)
        want = np.abs(target(xs[:, 0]) - models.forward(theta, cfg, xs))
        np.testing.assert_allclose(got, want, atol=1e-12)


class TestResidualPoisson:
    def test_manufactured_solution(self):
        net = lambda cols: eg.sin(eg.mul(math.pi, cols[0]))
        r = problems.residual_poisson(net, np.linspace(-1, 1, 33))
        assert np.max(r) < 1e-9

    def test_zero_net_formula(self):
        net = lambda cols: eg.mul(0.0, cols[0])
        r = problems.residual_poisson(net, np.array([0.5]))
        assert abs(r[0] - math.pi ** 2) < 1e-12

    def test_against_fd_oracle(self):
        cfg = models.MlpConfig([1, 10, 10, 1])
        theta = models.init_params(cfg, 2)
        xs = np.linspace(-0.8, 0.8, 9).reshape(-1, 1)
        net = models.network_fn(theta, cfg)
        got = problems.residual_poisson(net, xs)
        u_num = lambda c: models.forward(theta, cfg, c)
        want = np.abs(fd_second(u_num, xs, 0) + math.pi ** 2 * np.sin(math.pi * xs[:, 0]))
        rel = np.linalg.norm(got - want) / np.linalg.norm(want)
        assert rel < 1e-4


class TestResidualBurgers:
    def test_trivial_constant_solution(self):
        net = lambda cols: eg.mul(0.0, cols[0])
        r = problems.residual_burgers(net, np.array([[0.5, 0.3], [0.1, -0.7]]))
        np.testing.assert_allclose(r, 0.0, atol=1e-14)

    def test_ansatz_initial_and_boundary(self):
        cfg = models.MlpConfig([2, 8, 1])
        theta = models.init_params(cfg, 1)
        u_fn = problems.burgers_ansatz(models.network_fn(theta, cfg))
        xs = np.linspace(-1, 1, 21)
        at_t0 = eg.value_of(u_fn([np.zeros_like(xs), xs]))
        np.testing.assert_array_equal(at_t0, -np.sin(math.pi * xs))
        ts = np.linspace(0, 1, 9)
        for edge in (-1.0, 1.0):
            vals = eg.value_of(u_fn([ts, np.full_like(ts, edge)]))
            np.testing.assert_allclose(vals, -np.sin(math.pi * edge), atol=1e-12)

    def test_against_fd_oracle(self):
        cfg = models.MlpConfig([2, 10, 10, 1])
        theta = models.init_params(cfg, 5)
        u_fn = problems.burgers_ansatz(models.network_fn(theta, cfg))
        pts = np.column_stack([np.linspace(0.2, 0.8, 7), np.linspace(-0.6, 0.6, 7)])
        got = problems.residual_burgers(u_fn, pts)

        def u_num(c):
            return eg.value_of(u_fn([c[:, 0], c[:, 1]]))

        u0 = u_num(pts)
        want = np.abs(fd_first(u_num, pts, 0) + u0 * fd_first(u_num, pts, 1)
                      - problems.BURGERS_NU * fd_second(u_num, pts, 1, h=1e-3))
        rel = np.linalg.norm(got - want) / np.linalg.norm(want)
        assert rel < 1e-3


class TestResidualAllenCahn:
    def test_equilibria(self):
        pts = np.array([[0.2, 0.1], [0.8, -0.4]])
        for const in (0.0, 1.0, -1.0):
            net = lambda cols: eg.add(eg.mul(0.0, cols[0]), const)
            r = problems.residual_allen_cahn(net, pts)
            np.testing.assert_allclose(r, 0.0, atol=1e-14)

    def test_against_fd_oracle(self):
        cfg = models.MlpConfig([2, 10, 1], embedding="periodic")
        theta = models.init_params(cfg, 7)
        net = models.network_fn(theta, cfg)
        pts = np.column_stack([np.linspace(0.1, 0.9, 6), np.linspace(-0.5, 0.5, 6)])
        got = problems.residual_allen_cahn(net, pts)

        def u_num(c):
            return models.forward(theta, cfg, c)

        u0 = u_num(pts)
        want = np.abs(fd_first(u_num, pts, 0) - problems.ALLEN_CAHN_K * fd_second(u_num, pts, 1, h=1e-3)
                      + 5.0 * u0 * (u0 ** 2 - 1.0))
        rel = np.linalg.norm(got - want) / np.linalg.norm(want)
        assert rel < 1e-3


class TestBurgersReference:
    def test_odd_symmetry_at_origin(self):
        for t in (0.1, 0.5, 1.0):
            assert problems.burgers_reference(t, 0.0) == 0.0

    def test_antisymmetric_in_x(self):
        v1 = problems.burgers_reference(0.37, 0.42)
        v2 = problems.burgers_reference(0.37, -0.42)
        assert abs(v1 + v2) < 1e-10

    def test_initial_condition_limit(self):
        for x in (0.1, 0.5, 0.9):
            v = problems.burgers_reference(1e-4, x)
            assert abs(v + math.sin(math.pi * x)) < 1e-4

    def test_grid_matches_pointwise_quadrature(self):
        ts = np.array([0.2, 0.9])
        xs = np.array([-0.7, 0.05, 0.6])
        grid = problems.burgers_reference_grid(ts, xs)
        for i, t in enumerate(ts):
            for j, x in enumerate(xs):
                assert abs(grid[i, j] - problems.burgers_reference(t, x)) < 1e-8

    def test_solves_pde_by_finite_differences(self):
        """The quadrature field satisfies the PDE away from the shock."""
        t, x = 0.4, 0.55
        ht, hx = 1e-4, 1e-3
        u = problems.burgers_reference
        u0 = u(t, x)
        u_t = (u(t + ht, x) - u(t - ht, x)) / (2 * ht)
        u_x = (u(t, x + hx) - u(t, x - hx)) / (2 * hx)
        u_xx = (u(t, x + hx) - 2 * u0 + u(t, x - hx)) / hx ** 2
        residual = abs(u_t + u0 * u_x - problems.BURGERS_NU * u_xx)
        assert residual < 1e-3

    def test_time_domain_validated(self):
        with pytest.raises(ValueError):
            problems.burgers_reference(0.0, 0.5)


class TestCollocation:
    def test_uniform_points_inside_bounds(self):
        rng = np.random.default_rng(0)
        bounds = np.array([[0.0, 1.0], [-1.0, 1.0]])
        pts = problems.uniform_points(bounds, 500, rng)
        assert pts.shape == (500, 2)
        assert np.all(pts[:, 0] >= 0) and np.all(pts[:, 0] <= 1)
        assert np.all(np.abs(pts[:, 1]) <= 1)


class TestTrainPinn:
    def test_baseline_matches_hand_rolled_loop(self):
        """Baseline mode reproduces a plain-MSE loop bit for bit."""
        from vrba import optim

        cfg = parse_config({"problem": "poisson", "mode": "baseline", "seed": 3,
                            "iters": 40, "log_every": 40, "n_collocation": 32})
        result = problems.train_pinn(cfg)

        problem = problems.get_problem("poisson")
        model_cfg = problem.default_model
        master = np.random.default_rng(3)
        seeds = master.integers(0, 2 ** 62, size=4)
        theta = models.init_params(model_cfg, int(seeds[0]))
        coll_rng = np.random.default_rng(int(seeds[1]))
        pts = problems.uniform_points(problem.bounds, 32, coll_rng)
        d_pts, d_targets = problem.extra_terms["D"]
        adam = optim.init_adam(theta.size, lr=cfg.lr, decay_rate=cfg.lr_decay_rate,
                               decay_step=cfg.lr_decay_step)
        gw = optim.GlobalWeights(m_E=cfg.m_E, alpha_g=cfg.alpha_g, gamma_g=cfg.gamma_g)
        for k in range(40):
            grads = {}
            for label, coords, targets in (("E", pts, None), ("D", d_pts, d_targets)):
                leaf = eg.Var(theta)
                net = models.network_fn(leaf, model_cfg)
                if label == "E":
                    expr = problems.poisson_residual_expr(net, coords)
                else:
                    expr = problems.fit_residual_expr(net, coords, targets)
                loss = eg.vmean(eg.square(expr))
                eg.backward(loss)
                grads[label] = leaf.grad
            gw = optim.update_global_weights(
                gw, {label: np.linalg.norm(g) for label, g in grads.items()})
            direction = gw.m_E * grads["E"] + gw.m_D * grads["D"]
            theta, adam = optim.adam_step(adam, theta, direction)
        np.testing.assert_array_equal(result.params, theta)

    def test_fixed_seed_stream_identical(self):
        cfg = parse_config({"problem": "poisson", "mode": "vrba_weighting", "seed": 5,
                            "iters": 60, "log_every": 20, "n_collocation": 32})
        a = problems.train_pinn(cfg)
        b = problems.train_pinn(cfg)
        assert [r.csv_row() for r in a.records] == [r.csv_row() for r in b.records]
        np.testing.assert_array_equal(a.params, b.params)

    def test_modes_run_and_log(self):
        for mode in ("vrba_weighting", "vrba_sampling"):
            cfg = parse_config({"problem": "poisson", "mode": mode, "potential": "quadratic",
                                "seed": 1, "iters": 25, "log_every": 25,
                                "n_collocation": 24})
            result = problems.train_pinn(cfg)
            rec = result.records[-1]
            assert rec.iteration == 25
            assert math.isfinite(rec.loss_E) and math.isfinite(rec.rel_l2)
            assert result.summary["final"]["rel_l2"] == rec.rel_l2

    def test_hybrid_mode_rejected(self):
        cfg = parse_config({"problem": "poisson", "mode": "vrba_hybrid", "seed": 0})
        with pytest.raises(ValueError):
            problems.train_pinn(cfg)

    def test_weighting_loss_estimator_consistency(self):
        """On a frozen network the weighted-loss estimator converges ~ n^(-1/2)."""
        cfg_m = models.MlpConfig([1, 8, 1])
        theta = models.init_params(cfg_m, 9)
        net = models.network_fn(theta, cfg_m)
        rng = np.random.default_rng(0)
        from vrba import varlab
        rule = varlab.gauss_legendre_rule(-1.0, 1.0)
        r_pop = problems.residual_poisson(net, rule.nodes.reshape(-1, 1))
        truth = float(np.dot(rule.weights, r_pop ** 2))
        ns = [100, 1000, 10_000, 100_000]
        trials = [200, 100, 40, 15]
        rmse = []
        for n, m in zip(ns, trials):
            errs = []
            for _ in range(m):
                xs = rng.uniform(-1, 1, size=n)
                r = problems.residual_poisson(net, xs.reshape(-1, 1))
                errs.append(np.mean(r ** 2) - truth)
            rmse.append(np.sqrt(np.mean(np.square(errs))))
        slope = np.polyfit(np.log(ns), np.log(rmse), 1)[0]
        assert abs(slope + 0.5) < 0.12
