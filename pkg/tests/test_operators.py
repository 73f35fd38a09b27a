"""Operator-learning tests: dataset physics, model algebra, training loop."""

import math

import numpy as np
import pytest
from scipy.interpolate import CubicSpline

from vrba import engine as eg
from vrba import operators as op
from vrba.config import parse_config


@pytest.fixture(scope="module")
def small_dataset():
    return op.generate_dataset(40, 50, 50, kernel_length=0.4, seed=11, t_final=10.0)


class TestOscillatorIntegration:
    def test_zero_forcing_zero_trajectory(self):
        t = np.linspace(0, 10, 101)
        traj = op.integrate_oscillator(lambda s: 0.0, op.OscillatorCoefficients(), t)
        np.testing.assert_array_equal(traj, 0.0)

    def test_constant_forcing_static_balance(self):
        """Strongly damped runs settle at -(forcing / rho) / stiffness."""
        coeffs = op.OscillatorCoefficients(damping=5.0, stiffness=4.0)
        force = 1.7
        traj = op.integrate_oscillator(lambda s: force, coeffs, np.linspace(0, 20, 201))
        assert abs(traj[-1] - (-force / coeffs.stiffness)) < 1e-6

    def test_step_halving_fourth_order(self):
        rng = np.random.default_rng(3)
        nodes = np.linspace(0, 10, 201)
        field = op.sample_gaussian_field(nodes, 0.4, rng)[0]
        spline = CubicSpline(nodes, field)
        forcing = lambda s: spline(s) * (1 - np.exp(-s / 0.5))
        t = np.linspace(0, 10, 101)
        coarse = op.integrate_oscillator(forcing, op.OscillatorCoefficients(), t, substeps=8)
        fine = op.integrate_oscillator(forcing, op.OscillatorCoefficients(), t, substeps=16)
        assert np.max(np.abs(coarse - fine)) < 1e-7


class TestGaussianField:
    def test_deterministic(self):
        nodes = np.linspace(0, 5, 64)
        a = op.sample_gaussian_field(nodes, 0.5, np.random.default_rng(1), 3)
        b = op.sample_gaussian_field(nodes, 0.5, np.random.default_rng(1), 3)
        np.testing.assert_array_equal(a, b)

    def test_marginal_variance_near_unit(self):
        nodes = np.linspace(0, 5, 32)
        draws = op.sample_gaussian_field(nodes, 0.5, np.random.default_rng(2), 4000)
        var = draws.var(axis=0)
        assert np.all(np.abs(var - 1.0) < 0.15)

    def test_kernel_error_surfaced(self):
        # duplicate nodes make the Gram singular; without jitter Cholesky fails
        with pytest.raises(op.KernelError):
            op.sample_gaussian_field(np.zeros(40), 1.0, np.random.default_rng(0), jitter=0.0)


class TestDatasetGeneration:
    def test_split_ratio(self, small_dataset):
        ds = small_dataset
        assert len(ds.splits["train"]) == 32
        assert len(ds.splits["val"]) == 4
        assert len(ds.splits["test"]) == 4
        joined = np.sort(np.concatenate([ds.splits[k] for k in ("train", "val", "test")]))
        np.testing.assert_array_equal(joined, np.arange(40))

    def test_roundtrip_bit_exact(self, small_dataset, tmp_path):
        path = tmp_path / "ds.bin"
        op.save_dataset(path, small_dataset)
        ds2 = op.load_dataset(path)
        np.testing.assert_array_equal(small_dataset.inputs, ds2.inputs)
        np.testing.assert_array_equal(small_dataset.outputs, ds2.outputs)
        np.testing.assert_array_equal(small_dataset.t_grid, ds2.t_grid)
        assert ds2.coeffs == small_dataset.coeffs
        for k in small_dataset.splits:
            np.testing.assert_array_equal(small_dataset.splits[k], ds2.splits[k])

    def test_ramp_starts_at_zero(self, small_dataset):
        np.testing.assert_allclose(small_dataset.inputs[:, 0], 0.0, atol=1e-12)
        np.testing.assert_allclose(small_dataset.outputs[:, 0], 0.0, atol=1e-12)


class TestDeepOnetAlgebra:
    def test_zero_branch_zero_output(self):
        model = op.default_operator_model(10, 8, hidden=6)
        params = model.init_params(0)
        nb = model._b_layout.n_params
        params[:nb] = 0.0  # zero branch -> zero features -> zero dot product
        pred = op.operator_predict(params, model, np.ones((3, 10)), np.linspace(0, 1, 5))
        np.testing.assert_allclose(pred, 0.0, atol=1e-14)

    def test_width_one_scalar_product(self):
        model = op.OperatorModel(
            branch=__import__("vrba.models", fromlist=["MlpConfig"]).MlpConfig([2, 3, 1]),
            trunk=__import__("vrba.models", fromlist=["MlpConfig"]).MlpConfig([1, 3, 1]),
        )
        params = model.init_params(3)
        iv = np.array([[0.4, -0.2]])
        y = np.array([0.6])
        nb = model._b_layout.n_params
        from vrba import models as m

        b_out = m.forward(params[:nb], model.branch, iv[0])
        t_out = m.forward(params[nb:], model.trunk, y)
        pred = op.operator_predict(params, model, iv, y)
        assert abs(pred[0, 0] - b_out * t_out) < 1e-12

    def test_feature_permutation_invariance(self):
        """Permuting the shared feature index in both nets leaves outputs unchanged."""
        model = op.default_operator_model(6, 5, hidden=4)
        params = model.init_params(1)
        iv = np.random.default_rng(0).normal(size=(2, 6))
        y = np.linspace(0, 1, 4)
        base = op.operator_predict(params, model, iv, y)

        perm = np.array([3, 0, 4, 1, 2])
        permuted = params.copy()
        for layout, offset, cfg in ((model._b_layout, 0, model.branch),
                                    (model._t_layout, model._b_layout.n_params, model.trunk)):
            last = layout.n_layers - 1
            a, b, shape = layout.slices[(last, "W")]
            w = permuted[offset + a: offset + b].reshape(shape)
            permuted[offset + a: offset + b] = w[:, perm].ravel()
            a, b, _ = layout.slices[(last, "b")]
            permuted[offset + a: offset + b] = permuted[offset + a: offset + b][perm]
        after = op.operator_predict(permuted, model, iv, y)
        np.testing.assert_allclose(after, base, atol=1e-12)

    def test_sensor_count_checked(self):
        model = op.default_operator_model(10, 8, hidden=6)
        params = model.init_params(0)
        with pytest.raises(eg.ShapeError):
            op.operator_predict(params, model, np.ones((2, 7)), np.array([0.1]))


class TestResidualMatrix:
    def test_exact_operator_zero_column(self, small_dataset):
        ds = small_dataset
        model = op.default_operator_model(ds.inputs.shape[1], 8, hidden=6)
        params = model.init_params(0)
        pred = op.operator_predict(params, model, ds.inputs[:3], ds.t_grid)
        R = op.operator_residual_matrix(params, model, ds.inputs[:3], pred, ds.t_grid)
        np.testing.assert_array_equal(R, 0.0)

    def test_constant_target_absolute_value(self):
        model = op.default_operator_model(4, 3, hidden=3)
        params = model.init_params(0)
        nb = model._b_layout.n_params
        params[:nb] = 0.0
        targets = np.full((2, 5), -1.3)
        R = op.operator_residual_matrix(params, model, np.ones((2, 4)), targets,
                                        np.linspace(0, 1, 5))
        np.testing.assert_allclose(R, 1.3, atol=1e-14)
        assert R.shape == (5, 2)

    def test_elementwise_recomputation(self, small_dataset):
        ds = small_dataset
        model = op.default_operator_model(ds.inputs.shape[1], 8, hidden=6)
        params = model.init_params(2)
        batch = ds.inputs[5:8]
        targets = ds.outputs[5:8]
        R = op.operator_residual_matrix(params, model, batch, targets, ds.t_grid)
        for j in range(3):
            col = op.operator_predict(params, model, batch[j], ds.t_grid)[0]
            np.testing.assert_allclose(R[:, j], np.abs(col - targets[j]), atol=1e-12)


class TestQAndLambdaMatrices:
    def test_constant_column_uniform(self):
        R = np.full((5, 3), 2.0)
        for pot in ("exponential", "quadratic"):
            Q = op.q_matrix_update(R, pot, 0.7)
            np.testing.assert_allclose(Q, 0.2, atol=1e-15)

    def test_columns_are_pmfs(self):
        rng = np.random.default_rng(0)
        R = rng.uniform(0, 3, size=(20, 7))
        for pot in ("exponential", "quadratic"):
            Q = op.q_matrix_update(R, pot, 0.5)
            np.testing.assert_allclose(Q.sum(axis=0), 1.0, atol=1e-12)
            assert np.all(Q >= 0)

    def test_quadratic_direct_normalization(self):
        Q = op.q_matrix_update(np.array([[1.0], [3.0]]), "quadratic", 1.0)
        np.testing.assert_allclose(Q[:, 0], [0.25, 0.75])

    def test_zero_column_uniform_substitute(self):
        R = np.zeros((4, 2))
        R[:, 1] = [1.0, 2.0, 3.0, 4.0]
        Q = op.q_matrix_update(R, "quadratic", 1.0)
        np.testing.assert_allclose(Q[:, 0], 0.25)
        np.testing.assert_allclose(Q[:, 1], R[:, 1] / 10.0)

    def test_lambda_update_normalizes_column_max(self):
        rng = np.random.default_rng(1)
        Q = rng.uniform(0.01, 1.0, size=(6, 4))
        lam = np.zeros((6, 4))
        out = op.lambda_matrix_update(lam, Q, gamma_k=0.0, eta=1.0, cols=np.arange(4))
        np.testing.assert_allclose(out.max(axis=0), 1.0, atol=1e-12)

    def test_stationary_fixed_point(self):
        Q = np.array([[0.3], [0.7]])
        lam = np.zeros((2, 1))
        for _ in range(3000):
            lam = op.lambda_matrix_update(lam, Q, gamma_k=0.9, eta=0.05, cols=[0])
        eta_star = 0.05 / 0.7
        np.testing.assert_allclose(lam[:, 0], eta_star * Q[:, 0] / 0.1, rtol=1e-10)

    def test_bound_over_random_batches(self):
        """Interval (0, eta/(1-gamma)) holds over random batch sequences."""
        rng = np.random.default_rng(2)
        n, nf = 10, 12
        gamma, eta = 0.99, 0.05
        lam = np.full((n, nf), 1e-4)
        bound = eta / (1.0 - gamma)
        for _ in range(1000):
            cols = rng.choice(nf, size=4, replace=False)
            R = rng.uniform(0, 2, size=(n, 4))
            Q = op.q_matrix_update(R, "exponential", 0.5)
            lam = op.lambda_matrix_update(lam, Q, gamma, eta, cols)
            assert np.all(lam > 0) and np.all(lam < bound)

    def test_stale_columns_untouched(self):
        lam = np.full((3, 5), 0.5)
        Q = np.full((3, 2), 1 / 3)
        out = op.lambda_matrix_update(lam, Q, 0.9, 0.1, cols=np.array([0, 3]))
        np.testing.assert_array_equal(out[:, [1, 2, 4]], 0.5)


class TestFunctionPmf:
    def test_uniform_weights_uniform_pmf(self):
        np.testing.assert_allclose(op.function_pmf(np.full((4, 5), 0.3)), 0.2)

    def test_ten_to_one_ratio(self):
        lam = np.ones((2, 3))
        lam[:, 0] = 10.0
        np.testing.assert_allclose(op.function_pmf(lam), [10 / 12, 1 / 12, 1 / 12])

    def test_sums_to_one(self):
        rng = np.random.default_rng(3)
        lam = rng.uniform(0, 2, size=(30, 17))
        assert abs(op.function_pmf(lam).sum() - 1.0) < 1e-12

    def test_all_zero_uniform(self):
        np.testing.assert_allclose(op.function_pmf(np.zeros((3, 4))), 0.25)


class TestTrainOperator:
    def test_baseline_is_plain_mse_descent(self, small_dataset):
        cfg = parse_config({"mode": "baseline", "seed": 0, "iters": 30,
                            "log_every": 30, "b_u": 8, "latent_width": 8})
        result = op.train_operator(small_dataset, cfg)
        assert math.isfinite(result.records[-1].loss_E)
        assert result.summary["final"]["test_rel_l2"] > 0

    def test_hybrid_runs_and_keeps_pmfs_exact(self, small_dataset):
        cfg = parse_config({"mode": "vrba_hybrid", "seed": 0, "iters": 60,
                            "log_every": 20, "b_u": 8, "latent_width": 8, "n_update": 10})
        result = op.train_operator(small_dataset, cfg)
        assert len(result.records) == 3

    def test_seeded_determinism(self, small_dataset):
        cfg = parse_config({"mode": "vrba_hybrid", "seed": 4, "iters": 40,
                            "log_every": 20, "b_u": 8, "latent_width": 8})
        a = op.train_operator(small_dataset, cfg)
        b = op.train_operator(small_dataset, cfg)
        assert [r.csv_row() for r in a.records] == [r.csv_row() for r in b.records]
        np.testing.assert_array_equal(a.params, b.params)

    def test_function_sampling_follows_pmf(self):
        """Frozen weights: batch frequencies converge to the aggregated p.m.f."""
        rng = np.random.default_rng(0)
        lam = rng.uniform(0.1, 1.0, size=(20, 6))
        q_bar = op.function_pmf(lam)
        draws = np.random.default_rng(1).choice(6, size=100_000, replace=True, p=q_bar)
        freq = np.bincount(draws, minlength=6) / 100_000
        chi2 = 100_000 * np.sum((freq - q_bar) ** 2 / q_bar)
        # chi-square with 5 dof: 99.9th percentile ~ 20.5
        assert chi2 < 20.5

    def test_prediction_shape_contract(self, small_dataset):
        ds = small_dataset
        cfg = parse_config({"mode": "baseline", "seed": 0, "iters": 5,
                            "log_every": 5, "b_u": 4, "latent_width": 8})
        result = op.train_operator(ds, cfg)
        pred = op.operator_predict(result.params, result.model, ds.inputs[:7], ds.t_grid)
        assert pred.shape == (7, ds.t_grid.size)


class TestOperatorCheckpoint:
    def test_roundtrip(self, small_dataset, tmp_path):
        model = op.default_operator_model(small_dataset.inputs.shape[1], 8, hidden=6)
        params = model.init_params(5)
        path = tmp_path / "op.txt"
        op.save_operator_checkpoint(path, params, model, 5)
        p2, model2, seed = op.load_operator_checkpoint(path)
        np.testing.assert_array_equal(params, p2)
        assert seed == 5
        assert model2.branch == model.branch and model2.trunk == model.trunk
