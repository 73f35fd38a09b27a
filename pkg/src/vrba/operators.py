"""Toy operator learning: forced-oscillator dataset and branch/trunk model.

The dataset maps a smooth random forcing (Gaussian random field times a ramp)
to the response of a damped linear second-order oscillator, integrated with a
fixed-step RK4 scheme.  The model is a branch/trunk pair whose dot product
evaluates the predicted response on the output grid.  Training follows the
hybrid scheme: importance weighting over the output grid, importance sampling
over the training functions.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, asdict

import numpy as np
from scipy.interpolate import CubicSpline

from . import adaptive, diagnostics, models, optim
from . import engine as eg
from .config import RunConfig, code_fingerprint
from .diagnostics import RunLogger, RunRecord


class KernelError(RuntimeError):
    """Covariance factorization failed even with jitter."""


@dataclass
class OscillatorCoefficients:
    """r'' + (damping / r0) r' + (stiffness / r0) r = -forcing / (rho r0)."""

    r0: float = 1.0
    damping: float = 0.5
    stiffness: float = 4.0
    rho: float = 1.0


@dataclass
class OperatorDataset:
    inputs: np.ndarray      # (n_func, n_sensor) forcing values
    outputs: np.ndarray     # (n_func, n_grid) response values
    t_sensor: np.ndarray
    t_grid: np.ndarray
    splits: dict            # name -> index array
    seed: int
    coeffs: OscillatorCoefficients
    kernel_length: float
    ramp_tau: float

    def subset(self, name):
        idx = self.splits[name]
        return self.inputs[idx], self.outputs[idx]


def squared_exponential_gram(ts, length, jitter=1e-10):
    """SE kernel Gram matrix with a diagonal jitter for SPD safety."""
    ts = np.asarray(ts, dtype=np.float64)
    diff = ts[:, None] - ts[None, :]
    gram = np.exp(-0.5 * (diff / length) ** 2)
    gram[np.diag_indices_from(gram)] += jitter
    return gram


def sample_gaussian_field(ts, length, rng, n_samples=1, jitter=1e-10):
    """Zero-mean GP draws on the nodes ``ts`` via Cholesky factorization."""
    gram = squared_exponential_gram(ts, length, jitter)
    try:
        chol = np.linalg.cholesky(gram)
    except np.linalg.LinAlgError as err:
        raise KernelError(f"covariance not SPD even with jitter: {err}") from err
    noise = rng.standard_normal((len(ts), n_samples))
    return (chol @ noise).T


def integrate_oscillator(forcing, coeffs: OscillatorCoefficients, t_grid, substeps=8):
    """Fixed-step RK4 for the damped driven oscillator, r(0) = r'(0) = 0.

    ``forcing`` is a callable of time; ``substeps`` RK4 steps are taken per
    output interval.
    """
    t_grid = np.asarray(t_grid, dtype=np.float64)
    c_damp = coeffs.damping / coeffs.r0
    c_stiff = coeffs.stiffness / coeffs.r0
    c_force = 1.0 / (coeffs.rho * coeffs.r0)

    def rhs(t, y):
        r, v = y
        return np.array([v, -c_force * forcing(t) - c_damp * v - c_stiff * r])

    out = np.zeros_like(t_grid)
    y = np.zeros(2)
    out[0] = y[0]
    for i in range(len(t_grid) - 1):
        t0, t1 = t_grid[i], t_grid[i + 1]
        h = (t1 - t0) / substeps
        t = t0
        for _ in range(substeps):
            k1 = rhs(t, y)
            k2 = rhs(t + 0.5 * h, y + 0.5 * h * k1)
            k3 = rhs(t + 0.5 * h, y + 0.5 * h * k2)
            k4 = rhs(t + h, y + h * k3)
            y = y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            t += h
        out[i + 1] = y[0]
    return out


def generate_dataset(n_func, n_sensor, n_grid, kernel_length, coeffs=None,
                     seed=0, t_final=10.0, ramp_tau=0.5, substeps=8) -> OperatorDataset:
    """Forcings from a GP times a smooth ramp; responses by RK4; 80:10:10 split."""
    coeffs = coeffs or OscillatorCoefficients()
    rng = np.random.default_rng(seed)
    t_sensor = np.linspace(0.0, t_final, n_sensor)
    t_grid = np.linspace(0.0, t_final, n_grid)
    t_nodes = np.linspace(0.0, t_final, max(201, 2 * n_sensor + 1))
    fields = sample_gaussian_field(t_nodes, kernel_length, rng, n_samples=n_func)

    inputs = np.zeros((n_func, n_sensor))
    outputs = np.zeros((n_func, n_grid))
    ramp = lambda t: 1.0 - np.exp(-t / ramp_tau)
    for j in range(n_func):
        spline = CubicSpline(t_nodes, fields[j])
        forcing = lambda t, s=spline: s(t) * ramp(t)
        inputs[j] = forcing(t_sensor)
        outputs[j] = integrate_oscillator(forcing, coeffs, t_grid, substeps=substeps)

    perm = rng.permutation(n_func)
    n_train = int(round(0.8 * n_func))
    n_val = int(round(0.1 * n_func))
    splits = {
        "train": np.sort(perm[:n_train]),
        "val": np.sort(perm[n_train:n_train + n_val]),
        "test": np.sort(perm[n_train + n_val:]),
    }
    return OperatorDataset(
        inputs=inputs, outputs=outputs, t_sensor=t_sensor, t_grid=t_grid,
        splits=splits, seed=seed, coeffs=coeffs,
        kernel_length=kernel_length, ramp_tau=ramp_tau,
    )


def save_dataset(path, ds: OperatorDataset):
    """One JSON header line, then raw little-endian float64 blobs in order."""
    arrays = [("inputs", ds.inputs), ("outputs", ds.outputs),
              ("t_sensor", ds.t_sensor), ("t_grid", ds.t_grid)]
    header = {
        "format": "vrba-operator-dataset-v1",
        "seed": ds.seed,
        "coeffs": asdict(ds.coeffs),
        "kernel_length": ds.kernel_length,
        "ramp_tau": ds.ramp_tau,
        "splits": {k: v.tolist() for k, v in ds.splits.items()},
        "arrays": [[name, list(arr.shape)] for name, arr in arrays],
    }
    with open(path, "wb") as fh:
        fh.write((json.dumps(header, sort_keys=True) + "\n").encode())
        for _, arr in arrays:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_dataset(path) -> OperatorDataset:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode())
        blob = fh.read()
    if header.get("format") != "vrba-operator-dataset-v1":
        raise ValueError("not an operator dataset file")
    arrays = {}
    offset = 0
    for name, shape in header["arrays"]:
        count = int(np.prod(shape))
        arrays[name] = np.frombuffer(blob, dtype="<f8", count=count, offset=offset).reshape(shape).copy()
        offset += count * 8
    return OperatorDataset(
        inputs=arrays["inputs"], outputs=arrays["outputs"],
        t_sensor=arrays["t_sensor"], t_grid=arrays["t_grid"],
        splits={k: np.asarray(v, dtype=np.intp) for k, v in header["splits"].items()},
        seed=header["seed"], coeffs=OscillatorCoefficients(**header["coeffs"]),
        kernel_length=header["kernel_length"], ramp_tau=header["ramp_tau"],
    )


# ---------------------------------------------------------------------------
# branch/trunk model
# ---------------------------------------------------------------------------

@dataclass
class OperatorModel:
    branch: models.MlpConfig
    trunk: models.MlpConfig
    y_range: tuple = None  # trunk coordinates mapped onto [-1, 1]

    def __post_init__(self):
        if self.branch.layer_widths[-1] != self.trunk.layer_widths[-1]:
            raise eg.ShapeError("branch and trunk feature widths differ")
        self._b_layout = models.layout_for(self.branch)
        self._t_layout = models.layout_for(self.trunk)
        self.n_params = self._b_layout.n_params + self._t_layout.n_params

    def normalize_y(self, y):
        if self.y_range is None:
            return y
        lo, hi = self.y_range
        return 2.0 * (y - lo) / (hi - lo) - 1.0

    def init_params(self, seed):
        rng_seed = np.random.default_rng(seed)
        sub = rng_seed.integers(0, 2 ** 62, size=2)
        return np.concatenate([
            models.init_params(self.branch, int(sub[0])),
            models.init_params(self.trunk, int(sub[1])),
        ])

    def split_params(self, params):
        nb = self._b_layout.n_params
        return eg.take_slice(params, 0, nb), eg.take_slice(params, nb, self.n_params)


def default_operator_model(n_sensor, latent, hidden=40, y_range=None) -> OperatorModel:
    return OperatorModel(
        branch=models.MlpConfig([n_sensor, hidden, hidden, latent], activation="gelu"),
        trunk=models.MlpConfig([1, hidden, hidden, latent], activation="gelu"),
        y_range=y_range,
    )


def _mlp_matrix(params, config: models.MlpConfig, x_matrix):
    """Dense forward on an (N, d) matrix (no jets)."""
    layers = models.layout_for(config).unpack(params)
    act = {"tanh": eg.tanh, "gelu": eg.gelu}[config.activation]
    if config.embedding == "none":
        h = x_matrix
    else:
        cols = [x_matrix[:, i] for i in range(x_matrix.shape[1])]
        h = eg.column_stack(models.embed_columns(cols, config))
    last = len(layers) - 1
    for k, (w, b) in enumerate(layers):
        h = eg.add(eg.matmul(h, w), b)
        if k != last:
            h = act(h)
    return h


def deeponet_forward(branch_params, trunk_params, model: OperatorModel, input_values, y):
    """Dot product of branch features and trunk features: (B, len(y)) output."""
    iv = np.atleast_2d(np.asarray(input_values, dtype=np.float64))
    if iv.shape[1] != model.branch.layer_widths[0]:
        raise eg.ShapeError(
            f"expected {model.branch.layer_widths[0]} sensor values, got {iv.shape[1]}"
        )
    y = model.normalize_y(np.asarray(y, dtype=np.float64)).reshape(-1, 1)
    bfeat = _mlp_matrix(branch_params, model.branch, iv)
    tfeat = _mlp_matrix(trunk_params, model.trunk, y)
    return eg.matmul(bfeat, eg.transpose(tfeat))


def operator_predict(params, model: OperatorModel, input_values, y):
    """Numeric prediction for a batch of input functions."""
    params = np.asarray(params, dtype=np.float64)
    nb = model._b_layout.n_params
    out = deeponet_forward(params[:nb], params[nb:], model, input_values, y)
    return eg.value_of(out)


def operator_residual_matrix(params, model: OperatorModel, inputs, targets, y):
    """R[i, j] = |prediction_j(x_i) - target_j(x_i)|, spatial rows."""
    pred = operator_predict(params, model, inputs, y)
    return np.abs(pred - np.asarray(targets, dtype=np.float64)).T


def q_matrix_update(R, potential, epsilon):
    """Columnwise tilted p.m.f.s of a residual matrix (N x b)."""
    R = np.asarray(R, dtype=np.float64)
    potential = adaptive.get_potential(potential)
    if potential.kind == "exponential":
        z = R / float(epsilon)
        z = z - z.max(axis=0, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=0, keepdims=True)
    sums = R.sum(axis=0, keepdims=True)
    q = np.empty_like(R)
    zero = sums[0] == 0.0
    q[:, ~zero] = R[:, ~zero] / sums[:, ~zero]
    q[:, zero] = 1.0 / R.shape[0]
    return q


def lambda_matrix_update(lam, Q, gamma_k, eta, cols, phi=1.0):
    """EMA on the batch columns with a per-function learning rate.

    eta*_j = eta / max_i Q[i, j]; stale (non-batch) columns are untouched.
    """
    Q = np.asarray(Q, dtype=np.float64)
    n = Q.shape[0]
    eta_star = eta / Q.max(axis=0, keepdims=True)
    mix = phi * Q + (1.0 - phi) / n
    out = lam.copy()
    out[:, cols] = gamma_k * lam[:, cols] + eta_star * mix
    return out


def function_pmf(lam):
    """Aggregate spatial weights per function and normalize to a p.m.f."""
    s = np.asarray(lam, dtype=np.float64).sum(axis=0)
    total = s.sum()
    if total <= 0.0:
        return np.full(s.size, 1.0 / s.size)
    return s / total


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class OperatorTrainResult:
    params: np.ndarray
    model: OperatorModel
    records: list
    summary: dict


def save_operator_checkpoint(path, params, model: OperatorModel, seed):
    """Same text format as MLP checkpoints, with both net configs in the header."""
    header = {
        "branch": model.branch.to_dict(),
        "trunk": model.trunk.to_dict(),
        "y_range": list(model.y_range) if model.y_range else None,
        "seed": seed,
        "n_params": int(np.asarray(params).size),
    }
    with open(path, "w") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for v in np.asarray(params, dtype=np.float64).ravel():
            fh.write(repr(float(v)) + "\n")


def load_operator_checkpoint(path):
    with open(path) as fh:
        header = json.loads(fh.readline())
        values = [float(line) for line in fh if line.strip()]
    params = np.asarray(values, dtype=np.float64)
    y_range = header.get("y_range")
    model = OperatorModel(
        branch=models.MlpConfig.from_dict(header["branch"]),
        trunk=models.MlpConfig.from_dict(header["trunk"]),
        y_range=tuple(y_range) if y_range else None,
    )
    return params, model, header["seed"]


def evaluate_operator(params, model: OperatorModel, ds: OperatorDataset, split="test"):
    """Mean relative L2 over the split's trajectories (plus per-function values)."""
    inputs, targets = ds.subset(split)
    pred = operator_predict(params, model, inputs, ds.t_grid)
    num = np.linalg.norm(pred - targets, axis=1)
    den = np.linalg.norm(targets, axis=1)
    per_func = num / np.where(den > 0, den, 1.0)
    return float(per_func.mean()), per_func


def train_operator(ds: OperatorDataset, cfg: RunConfig, log_path=None) -> OperatorTrainResult:
    """Hybrid adaptive training of the branch/trunk model (or plain baseline).

    Per iteration: staged bound and decay rate, sample a function batch from
    the aggregated-weight p.m.f., residual matrix, columnwise tilted p.m.f.,
    EMA weight update for the batch columns, weighted (or plain) loss, Adam
    step; the function p.m.f. refreshes every ``n_update`` iterations.
    """
    if cfg.mode not in ("baseline", "vrba_hybrid"):
        raise ValueError(f"operator training supports baseline/vrba_hybrid, got {cfg.mode}")
    model = default_operator_model(
        ds.inputs.shape[1], cfg.latent_width,
        y_range=(float(ds.t_grid[0]), float(ds.t_grid[-1])),
    )
    potential = adaptive.get_potential(cfg.potential)
    master = np.random.default_rng(cfg.seed)
    seeds = master.integers(0, 2 ** 62, size=3)
    params = model.init_params(int(seeds[0]))
    batch_rng = np.random.default_rng(int(seeds[1]))
    snr_rng = np.random.default_rng(int(seeds[2]))

    train_in, train_out = ds.subset("train")
    n_func = train_in.shape[0]
    n_pts = ds.t_grid.size
    b_u = min(cfg.b_u, n_func)

    schedule = adaptive.AnnealSchedule(
        kind="log_decay" if potential.kind == "exponential" else "quadratic_normalizer",
        c=cfg.c,
    )
    lam = np.full((n_pts, n_func), 0.1 * cfg.lambda_max0)
    q_bar = np.full(n_func, 1.0 / n_func)
    bound_state = adaptive.MultiplierState(
        lambdas=np.empty(0), gamma=cfg.gamma, eta=cfg.eta, phi_mix=cfg.phi,
        lambda_max0=cfg.lambda_max0, lambda_cap=cfg.lambda_cap,
        n_stage=cfg.n_stage, staged=cfg.staged,
    )

    adam = optim.init_adam(
        params.size, beta1=cfg.beta1, beta2=cfg.beta2, eps_stab=cfg.eps_stab,
        lr=cfg.lr, decay_rate=cfg.lr_decay_rate, decay_step=cfg.lr_decay_step,
    )
    hybrid = cfg.mode == "vrba_hybrid"
    y_cols = ds.t_grid

    logger = RunLogger(log_path)
    t_start = time.perf_counter()
    last_record = None
    pmf_max_gap = 0.0
    pmf_checks = 0
    q_mat = None
    try:
        for k in range(cfg.iters):
            gamma_k = bound_state.gamma_at(k)
            batch = batch_rng.choice(n_func, size=b_u, replace=True, p=q_bar)

            leaf = eg.Var(params)
            bp, tp = model.split_params(leaf)
            pred = deeponet_forward(bp, tp, model, train_in[batch], y_cols)
            signed = eg.sub(pred, train_out[batch])  # (b_u, n_pts)
            r_mat = np.abs(eg.value_of(signed)).T    # (n_pts, b_u)

            if hybrid:
                eps = adaptive.anneal_epsilon(schedule, k, r_mat)
                q_mat = q_matrix_update(r_mat, potential, eps)
                lam = lambda_matrix_update(lam, q_mat, gamma_k, cfg.eta, batch, phi=cfg.phi)
                loss = eg.vmean(eg.square(eg.mul(signed, lam[:, batch].T)))
            else:
                loss = eg.vmean(eg.square(signed))
            loss_value = float(eg.value_of(loss))
            if not math.isfinite(loss_value):
                raise RuntimeError(f"non-finite operator loss at iteration {k}")
            eg.backward(loss)
            grad = leaf.grad if leaf.grad is not None else np.zeros_like(params)
            params, adam = optim.adam_step(adam, params, grad)

            if hybrid and (k + 1) % cfg.n_update == 0:
                q_bar = function_pmf(lam)

            if (k + 1) % cfg.log_every == 0 or k + 1 == cfg.iters:
                if cfg.check_pmfs and hybrid and q_mat is not None:
                    gap = max(
                        float(np.max(np.abs(q_mat.sum(axis=0) - 1.0))),
                        float(abs(q_bar.sum() - 1.0)),
                    )
                    pmf_max_gap = max(pmf_max_gap, gap)
                    pmf_checks += 1
                    if gap > 1e-12:
                        raise RuntimeError(f"p.m.f. normalization gap {gap:.3e} at iteration {k + 1}")
                rel_l2, _ = evaluate_operator(params, model, ds, "val")
                flat_r = r_mat.ravel()
                if hybrid:
                    lam_b = lam[:, batch].ravel()
                    tilt = lam_b / lam_b.sum() if lam_b.sum() > 0 else None
                    variance = diagnostics.estimator_variance(flat_r, tilt)
                else:
                    variance = diagnostics.estimator_variance(flat_r, None)
                snr_value = _operator_snr(params, model, train_in, train_out, y_cols,
                                          lam if hybrid else None, batch, snr_rng)
                last_record = RunRecord(
                    iteration=k + 1,
                    loss_E=loss_value,
                    rel_l2=rel_l2,
                    l_inf=float(np.max(flat_r)),
                    variance=variance,
                    snr=snr_value,
                    epsilon=schedule.epsilon,
                    wall_ms=(time.perf_counter() - t_start) * 1e3 if cfg.timing else 0.0,
                )
                logger.log(last_record)
    finally:
        logger.close()

    test_rel_l2, per_func = evaluate_operator(params, model, ds, "test")
    summary = {
        "mode": cfg.mode,
        "potential": cfg.potential,
        "seed": cfg.seed,
        "iters": cfg.iters,
        "final": {
            "loss": last_record.loss_E if last_record else float("nan"),
            "val_rel_l2": last_record.rel_l2 if last_record else float("nan"),
            "test_rel_l2": test_rel_l2,
            "variance": last_record.variance if last_record else float("nan"),
        },
        "config": cfg.to_dict(),
        "code_version": code_fingerprint(),
    }
    if cfg.check_pmfs:
        summary["pmf_checks"] = {"count": pmf_checks, "max_gap": pmf_max_gap}
    if cfg.timing:
        summary["wall_time_s"] = time.perf_counter() - t_start
    return OperatorTrainResult(params=params, model=model, records=logger.records, summary=summary)


_SNR_PARTITIONS = 8


def _operator_snr(params, model, train_in, train_out, y_cols, lam, batch, snr_rng):
    b = _SNR_PARTITIONS
    if len(batch) < b:
        return float("nan")
    n_use = len(batch) - len(batch) % b
    chosen = snr_rng.permutation(batch)[:n_use]
    scheme = diagnostics.make_partition(n_use, b)

    def block_loss(theta, idx):
        funcs = chosen[idx]
        bp, tp = model.split_params(theta)
        pred = deeponet_forward(bp, tp, model, train_in[funcs], y_cols)
        signed = eg.sub(pred, train_out[funcs])
        if lam is not None:
            return eg.vmean(eg.square(eg.mul(signed, lam[:, funcs].T)))
        return eg.vmean(eg.square(signed))

    grads = diagnostics.partition_gradients(block_loss, params, scheme)
    return diagnostics.snr(grads)
