"""PINN problem definitions and the adaptive training loop.

Each problem supplies a signed residual expression builder (via the jet
machinery, so residual losses stay parameter-differentiable), optional
fit-style extra terms (boundary / initial data), an optional reference
solution for error norms, and a default architecture.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate

from . import adaptive, diagnostics, models, optim
from . import engine as eg
from .config import RunConfig, code_fingerprint
from .diagnostics import RunLogger, RunRecord

BURGERS_NU = 1.0 / (100.0 * math.pi)
ALLEN_CAHN_K = 1e-4


class QuadratureError(RuntimeError):
    """Reference-solution quadrature failed to reach its tolerance."""


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; carries the last diagnostic record."""

    def __init__(self, message, record=None):
        super().__init__(message)
        self.record = record


# ---------------------------------------------------------------------------
# residual operators
# ---------------------------------------------------------------------------

def fit_residual_expr(u_fn, coords, targets):
    """Signed data-mismatch residual u(x) - target(x)."""
    coords = np.atleast_2d(coords)
    cols = [coords[:, i] for i in range(coords.shape[1])]
    return eg.sub(u_fn(cols), np.asarray(targets, dtype=np.float64))


def residual_fit(u_fn, x, target_fn):
    """|target(x) - u(x)| for a fitting task."""
    coords = np.atleast_2d(np.asarray(x, dtype=np.float64))
    targets = target_fn(coords[:, 0]) if coords.shape[1] == 1 else target_fn(coords)
    expr = fit_residual_expr(u_fn, coords, targets)
    return np.abs(eg.value_of(expr))


def poisson_residual_expr(u_fn, coords):
    """Signed residual u_xx + pi^2 sin(pi x); zero at u = sin(pi x)."""
    coords = np.atleast_2d(coords)
    _, _, second = eg.input_derivatives(u_fn, coords, order=2)
    forcing = math.pi ** 2 * np.sin(math.pi * coords[:, 0])
    return eg.add(second[(0, 0)], forcing)


def residual_poisson(u_fn, x):
    coords = np.asarray(x, dtype=np.float64).reshape(-1, 1)
    return np.abs(eg.value_of(poisson_residual_expr(u_fn, coords)))


def burgers_residual_expr(u_fn, coords):
    """Signed residual u_t + u u_x - nu u_xx with nu = 1/(100 pi)."""
    coords = np.atleast_2d(coords)
    u, first, second = eg.input_derivatives(u_fn, coords, order=2, pairs=[(1, 1)])
    advect = eg.add(first[0], eg.mul(u, first[1]))
    return eg.sub(advect, eg.mul(BURGERS_NU, second[(1, 1)]))


def residual_burgers(u_fn, tx):
    coords = np.atleast_2d(np.asarray(tx, dtype=np.float64))
    return np.abs(eg.value_of(burgers_residual_expr(u_fn, coords)))


def allen_cahn_residual_expr(u_fn, coords):
    """Signed residual u_t - k u_xx + 5 u (u^2 - 1) with k = 1e-4."""
    coords = np.atleast_2d(coords)
    u, first, second = eg.input_derivatives(u_fn, coords, order=2, pairs=[(1, 1)])
    cubic = eg.mul(5.0, eg.mul(u, eg.sub(eg.mul(u, u), 1.0)))
    diffuse = eg.sub(first[0], eg.mul(ALLEN_CAHN_K, second[(1, 1)]))
    return eg.add(diffuse, cubic)


def residual_allen_cahn(u_fn, tx):
    coords = np.atleast_2d(np.asarray(tx, dtype=np.float64))
    return np.abs(eg.value_of(allen_cahn_residual_expr(u_fn, coords)))


def burgers_ansatz(net):
    """Hard-constraint wrapper (1 - x^2) t net(t, x) - sin(pi x).

    Satisfies u(0, x) = -sin(pi x) and u(t, +-1) = 0 exactly.
    """

    def u_fn(cols):
        t, x = cols
        shell = eg.mul(eg.sub(1.0, eg.mul(x, x)), t)
        return eg.sub(eg.mul(shell, net(cols)), eg.sin(eg.mul(math.pi, x)))

    return u_fn


# ---------------------------------------------------------------------------
# Cole-Hopf reference for the viscous Burgers problem
# ---------------------------------------------------------------------------

def _hopf_exponent(y):
    return -np.cos(math.pi * y) / (2.0 * math.pi * BURGERS_NU)


def burgers_reference(t, x, tol=1e-8):
    """Exact viscous Burgers solution at one point by adaptive quadrature.

    Evaluates the two Hopf integrals (numerator and denominator of the
    Cole-Hopf ratio) with the heat kernel substituted away; valid for
    t in (0, 1], x in [-1, 1], with the achieved tolerance checked against
    ``tol`` (raises :class:`QuadratureError` otherwise).
    """
    t = float(t)
    x = float(x)
    if not 0.0 < t <= 1.0:
        raise ValueError("reference defined for t in (0, 1]")
    c = 2.0 * math.sqrt(BURGERS_NU * t)
    zs = np.linspace(-8.0, 8.0, 257)
    scale = float(np.max(_hopf_exponent(x - c * zs) - zs * zs))

    def den_ig(z):
        return math.exp(_hopf_exponent(x - c * z) - z * z - scale)

    def num_ig(z):
        y = x - c * z
        return -math.sin(math.pi * y) * math.exp(_hopf_exponent(y) - z * z - scale)

    den, den_err = integrate.quad(den_ig, -np.inf, np.inf, epsabs=1e-14, epsrel=1e-12, limit=400)
    num, num_err = integrate.quad(num_ig, -np.inf, np.inf, epsabs=1e-14, epsrel=1e-12, limit=400)
    value = num / den
    achieved = (num_err + abs(value) * den_err) / den
    if not math.isfinite(value) or achieved > tol:
        raise QuadratureError(f"quadrature tolerance {achieved:.3e} exceeds {tol:.3e}")
    return value


def burgers_reference_grid(ts, xs, tol=1e-8):
    """Vectorized reference on a (t, x) grid via escalating Gauss-Hermite.

    Doubles the rule order until two consecutive orders agree to ``tol``;
    returns an array of shape (len(ts), len(xs)).
    """
    ts = np.asarray(ts, dtype=np.float64).ravel()
    xs = np.asarray(xs, dtype=np.float64).ravel()
    if np.any(ts <= 0.0):
        raise ValueError("reference defined for t > 0")
    c = 2.0 * np.sqrt(BURGERS_NU * ts)
    prev = None
    for order in (96, 192, 384):
        z, w = np.polynomial.hermite.hermgauss(order)
        y = xs[None, :, None] - c[:, None, None] * z[None, None, :]
        expo = _hopf_exponent(y)
        expo -= expo.max(axis=2, keepdims=True)
        g = np.exp(expo) * w[None, None, :]
        den = g.sum(axis=2)
        num = -(np.sin(math.pi * y) * g).sum(axis=2)
        u = num / den
        if prev is not None and float(np.max(np.abs(u - prev))) < tol:
            return u
        prev = u
    raise QuadratureError(f"Gauss-Hermite escalation did not reach tol={tol}")


# ---------------------------------------------------------------------------
# problem registry
# ---------------------------------------------------------------------------

def uniform_points(bounds, n, rng):
    """n i.i.d. points from the uniform base law on the box domain."""
    bounds = np.asarray(bounds, dtype=np.float64)
    return rng.uniform(bounds[:, 0], bounds[:, 1], size=(n, bounds.shape[0]))


@dataclass
class PinnProblem:
    name: str
    bounds: np.ndarray
    residual_expr: callable
    default_model: models.MlpConfig
    wrap_net: callable = None
    extra_terms: dict = field(default_factory=dict)  # label -> (points, targets)
    reference: callable = None  # vectorized on (N, d) -> (N,)

    @property
    def input_dim(self):
        return self.bounds.shape[0]

    def make_u_fn(self, params, model_cfg):
        net = models.network_fn(params, model_cfg)
        return self.wrap_net(net) if self.wrap_net is not None else net

    def predict(self, params, model_cfg, points):
        u_fn = self.make_u_fn(np.asarray(params, dtype=np.float64), model_cfg)
        points = np.atleast_2d(points)
        return eg.value_of(u_fn([points[:, i] for i in range(points.shape[1])]))


def _poisson_problem():
    boundary = np.array([[-1.0], [1.0]])
    return PinnProblem(
        name="poisson",
        bounds=np.array([[-1.0, 1.0]]),
        residual_expr=poisson_residual_expr,
        default_model=models.MlpConfig([1, 32, 32, 1]),
        extra_terms={"D": (boundary, np.zeros(2))},
        reference=lambda pts: np.sin(math.pi * np.atleast_2d(pts)[:, 0]),
    )


def _burgers_problem():
    return PinnProblem(
        name="burgers",
        bounds=np.array([[0.0, 1.0], [-1.0, 1.0]]),
        residual_expr=burgers_residual_expr,
        default_model=models.MlpConfig([2, 24, 24, 24, 1]),
        wrap_net=burgers_ansatz,
    )


def _allen_cahn_problem():
    xs = np.linspace(-1.0, 1.0, 128)
    ic_points = np.column_stack([np.zeros_like(xs), xs])
    ic_targets = xs ** 2 * np.cos(math.pi * xs)
    return PinnProblem(
        name="allen_cahn",
        bounds=np.array([[0.0, 1.0], [-1.0, 1.0]]),
        residual_expr=allen_cahn_residual_expr,
        default_model=models.MlpConfig([2, 32, 32, 1], embedding="periodic"),
        extra_terms={"B": (ic_points, ic_targets)},
    )


_PROBLEMS = {
    "poisson": _poisson_problem,
    "burgers": _burgers_problem,
    "allen_cahn": _allen_cahn_problem,
}


def get_problem(name) -> PinnProblem:
    try:
        return _PROBLEMS[name]()
    except KeyError:
        raise ValueError(f"unknown problem '{name}' (have {sorted(_PROBLEMS)})") from None


_EVAL_CACHE = {}


def evaluation_set(problem: PinnProblem):
    """(points, reference values) used for error norms, or (points, None)."""
    key = problem.name
    if key in _EVAL_CACHE:
        return _EVAL_CACHE[key]
    if problem.name == "poisson":
        xs = np.linspace(-1.0, 1.0, 513).reshape(-1, 1)
        result = (xs, problem.reference(xs))
    elif problem.name == "burgers":
        ts = np.linspace(0.04, 1.0, 25)
        xs = np.linspace(-1.0, 1.0, 101)
        grid = burgers_reference_grid(ts, xs)
        tt, xx = np.meshgrid(ts, xs, indexing="ij")
        pts = np.column_stack([tt.ravel(), xx.ravel()])
        result = (pts, grid.ravel())
    else:
        tt, xx = np.meshgrid(np.linspace(0.0, 1.0, 26), np.linspace(-1.0, 1.0, 65), indexing="ij")
        pts = np.column_stack([tt.ravel(), xx.ravel()])
        result = (pts, None)
    _EVAL_CACHE[key] = result
    return result


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    params: np.ndarray
    model_config: models.MlpConfig
    records: list
    summary: dict


class _TermState:
    """Per-loss-term bookkeeping: points, multipliers, temperature, batch."""

    def __init__(self, label, points, targets, cfg: RunConfig, potential):
        self.label = label
        self.points = points
        self.targets = targets
        n = points.shape[0]
        self.mult = adaptive.init_multipliers(
            n,
            gamma=cfg.gamma,
            eta=cfg.eta,
            phi_mix=cfg.phi,
            lambda_max0=cfg.lambda_max0,
            lambda_cap=cfg.lambda_cap,
            n_stage=cfg.n_stage,
            staged=cfg.staged,
        )
        kind = "log_decay" if potential.kind == "exponential" else "quadratic_normalizer"
        self.schedule = adaptive.AnnealSchedule(kind=kind, c=cfg.c)
        self.active = np.arange(n)

    def residual_expr(self, problem, u_fn):
        pts = self.points[self.active]
        if self.label == "E":
            return problem.residual_expr(u_fn, pts)
        return fit_residual_expr(u_fn, pts, self.targets[self.active])


def train_pinn(cfg: RunConfig, log_path=None) -> TrainResult:
    """Run the per-iteration scheme end to end and return the trace.

    Per iteration: staged multiplier bound and decay rate, optional
    resampling from the normalized weights, per-term residuals, tilted
    p.m.f., EMA multiplier update, loss assembly (weighted or plain),
    gradient-norm EMAs and global-weight update, then one Adam step.
    """
    if cfg.mode == "vrba_hybrid":
        raise ValueError("vrba_hybrid is an operator-learning mode; use train_operator")
    problem = get_problem(cfg.problem)
    model_cfg = (
        models.MlpConfig(cfg.layer_widths, cfg.activation, cfg.embedding, cfg.embed_degree)
        if cfg.layer_widths
        else problem.default_model
    )
    potential = adaptive.get_potential(cfg.potential)

    master = np.random.default_rng(cfg.seed)
    seeds = master.integers(0, 2 ** 62, size=4)
    params = models.init_params(model_cfg, int(seeds[0]))
    coll_rng = np.random.default_rng(int(seeds[1]))
    resample_rng = np.random.default_rng(int(seeds[2]))
    snr_rng = np.random.default_rng(int(seeds[3]))

    pts_e = uniform_points(problem.bounds, cfg.n_collocation, coll_rng)
    terms = {"E": _TermState("E", pts_e, None, cfg, potential)}
    for label, (pts, targets) in problem.extra_terms.items():
        terms[label] = _TermState(label, pts, np.asarray(targets, dtype=np.float64), cfg, potential)

    adam = optim.init_adam(
        params.size,
        beta1=cfg.beta1,
        beta2=cfg.beta2,
        eps_stab=cfg.eps_stab,
        lr=cfg.lr,
        decay_rate=cfg.lr_decay_rate,
        decay_step=cfg.lr_decay_step,
    )
    gweights = optim.GlobalWeights(m_E=cfg.m_E, alpha_g=cfg.alpha_g, gamma_g=cfg.gamma_g)

    eval_pts, eval_ref = evaluation_set(problem)
    adaptive_modes = ("vrba_weighting", "vrba_sampling")
    bs = cfg.batch_size if cfg.batch_size > 0 else None

    logger = RunLogger(log_path)
    t_start = time.perf_counter()
    last_record = None
    try:
        for k in range(cfg.iters):
            if cfg.mode == "vrba_sampling" and k % cfg.resample_every == 0:
                # only the interior collocation set is resampled; data terms
                # are tiny and always trained in full
                term_e = terms["E"]
                n_draw = bs if bs else term_e.points.shape[0]
                term_e.active = adaptive.resample_points(term_e.mult.lambdas, n_draw, resample_rng)

            grads, loss_values = {}, {}
            for label, term in terms.items():
                leaf = eg.Var(params)
                u_fn = problem.make_u_fn(leaf, model_cfg)
                expr = term.residual_expr(problem, u_fn)
                r_mag = np.abs(eg.value_of(expr))
                if cfg.mode in adaptive_modes:
                    eps = adaptive.anneal_epsilon(term.schedule, k, r_mag)
                    q = adaptive.tilted_pmf_or_uniform(r_mag, potential, eps)
                    if cfg.mode == "vrba_weighting":
                        term.mult = adaptive.update_multipliers(term.mult, q, k)
                        loss = adaptive.weighted_loss(expr, term.mult.lambdas)
                    else:
                        term.mult = adaptive.update_multipliers(term.mult, q, k, indices=term.active)
                        loss = eg.vmean(eg.square(expr))
                else:
                    loss = eg.vmean(eg.square(expr))
                eg.backward(loss)
                grads[label] = leaf.grad if leaf.grad is not None else np.zeros_like(params)
                loss_values[label] = float(eg.value_of(loss))

            total_loss = sum(
                gweights.weight(label) * loss_values[label] for label in terms
            )
            if not math.isfinite(total_loss):
                raise TrainingDiverged(
                    f"non-finite loss at iteration {k}", record=last_record
                )

            gweights = optim.update_global_weights(
                gweights, {label: np.linalg.norm(g) for label, g in grads.items()}
            )
            direction = np.zeros_like(params)
            for label, g in grads.items():
                direction += gweights.weight(label) * g
            params, adam = optim.adam_step(adam, params, direction)

            if (k + 1) % cfg.log_every == 0 or k + 1 == cfg.iters:
                last_record = _make_record(
                    k + 1, cfg, problem, model_cfg, params, terms, loss_values,
                    potential, eval_pts, eval_ref, snr_rng, t_start,
                )
                logger.log(last_record)
    finally:
        logger.close()

    summary = {
        "problem": cfg.problem,
        "mode": cfg.mode,
        "potential": cfg.potential,
        "seed": cfg.seed,
        "iters": cfg.iters,
        "final": {
            "loss_E": last_record.loss_E if last_record else float("nan"),
            "rel_l2": last_record.rel_l2 if last_record else float("nan"),
            "l_inf": last_record.l_inf if last_record else float("nan"),
            "variance": last_record.variance if last_record else float("nan"),
            "snr": last_record.snr if last_record else float("nan"),
        },
        "config": cfg.to_dict(),
        "code_version": code_fingerprint(),
    }
    if cfg.timing:
        summary["wall_time_s"] = time.perf_counter() - t_start
    return TrainResult(params=params, model_config=model_cfg, records=logger.records, summary=summary)


def _make_record(iteration, cfg, problem, model_cfg, params, terms, loss_values,
                 potential, eval_pts, eval_ref, snr_rng, t_start):
    rel_l2 = l_inf = float("nan")
    if eval_ref is not None:
        pred = problem.predict(params, model_cfg, eval_pts)
        rel_l2, l_inf = diagnostics.error_norms(pred, eval_ref)

    term_e = terms["E"]
    u_fn = problem.make_u_fn(params, model_cfg)
    if cfg.mode == "vrba_sampling":
        r_now = np.abs(eg.value_of(problem.residual_expr(u_fn, term_e.points[term_e.active])))
        variance = diagnostics.estimator_variance(r_now, None)
    else:
        r_now = np.abs(eg.value_of(problem.residual_expr(u_fn, term_e.points)))
        if cfg.mode == "vrba_weighting":
            lam = term_e.mult.lambdas
            tilt = lam / lam.sum() if lam.sum() > 0 else None
            variance = diagnostics.estimator_variance(r_now, tilt)
        else:
            variance = diagnostics.estimator_variance(r_now, None)

    snr_value = _measure_snr(cfg, problem, model_cfg, params, term_e, snr_rng)
    return RunRecord(
        iteration=iteration,
        loss_E=loss_values.get("E", 0.0),
        loss_B=loss_values.get("B", 0.0),
        loss_D=loss_values.get("D", 0.0),
        rel_l2=rel_l2,
        l_inf=l_inf,
        variance=variance,
        snr=snr_value,
        epsilon=term_e.schedule.epsilon,
        wall_ms=(time.perf_counter() - t_start) * 1e3 if cfg.timing else 0.0,
    )


_SNR_PARTITIONS = 8


def _measure_snr(cfg, problem, model_cfg, params, term_e, snr_rng):
    active = term_e.active
    n_use = len(active) - len(active) % _SNR_PARTITIONS
    if n_use < 2 * _SNR_PARTITIONS:
        return float("nan")
    chosen = snr_rng.permutation(active)[:n_use]
    scheme = diagnostics.make_partition(n_use, _SNR_PARTITIONS)
    lam = term_e.mult.lambdas if cfg.mode == "vrba_weighting" else None

    def block_loss(theta, idx):
        pts_idx = chosen[idx]
        u_fn = problem.make_u_fn(theta, model_cfg)
        expr = problem.residual_expr(u_fn, term_e.points[pts_idx])
        if lam is not None:
            return adaptive.weighted_loss(expr, lam[pts_idx])
        return eg.vmean(eg.square(expr))

    grads = diagnostics.partition_gradients(block_loss, params, scheme)
    return diagnostics.snr(grads)
