"""Adaptive weighting core: potentials, tilted distributions, multipliers.

A convex potential turns the current residual field into a tilted probability
mass function over the sample points.  Smoothed multipliers track that p.m.f.
through an exponential moving average and feed either a weighted loss
(importance weighting) or a resampling distribution (importance sampling).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import engine as eg


class DegenerateResiduals(ValueError):
    """All residuals vanished where a normalizable field was required."""


class Potential:
    """Convex, superlinear potential with derivative, inverse and conjugate."""

    def __init__(self, kind, phi, dphi, phi_inv, conjugate, inv_domain_low):
        self.kind = kind
        self.phi = phi
        self.dphi = dphi
        self.phi_inv = phi_inv
        self.conjugate = conjugate
        self.inv_domain_low = inv_domain_low

    def __repr__(self):
        return f"Potential({self.kind})"


EXPONENTIAL = Potential(
    "exponential",
    phi=np.exp,
    dphi=np.exp,
    phi_inv=np.log,
    conjugate=lambda s: np.where(s > 0, s * np.log(np.where(s > 0, s, 1.0)) - s, 0.0),
    inv_domain_low=0.0,
)

QUADRATIC = Potential(
    "quadratic",
    phi=lambda r: r * r + 1.0,
    dphi=lambda r: 2.0 * r,
    phi_inv=lambda y: np.sqrt(y - 1.0),
    conjugate=lambda s: s * s / 4.0 - 1.0,
    inv_domain_low=1.0,
)

_POTENTIALS = {"exponential": EXPONENTIAL, "quadratic": QUADRATIC}


def get_potential(name) -> Potential:
    if isinstance(name, Potential):
        return name
    try:
        return _POTENTIALS[name]
    except KeyError:
        raise ValueError(f"unknown potential '{name}'") from None


def tilted_pmf(residuals, potential, epsilon) -> np.ndarray:
    """p.m.f. proportional to dphi(r / epsilon).

    Exponential: softmax of r/epsilon with max subtraction.  Quadratic: the
    temperature cancels and the p.m.f. is r / sum(r); an all-zero residual
    field raises :class:`DegenerateResiduals` (callers substitute uniform).
    """
    r = np.asarray(residuals, dtype=np.float64)
    potential = get_potential(potential)
    if potential.kind == "exponential":
        z = r / float(epsilon)
        z = z - z.max()
        e = np.exp(z)
        return e / e.sum()
    total = r.sum()
    if total == 0.0:
        raise DegenerateResiduals("all residuals are zero under the quadratic potential")
    return r / total


def tilted_pmf_or_uniform(residuals, potential, epsilon) -> np.ndarray:
    try:
        return tilted_pmf(residuals, potential, epsilon)
    except DegenerateResiduals:
        n = len(np.asarray(residuals))
        return np.full(n, 1.0 / n)


@dataclass
class MultiplierState:
    """EMA-smoothed importance weights with the self-scaling schedule.

    With staging on, the decay rate is derived each iteration from the moving
    upper bound lambda_max = min(lambda_max0 + k/n_stage, lambda_cap) via
    gamma_k = 1 - eta/lambda_max; with staging off, ``gamma`` is fixed and the
    bound is eta/(1 - gamma).
    """

    lambdas: np.ndarray
    gamma: float = 0.999
    eta: float = 0.01
    phi_mix: float = 1.0
    lambda_max0: float = 10.0
    lambda_cap: float = 20.0
    n_stage: int = 50_000
    staged: bool = True

    def lambda_max(self, k):
        if self.staged:
            return min(self.lambda_max0 + k / self.n_stage, self.lambda_cap)
        return self.eta / (1.0 - self.gamma)

    def gamma_at(self, k):
        if self.staged:
            return 1.0 - self.eta / self.lambda_max(k)
        return self.gamma


def init_multipliers(n, **kwargs) -> MultiplierState:
    """Start at a tenth of the initial upper bound, strictly inside it."""
    state = MultiplierState(lambdas=np.empty(0), **kwargs)
    lam0 = 0.1 * (state.lambda_max0 if state.staged else state.eta / (1.0 - state.gamma))
    state.lambdas = np.full(n, lam0)
    return state


def update_multipliers(state: MultiplierState, q, k, indices=None) -> MultiplierState:
    """One EMA step lambda <- gamma_k lambda + eta* (phi q + (1 - phi) / N).

    The learning rate is renormalized each call as eta* = eta / max(q).  When
    ``indices`` is given, only those entries are rewritten (duplicates get the
    identical assignment) and the rest keep their stale values.
    """
    q = np.asarray(q, dtype=np.float64)
    gamma_k = state.gamma_at(k)
    qmax = q.max()
    eta_star = state.eta / qmax if qmax > 0 else state.eta
    n = q.size
    mix = state.phi_mix * q + (1.0 - state.phi_mix) / n
    lam = state.lambdas.copy()
    if indices is None:
        lam = gamma_k * lam + eta_star * mix
    else:
        lam[indices] = gamma_k * lam[indices] + eta_star * mix
    return replace(state, lambdas=lam)


@dataclass
class AnnealSchedule:
    """Temperature schedule for the tilted distribution.

    ``log_decay`` follows c * max(r) / log(2 + k); ``quadratic_normalizer``
    picks the constant that makes mean(dphi(r / eps)) = 1, i.e. 2 * mean(r)
    for the quadratic potential.  A vanished residual field keeps the
    previous temperature (stall guard).
    """

    kind: str = "log_decay"
    c: float = 1.0
    epsilon: float = 1.0

    def __post_init__(self):
        if self.kind not in ("log_decay", "quadratic_normalizer"):
            raise ValueError(f"unknown annealing schedule '{self.kind}'")


def anneal_epsilon(schedule: AnnealSchedule, k, residuals) -> float:
    r = np.asarray(residuals, dtype=np.float64)
    if r.size == 0:
        raise ValueError("residuals must be nonempty")
    if schedule.kind == "log_decay":
        m = r.max()
        if m <= 0.0:
            return schedule.epsilon
        eps = schedule.c * m / math.log(2.0 + k)
    else:
        mean = r.mean()
        if mean <= 0.0:
            return schedule.epsilon
        eps = 2.0 * mean
    schedule.epsilon = float(eps)
    return schedule.epsilon


def weighted_loss(residuals, lambdas):
    """(1/N) sum (lambda_i r_i)^2 with the weights held constant.

    Accepts a tape variable for ``residuals`` (gradients flow through the
    residuals only) or a plain array (returns a float).
    """
    lam = eg.value_of(lambdas)
    out = eg.vmean(eg.square(eg.mul(residuals, lam)))
    return out if isinstance(out, eg.Var) else float(out)


def resample_points(lambdas, batch, rng) -> np.ndarray:
    """Draw ``batch`` indices i.i.d. from the normalized weights."""
    lam = np.asarray(lambdas, dtype=np.float64)
    total = lam.sum()
    if total <= 0.0:
        raise ValueError("weights must have positive sum")
    return rng.choice(lam.size, size=batch, replace=True, p=lam / total)


def self_normalized_estimate(values, residuals, potential, epsilon) -> float:
    """Sum of tilted p.m.f. times values: biased but consistent for E_q."""
    probs = tilted_pmf(residuals, potential, epsilon)
    return float(np.dot(probs, np.asarray(values, dtype=np.float64)))
