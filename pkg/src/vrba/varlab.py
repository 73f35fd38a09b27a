"""Numerical verification of the variational representations.

Checks, on concrete measures, that the soft-maximum functional approaches the
essential supremum, that the entropy-regularized dual attains it exactly at
the exponentially tilted optimizer, that the generalized dual with a convex
potential is minimized at zero shift under the normalization condition, and
that the quadratic-potential functional collapses to the standard deviation
as the temperature vanishes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .adaptive import Potential, get_potential


class NuSearchError(RuntimeError):
    """The shift search bracket did not contain the minimizer."""


class DomainError(ValueError):
    """Inverse-potential argument fell outside its domain."""


@dataclass
class DiscreteMeasure:
    atoms: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        self.atoms = np.asarray(self.atoms, dtype=np.float64)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if np.any(self.weights < 0):
            raise ValueError("weights must be nonnegative")
        total = self.weights.sum()
        if not math.isclose(total, 1.0, abs_tol=1e-9):
            raise ValueError("weights must sum to one")


@dataclass
class QuadratureRule:
    """Probability quadrature: weights sum to one over the domain."""

    nodes: np.ndarray
    weights: np.ndarray


def gauss_legendre_rule(a, b, nodes_per_unit=512) -> QuadratureRule:
    """Composite Gauss-Legendre rule normalized to a probability measure."""
    length = b - a
    panels = max(1, int(math.ceil(length * 8)))
    per_panel = max(4, int(round(nodes_per_unit * length / panels)))
    base_x, base_w = np.polynomial.legendre.leggauss(per_panel)
    edges = np.linspace(a, b, panels + 1)
    nodes, weights = [], []
    for lo, hi in zip(edges[:-1], edges[1:]):
        half = 0.5 * (hi - lo)
        nodes.append(half * base_x + 0.5 * (hi + lo))
        weights.append(half * base_w)
    nodes = np.concatenate(nodes)
    weights = np.concatenate(weights) / length
    return QuadratureRule(nodes=nodes, weights=weights)


def _support(measure):
    if isinstance(measure, (DiscreteMeasure,)):
        return measure.atoms, measure.weights
    return measure.nodes, measure.weights


def _evaluate(r, points):
    return r(points) if callable(r) else np.asarray(r, dtype=np.float64)


def laplace_functional(r, measure, epsilon) -> float:
    """epsilon * log integral of exp(r/epsilon), with max subtraction."""
    points, weights = _support(measure)
    vals = _evaluate(r, points)
    m = vals.max()
    scaled = np.exp((vals - m) / epsilon)
    return float(m + epsilon * math.log(np.dot(weights, scaled)))


def relative_entropy(q, p) -> float:
    """KL divergence between p.m.f.s on a shared support (0 log 0 = 0)."""
    q = np.asarray(q, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    mask = q > 0
    if np.any(p[mask] == 0):
        return float("inf")
    return float(np.sum(q[mask] * np.log(q[mask] / p[mask])))


def gibbs_check(r, p: DiscreteMeasure, n_perturb=1000, rng=None):
    """Entropy-regularized duality on a discrete measure.

    Returns (lhs, objective at the tilted optimizer, max objective over
    random p.m.f. perturbations) for lhs = log E_p[e^r] and objective
    q -> E_q[r] - KL(q | p).
    """
    rng = np.random.default_rng(0) if rng is None else rng
    vals = _evaluate(r, p.atoms)
    m = vals.max()
    z = np.dot(p.weights, np.exp(vals - m))
    lhs = float(m + math.log(z))
    q_star = p.weights * np.exp(vals - m) / z

    def objective(q):
        return float(np.dot(q, vals)) - relative_entropy(q, p.weights)

    at_qstar = objective(q_star)
    best = -math.inf
    n = len(vals)
    for _ in range(n_perturb):
        q = rng.dirichlet(np.ones(n))
        best = max(best, objective(q))
    return lhs, at_qstar, best


def golden_section(f, a, b, tol=1e-10, max_iter=500):
    """Minimize a unimodal function on [a, b]; returns (x_min, f(x_min))."""
    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    x1 = b - invphi * (b - a)
    x2 = a + invphi * (b - a)
    f1, f2 = f(x1), f(x2)
    it = 0
    while (b - a) > tol and it < max_iter:
        if f1 <= f2:
            b, x2, f2 = x2, x1, f1
            x1 = b - invphi * (b - a)
            f1 = f(x1)
        else:
            a, x1, f1 = x1, x2, f2
            x2 = a + invphi * (b - a)
            f2 = f(x2)
        it += 1
    x = 0.5 * (a + b)
    return x, f(x)


def generalized_gibbs_check(r, p: DiscreteMeasure, potential):
    """Convex-potential duality at the normalized optimum.

    The caller pre-scales ``r`` so that E_p[dphi(r)] = 1 (quadratic: divide
    by 2 E_p[r]; exponential: subtract log E_p[e^r]).  Returns
    (nu_star, lhs at nu_star, rhs at the candidate tilt q = dphi(r) p).
    """
    potential = get_potential(potential)
    vals = _evaluate(r, p.atoms)
    w = p.weights

    def objective(nu):
        return nu + float(np.dot(w, potential.phi(vals - nu)))

    lo, hi = float(vals.min()) - 1.0, float(vals.max()) + 1.0
    nu_star, lhs = golden_section(objective, lo, hi, tol=1e-10)
    margin = 1e-6 * (hi - lo)
    if nu_star - lo < margin or hi - nu_star < margin:
        raise NuSearchError(f"minimizer at bracket edge: nu={nu_star}")
    dq_dp = potential.dphi(vals)
    q = w * dq_dp
    rhs = float(np.dot(q, vals)) - float(np.dot(w, potential.conjugate(dq_dp)))
    return nu_star, lhs, rhs


@dataclass
class LambdaEpsSpec:
    potential: Potential
    epsilon: float
    nu_tol: float = 1e-10

    def __post_init__(self):
        self.potential = get_potential(self.potential)
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")


def lambda_eps(r, p, spec: LambdaEpsSpec) -> float:
    """Shift-minimized, inverse-transformed integrated potential.

    Formally inf_nu eps * phi_inv(nu/eps + E_p[phi((r - nu)/eps)]), searched
    by golden section over [min r - 1, max r + 1].  For the quadratic
    potential the inverse is only defined on [1, inf); values below that
    correspond to the constrained boundary where the functional is zero.
    """
    points, w = _support(p)
    vals = _evaluate(r, points)
    eps = spec.epsilon
    pot = spec.potential
    low = pot.inv_domain_low

    def objective(nu):
        inner = nu / eps + float(np.dot(w, pot.phi((vals - nu) / eps)))
        if inner < low:
            if pot.kind == "quadratic":
                inner = low
            else:
                raise DomainError(f"inverse-potential argument {inner} out of domain")
        return eps * float(pot.phi_inv(inner))

    lo, hi = float(vals.min()) - 1.0, float(vals.max()) + 1.0
    _, fmin = golden_section(objective, lo, hi, tol=spec.nu_tol)
    return fmin


def lambda_eps_quadratic_closed_form(r, p, epsilon) -> float:
    """Independent closed form sqrt(Var_p[r] + eps E_p[r] - eps^2/4).

    Derived by solving the inner shift minimization symbolically for the
    quadratic potential (optimal shift E_p[r] - eps/2); clamped at the
    domain boundary exactly like the search path.
    """
    points, w = _support(p)
    vals = _evaluate(r, points)
    mean = float(np.dot(w, vals))
    var = float(np.dot(w, (vals - mean) ** 2))
    inner = var + epsilon * mean - epsilon * epsilon / 4.0
    return math.sqrt(max(inner, 0.0))


# ---------------------------------------------------------------------------
# verification suite (the `verify` subcommand)
# ---------------------------------------------------------------------------

@dataclass
class CheckRow:
    name: str
    measured: float
    tolerance: float
    passed: bool

    def csv_row(self):
        return f"{self.name},{self.measured!r},{self.tolerance!r},{'pass' if self.passed else 'FAIL'}"


def _check(name, gap, tol):
    return CheckRow(name=name, measured=float(gap), tolerance=float(tol), passed=bool(gap <= tol))


def run_verification(rng=None):
    """All appendix-style checks; returns a list of CheckRow."""
    rng = np.random.default_rng(12345) if rng is None else rng
    rows = []

    # soft maximum of r(x) = x on [0, 1] under the uniform measure
    rule = gauss_legendre_rule(0.0, 1.0)
    closed = lambda e: 1.0 + e * math.log(e * (1.0 - math.exp(-1.0 / e)))
    prev = -math.inf
    for eps in (0.2, 0.1, 0.05, 0.01):
        val = laplace_functional(lambda x: x, rule, eps)
        rows.append(_check(f"laplace_closed_form_eps={eps}", abs(val - closed(eps)), 1e-9))
        rows.append(_check(f"laplace_increasing_eps={eps}", 0.0 if val > prev else 1.0, 0.5))
        rows.append(_check(f"laplace_below_sup_eps={eps}", 0.0 if val <= 1.0 else val - 1.0, 0.0))
        prev = val
    rows.append(_check("laplace_gap_to_sup_eps=0.01", 1.0 - prev, 0.05))

    # constant field: the functional equals the constant at every temperature
    const_rule = DiscreteMeasure(np.zeros(5), np.full(5, 0.2))
    for eps in (1.0, 0.1, 0.01):
        val = laplace_functional(lambda x: np.full_like(x, 2.5), const_rule, eps)
        rows.append(_check(f"laplace_constant_eps={eps}", abs(val - 2.5), 1e-12))

    # entropy duality: equality at the tilted optimizer, dominance elsewhere
    worst_eq = 0.0
    worst_dom = -math.inf
    for trial in range(12):
        n = int(rng.integers(2, 51))
        weights = rng.dirichlet(np.ones(n))
        vals = rng.normal(0.0, 1.5, size=n)
        lhs, at_qstar, best = gibbs_check(vals, DiscreteMeasure(np.arange(n), weights), rng=rng)
        worst_eq = max(worst_eq, abs(lhs - at_qstar))
        worst_dom = max(worst_dom, best - lhs)
    rows.append(_check("gibbs_equality_at_optimizer", worst_eq, 1e-12))
    rows.append(_check("gibbs_perturbation_dominance", max(worst_dom, 0.0), 1e-12))

    # generalized duality under the normalization condition
    worst_nu = 0.0
    worst_match = 0.0
    for trial in range(8):
        n = int(rng.integers(3, 40))
        weights = rng.dirichlet(np.ones(n))
        p = DiscreteMeasure(np.arange(n), weights)
        raw = rng.uniform(0.1, 2.0, size=n)
        scaled = raw / (2.0 * float(np.dot(weights, raw)))  # E[2r] = 1
        nu, lhs, rhs = generalized_gibbs_check(scaled, p, "quadratic")
        worst_nu = max(worst_nu, abs(nu))
        worst_match = max(worst_match, abs(lhs - rhs))
        shifted = raw - math.log(float(np.dot(weights, np.exp(raw))))  # E[e^r] = 1
        nu, lhs, rhs = generalized_gibbs_check(shifted, p, "exponential")
        worst_nu = max(worst_nu, abs(nu))
        worst_match = max(worst_match, abs(lhs - rhs))
    rows.append(_check("generalized_gibbs_nu_at_zero", worst_nu, 1e-6))
    rows.append(_check("generalized_gibbs_duality_match", worst_match, 1e-8))

    # quadratic functional: closed form agreement and the small-eps limit
    worst_cf = 0.0
    for trial in range(6):
        n = int(rng.integers(2, 30))
        weights = rng.dirichlet(np.ones(n))
        p = DiscreteMeasure(np.arange(n), weights)
        vals = rng.uniform(0.0, 2.0, size=n)
        for eps in (0.5, 0.1, 0.01, 0.001):
            got = lambda_eps(vals, p, LambdaEpsSpec("quadratic", eps))
            want = lambda_eps_quadratic_closed_form(vals, p, eps)
            worst_cf = max(worst_cf, abs(got - want))
    rows.append(_check("lambda_eps_matches_closed_form", worst_cf, 1e-9))

    two = DiscreteMeasure(np.array([0.0, 1.0]), np.array([0.5, 0.5]))
    vals = np.array([0.0, 2.0])
    got = lambda_eps(vals, two, LambdaEpsSpec("quadratic", 1e-3))
    std = math.sqrt(np.dot(two.weights, (vals - np.dot(two.weights, vals)) ** 2))
    rows.append(_check("lambda_eps_limit_is_std", abs(got - std), 1e-3))
    return rows
