"""First-order parameter updates and gradient-norm loss balancing."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .engine import NonFiniteError


@dataclass
class AdamState:
    """Adam moments plus a stepped learning-rate decay schedule."""

    m: np.ndarray
    v: np.ndarray
    beta1: float = 0.9
    beta2: float = 0.999
    eps_stab: float = 1e-8
    step_count: int = 0
    lr: float = 1e-3
    decay_rate: float = 0.9
    decay_step: int = 5000

    def current_lr(self):
        return self.lr * self.decay_rate ** (self.step_count // self.decay_step)


def init_adam(n_params, **kwargs) -> AdamState:
    return AdamState(m=np.zeros(n_params), v=np.zeros(n_params), **kwargs)


def adam_step(state: AdamState, params, grad):
    """Bias-corrected Adam update; returns (new params, new state)."""
    grad = np.asarray(grad, dtype=np.float64)
    if not np.all(np.isfinite(grad)):
        raise NonFiniteError("non-finite gradient passed to adam_step")
    if grad.shape != np.shape(params):
        raise ValueError("parameter/gradient length mismatch")
    lr_k = state.current_lr()
    t = state.step_count + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    new_params = params - lr_k * m_hat / (np.sqrt(v_hat) + state.eps_stab)
    return new_params, replace(state, m=m, v=v, step_count=t)


@dataclass
class GlobalWeights:
    """Per-term loss multipliers balanced by EMA'd gradient-norm ratios.

    ``m_E`` stays fixed; the other terms chase m_E * |grad L_E| / |grad L_a|
    through two nested EMAs (norms first, then the weight itself).
    """

    m_E: float = 1.0
    m_B: float = 1.0
    m_D: float = 1.0
    alpha_g: float = 0.99975
    gamma_g: float = 0.99
    norm_emas: dict = field(default_factory=dict)

    def weight(self, term):
        return {"E": self.m_E, "B": self.m_B, "D": self.m_D}[term]


def update_global_weights(gw: GlobalWeights, grad_norms) -> GlobalWeights:
    """Smooth the supplied norms, then pull m_B / m_D toward the ratio.

    ``grad_norms`` maps term labels ("E", "B", "D") to norm values; terms with
    zero smoothed norm are skipped this iteration.
    """
    emas = dict(gw.norm_emas)
    for term, norm in grad_norms.items():
        prev = emas.get(term, 0.0)
        emas[term] = gw.gamma_g * prev + (1.0 - gw.gamma_g) * float(norm)
    new = replace(gw, norm_emas=emas)
    n_e = emas.get("E", 0.0)
    if n_e <= 0.0:
        return new
    for term in ("B", "D"):
        if term not in grad_norms:
            continue
        n_t = emas.get(term, 0.0)
        if n_t <= 0.0:
            continue
        target = gw.m_E * n_e / n_t
        current = gw.weight(term)
        updated = gw.alpha_g * current + (1.0 - gw.alpha_g) * target
        if term == "B":
            new.m_B = updated
        else:
            new.m_D = updated
    return new
