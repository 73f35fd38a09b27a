"""Run configuration: defaults, JSON parsing and validation."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field, asdict


class ConfigError(ValueError):
    """Missing or unknown configuration key."""


class RangeError(ValueError):
    """Configuration value outside its allowed range."""


MODES = ("baseline", "vrba_weighting", "vrba_sampling", "vrba_hybrid")
POTENTIALS = ("exponential", "quadratic")

# mode-specific defaults (applied only where the user did not set a value)
_MODE_DEFAULTS = {
    "vrba_weighting": {"gamma": 0.999, "eta": 0.01, "phi": 0.8, "staged": True},
    "vrba_sampling": {"gamma": 0.9, "eta": 0.1, "phi": 0.9, "staged": False},
    "vrba_hybrid": {"gamma": 0.999, "eta": 0.01, "phi": 0.8, "staged": True},
}


@dataclass
class RunConfig:
    """Everything a training or verification run needs, JSON-serializable."""

    # run identity
    problem: str = ""
    mode: str = "baseline"
    potential: str = "exponential"
    seed: int = 0
    iters: int = 20_000
    out: str = ""
    log_every: int = 100
    timing: bool = False  # wall-clock fields break byte-level determinism

    # model (empty layer_widths -> problem default)
    layer_widths: list = field(default_factory=list)
    activation: str = "tanh"
    embedding: str = "none"
    embed_degree: int = 10

    # adaptive schedule
    gamma: float = 0.999
    eta: float = 0.01
    phi: float = 0.8
    c: float = 1.0
    lambda_max0: float = 10.0
    lambda_cap: float = 20.0
    n_stage: int = 50_000
    staged: bool = True
    resample_every: int = 100
    n_update: int = 100

    # optimizer
    lr: float = 1e-3
    lr_decay_rate: float = 0.9
    lr_decay_step: int = 5000
    beta1: float = 0.9
    beta2: float = 0.999
    eps_stab: float = 1e-8

    # loss balancing
    m_E: float = 1.0
    alpha_g: float = 0.99975
    gamma_g: float = 0.99

    # collocation / batching
    n_collocation: int = 256
    batch_size: int = 0  # 0 -> full batch

    # operator-learning dataset and batching
    n_func: int = 250
    n_sensor: int = 100
    n_grid: int = 100
    kernel_length: float = 0.4
    ramp_tau: float = 0.5
    t_final: float = 10.0
    b_u: int = 32
    latent_width: int = 40
    dataset: str = ""
    dataset_seed: int = 42
    check_pmfs: bool = False  # assert p.m.f. normalization at every logged step

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


_FIELDS = {f.name for f in RunConfig.__dataclass_fields__.values()}


def _validate(cfg: RunConfig) -> RunConfig:
    if cfg.mode not in MODES:
        raise RangeError(f"mode must be one of {MODES}, got '{cfg.mode}'")
    if cfg.potential not in POTENTIALS:
        raise RangeError(f"potential must be one of {POTENTIALS}, got '{cfg.potential}'")
    if not (0.0 <= cfg.gamma < 1.0):
        raise RangeError(f"gamma must lie in [0, 1), got {cfg.gamma}")
    if cfg.eta <= 0:
        raise RangeError(f"eta must be positive, got {cfg.eta}")
    if not (0.0 <= cfg.phi <= 1.0):
        raise RangeError(f"phi must lie in [0, 1], got {cfg.phi}")
    if cfg.c <= 0:
        raise RangeError(f"annealing constant c must be positive, got {cfg.c}")
    if cfg.lr <= 0:
        raise RangeError(f"lr must be positive, got {cfg.lr}")
    if not (0.0 < cfg.lr_decay_rate <= 1.0):
        raise RangeError(f"lr decay rate must lie in (0, 1], got {cfg.lr_decay_rate}")
    if cfg.lambda_max0 <= 0 or cfg.lambda_cap < cfg.lambda_max0:
        raise RangeError("need 0 < lambda_max0 <= lambda_cap")
    if cfg.iters < 0 or cfg.n_stage <= 0 or cfg.log_every <= 0:
        raise RangeError("iteration counts must be positive")
    if cfg.n_collocation <= 0:
        raise RangeError("n_collocation must be positive")
    return cfg


def parse_config(source=None, overrides=None) -> RunConfig:
    """Build a validated RunConfig from a JSON file/dict plus CLI overrides.

    Mode-specific defaults fill any schedule value the user left unset; the
    quadratic potential forces phi = 1.0 (no uniform smoothing).  Unknown
    keys raise :class:`ConfigError`.
    """
    data = {}
    if source is not None:
        if isinstance(source, (str, os.PathLike)):
            with open(source) as fh:
                data.update(json.load(fh))
        else:
            data.update(dict(source))
    if overrides:
        data.update({k: v for k, v in overrides.items() if v is not None})

    unknown = set(data) - _FIELDS
    if unknown:
        raise ConfigError(f"unknown configuration keys: {sorted(unknown)}")

    mode = data.get("mode", "baseline")
    merged = dict(_MODE_DEFAULTS.get(mode, {}))
    merged.update(data)
    cfg = RunConfig(**merged)
    if cfg.potential == "quadratic":
        cfg.phi = 1.0
    return _validate(cfg)


def require(cfg: RunConfig, *keys):
    """Raise ConfigError naming the first empty required key."""
    for key in keys:
        if not getattr(cfg, key):
            raise ConfigError(f"missing required configuration key: '{key}'")
    return cfg


def code_fingerprint():
    """Content hash of the installed package sources (run provenance)."""
    root = os.path.dirname(os.path.abspath(__file__))
    digest = hashlib.sha1()
    for name in sorted(os.listdir(root)):
        if name.endswith(".py"):
            with open(os.path.join(root, name), "rb") as fh:
                digest.update(name.encode())
                digest.update(fh.read())
    return digest.hexdigest()
