"""Representation models: MLPs with optional Fourier/periodic input features.

The forward pass is written against the generic engine functions, so the same
code evaluates plain numpy batches, tape variables (for parameter gradients)
and jets (for input derivatives).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from . import engine as eg
from .engine import ShapeError

_ACTIVATIONS = {"tanh": eg.tanh, "gelu": eg.gelu}


@dataclass
class MlpConfig:
    """Architecture description.

    ``layer_widths[0]`` is the raw input dimension; the embedding (applied to
    the last input coordinate) widens the first weight matrix internally.
    """

    layer_widths: list
    activation: str = "tanh"
    embedding: str = "none"  # none | fourier | periodic
    embed_degree: int = 10

    def __post_init__(self):
        if len(self.layer_widths) < 3:
            raise ValueError("need at least one hidden layer")
        if any(int(w) <= 0 for w in self.layer_widths):
            raise ValueError("layer widths must be positive")
        self.layer_widths = [int(w) for w in self.layer_widths]
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation '{self.activation}'")
        if self.embedding not in ("none", "fourier", "periodic"):
            raise ValueError(f"unknown embedding '{self.embedding}'")
        if self.embedding == "fourier" and self.embed_degree < 1:
            raise ValueError("fourier embedding degree must be >= 1")

    @property
    def input_dim(self):
        return self.layer_widths[0]

    @property
    def embedded_width(self):
        d = self.layer_widths[0]
        if self.embedding == "none":
            return d
        if self.embedding == "periodic":
            return d - 1 + 2
        return d - 1 + 2 * self.embed_degree

    def feature_widths(self):
        """Widths seen by the dense layers (embedding folded in)."""
        return [self.embedded_width] + self.layer_widths[1:]

    def to_dict(self):
        return {
            "layer_widths": list(self.layer_widths),
            "activation": self.activation,
            "embedding": self.embedding,
            "embed_degree": self.embed_degree,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


class ParamLayout:
    """Maps (layer, kind) to a slice of the flat parameter vector."""

    def __init__(self, widths):
        self.widths = list(widths)
        self.slices = {}
        offset = 0
        for layer in range(len(widths) - 1):
            fan_in, fan_out = widths[layer], widths[layer + 1]
            self.slices[(layer, "W")] = (offset, offset + fan_in * fan_out, (fan_in, fan_out))
            offset += fan_in * fan_out
            self.slices[(layer, "b")] = (offset, offset + fan_out, (fan_out,))
            offset += fan_out
        self.n_params = offset

    @property
    def n_layers(self):
        return len(self.widths) - 1

    def unpack(self, params):
        """Per-layer (W, b) pairs; works on arrays and tape variables."""
        out = []
        for layer in range(self.n_layers):
            a, b, shape = self.slices[(layer, "W")]
            w = eg.reshape(eg.take_slice(params, a, b), shape)
            a, b, _ = self.slices[(layer, "b")]
            bias = eg.take_slice(params, a, b)
            out.append((w, bias))
        return out

    def to_dict(self):
        return {
            "widths": self.widths,
            "slices": {f"{l}.{k}": [a, b, list(shape)] for (l, k), (a, b, shape) in self.slices.items()},
        }


_LAYOUT_CACHE = {}


def layout_for(config: MlpConfig) -> ParamLayout:
    key = tuple(config.feature_widths())
    layout = _LAYOUT_CACHE.get(key)
    if layout is None:
        layout = _LAYOUT_CACHE[key] = ParamLayout(key)
    return layout


def init_params(config: MlpConfig, seed: int) -> np.ndarray:
    """Uniform weight init on [-sqrt(3/fan_in), sqrt(3/fan_in)], zero biases."""
    layout = layout_for(config)
    rng = np.random.default_rng(seed)
    params = np.zeros(layout.n_params)
    for layer in range(layout.n_layers):
        a, b, (fan_in, fan_out) = layout.slices[(layer, "W")]
        bound = math.sqrt(3.0 / fan_in)
        params[a:b] = rng.uniform(-bound, bound, size=fan_in * fan_out)
    return params


def fourier_embed(x, degree):
    """Features [sin(k pi x)]_{k<=m} then [cos(k pi x)]_{k<=m}, 2-periodic in x.

    The coordinate is wrapped onto [-1, 1) first so that x and x + 2 produce
    bit-identical features.
    """
    if degree < 1:
        raise ValueError("degree must be >= 1")
    xw = eg.periodic_wrap(x)
    feats = [eg.sin(eg.mul(float(k) * math.pi, xw)) for k in range(1, degree + 1)]
    feats += [eg.cos(eg.mul(float(k) * math.pi, xw)) for k in range(1, degree + 1)]
    return feats


def embed_columns(columns, config: MlpConfig):
    """Apply the configured embedding to the last input coordinate."""
    if config.embedding == "none":
        return list(columns)
    degree = 1 if config.embedding == "periodic" else config.embed_degree
    return list(columns[:-1]) + fourier_embed(columns[-1], degree)


def network_fn(params, config: MlpConfig):
    """Closure evaluating the network on a list of per-dimension columns.

    ``params`` may be a flat ndarray (numeric evaluation) or a tape Var
    (differentiable evaluation); columns may be arrays, Vars or jets.
    """
    layout = layout_for(config)
    layers = layout.unpack(params)
    act = _ACTIVATIONS[config.activation]

    def net(columns):
        if len(columns) != config.input_dim:
            raise ShapeError(
                f"expected {config.input_dim} input columns, got {len(columns)}"
            )
        h = eg.column_stack(embed_columns(columns, config))
        last = len(layers) - 1
        for k, (w, b) in enumerate(layers):
            h = eg.add(eg.matmul(h, w), b)
            if k != last:
                h = act(h)
        n = eg.value_of(h).shape[0]
        return eg.reshape(h, (n,))

    return net


def forward(params, config: MlpConfig, x):
    """Numeric forward pass at a point (d,) or batch (N, d)."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x.reshape(1, -1)
    if x.shape[1] != config.input_dim:
        raise ShapeError(f"input dimension {x.shape[1]} != {config.input_dim}")
    net = network_fn(np.asarray(params, dtype=np.float64), config)
    out = net([x[:, i] for i in range(x.shape[1])])
    return float(out[0]) if single else out


def save_checkpoint(path, params, config: MlpConfig, seed):
    """JSON header line followed by one double per line."""
    header = {
        "layout": layout_for(config).to_dict(),
        "config": config.to_dict(),
        "seed": seed,
        "n_params": int(np.asarray(params).size),
    }
    with open(path, "w") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for v in np.asarray(params, dtype=np.float64).ravel():
            fh.write(repr(float(v)) + "\n")


def load_checkpoint(path):
    with open(path) as fh:
        header = json.loads(fh.readline())
        values = [float(line) for line in fh if line.strip()]
    params = np.asarray(values, dtype=np.float64)
    if params.size != header["n_params"]:
        raise ValueError(
            f"checkpoint holds {params.size} values, header says {header['n_params']}"
        )
    config = MlpConfig.from_dict(header["config"])
    return params, config, header["seed"]
