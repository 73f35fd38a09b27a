"""Learning-dynamics instrumentation: SNR, variances, error norms, logging."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import engine as eg


class PartitionError(ValueError):
    """Invalid batch partition request."""


class DegenerateReference(ValueError):
    """Relative error against an identically-zero reference."""


CSV_HEADER = "iter,loss_E,loss_B,loss_D,rel_l2,l_inf,variance,snr,epsilon,wall_ms"


@dataclass
class RunRecord:
    """One logged training row; ``snr`` may be float('inf') (zero noise)."""

    iteration: int
    loss_E: float = 0.0
    loss_B: float = 0.0
    loss_D: float = 0.0
    rel_l2: float = float("nan")
    l_inf: float = float("nan")
    variance: float = float("nan")
    snr: float = float("nan")
    epsilon: float = float("nan")
    wall_ms: float = 0.0

    def csv_row(self):
        vals = [
            self.loss_E, self.loss_B, self.loss_D, self.rel_l2,
            self.l_inf, self.variance, self.snr, self.epsilon, self.wall_ms,
        ]
        return str(self.iteration) + "," + ",".join(repr(float(v)) for v in vals)


class RunLogger:
    """Accumulates records and optionally streams them to a CSV file."""

    def __init__(self, path=None):
        self.records = []
        self._fh = open(path, "w") if path is not None else None
        if self._fh:
            self._fh.write(CSV_HEADER + "\n")

    def log(self, record: RunRecord):
        self.records.append(record)
        if self._fh:
            self._fh.write(record.csv_row() + "\n")

    def close(self):
        if self._fh:
            self._fh.close()
            self._fh = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False


def snr(partition_grads):
    """Signal-to-noise ratio of gradient directions over batch partitions.

    Signal is the norm of the mean direction; noise power is the mean squared
    deviation norm.  Zero noise returns float('inf').
    """
    grads = [np.asarray(g, dtype=np.float64) for g in partition_grads]
    if len(grads) < 2:
        raise PartitionError("need at least two partitions for an SNR")
    stack = np.stack(grads)
    if all(np.array_equal(g, grads[0]) for g in grads[1:]):
        return float("inf")
    mean = stack.mean(axis=0)
    dev = stack - mean
    noise_power = float(np.mean(np.sum(dev * dev, axis=1)))
    signal = float(np.linalg.norm(mean))
    if noise_power == 0.0:
        return float("inf")
    return signal / math.sqrt(noise_power)


def estimator_variance(residuals, tilt=None):
    """Population variance of the importance-sampling integrand.

    Uniform base measure p on the grid; sampling measure ``tilt`` (p.m.f.),
    integrand r * dp/dq evaluated on the tilt's support.  ``tilt=None`` (or a
    uniform tilt) reduces to the plain population variance of r.
    """
    r = np.asarray(residuals, dtype=np.float64)
    n = r.size
    if tilt is None:
        return float(r.var())
    q = np.asarray(tilt, dtype=np.float64)
    if q.shape != r.shape:
        raise ValueError("tilt must match the residual grid")
    mask = q > 0.0
    v = r[mask] / (n * q[mask])
    w = q[mask]
    mean = float(np.dot(w, v))
    return float(np.dot(w, (v - mean) ** 2))


def error_norms(prediction, reference):
    """(relative L2, L-infinity) between grids of equal shape."""
    pred = np.asarray(prediction, dtype=np.float64)
    ref = np.asarray(reference, dtype=np.float64)
    if pred.shape != ref.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {ref.shape}")
    ref_norm = np.linalg.norm(ref.ravel())
    if ref_norm == 0.0:
        raise DegenerateReference("reference grid is identically zero")
    diff = pred - ref
    rel_l2 = float(np.linalg.norm(diff.ravel()) / ref_norm)
    l_inf = float(np.max(np.abs(diff)))
    # discrete max-vs-mean-square relation; holds on every grid
    assert l_inf >= math.sqrt(np.mean(diff * diff)) - 1e-15
    return rel_l2, l_inf


@dataclass
class PartitionScheme:
    """Disjoint, exhaustive, equal-size index blocks of a discrete domain."""

    blocks: list

    @property
    def b(self):
        return len(self.blocks)

    @property
    def block_size(self):
        return len(self.blocks[0])


def make_partition(n, b, rng=None) -> PartitionScheme:
    if b < 1 or n % b != 0:
        raise PartitionError(f"cannot split {n} points into {b} equal blocks")
    idx = np.arange(n) if rng is None else rng.permutation(n)
    return PartitionScheme(blocks=list(idx.reshape(b, n // b)))


def partition_gradients(loss_builder, params, scheme: PartitionScheme):
    """Per-block gradients; their mean equals the full-batch gradient.

    ``loss_builder(params_var, indices)`` must return the mean loss over the
    given block.
    """
    return [
        eg.param_gradient(lambda th, idx=idx: loss_builder(th, idx), params)
        for idx in scheme.blocks
    ]
