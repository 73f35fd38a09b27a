"""Adaptive residual-based weighting and sampling for neural PDE solvers.

Subpackage map:

* ``engine``      -- tape-based reverse-mode autodiff plus forward-mode jets
* ``models``      -- MLP representation models, embeddings, initialization
* ``adaptive``    -- potentials, tilted distributions, EMA multipliers,
                     annealing, weighted losses, resampling
* ``optim``       -- Adam with step decay, gradient-norm global weights
* ``problems``    -- PINN problem definitions and the training loop
* ``operators``   -- toy operator learning (branch/trunk nets, datasets)
* ``diagnostics`` -- SNR, estimator variance, error norms, run logging
* ``varlab``      -- numerical verification of the variational formulas
* ``cli``         -- command-line entry point
"""

__version__ = "0.1.0"
