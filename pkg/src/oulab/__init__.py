"""oulab: a numerics laboratory for generalized Ornstein-Uhlenbeck operators.

Two halves, kept deliberately independent so they can check each other:

- a Monte Carlo semigroup estimator (manifold SDE paths, parallel
  transport, path-ordered potential factors) in :mod:`oulab.stochastics`
  and :mod:`oulab.feynman_kac`;
- a periodic spectral-grid reference (operator matrices, semigroup via
  matrix exponential / RK4, norm-inequality and calculus-identity
  checkers) in :mod:`oulab.oracle` and :mod:`oulab.calculus`.

Problems (manifold, weight phi, vector field X, potential V, bundle
connection, structural constants) are described by JSON configs; see
:func:`oulab.fields.load_problem`.
"""

from .fields import (
    AssumptionConstants,
    Problem,
    Thresholds,
    check_assumptions,
    compute_thresholds,
    load_problem,
)
from .geometry import make_manifold

__version__ = "0.1.0"

__all__ = [
    "AssumptionConstants",
    "Problem",
    "Thresholds",
    "check_assumptions",
    "compute_thresholds",
    "load_problem",
    "make_manifold",
    "__version__",
]
