"""Bayesian segmentation networks vs multi-rater annotation variability.

Trains compact segmentation networks under three approximate-inference
schemes (mean-field last layer, MC dropout, deep ensembles), samples
segmentation posteriors, and quantifies whether predictive variability
matches multi-rater variability in mask space (Dice, generalized energy
distance) and in clinical-measurement space (lumen/EEM area, plaque
burden).
"""

__version__ = "0.1.0"

from .errors import (ConfigError, DataError, DimensionError, MeasurementError,
                     NumericError, RaterBayesError, UsageError)
from .tensor import Tensor

__all__ = [
    "Tensor",
    "RaterBayesError",
    "ConfigError",
    "DimensionError",
    "UsageError",
    "DataError",
    "NumericError",
    "MeasurementError",
    "__version__",
]
