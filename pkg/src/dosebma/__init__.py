"""Dose-response estimation with shared and unshared dose uncertainty.

Conventional maximum likelihood on a single dose vector is compared with
Bayesian model averaging over many Monte Carlo dose vectors, sampled with
stochastic approximation Monte Carlo.
"""

from .cohort import Cohort, DoseMatrix, DoseVector, Subject, synthetic_cohort
from .errors import ConvergenceError, DoseBmaError, ValidationError
from .risk import RiskParams, disease_probability, log_likelihood

__version__ = "0.1.0"

__all__ = [
    "Cohort",
    "DoseMatrix",
    "DoseVector",
    "Subject",
    "synthetic_cohort",
    "ConvergenceError",
    "DoseBmaError",
    "ValidationError",
    "RiskParams",
    "disease_probability",
    "log_likelihood",
    "__version__",
]
