"""Linear excess-relative-risk logistic model and its likelihood.

The disease probability is

    p = logistic(alpha . x + log(1 + beta * dose))

so that the odds ratio relative to zero dose is ``1 + beta * dose``. The
array-level helpers (``*_arrays``) are the hot paths used by the fitters and
samplers; the public functions wrap them for cohort objects.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .cohort import Cohort, DoseVector
from .errors import ValidationError

__all__ = [
    "RiskParams",
    "EorParams",
    "DomainError",
    "disease_probability",
    "log_likelihood",
    "log_likelihood_gradient",
    "log_likelihood_hessian",
    "excess_odds_ratio",
    "odds",
]


class DomainError(ValidationError):
    """Odds ratio is not positive for some subject."""


@dataclass(frozen=True, eq=False)
class RiskParams:
    alpha: np.ndarray
    beta: float

    def __post_init__(self):
        a = np.array(self.alpha, dtype=float, copy=True).reshape(-1)
        a.setflags(write=False)
        object.__setattr__(self, "alpha", a)
        object.__setattr__(self, "beta", float(self.beta))
        if not (np.all(np.isfinite(a)) and np.isfinite(self.beta)):
            raise ValidationError("risk parameters must be finite")
        if self.beta < 0:
            raise ValidationError("beta must be nonnegative")

    @property
    def vector(self) -> np.ndarray:
        return np.append(self.alpha, self.beta)

    @classmethod
    def from_vector(cls, theta) -> "RiskParams":
        theta = np.asarray(theta, dtype=float)
        return cls(theta[:-1], theta[-1])


def _log_or(beta, dose):
    z = beta * np.asarray(dose, dtype=float)
    if np.any(z <= -1.0):
        raise DomainError("1 + beta * dose must be positive")
    return np.log1p(z)


def linear_predictor_arrays(alpha, beta, X, D):
    return X @ alpha + _log_or(beta, D)


def loglik_arrays(alpha, beta, X, y, D) -> float:
    eta = linear_predictor_arrays(alpha, beta, X, D)
    # y*eta - log(1 + e^eta), stable for large |eta|
    return float(np.sum(y * eta - np.logaddexp(0.0, eta)))


def gradient_arrays(alpha, beta, X, y, D) -> np.ndarray:
    eta = linear_predictor_arrays(alpha, beta, X, D)
    r = y - expit(eta)
    return np.append(X.T @ r, np.sum(r * D / (1.0 + beta * D)))


def hessian_arrays(alpha, beta, X, y, D) -> np.ndarray:
    eta = linear_predictor_arrays(alpha, beta, X, D)
    p = expit(eta)
    w = p * (1.0 - p)
    g = D / (1.0 + beta * D)
    J = X.shape[1]
    H = np.empty((J + 1, J + 1))
    H[:J, :J] = -(X.T * w) @ X
    H[:J, J] = H[J, :J] = -(X.T @ (w * g))
    H[J, J] = -np.sum(w * g * g) - np.sum((y - p) * g * g)
    return H


def disease_probability(params: RiskParams, covariates, dose):
    """P(Y=1 | x, dose). Works elementwise on arrays of subjects."""
    X = np.asarray(covariates, dtype=float)
    eta = X @ params.alpha + _log_or(params.beta, dose)
    out = expit(eta)
    return float(out) if np.ndim(out) == 0 else out


def _arrays(cohort: Cohort, dose):
    D = dose.values if isinstance(dose, DoseVector) else np.asarray(dose, dtype=float)
    if D.shape != (cohort.N,):
        raise ValidationError(f"dose vector has length {D.size}, cohort has {cohort.N} subjects")
    return cohort.covariates, cohort.outcomes(), D


def log_likelihood(params: RiskParams, cohort: Cohort, dose) -> float:
    X, y, D = _arrays(cohort, dose)
    return loglik_arrays(params.alpha, params.beta, X, y, D)


def log_likelihood_gradient(params: RiskParams, cohort: Cohort, dose) -> np.ndarray:
    """Gradient with respect to ``(alpha_1..alpha_J, beta)``."""
    X, y, D = _arrays(cohort, dose)
    return gradient_arrays(params.alpha, params.beta, X, y, D)


def log_likelihood_hessian(params: RiskParams, cohort: Cohort, dose) -> np.ndarray:
    X, y, D = _arrays(cohort, dose)
    return hessian_arrays(params.alpha, params.beta, X, y, D)


# -- excess odds ratio with effect modification ------------------------------


@dataclass(frozen=True, eq=False)
class EorParams:
    """Baseline coefficients, per-dose-component slopes and modifier coefficients."""

    alpha: np.ndarray
    beta: np.ndarray
    gamma_mod: np.ndarray

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma_mod"):
            a = np.atleast_1d(np.array(getattr(self, name), dtype=float))
            a.setflags(write=False)
            object.__setattr__(self, name, a)


def excess_odds_ratio(params: EorParams, dose_components, modifiers) -> float:
    """``sum_j beta_j Y_j * exp(sum_k gamma_k Z_k)``; the odds ratio is one plus this."""
    Y = np.atleast_1d(np.asarray(dose_components, dtype=float))
    Z = np.atleast_1d(np.asarray(modifiers, dtype=float))
    if Y.shape != params.beta.shape or Z.shape != params.gamma_mod.shape:
        raise ValidationError("dose components / modifiers do not match parameter lengths")
    eor = float(params.beta @ Y * np.exp(params.gamma_mod @ Z))
    if 1.0 + eor <= 0.0:
        raise DomainError("odds ratio must be positive")
    return eor


def odds(params: EorParams, covariates, dose_components, modifiers) -> float:
    X = np.atleast_1d(np.asarray(covariates, dtype=float))
    return float(np.exp(params.alpha @ X) * (1.0 + excess_odds_ratio(params, dose_components, modifiers)))
