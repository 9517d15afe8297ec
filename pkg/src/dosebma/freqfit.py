"""Constrained maximum likelihood for the ERR logistic model on one dose vector.

Point estimates come from a projected Newton iteration on ``(alpha, beta)``
with ``beta >= 0``; intervals come from the profile likelihood, re-maximizing
``alpha`` at every trial ``beta``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq
from scipy.special import expit
from scipy.stats import chi2

from .cohort import Cohort, DoseVector
from .errors import ConvergenceError, ValidationError
from .risk import RiskParams, gradient_arrays, hessian_arrays, loglik_arrays

__all__ = ["FreqFitResult", "fit_ml", "profile_ci", "profile_loglik", "profile_interval"]

GTOL = 1e-8
XTOL = 1e-10
FTOL = 1e-14
BETA_SEPARATION = 1e6


@dataclass(frozen=True)
class FreqFitResult:
    beta_hat: float
    ci_low: float
    ci_high: float
    alpha_hat: np.ndarray
    converged: bool
    n_iter: int
    loglik: float
    boundary: bool = False
    wald_se: float = math.nan
    message: str = ""
    diagnostics: dict = field(default_factory=dict)

    @property
    def params(self) -> RiskParams:
        return RiskParams(self.alpha_hat, self.beta_hat)

    @property
    def wald_ci(self) -> tuple[float, float]:
        z = 1.959963984540054
        return max(0.0, self.beta_hat - z * self.wald_se), self.beta_hat + z * self.wald_se


def _data(cohort: Cohort, dose):
    D = dose.values if isinstance(dose, DoseVector) else np.asarray(dose, dtype=float)
    if D.shape != (cohort.N,):
        raise ValidationError(f"dose vector has length {D.size}, cohort has {cohort.N} subjects")
    y = cohort.outcomes()
    if y.min() == y.max():
        raise ValidationError("need at least one case and one non-case")
    if not np.any(D > 0):
        raise ValidationError("slope unidentifiable: all doses are zero")
    return cohort.covariates, y, D


def _newton_direction(g, H):
    # Levenberg-damped Newton step for maximization
    n = g.size
    scale = max(1.0, float(np.max(np.abs(np.diag(H)))))
    lam = 0.0
    for _ in range(30):
        try:
            L = np.linalg.cholesky(-H + lam * np.eye(n))
        except np.linalg.LinAlgError:
            lam = max(1e-10 * scale, 10.0 * lam)
            continue
        return np.linalg.solve(L.T, np.linalg.solve(L, g))
    return g / scale


def _fit_alpha(beta, X, y, D, alpha0, tol=1e-10, max_iter=100):
    """Maximize over alpha at fixed beta (logistic regression with an offset)."""
    offset = np.log1p(beta * D)
    a = np.array(alpha0, dtype=float)
    ll = float(np.sum(y * (X @ a + offset) - np.logaddexp(0.0, X @ a + offset)))
    for _ in range(max_iter):
        eta = X @ a + offset
        p = expit(eta)
        g = X.T @ (y - p)
        if np.max(np.abs(g)) < tol:
            break
        H = -(X.T * (p * (1 - p))) @ X
        d = _newton_direction(g, H)
        t = 1.0
        while t > 1e-12:
            a_new = a + t * d
            eta_new = X @ a_new + offset
            ll_new = float(np.sum(y * eta_new - np.logaddexp(0.0, eta_new)))
            if ll_new >= ll - 1e-12 * abs(ll):
                break
            t *= 0.5
        else:
            break
        step = np.max(np.abs(a_new - a))
        a, ll = a_new, ll_new
        if step < 1e-14:
            break
    return a, ll


def profile_loglik(beta, cohort: Cohort, dose, alpha0=None) -> tuple[float, np.ndarray]:
    """Return ``(max_alpha loglik(alpha, beta), argmax alpha)``."""
    X, y, D = _data(cohort, dose)
    a0 = np.zeros(X.shape[1]) if alpha0 is None else alpha0
    a, ll = _fit_alpha(beta, X, y, D, a0)
    return ll, a


def fit_ml(cohort: Cohort, dose, init: RiskParams | None = None, *, ci: bool = True, level: float = 0.95,
           max_iter: int = 500) -> FreqFitResult:
    """Maximum likelihood estimate of ``(alpha, beta >= 0)``.

    A boundary solution ``beta_hat = 0`` is reported as converged with
    ``boundary=True``. Runaway ``beta`` (likelihood still increasing past
    1e6) is reported with ``converged=False``.
    """
    X, y, D = _data(cohort, dose)
    J = X.shape[1]
    if init is None:
        theta = np.append(np.zeros(J), 1.0)
    else:
        theta = np.append(init.alpha, init.beta)
    # start alpha at its conditional optimum; cheap and makes the joint Newton steps well scaled
    theta[:J], ll = _fit_alpha(theta[J], X, y, D, theta[:J])

    converged = False
    boundary = False
    message = ""
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        g = gradient_arrays(theta[:J], theta[J], X, y, D)
        H = hessian_arrays(theta[:J], theta[J], X, y, D)
        at_bound = theta[J] <= 0.0 and g[J] <= 0.0
        free = np.arange(J) if at_bound else np.arange(J + 1)
        gf = g[free]
        d = np.zeros(J + 1)
        d[free] = _newton_direction(gf, H[np.ix_(free, free)])
        if not at_bound and theta[J] + d[J] > 10.0 * (theta[J] + 1.0):
            d *= 10.0 * (theta[J] + 1.0) / d[J]
        gnorm = float(np.linalg.norm(gf))
        # Newton decrement: predicted log-likelihood gain of the full step
        gain = 0.5 * float(gf @ d[free])
        if (gnorm < GTOL and np.linalg.norm(d) < XTOL) or gain < FTOL * max(1.0, abs(ll)):
            converged = True
            boundary = bool(at_bound)
            break
        t = 1.0
        improved = False
        while t > 1e-14:
            cand = theta + t * d
            cand[J] = max(cand[J], 0.0)
            ll_c = loglik_arrays(cand[:J], cand[J], X, y, D)
            if ll_c >= ll:
                improved = True
                break
            t *= 0.5
        if not improved:
            # numerical floor reached; accept if stationary to tolerance
            converged = gnorm < max(GTOL, 1e-9 * len(y))
            boundary = bool(at_bound)
            message = "" if converged else "line search failed"
            break
        step = float(np.linalg.norm(cand - theta))
        theta, ll = cand, ll_c
        if theta[J] > BETA_SEPARATION:
            message = "beta diverging (likelihood increasing without bound)"
            break
        if np.max(np.abs(theta[:J])) > 1e6:
            message = "alpha diverging (separation)"
            break
        if gnorm < GTOL and step < XTOL:
            converged = True
            boundary = bool(theta[J] <= 0.0)
            break
    else:
        message = f"no convergence in {max_iter} iterations"

    wald_se = math.nan
    Hf = hessian_arrays(theta[:J], theta[J], X, y, D)
    try:
        cov = np.linalg.inv(-Hf)
        if cov[J, J] > 0:
            wald_se = float(math.sqrt(cov[J, J]))
    except np.linalg.LinAlgError:
        pass

    res = FreqFitResult(
        beta_hat=float(theta[J]),
        ci_low=math.nan,
        ci_high=math.nan,
        alpha_hat=theta[:J].copy(),
        converged=converged,
        n_iter=n_iter,
        loglik=float(ll),
        boundary=boundary,
        wald_se=wald_se,
        message=message,
        diagnostics={"grad_norm": float(np.linalg.norm(gradient_arrays(theta[:J], theta[J], X, y, D)))},
    )
    if ci and converged:
        lo, hi = profile_ci(cohort, dose, res, level)
        res = FreqFitResult(**{**res.__dict__, "ci_low": lo, "ci_high": hi})
    return res


def profile_interval(profile, beta_hat: float, ll_hat: float, level: float = 0.95, *,
                     upper_limit: float = BETA_SEPARATION, xtol: float = 1e-4) -> tuple[float, float]:
    """Solve ``2 * (ll_hat - profile(beta)) = chi2_1(level)`` on each side of ``beta_hat``.

    ``profile`` maps beta to the profile log-likelihood. The lower bound is
    clipped at zero; an upper bound that does not exist below
    ``upper_limit`` is reported as ``inf``.
    """
    target = ll_hat - 0.5 * chi2.ppf(level, 1)

    def f(b):
        return profile(b) - target

    tol = min(xtol, 1e-8 * max(beta_hat, 1e-8))
    if beta_hat <= 0.0 or f(0.0) >= 0.0:
        low = 0.0
    else:
        low = brentq(f, 0.0, beta_hat, xtol=tol, rtol=1e-12)

    step = max(beta_hat, 1e-3 * max(1.0, beta_hat)) if beta_hat > 0 else 1.0
    lo_b, hi_b = beta_hat, beta_hat + step
    while f(hi_b) >= 0.0:
        lo_b, hi_b = hi_b, hi_b + 2.0 * (hi_b - beta_hat)
        if hi_b > upper_limit:
            return low, math.inf
    high = brentq(f, lo_b, hi_b, xtol=tol, rtol=1e-12)
    return float(low), float(high)


def profile_ci(cohort: Cohort, dose, fit: FreqFitResult, level: float = 0.95) -> tuple[float, float]:
    """Profile-likelihood interval for beta with alpha re-maximized at each beta."""
    if not fit.converged:
        raise ConvergenceError("profile interval needs a converged fit")
    X, y, D = _data(cohort, dose)
    warm = {"alpha": fit.alpha_hat.copy()}

    def prof(b):
        a, ll = _fit_alpha(b, X, y, D, warm["alpha"])
        warm["alpha"] = a
        return ll

    return profile_interval(prof, fit.beta_hat, fit.loglik, level)
