"""Bayesian model averaging over K dose vectors.

The posterior is over ``(alpha, beta, gamma)`` where ``gamma`` selects the
dose vector used in the likelihood. With a flat Dirichlet hyper-prior the
selection probabilities integrate out to a uniform prior on ``gamma``.

Two samplers share one Metropolis-Hastings kernel:

``plain-mh``
    ordinary MH on the joint posterior.
``samc``
    stochastic approximation Monte Carlo. The sample space is split into
    sub-regions (one per model by default, or by energy level), each with a
    log-weight ``omega[s]``. The kernel targets ``p0(theta) / exp(omega[s])``
    and after every iteration the weights move by ``delta_t * (e_t - f)``, which
    drives the chain towards visiting sub-region ``s`` with frequency ``f[s]``.
    Posterior expectations are recovered by weighting each draw from
    sub-region ``s`` with ``exp(mean omega[s])``, the log-weight averaged over
    the sampling phase. Instantaneous weights ``exp(omega_t[s])`` are also
    consistent but fluctuate by several units while the gain factor is large.

Parameters are proposed by a Gaussian random walk on ``(alpha, log beta)``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .cohort import Cohort, DoseMatrix, DoseVector
from .errors import ValidationError
from .rng import derive_seed, stream

logger = logging.getLogger(__name__)

__all__ = [
    "PriorSpec",
    "SamcConfig",
    "SamcState",
    "BmaProblem",
    "BmaResult",
    "PosteriorSummary",
    "log_posterior",
    "jump_log_acceptance",
    "mh_within_model_step",
    "samc_jump_step",
    "update_weights",
    "gain_factor",
    "choose_partition",
    "run_bma",
    "weighted_quantile",
]

_LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class PriorSpec:
    """alpha_j ~ N(0, alpha_sd^2); beta ~ Exponential(mean=beta_mean); gamma uniform via Dirichlet(1..1)."""

    alpha_sd: float = math.sqrt(1000.0)
    beta_mean: float = 100.0
    dirichlet_conc: tuple[float, ...] | None = None

    def __post_init__(self):
        if not (self.alpha_sd > 0 and self.beta_mean > 0):
            raise ValidationError("alpha_sd and beta_mean must be positive")
        if self.dirichlet_conc is not None:
            conc = tuple(float(c) for c in self.dirichlet_conc)
            if any(c <= 0 for c in conc):
                raise ValidationError("Dirichlet concentrations must be positive")
            object.__setattr__(self, "dirichlet_conc", conc)

    def log_model_prior(self, K: int) -> np.ndarray:
        # Multinomial(pi) with pi ~ Dirichlet(c): marginally P(gamma=k) = c_k / sum(c)
        if self.dirichlet_conc is None:
            return np.full(K, -math.log(K))
        c = np.asarray(self.dirichlet_conc)
        if c.size != K:
            raise ValidationError(f"dirichlet_conc has {c.size} entries for {K} dose vectors")
        return np.log(c) - math.log(c.sum())


@dataclass(frozen=True)
class SamcConfig:
    partition: str = "model"
    S: int | None = None
    u_levels: tuple[float, ...] | None = None
    f: tuple[float, ...] | None = None
    t0: float = 5000.0
    nu: float = 1.5
    theta_bound: float = 1e100
    proposal_scales: tuple[float, ...] | None = None
    p_within: float = 0.5
    adapt: bool = True
    target_accept: tuple[float, float] = (0.23, 0.44)
    pilot_iterations: int = 2000
    flat_tolerance: float = 0.2

    def __post_init__(self):
        if self.partition not in ("model", "energy"):
            raise ValidationError("partition must be 'model' or 'energy'")
        if self.t0 < 1:
            raise ValidationError("t0 must be >= 1")
        if not 1.0 < self.nu <= 2.0:
            raise ValidationError("nu must lie in (1, 2]")
        if not 0.0 <= self.p_within < 1.0:
            raise ValidationError("p_within must lie in [0, 1)")
        if self.u_levels is not None:
            u = tuple(float(x) for x in self.u_levels)
            if any(b <= a for a, b in zip(u, u[1:])):
                raise ValidationError("u_levels must be strictly increasing")
            object.__setattr__(self, "u_levels", u)
        if self.f is not None:
            f = tuple(float(x) for x in self.f)
            if any(x <= 0 for x in f) or abs(sum(f) - 1.0) > 1e-9:
                raise ValidationError("f must be strictly positive and sum to 1")
            object.__setattr__(self, "f", f)


def gain_factor(t: int, t0: float) -> float:
    """delta_t = t0 / max(t0, t).

    Constant for ``t <= t0`` then harmonic, so sum(delta_t) diverges and
    sum(delta_t ** nu) converges for any nu in (1, 2].
    """
    return t0 / max(t0, t)


class BmaProblem:
    """Data, priors and sub-region map prepared for fast posterior evaluation."""

    def __init__(self, cohort: Cohort, matrix: DoseMatrix, priors: PriorSpec = PriorSpec(),
                 config: SamcConfig = SamcConfig(), u_levels: Sequence[float] | None = None):
        if matrix.N != cohort.N:
            raise ValidationError(f"dose matrix has {matrix.N} rows, cohort has {cohort.N} subjects")
        self.X = np.ascontiguousarray(cohort.covariates)
        self.y = cohort.outcomes()
        self.Dt = np.ascontiguousarray(matrix.values.T)
        self.K, self.N = self.Dt.shape
        self.J = self.X.shape[1]
        self.priors = priors
        self.config = config
        self.log_p_gamma = priors.log_model_prior(self.K)
        self._prior_const = -self.J * (math.log(priors.alpha_sd) + 0.5 * _LOG_2PI) - math.log(priors.beta_mean)
        self._inv_var = 1.0 / priors.alpha_sd**2
        if config.partition == "model":
            self.u_levels = None
            self.S = self.K
        else:
            lv = u_levels if u_levels is not None else config.u_levels
            if lv is None:
                raise ValidationError("energy partition needs u_levels")
            self.u_levels = np.asarray(lv, dtype=float)
            self.S = self.u_levels.size + 1
        f = config.f if config.f is not None else (1.0 / self.S,) * self.S
        if len(f) != self.S:
            raise ValidationError(f"f has {len(f)} entries for {self.S} sub-regions")
        self.f = np.asarray(f, dtype=float)

    def logpost(self, alpha: np.ndarray, beta: float, k: int) -> float:
        """Unnormalized log posterior; -inf outside the prior support or the parameter bound."""
        if not beta >= 0.0:
            return -math.inf
        bound = self.config.theta_bound
        if beta > bound or np.any(np.abs(alpha) > bound):
            return -math.inf
        eta = self.X @ alpha + np.log1p(beta * self.Dt[k])
        ll = float(self.y @ eta - np.logaddexp(0.0, eta).sum())
        lp = self._prior_const - 0.5 * self._inv_var * float(alpha @ alpha) - beta / self.priors.beta_mean
        return ll + lp + float(self.log_p_gamma[k])

    def region(self, logpost: float, k: int) -> int:
        if self.u_levels is None:
            return int(k)
        # E_1 = {U <= u_1}, ..., E_S = {U > u_{S-1}}
        return int(np.searchsorted(self.u_levels, -logpost, side="left"))


def log_posterior(params, gamma: int, cohort: Cohort, matrix: DoseMatrix, priors: PriorSpec = PriorSpec()) -> float:
    """Log of likelihood x priors for dose vector ``gamma`` (0-based); normalizing constant omitted."""
    if not 0 <= gamma < matrix.K:
        raise IndexError(f"gamma={gamma} outside 0..{matrix.K - 1}")
    alpha, beta = (params.alpha, params.beta) if hasattr(params, "alpha") else params
    if beta < 0:
        return -math.inf
    return BmaProblem(cohort, matrix, priors).logpost(np.asarray(alpha, dtype=float), float(beta), gamma)


# -- chain state and kernel ----------------------------------------------------


@dataclass
class SamcState:
    alpha: np.ndarray
    beta: float
    gamma: int
    omega: np.ndarray
    logpost: float
    region: int
    t: int = 0
    visit_counts: np.ndarray | None = None
    region_counts: np.ndarray | None = None
    n_within: int = 0
    acc_within: int = 0
    n_jump: int = 0
    acc_jump: int = 0

    @property
    def params(self):
        from .risk import RiskParams

        return RiskParams(self.alpha, self.beta)

    @classmethod
    def start(cls, problem: BmaProblem, alpha, beta: float, gamma: int) -> "SamcState":
        alpha = np.asarray(alpha, dtype=float).copy()
        lp = problem.logpost(alpha, beta, gamma)
        if not math.isfinite(lp):
            raise ValidationError("initial state has zero posterior density")
        return cls(alpha, float(beta), int(gamma), np.zeros(problem.S), lp, problem.region(lp, gamma),
                   visit_counts=np.zeros(problem.K, dtype=np.int64),
                   region_counts=np.zeros(problem.S, dtype=np.int64))


def jump_log_acceptance(log_target_new: float, log_target_old: float, omega_new: float, omega_old: float,
                        log_q_back: float = 0.0, log_q_forward: float = 0.0) -> float:
    """Log acceptance probability of an omega-weighted move.

    ``min(1, exp(omega_old) p_new Q(new->old) / (exp(omega_new) p_old Q(old->new)))``.
    Only omega differences enter, so shifting every omega by a constant changes nothing.
    """
    r = (log_target_new - omega_new + log_q_back) - (log_target_old - omega_old + log_q_forward)
    if math.isnan(r):
        return -math.inf
    return min(0.0, r)


def _propose(state: SamcState, chol: np.ndarray, rng: np.random.Generator):
    # random walk on (alpha, log beta)
    step = chol @ rng.standard_normal(chol.shape[0])
    J = state.alpha.size
    alpha = state.alpha + step[:J]
    beta = state.beta * math.exp(step[J]) if state.beta > 0 else 0.0
    return alpha, beta


def _log_jacobian(beta: float) -> float:
    # density of log(beta) picks up a factor beta
    return math.log(beta) if beta > 0 else -math.inf


def _mh_move(state: SamcState, problem: BmaProblem, chol, rng, new_gamma: int, use_omega: bool) -> bool:
    alpha, beta = _propose(state, chol, rng)
    lp = problem.logpost(alpha, beta, new_gamma)
    u = rng.random()
    if not math.isfinite(lp):
        return False
    reg = problem.region(lp, new_gamma)
    om_new = state.omega[reg] if use_omega else 0.0
    om_old = state.omega[state.region] if use_omega else 0.0
    log_a = jump_log_acceptance(lp + _log_jacobian(beta), state.logpost + _log_jacobian(state.beta), om_new, om_old)
    if u < math.exp(log_a):
        state.alpha, state.beta, state.gamma, state.logpost, state.region = alpha, beta, new_gamma, lp, reg
        return True
    return False


def mh_within_model_step(state: SamcState, problem: BmaProblem, chol: np.ndarray, rng: np.random.Generator,
                         use_omega: bool = True) -> SamcState:
    """One random-walk MH update of (alpha, beta) with gamma held fixed.

    Under the model partition the sub-region cannot change, so omega cancels
    and this is plain MH against the log posterior.
    """
    state.n_within += 1
    state.acc_within += _mh_move(state, problem, chol, rng, state.gamma, use_omega)
    return state


def samc_jump_step(state: SamcState, problem: BmaProblem, chol: np.ndarray, rng: np.random.Generator,
                   use_omega: bool = True) -> SamcState:
    """Propose gamma* from Q, then move within the model or jump with the omega-corrected ratio.

    Q stays on the current model with probability ``p_within`` and otherwise
    picks one of the other K-1 models uniformly, so Q is symmetric.
    """
    K = problem.K
    u = rng.random()
    if K == 1 or u < problem.config.p_within:
        return mh_within_model_step(state, problem, chol, rng, use_omega)
    j = int(rng.integers(K - 1))
    new_gamma = j + (j >= state.gamma)
    state.n_jump += 1
    state.acc_jump += _mh_move(state, problem, chol, rng, new_gamma, use_omega)
    return state


def update_weights(state: SamcState, problem: BmaProblem) -> SamcState:
    """omega <- omega + delta_t (e_t - f) for the sub-region occupied after the move."""
    state.t += 1
    d = gain_factor(state.t, problem.config.t0)
    state.omega -= d * problem.f
    state.omega[state.region] += d
    return state


# -- results -------------------------------------------------------------------


def weighted_quantile(x, q, w=None) -> np.ndarray:
    """Quantiles of a weighted sample (inverse of the midpoint-interpolated weighted CDF)."""
    x = np.asarray(x, dtype=float)
    q = np.atleast_1d(np.asarray(q, dtype=float))
    if w is None:
        return np.quantile(x, q)
    w = np.asarray(w, dtype=float)
    order = np.argsort(x, kind="stable")
    xs, ws = x[order], w[order]
    keep = ws > 0
    xs, ws = xs[keep], ws[keep]
    cw = np.cumsum(ws)
    cdf = (cw - 0.5 * ws) / cw[-1]
    return np.interp(q, cdf, xs)


@dataclass(frozen=True)
class PosteriorSummary:
    mean: float
    median: float
    ci_low: float
    ci_high: float
    mcse: float = math.nan


def _summarize(x, w, n_batches: int = 40) -> PosteriorSummary:
    wn = w / w.sum()
    mean = float(wn @ x)
    lo, med, hi = weighted_quantile(x, [0.025, 0.5, 0.975], wn)
    mcse = math.nan
    n = x.size
    if n >= 2 * n_batches:
        edges = np.linspace(0, n, n_batches + 1).astype(int)
        bm = []
        for a, b in zip(edges[:-1], edges[1:]):
            sw = w[a:b].sum()
            if sw > 0:
                bm.append(float(w[a:b] @ x[a:b]) / sw)
        if len(bm) > 1:
            mcse = float(np.std(bm, ddof=1) / math.sqrt(len(bm)))
    return PosteriorSummary(mean, float(med), float(lo), float(hi), mcse)


@dataclass(frozen=True)
class BmaResult:
    beta_summary: PosteriorSummary
    alpha_summary: tuple[PosteriorSummary, ...]
    weights: np.ndarray
    raw_weights: np.ndarray
    diagnostics: dict
    sampler: str
    trace: dict | None = field(default=None, repr=False)

    @property
    def estimate(self) -> float:
        return self.beta_summary.median

    @property
    def ci(self) -> tuple[float, float]:
        return self.beta_summary.ci_low, self.beta_summary.ci_high


# -- partition -------------------------------------------------------------------


def choose_partition(pilot_energies, S: int) -> np.ndarray:
    """Energy cut points at the 1/S, 2/S, ... quantiles of a pilot sample.

    A constant pilot sample cannot be split; one region (no cut points) is
    returned with a warning.
    """
    e = np.asarray(pilot_energies, dtype=float)
    if e.size == 0:
        raise ValidationError("pilot sample is empty")
    if S < 2:
        raise ValidationError("S must be >= 2")
    if np.ptp(e) == 0:
        logger.warning("pilot energies are constant; using a single sub-region")
        return np.empty(0)
    cuts = np.quantile(e, np.arange(1, S) / S)
    cuts = np.unique(cuts)
    if cuts.size < S - 1:
        logger.warning("pilot energies have ties; using %d sub-regions instead of %d", cuts.size + 1, S)
    return cuts


# -- driver -----------------------------------------------------------------------


def _laplace_chol(problem: BmaProblem, alpha, beta, k) -> np.ndarray:
    """Cholesky factor of a 2.38^2/d scaled Laplace covariance in (alpha, log beta)."""
    from .risk import gradient_arrays, hessian_arrays

    J = problem.J
    D = problem.Dt[k]
    H = hessian_arrays(alpha, beta, problem.X, problem.y, D)
    g = gradient_arrays(alpha, beta, problem.X, problem.y, D)
    H[:J, :J] -= np.eye(J) / problem.priors.alpha_sd**2
    # change of variables beta = exp(b)
    T = np.eye(J + 1)
    T[J, J] = beta
    Hb = T @ H @ T
    Hb[J, J] += beta * (g[J] - 1.0 / problem.priors.beta_mean)
    d = J + 1
    try:
        cov = np.linalg.inv(-Hb)
        cov = 0.5 * (cov + cov.T)
        return math.sqrt(2.38**2 / d) * np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        return 0.1 * np.eye(d)


def _empirical_chol(draws: np.ndarray):
    """Scaled Cholesky factor of the draws' covariance, or None if degenerate."""
    d = draws.shape[1]
    if draws.shape[0] < 10 * d:
        return None
    cov = np.cov(draws, rowvar=False)
    cov = cov + 1e-8 * np.eye(d) * max(1.0, float(np.max(np.diag(cov))))
    try:
        return math.sqrt(2.38**2 / d) * np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        return None


def _initial_point(cohort: Cohort, matrix: DoseMatrix, k: int):
    from .freqfit import fit_ml

    try:
        fit = fit_ml(cohort, DoseVector(matrix.values[:, k]), ci=False)
        beta = fit.beta_hat if fit.converged else 1.0
        alpha = fit.alpha_hat if fit.converged else np.zeros(cohort.J)
    except ValidationError:
        alpha, beta = np.zeros(cohort.J), 1.0
    beta = min(max(beta, 1e-3), 1e4)
    return np.asarray(alpha, dtype=float), float(beta)


def run_bma(cohort: Cohort, matrix: DoseMatrix, priors: PriorSpec = PriorSpec(), config: SamcConfig = SamcConfig(),
            n_samples: int = 40000, burn_in: int = 10000, sampler: str = "samc", seed: int = 0, *,
            init_gamma: int | None = None, init_params=None, keep_trace: bool = False) -> BmaResult:
    """Sample the joint posterior and summarize beta, alpha and the dose-vector weights.

    Each iteration is one :func:`samc_jump_step`, followed for ``samc`` by
    :func:`update_weights`. Proposal scales adapt during burn-in only.
    """
    if sampler not in ("samc", "plain-mh"):
        raise ValidationError("sampler must be 'samc' or 'plain-mh'")
    if n_samples < 1 or burn_in < 0:
        raise ValidationError("n_samples must be >= 1 and burn_in >= 0")
    cohort.outcomes()
    K = matrix.K
    rng = stream(seed, "bma")

    u_levels = None
    if config.partition == "energy" and config.u_levels is None:
        if config.S is None or config.S < 2:
            raise ValidationError("energy partition needs S >= 2 or explicit u_levels")
        pilot = run_bma(cohort, matrix, priors, SamcConfig(p_within=config.p_within, proposal_scales=config.proposal_scales),
                        n_samples=config.pilot_iterations, burn_in=config.pilot_iterations // 2, sampler="plain-mh",
                        seed=derive_seed(seed, "pilot"), init_gamma=init_gamma, init_params=init_params, keep_trace=True)
        u_levels = choose_partition(pilot.trace["energy"], config.S)
    problem = BmaProblem(cohort, matrix, priors, config, u_levels)

    gamma0 = int(rng.integers(K)) if init_gamma is None else int(init_gamma)
    if init_params is None:
        alpha0, beta0 = _initial_point(cohort, matrix, gamma0)
    else:
        alpha0, beta0 = np.asarray(init_params.alpha, dtype=float), max(float(init_params.beta), 1e-6)
    state = SamcState.start(problem, alpha0, beta0, gamma0)
    if config.proposal_scales is not None:
        sc = np.asarray(config.proposal_scales, dtype=float)
        if sc.size != problem.J + 1:
            raise ValidationError(f"proposal_scales needs {problem.J + 1} entries")
        base_chol = np.diag(sc)
    else:
        base_chol = _laplace_chol(problem, alpha0, beta0, gamma0)
    log_scale = 0.0
    chol = base_chol

    use_omega = sampler == "samc"
    total = burn_in + n_samples
    J = problem.J
    betas = np.empty(n_samples)
    alphas = np.empty((n_samples, J))
    gammas = np.empty(n_samples, dtype=np.int64)
    omega_sum = np.zeros(problem.S)
    energy = np.empty(n_samples)
    regions = np.empty(n_samples, dtype=np.int64)
    # burn-in draws in (alpha, log beta) for the empirical proposal covariance
    warm = np.empty((burn_in, J + 1))
    refits = {burn_in // 4, burn_in // 2, (3 * burn_in) // 4} if config.adapt and burn_in >= 400 else set()
    lo_acc, hi_acc = config.target_accept
    target = 0.5 * (lo_acc + hi_acc)
    window_n = window_acc = 0

    for it in range(total):
        n0, a0 = state.n_within, state.acc_within
        samc_jump_step(state, problem, chol, rng, use_omega)
        if use_omega:
            update_weights(state, problem)
        else:
            state.t += 1
        state.visit_counts[state.gamma] += 1
        state.region_counts[state.region] += 1
        if it < burn_in:
            warm[it, :J] = state.alpha
            warm[it, J] = math.log(state.beta)
            if it + 1 in refits:
                emp = _empirical_chol(warm[(it + 1) // 2: it + 1])
                if emp is not None:
                    base_chol, log_scale = emp, 0.0
                    chol = base_chol
        if it < burn_in and config.adapt:
            window_n += state.n_within - n0
            window_acc += state.acc_within - a0
            if window_n >= 50:
                rate = window_acc / window_n
                log_scale += (rate - target) * 2.0 / math.sqrt(1.0 + it / 500.0)
                chol = base_chol * math.exp(log_scale)
                window_n = window_acc = 0
        if it >= burn_in:
            s = it - burn_in
            betas[s] = state.beta
            alphas[s] = state.alpha
            gammas[s] = state.gamma
            regions[s] = state.region
            if use_omega:
                omega_sum += state.omega
            energy[s] = -state.logpost
        if it == burn_in - 1:
            # statistics reported for the sampling phase only
            state.n_within = state.acc_within = state.n_jump = state.acc_jump = 0

    omega_bar = omega_sum / n_samples
    logw = omega_bar[regions]
    w = np.exp(logw - logw.max())
    weights = np.bincount(gammas, weights=w, minlength=K)
    weights = weights / weights.sum()
    raw = np.bincount(gammas, minlength=K) / n_samples
    occ = np.bincount(regions, minlength=problem.S) / n_samples
    flat_dev = float(np.max(np.abs(occ / problem.f - 1.0)))
    if use_omega and flat_dev > config.flat_tolerance:
        logger.warning("flat-histogram deviation %.2f exceeds %.2f", flat_dev, config.flat_tolerance)

    diagnostics = {
        "acceptance_within": state.acc_within / state.n_within if state.n_within else math.nan,
        "acceptance_jump": state.acc_jump / state.n_jump if state.n_jump else math.nan,
        "visit_counts": np.bincount(gammas, minlength=K),
        "region_occupancy": occ,
        "flat_histogram_deviation": flat_dev,
        "omega": state.omega.copy(),
        "omega_mean": omega_bar,
        "u_levels": None if problem.u_levels is None else problem.u_levels.copy(),
        "proposal_scale": math.exp(log_scale),
        "effective_sample_size": float(w.sum() ** 2 / (w @ w)),
        "n_models": K,
    }
    trace = None
    if keep_trace:
        trace = {"t": np.arange(burn_in + 1, total + 1), "gamma": gammas, "beta": betas, "alpha": alphas,
                 "energy": energy, "log_weight": logw, "region": regions}
    return BmaResult(
        beta_summary=_summarize(betas, w),
        alpha_summary=tuple(_summarize(alphas[:, j], w) for j in range(J)),
        weights=weights,
        raw_weights=raw,
        diagnostics=diagnostics,
        sampler=sampler,
        trace=trace,
    )
