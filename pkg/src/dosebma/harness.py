"""Performance-testing protocol: simulated disease sets, method comparison, metrics.

A benchmark run for one dose scenario:

1. build a synthetic cohort and three dose matrices (raw realizations,
   conditional means, conditional medians) that share their shared-error draws;
2. for each true slope, simulate one disease set per raw column (the pool);
3. fit conv-median on every set of the pool and pick a balanced subset of
   test sets across the sorted estimates;
4. on each test set run conv-mean, conv-median and the three BMA variants, the
   BMA model space always excluding the column that generated the disease;
5. aggregate inclusion, relative bias, half-width and relative UCL per slope
   and method.

Each stage is seeded from the master seed plus stage labels, and finished
test cases are persisted one file per case, so an interrupted run resumes
where it stopped and scheduling never changes the results.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import multiprocessing
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .bma import PriorSpec, SamcConfig, run_bma
from .cohort import FORMAT_HEADER, Cohort, DoseMatrix, DoseVector, collapse_to_vector, synthetic_cohort
from .errors import DoseBmaError, ValidationError
from .freqfit import fit_ml
from .risk import RiskParams, disease_probability
from .rng import derive_seed, stream
from .twodmc import (
    ClassicalErrorSpec,
    TwoDmcConfig,
    generate_conditional_matrix,
    generate_dose_matrix,
    inject_classical_error,
    preset,
)

logger = logging.getLogger(__name__)

__all__ = [
    "METHODS",
    "BMA_METHODS",
    "DEFAULT_TRUE_ALPHA",
    "TrueScenario",
    "EvalRecord",
    "BenchmarkConfig",
    "simulate_disease",
    "select_test_sets",
    "true_alpha_vector",
    "evaluate",
    "build_matrices",
    "run_benchmark",
    "classical_error_sweep",
    "aggregate",
]

METHODS = ("conv-mean", "conv-median", "bma-original", "bma-cm", "bma-cmd")
BMA_METHODS = ("bma-original", "bma-cm", "bma-cmd")
SCENARIOS = {"external": "external-analog", "total": "total-analog"}

# baseline log-odds coefficients by covariate name
DEFAULT_TRUE_ALPHA = {"age": 2.0, "male": 1.5, "female": 3.0}


@dataclass(frozen=True, eq=False)
class TrueScenario:
    true_beta: float
    true_alpha: np.ndarray
    true_vector_index: int
    scenario: str = "total-analog"

    def __post_init__(self):
        a = np.array(self.true_alpha, dtype=float).reshape(-1)
        a.setflags(write=False)
        object.__setattr__(self, "true_alpha", a)
        if not (self.true_beta >= 0 and math.isfinite(self.true_beta)):
            raise ValidationError("true_beta must be finite and nonnegative")
        if self.true_vector_index < 0:
            raise ValidationError("true_vector_index must be nonnegative")
        if self.scenario not in SCENARIOS.values():
            raise ValidationError(f"unknown scenario {self.scenario!r}")


@dataclass(frozen=True)
class EvalRecord:
    method: str
    estimate: float
    ci_low: float
    ci_high: float
    included: bool
    relative_bias: float
    half_width: float
    relative_ucl: float
    flags: str = ""


def true_alpha_vector(cohort: Cohort, alpha: Mapping[str, float] = DEFAULT_TRUE_ALPHA,
                      baseline_shift: float = 0.0) -> np.ndarray:
    """Coefficient vector in the cohort's covariate order.

    ``baseline_shift`` is added to the sex indicator coefficients, which
    together act as the intercept, moving every subject's baseline log-odds.
    """
    missing = [n for n in cohort.covariate_names if n not in alpha]
    if missing:
        raise ValidationError(f"no true coefficient for covariate(s) {missing}")
    a = np.array([alpha[n] for n in cohort.covariate_names], dtype=float)
    for j, n in enumerate(cohort.covariate_names):
        if n in ("male", "female"):
            a[j] += baseline_shift
    return a


def simulate_disease(cohort: Cohort, true_dose, scenario: TrueScenario, seed: int) -> Cohort:
    """Bernoulli disease status from the true parameters and the generating dose vector."""
    D = true_dose.values if isinstance(true_dose, DoseVector) else np.asarray(true_dose, dtype=float)
    if D.shape != (cohort.N,):
        raise ValidationError("true dose vector does not match the cohort")
    if scenario.true_alpha.size != cohort.J:
        raise ValidationError("true_alpha does not match the number of covariates")
    p = disease_probability(RiskParams(scenario.true_alpha, scenario.true_beta), cohort.covariates, D)
    key = int(round(scenario.true_beta * 1e6))
    u = stream(seed, "disease", scenario.true_vector_index, key).random(cohort.N)
    return cohort.with_disease((u < p).astype(np.int8))


def select_test_sets(slope_estimates: Sequence[float], n_groups: int = 10, per_group: int = 3,
                     seed: int = 0) -> np.ndarray:
    """Balanced selection across the sorted estimates.

    The estimates are sorted ascending and cut into ``n_groups`` contiguous
    blocks (the last block absorbs any remainder); ``per_group`` positions are
    drawn without replacement from each block. Returns original positions,
    block by block.
    """
    x = np.asarray(slope_estimates, dtype=float)
    n = x.size
    if n_groups < 1 or per_group < 1:
        raise ValidationError("n_groups and per_group must be positive")
    size = n // n_groups
    if per_group > size:
        raise ValidationError(f"per_group={per_group} exceeds block size {size}")
    # nan estimates (failed fits) sort last
    order = np.argsort(np.where(np.isnan(x), np.inf, x), kind="stable")
    rng = stream(seed, "select")
    out = []
    for b in range(n_groups):
        block = order[b * size: (b + 1) * size if b < n_groups - 1 else n]
        out.extend(int(i) for i in rng.choice(block, size=per_group, replace=False))
    return np.array(out, dtype=np.int64)


def evaluate(true_beta: float, fit, method: str = "") -> EvalRecord:
    """Metrics for one fit; ``fit`` needs ``estimate``, ``ci_low`` and ``ci_high``."""
    if isinstance(fit, Mapping):
        est, lo, hi = fit["estimate"], fit["ci_low"], fit["ci_high"]
    else:
        est, lo, hi = fit.estimate, fit.ci_low, fit.ci_high
    est, lo, hi = float(est), float(lo), float(hi)
    flags = []
    included = bool(lo <= true_beta <= hi)
    rel_bias = abs(est - true_beta) / true_beta if true_beta > 0 else math.nan
    if true_beta <= 0:
        flags.append("relative-undefined")
    if est == 0 or not math.isfinite(est):
        rel_ucl = math.nan
        flags.append("relative-ucl-undefined")
    else:
        rel_ucl = hi / est
    return EvalRecord(method, est, lo, hi, included, rel_bias, (hi - lo) / 2.0, rel_ucl, ";".join(flags))


# -- configuration ---------------------------------------------------------------


@dataclass(frozen=True)
class BenchmarkConfig:
    scenario: str = "total"
    n_subjects: int = 500
    n_vectors: int = 200
    n_resamples: int = 100
    slopes: tuple[float, ...] = (3.0, 12.0, 20.0)
    n_groups: int = 10
    per_group: int = 1
    methods: tuple[str, ...] = METHODS
    n_samples: int = 20000
    burn_in: int = 5000
    t0: float = 5000.0
    sampler: str = "samc"
    alpha_sd: float = math.sqrt(1000.0)
    beta_mean: float = 100.0
    baseline_shift: float = -4.6  # brings baseline prevalence to roughly 0.4 under the default coefficients
    true_alpha: tuple[tuple[str, float], ...] = tuple(DEFAULT_TRUE_ALPHA.items())
    male_fraction: float = 0.45
    dose_overrides: tuple[tuple[str, float], ...] = ()

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ValidationError(f"scenario must be one of {sorted(SCENARIOS)}")
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise ValidationError(f"unknown method(s) {bad}")
        if self.n_vectors < 1 or self.n_subjects < 2:
            raise ValidationError("need n_vectors >= 1 and n_subjects >= 2")
        if any(b < 0 for b in self.slopes):
            raise ValidationError("true slopes must be nonnegative")
        if self.n_groups * self.per_group > self.n_vectors:
            raise ValidationError("more test sets requested than disease sets in the pool")
        object.__setattr__(self, "slopes", tuple(float(b) for b in self.slopes))
        object.__setattr__(self, "methods", tuple(self.methods))
        object.__setattr__(self, "true_alpha", tuple((str(k), float(v)) for k, v in dict(self.true_alpha).items()))
        object.__setattr__(self, "dose_overrides", tuple((str(k), float(v)) for k, v in dict(self.dose_overrides).items()))

    @classmethod
    def paper_scale(cls, **kw) -> "BenchmarkConfig":
        base = dict(n_subjects=2376, n_vectors=5000, per_group=3, n_samples=40000, burn_in=10000)
        base.update(kw)
        return cls(**base)

    def dose_config(self) -> TwoDmcConfig:
        return preset(self.scenario, **dict(self.dose_overrides))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["slopes"] = list(self.slopes)
        d["methods"] = list(self.methods)
        d["true_alpha"] = dict(self.true_alpha)
        d["dose_overrides"] = dict(self.dose_overrides)
        return d

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


# -- pipeline pieces ---------------------------------------------------------------


def build_matrices(cfg: BenchmarkConfig, seed: int, classical: ClassicalErrorSpec | None = None):
    """Cohort plus raw, conditional-mean and conditional-median matrices for one scenario."""
    dcfg = cfg.dose_config()
    cohort = synthetic_cohort(cfg.n_subjects, dcfg.shares(), male_fraction=cfg.male_fraction, seed=seed)
    dseed = derive_seed(seed, "doses", cfg.scenario)
    raw = generate_dose_matrix(cohort, dcfg, cfg.n_vectors, dseed)
    cm = generate_conditional_matrix(cohort, dcfg, cfg.n_vectors, cfg.n_resamples, "mean", dseed)
    cmd = generate_conditional_matrix(cohort, dcfg, cfg.n_vectors, cfg.n_resamples, "median", dseed)
    if classical is not None and classical.gsd != 1.0:
        cseed = derive_seed(seed, "classical", cfg.scenario)
        raw = inject_classical_error(raw, classical, "per-realization", cseed)
        cm = inject_classical_error(cm, classical, "per-conditional-resample", cohort=cohort, config=dcfg)
        cmd = inject_classical_error(cmd, classical, "per-conditional-resample", cohort=cohort, config=dcfg)
    return cohort, {"raw": raw, "cm": cm, "cmd": cmd}


def _scenario(cfg: BenchmarkConfig, cohort: Cohort, beta: float, k: int) -> TrueScenario:
    alpha = true_alpha_vector(cohort, dict(cfg.true_alpha), cfg.baseline_shift)
    return TrueScenario(beta, alpha, k, SCENARIOS[cfg.scenario])


def _conv_fit(cohort: Cohort, dose: DoseVector) -> dict:
    try:
        fit = fit_ml(cohort, dose)
    except DoseBmaError as exc:
        return {"estimate": math.nan, "ci_low": math.nan, "ci_high": math.nan, "note": str(exc)}
    if not fit.converged:
        return {"estimate": fit.beta_hat, "ci_low": math.nan, "ci_high": math.nan, "note": fit.message}
    return {"estimate": fit.beta_hat, "ci_low": fit.ci_low, "ci_high": fit.ci_high, "note": ""}


def _bma_fit(cohort: Cohort, matrix: DoseMatrix, cfg: BenchmarkConfig, seed: int) -> dict:
    res = run_bma(cohort, matrix, PriorSpec(cfg.alpha_sd, cfg.beta_mean), SamcConfig(t0=cfg.t0),
                  n_samples=cfg.n_samples, burn_in=cfg.burn_in, sampler=cfg.sampler, seed=seed)
    lo, hi = res.ci
    return {"estimate": res.estimate, "ci_low": lo, "ci_high": hi, "note": "",
            "posterior_mean": res.beta_summary.mean,
            "flat_deviation": res.diagnostics["flat_histogram_deviation"]}


# Worker state is installed once per process (inherited on fork).
_WORK: dict = {}


def _install(payload):
    _WORK.clear()
    _WORK.update(payload)


def _run_case(case: tuple[int, int, str]) -> dict:
    slope_idx, k, method = case
    cfg: BenchmarkConfig = _WORK["cfg"]
    seed = _WORK["seed"]
    cohort: Cohort = _WORK["cohort"]
    mats = _WORK["matrices"]
    beta = cfg.slopes[slope_idx]
    sc = _scenario(cfg, cohort, beta, k)
    diseased = simulate_disease(cohort, mats["raw"].column(k), sc, derive_seed(seed, "disease", slope_idx))
    if method == "conv-mean":
        fit = _conv_fit(diseased, _WORK["mean_vector"])
    elif method == "conv-median":
        fit = _conv_fit(diseased, _WORK["median_vector"])
    else:
        name = {"bma-original": "raw", "bma-cm": "cm", "bma-cmd": "cmd"}[method]
        m = mats[name].without_column(k)
        assert m.provenance["excluded_column"] == k and m.K == mats[name].K - 1
        fit = _bma_fit(diseased, m, cfg, derive_seed(seed, "bma", slope_idx, k, method))
    rec = evaluate(beta, fit, method)
    return {"true_beta": beta, "set": k, **asdict(rec), "note": fit.get("note", "")}


def _pool_estimate(args) -> float:
    slope_idx, k = args
    cfg: BenchmarkConfig = _WORK["cfg"]
    cohort = _WORK["cohort"]
    beta = cfg.slopes[slope_idx]
    sc = _scenario(cfg, cohort, beta, k)
    diseased = simulate_disease(cohort, _WORK["matrices"]["raw"].column(k), sc,
                                derive_seed(_WORK["seed"], "disease", slope_idx))
    return _conv_fit(diseased, _WORK["median_vector"])


def _map(func, items: list, threads: int) -> list:
    if threads <= 1 or len(items) < 2:
        return [func(x) for x in items]
    ctx = multiprocessing.get_context("fork")
    with ProcessPoolExecutor(max_workers=threads, mp_context=ctx, initializer=_install,
                             initargs=(dict(_WORK),)) as ex:
        return list(ex.map(func, items, chunksize=1))


# -- output ----------------------------------------------------------------------------


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(FORMAT_HEADER + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def _atomic_json(path: Path, obj) -> None:
    tmp = path.with_suffix(".tmp")
    tmp.write_text(json.dumps(obj, sort_keys=True))
    os.replace(tmp, path)


RECORD_FIELDS = ("true_beta", "set", "method", "estimate", "ci_low", "ci_high", "included",
                 "relative_bias", "half_width", "relative_ucl", "flags", "note")


def _finite_mean(x) -> float:
    x = np.asarray(x, dtype=float)
    x = x[np.isfinite(x)]
    return float(x.mean()) if x.size else math.nan


def aggregate(records: list[dict], slopes: Sequence[float], methods: Sequence[str]):
    """Inclusion percentage table and bias, half-width and relative-UCL table.

    Rows are true slopes plus an ``all`` row; means skip non-finite entries.
    """
    t2, t3 = [], []
    for label, sel in [(repr(float(b)), lambda r, b=b: r["true_beta"] == b) for b in slopes] + [("all", lambda r: True)]:
        row2 = [label]
        for m in methods:
            rs = [r for r in records if r["method"] == m and sel(r)]
            row2.append(100.0 * sum(bool(r["included"]) for r in rs) / len(rs) if rs else math.nan)
            t3.append([label, m, len(rs),
                       _finite_mean([r["relative_bias"] for r in rs]),
                       _finite_mean([r["half_width"] for r in rs]),
                       _finite_mean([r["relative_ucl"] for r in rs]),
                       _finite_mean([r["estimate"] for r in rs])])
        t2.append(row2)
    return t2, t3


def run_benchmark(cfg: BenchmarkConfig, seed: int = 0, out: str | os.PathLike | None = None,
                  threads: int = 1) -> dict:
    """Full protocol for one scenario. Returns records, tables and the selected sets.

    With ``out`` set, each finished case is stored under ``out/cases`` and the
    report tables are written; rerunning with the same directory skips the
    finished cases.
    """
    cohort, mats = build_matrices(cfg, seed)
    _install({
        "cfg": cfg, "seed": seed, "cohort": cohort, "matrices": mats,
        "mean_vector": collapse_to_vector(mats["raw"], "mean"),
        "median_vector": collapse_to_vector(mats["raw"], "median"),
    })
    outdir = Path(out) if out is not None else None
    cache = None
    if outdir is not None:
        cache = outdir / "cases" / cfg.scenario
        cache.mkdir(parents=True, exist_ok=True)
    tag = cfg.digest()

    def cached(name, compute):
        if cache is None:
            return compute()
        p = cache / f"{name}.json"
        if p.exists():
            obj = json.loads(p.read_text())
            if obj.get("digest") == tag and obj.get("seed") == seed:
                return obj["value"]
        value = compute()
        _atomic_json(p, {"digest": tag, "seed": seed, "value": value})
        return value

    K = cfg.n_vectors
    selected = {}
    pool_rows = []
    for si, beta in enumerate(cfg.slopes):
        def pool(si=si):
            return _map(_pool_estimate, [(si, k) for k in range(K)], threads)
        fits = cached(f"pool_{si}", pool)
        est = [f["estimate"] for f in fits]
        idx = select_test_sets(est, cfg.n_groups, cfg.per_group, derive_seed(seed, "select", si))
        selected[beta] = [int(i) for i in idx]
        for k, f in enumerate(fits):
            pool_rows.append([beta, k, f["estimate"], f["ci_low"], f["ci_high"],
                              bool(f["ci_low"] <= beta <= f["ci_high"]), k in set(selected[beta])])

    cases = [(si, k, m) for si, b in enumerate(cfg.slopes) for k in selected[b] for m in cfg.methods]
    todo, records = [], {}
    for c in cases:
        p = cache / f"case_{c[0]}_{c[1]}_{c[2]}.json" if cache is not None else None
        if p is not None and p.exists():
            obj = json.loads(p.read_text())
            if obj.get("digest") == tag and obj.get("seed") == seed:
                records[c] = obj["value"]
                continue
        todo.append(c)
    logger.info("%d cases cached, %d to run", len(records), len(todo))
    batch = max(1, threads) * 4
    for start in range(0, len(todo), batch):
        chunk = todo[start:start + batch]
        for c, r in zip(chunk, _map(_run_case, chunk, threads)):
            records[c] = r
            if cache is not None:
                _atomic_json(cache / f"case_{c[0]}_{c[1]}_{c[2]}.json", {"digest": tag, "seed": seed, "value": r})
    recs = [records[c] for c in cases]
    t2, t3 = aggregate(recs, cfg.slopes, cfg.methods)
    report = {"records": recs, "table2": t2, "table3": t3, "selected": selected, "pool": pool_rows}
    if outdir is not None:
        write_report({cfg.scenario: report}, cfg, outdir)
    return report


def write_report(reports: Mapping[str, dict], cfg: BenchmarkConfig, outdir: Path) -> list[Path]:
    """Write the report tables for one or more scenarios (keyed by scenario name)."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    paths = [outdir / "table2_analog.csv", outdir / "table3_analog.csv", outdir / "eval_records.csv",
             outdir / "pool_conv_median.csv"]
    names = list(reports)
    write_csv(paths[0], ["scenario", "true_beta", *cfg.methods],
              ([SCENARIOS[n], *row] for n in names for row in reports[n]["table2"]))
    write_csv(paths[1], ["scenario", "true_beta", "method", "n_tests", "relative_bias", "half_width",
                         "relative_ucl", "mean_estimate"],
              ([SCENARIOS[n], *row] for n in names for row in reports[n]["table3"]))
    write_csv(paths[2], ("scenario", *RECORD_FIELDS),
              ([SCENARIOS[n], *(r[f] for f in RECORD_FIELDS)] for n in names for r in reports[n]["records"]))
    write_csv(paths[3], ["scenario", "true_beta", "set", "estimate", "ci_low", "ci_high", "included", "selected"],
              ([SCENARIOS[n], *row] for n in names for row in reports[n]["pool"]))
    return paths


# -- classical error sweep -------------------------------------------------------------------


SWEEP_GSD = (1.0, 1.3, 1.5, 2.0, 3.0)


def classical_error_sweep(cfg: BenchmarkConfig, gsd_levels: Sequence[float] = SWEEP_GSD,
                          methods: Sequence[str] = BMA_METHODS, seed: int = 0, *, true_beta: float = 12.0,
                          n_sets: int = 20, threads: int = 1) -> list[list]:
    """Estimates under increasing classical error in the dose matrices.

    Disease sets are simulated once, from error-free raw columns; for each
    GSD the matrices are regenerated with classical error (one factor per
    entry of the raw matrix, one factor per resample inside the conditional
    matrices) and each method is refit. Rows are ``(gsd, method, estimate,
    ci_low, ci_high, n_sets)`` averaged over the disease sets.
    """
    if any(g < 1 for g in gsd_levels):
        raise ValidationError("classical error GSDs must be >= 1")
    bad = [m for m in methods if m not in METHODS]
    if bad:
        raise ValidationError(f"unknown method(s) {bad}")
    rows = []
    sets = None
    for g in gsd_levels:
        cohort, mats = build_matrices(cfg, seed, ClassicalErrorSpec(float(g)))
        if sets is None:
            _, clean = build_matrices(cfg, seed)
            idx = stream(seed, "sweep-sets").choice(cfg.n_vectors, size=min(n_sets, cfg.n_vectors), replace=False)
            sets = [int(k) for k in sorted(idx)]
            true_cols = {k: clean["raw"].column(k) for k in sets}
        _install({
            "cfg": replace(cfg, slopes=(float(true_beta),)), "seed": seed, "cohort": cohort, "matrices": mats,
            "mean_vector": collapse_to_vector(mats["raw"], "mean"),
            "median_vector": collapse_to_vector(mats["raw"], "median"),
            "true_columns": true_cols,
        })
        fits = _map(_sweep_case, [(k, m) for m in methods for k in sets], threads)
        for mi, m in enumerate(methods):
            fs = fits[mi * len(sets):(mi + 1) * len(sets)]
            rows.append([float(g), m, _finite_mean([f["estimate"] for f in fs]),
                         _finite_mean([f["ci_low"] for f in fs]), _finite_mean([f["ci_high"] for f in fs]), len(fs)])
    return rows


def _sweep_case(args) -> dict:
    k, method = args
    cfg: BenchmarkConfig = _WORK["cfg"]
    seed = _WORK["seed"]
    cohort = _WORK["cohort"]
    beta = cfg.slopes[0]
    sc = _scenario(cfg, cohort, beta, k)
    diseased = simulate_disease(cohort, _WORK["true_columns"][k], sc, derive_seed(seed, "disease", "sweep"))
    if method == "conv-mean":
        return _conv_fit(diseased, _WORK["mean_vector"])
    if method == "conv-median":
        return _conv_fit(diseased, _WORK["median_vector"])
    name = {"bma-original": "raw", "bma-cm": "cm", "bma-cmd": "cmd"}[method]
    m = _WORK["matrices"][name].without_column(k)
    return _bma_fit(diseased, m, cfg, derive_seed(seed, "sweep-bma", k, method))


def write_sweep(path, rows) -> None:
    write_csv(path, ["gsd", "method", "estimate", "ci_low", "ci_high", "n_sets"], rows)
