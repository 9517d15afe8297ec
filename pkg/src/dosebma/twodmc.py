"""Synthetic two-dimensional Monte Carlo dose generator.

Each realization (column) ``k`` of the dose matrix is

    dose[i, k] = base[g] * G_k * prod_c S_{k,g,c} * U_{k,i}

with ``g`` the subgroup of subject ``i``, ``G_k`` an optional factor shared
by the whole cohort, ``S_{k,g,c}`` the shared factors of subgroup ``g`` and
``U_{k,i}`` the unshared factor of subject ``i``. All factors are lognormal
with geometric mean 1.

Random streams are keyed by ``(seed, role, k)`` so that the shared draws of
column ``k`` are the same in the raw and in the conditional matrices, and
classical-error injection never disturbs the dose draws.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Mapping

import numpy as np

from .cohort import Cohort, DoseMatrix
from .errors import ValidationError
from .rng import stream

__all__ = [
    "SubgroupDose",
    "TwoDmcConfig",
    "ClassicalErrorSpec",
    "preset",
    "preset_shares",
    "generate_dose_matrix",
    "generate_conditional_matrix",
    "inject_classical_error",
    "row_gsd",
]


@dataclass(frozen=True)
class SubgroupDose:
    base_dose: float
    shared_gsd: float = 1.0
    unshared_gsd: float = 1.0
    share: float = 1.0  # relative cohort share; used only when building a synthetic cohort

    def __post_init__(self):
        if not (self.base_dose >= 0 and math.isfinite(self.base_dose)):
            raise ValidationError("base doses must be finite and nonnegative")
        if not (self.shared_gsd >= 1 and self.unshared_gsd >= 1):
            raise ValidationError("GSDs must be >= 1")
        if self.share < 0:
            raise ValidationError("subgroup share must be nonnegative")


@dataclass(frozen=True)
class TwoDmcConfig:
    subgroups: Mapping[str, SubgroupDose]
    n_shared_factors: int = 1
    global_gsd: float = 1.0
    name: str = "custom"

    def __post_init__(self):
        if not self.subgroups:
            raise ValidationError("at least one subgroup is required")
        if self.n_shared_factors < 1:
            raise ValidationError("n_shared_factors must be >= 1")
        if self.global_gsd < 1:
            raise ValidationError("GSDs must be >= 1")
        subs = {str(k): (v if isinstance(v, SubgroupDose) else SubgroupDose(**v)) for k, v in self.subgroups.items()}
        object.__setattr__(self, "subgroups", dict(sorted(subs.items())))

    @property
    def labels(self) -> tuple[str, ...]:
        return tuple(self.subgroups)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "n_shared_factors": self.n_shared_factors,
            "global_gsd": self.global_gsd,
            "subgroups": {k: asdict(v) for k, v in self.subgroups.items()},
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "TwoDmcConfig":
        return cls(
            subgroups={k: SubgroupDose(**v) for k, v in d["subgroups"].items()},
            n_shared_factors=int(d.get("n_shared_factors", 1)),
            global_gsd=float(d.get("global_gsd", 1.0)),
            name=str(d.get("name", "custom")),
        )

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def shares(self) -> dict[str, float]:
        return {k: v.share for k, v in self.subgroups.items()}


@dataclass(frozen=True)
class ClassicalErrorSpec:
    gsd: float = 1.0

    def __post_init__(self):
        if not self.gsd >= 1.0:
            raise ValidationError(f"classical error GSD must be >= 1, got {self.gsd}")


# -- presets -----------------------------------------------------------------

# (base dose Gy, shared GSD, unshared GSD, share). Twenty subgroups each, with
# base doses spread geometrically over three orders of magnitude so the cohort
# contains both near-unexposed and heavily exposed subgroups.
# `external`: small doses, per-subject GSD below ~1.6.
# `total`: strongly uncertain doses; shared and unshared GSDs grow with the
# subgroup's dose, about 30% of subjects have a per-subject GSD above 3 and
# 5% above 4.
_EXTERNAL = dict(
    global_gsd=1.15,
    rows=[(0.0015 * 1.41**j, 1.25, 1.25, 1.0) for j in range(20)],
)
_TOTAL_SHARED = [1.3 + 0.3 * j / 13 for j in range(14)] + [1.7, 1.775, 1.85, 1.925, 2.0, 2.5]
_TOTAL = dict(
    global_gsd=1.0,
    rows=[(0.003 * 1.41**j, _TOTAL_SHARED[j], 2.0 + 0.9 * j / 19, 1.0) for j in range(20)],
)


def preset(name: str, **overrides) -> TwoDmcConfig:
    """Presets: ``external`` (mild uncertainty) and ``total`` (strong shared and unshared uncertainty)."""
    table = {"external": _EXTERNAL, "total": _TOTAL}.get(name)
    if table is None:
        raise ValidationError(f"unknown preset {name!r} (expected 'external' or 'total')")
    subs = {
        f"g{j + 1:02d}": SubgroupDose(base, sg, ug, share)
        for j, (base, sg, ug, share) in enumerate(table["rows"])
    }
    kw = dict(subgroups=subs, n_shared_factors=1, global_gsd=table["global_gsd"], name=name)
    kw.update(overrides)
    return TwoDmcConfig(**kw)


def preset_shares(name: str) -> dict[str, float]:
    return preset(name).shares()


# -- generation --------------------------------------------------------------


def _layout(cohort: Cohort, config: TwoDmcConfig):
    labels = config.labels
    index = {g: j for j, g in enumerate(labels)}
    try:
        gidx = np.array([index[g] for g in cohort.subgroups])
    except KeyError as exc:
        raise ValidationError(f"subgroup {exc.args[0]!r} is not in the dose configuration") from None
    subs = [config.subgroups[g] for g in labels]
    base = np.array([s.base_dose for s in subs])[gidx]
    ln_sg = np.log([s.shared_gsd for s in subs])
    ln_ug = np.log([s.unshared_gsd for s in subs])[gidx]
    return gidx, len(labels), base, ln_sg, ln_ug


def _shared_log_factor(seed, k, gidx, n_groups, ln_sg, config):
    rng = stream(seed, "shared", k)
    z = rng.standard_normal((n_groups, config.n_shared_factors)).sum(axis=1)
    zg = rng.standard_normal()
    return (ln_sg * z)[gidx] + math.log(config.global_gsd) * zg


def _provenance(config, seed, K, **extra):
    return {"config_digest": config.digest(), "config_name": config.name, "seed": int(seed), "K": int(K), **extra}


def generate_dose_matrix(cohort: Cohort, config: TwoDmcConfig, K: int, seed: int) -> DoseMatrix:
    """Raw realizations: one shared draw per subgroup and one unshared draw per subject per column."""
    if K < 1:
        raise ValidationError("K must be >= 1")
    gidx, n_groups, base, ln_sg, ln_ug = _layout(cohort, config)
    out = np.empty((cohort.N, K))
    for k in range(K):
        log_s = _shared_log_factor(seed, k, gidx, n_groups, ln_sg, config)
        z = stream(seed, "unshared", k).standard_normal(cohort.N)
        out[:, k] = base * np.exp(log_s + ln_ug * z)
    return DoseMatrix(out, "raw-realizations", _provenance(config, seed, K))


def generate_conditional_matrix(cohort: Cohort, config: TwoDmcConfig, K: int, M: int = 100,
                                stat: str = "median", seed: int = 0,
                                classical: ClassicalErrorSpec | None = None) -> DoseMatrix:
    """Conditional mean/median vectors.

    For each column the shared factors are fixed at the draw used by the raw
    matrix with the same seed, the unshared factors are resampled ``M`` times
    per subject, and each subject gets the mean (or median) of its ``M``
    conditioned doses. ``classical`` multiplies every resampled dose by an
    independent lognormal classical-error factor before the statistic is taken.
    """
    if K < 1:
        raise ValidationError("K must be >= 1")
    if M < 2:
        raise ValidationError("M must be >= 2")
    if stat not in ("mean", "median"):
        raise ValidationError(f"stat must be 'mean' or 'median', got {stat!r}")
    gidx, n_groups, base, ln_sg, ln_ug = _layout(cohort, config)
    ln_c = math.log(classical.gsd) if classical is not None else 0.0
    reduce = np.mean if stat == "mean" else np.median
    out = np.empty((cohort.N, K))
    for k in range(K):
        log_s = _shared_log_factor(seed, k, gidx, n_groups, ln_sg, config)
        logu = ln_ug[:, None] * stream(seed, "resample", k).standard_normal((cohort.N, M))
        if ln_c > 0.0:
            logu = logu + ln_c * stream(seed, "classical-resample", k).standard_normal((cohort.N, M))
        out[:, k] = base * np.exp(log_s) * reduce(np.exp(logu), axis=1)
    kind = "conditional-mean" if stat == "mean" else "conditional-median"
    prov = _provenance(config, seed, K, M=int(M), stat=stat, classical_gsd=classical.gsd if classical else 1.0)
    return DoseMatrix(out, kind, prov)


def inject_classical_error(matrix: DoseMatrix, spec: ClassicalErrorSpec, mode: str = "per-realization",
                           seed: int = 0, *, cohort: Cohort | None = None,
                           config: TwoDmcConfig | None = None) -> DoseMatrix:
    """Multiply doses by lognormal(GM 1, ``spec.gsd``) classical-error factors.

    ``per-realization`` draws one factor per matrix entry. ``per-conditional-resample``
    regenerates a conditional matrix with the factor applied inside each of
    the M resamples; it needs the cohort and config the matrix came from.
    """
    if mode == "per-realization":
        if spec.gsd == 1.0:
            return matrix
        ln_c = math.log(spec.gsd)
        out = np.empty_like(matrix.values)
        for k in range(matrix.K):
            out[:, k] = matrix.values[:, k] * np.exp(ln_c * stream(seed, "classical", k).standard_normal(matrix.N))
        prov = dict(matrix.provenance, classical_gsd=spec.gsd, classical_mode=mode, classical_seed=int(seed))
        return DoseMatrix(out, matrix.kind, prov)
    if mode == "per-conditional-resample":
        if matrix.kind == "raw-realizations":
            raise ValidationError("per-conditional-resample mode applies to conditional matrices only")
        if cohort is None or config is None:
            raise ValidationError("per-conditional-resample mode regenerates the matrix: pass cohort and config")
        prov = matrix.provenance
        if prov.get("config_digest") != config.digest():
            raise ValidationError("config does not match the matrix provenance")
        return generate_conditional_matrix(cohort, config, matrix.K, prov["M"], prov["stat"], prov["seed"],
                                           classical=spec)
    raise ValidationError(f"unknown classical error mode {mode!r}")


def row_gsd(matrix: DoseMatrix) -> np.ndarray:
    """Empirical per-subject geometric standard deviation across realizations."""
    with np.errstate(divide="ignore"):
        logs = np.log(matrix.values)
    return np.exp(np.std(logs, axis=1, ddof=1))
