"""Cohorts, dose matrices and the single-vector collapses used by conventional regression.

A :class:`DoseMatrix` holds ``N`` subjects by ``K`` realizations; each column
is one internally consistent cohort dose vector. Row order always matches the
subject order of the :class:`Cohort` it was generated for.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Literal, Mapping, Sequence

import numpy as np

from .errors import ValidationError
from .rng import stream

FORMAT_HEADER = "# dosebma-format v1"
BINARY_MAGIC = b"DOSEBMA1"

MatrixKind = Literal["raw-realizations", "conditional-mean", "conditional-median"]
MATRIX_KINDS = ("raw-realizations", "conditional-mean", "conditional-median")
SUMMARY_STATS = ("min", "max", "median", "mean", "variance")

__all__ = [
    "Subject",
    "Cohort",
    "DoseMatrix",
    "DoseVector",
    "DoseSummary",
    "collapse_to_vector",
    "summarize_matrix",
    "synthetic_cohort",
    "read_cohort_csv",
    "write_cohort_csv",
    "read_matrix_csv",
    "write_matrix_csv",
    "read_matrix_binary",
    "write_matrix_binary",
    "column_label",
]


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Subject:
    id: str
    covariates: tuple[float, ...]
    subgroup: str
    disease: int | None = None

    def __post_init__(self):
        if self.disease is not None and self.disease not in (0, 1):
            raise ValidationError(f"subject {self.id}: disease must be 0 or 1, got {self.disease!r}")


@dataclass(frozen=True, eq=False)
class Cohort:
    """Column-oriented cohort.

    ``disease`` uses -1 for an unknown outcome. Construct from rows with
    :meth:`from_subjects`, or directly from arrays.
    """

    ids: tuple[str, ...]
    covariates: np.ndarray
    subgroups: tuple[str, ...]
    covariate_names: tuple[str, ...]
    disease: np.ndarray | None = None

    def __post_init__(self):
        X = np.array(self.covariates, dtype=float, copy=True)
        if X.ndim != 2:
            raise ValidationError("covariates must be an N x J array")
        n = X.shape[0]
        if n < 1:
            raise ValidationError("a cohort needs at least one subject")
        if len(self.ids) != n or len(self.subgroups) != n:
            raise ValidationError("ids, subgroups and covariates must have the same length")
        if len(set(self.ids)) != n:
            raise ValidationError("subject ids must be unique")
        if len(self.covariate_names) != X.shape[1]:
            raise ValidationError("one covariate name per covariate column is required")
        if not np.all(np.isfinite(X)):
            raise ValidationError("covariates must be finite")
        object.__setattr__(self, "ids", tuple(str(i) for i in self.ids))
        object.__setattr__(self, "subgroups", tuple(str(g) for g in self.subgroups))
        object.__setattr__(self, "covariate_names", tuple(self.covariate_names))
        object.__setattr__(self, "covariates", _frozen(X))
        if self.disease is not None:
            y = np.array(self.disease, dtype=np.int8, copy=True)
            if y.shape != (n,):
                raise ValidationError("disease must have one entry per subject")
            if not np.all(np.isin(y, (-1, 0, 1))):
                raise ValidationError("disease entries must be 0, 1 or unknown")
            object.__setattr__(self, "disease", _frozen(y))

    @classmethod
    def from_subjects(cls, subjects: Sequence[Subject], covariate_names: Sequence[str] | None = None):
        if not subjects:
            raise ValidationError("a cohort needs at least one subject")
        J = len(subjects[0].covariates)
        if any(len(s.covariates) != J for s in subjects):
            raise ValidationError("covariate vectors must have the same length for every subject")
        names = tuple(covariate_names) if covariate_names is not None else tuple(f"x{j + 1}" for j in range(J))
        disease = None
        if any(s.disease is not None for s in subjects):
            disease = [-1 if s.disease is None else s.disease for s in subjects]
        return cls(
            ids=tuple(s.id for s in subjects),
            covariates=np.array([s.covariates for s in subjects], dtype=float).reshape(len(subjects), J),
            subgroups=tuple(s.subgroup for s in subjects),
            covariate_names=names,
            disease=disease,
        )

    @property
    def N(self) -> int:
        return self.covariates.shape[0]

    @property
    def J(self) -> int:
        return self.covariates.shape[1]

    @property
    def subjects(self) -> list[Subject]:
        out = []
        for i in range(self.N):
            d = None
            if self.disease is not None and self.disease[i] >= 0:
                d = int(self.disease[i])
            out.append(Subject(self.ids[i], tuple(float(v) for v in self.covariates[i]), self.subgroups[i], d))
        return out

    @property
    def subgroup_labels(self) -> tuple[str, ...]:
        return tuple(sorted(set(self.subgroups)))

    @property
    def has_disease(self) -> bool:
        return self.disease is not None and bool(np.all(self.disease >= 0))

    def outcomes(self) -> np.ndarray:
        """Disease vector as float 0/1; raises if any status is unknown."""
        if not self.has_disease:
            raise ValidationError("missing disease status for one or more subjects")
        return self.disease.astype(float)

    def with_disease(self, y) -> "Cohort":
        return Cohort(self.ids, self.covariates, self.subgroups, self.covariate_names, np.asarray(y))

    def permuted(self, order) -> "Cohort":
        order = np.asarray(order)
        return Cohort(
            tuple(self.ids[i] for i in order),
            self.covariates[order],
            tuple(self.subgroups[i] for i in order),
            self.covariate_names,
            None if self.disease is None else self.disease[order],
        )


def column_label(k: int) -> str:
    """Zero-based column index to the CSV header label (``0 -> v0001``)."""
    return f"v{k + 1:04d}"


@dataclass(frozen=True, eq=False)
class DoseVector:
    values: np.ndarray
    label: str = ""

    def __post_init__(self):
        v = np.array(self.values, dtype=float, copy=True).reshape(-1)
        if v.size == 0:
            raise ValidationError("empty dose vector")
        if not np.all(np.isfinite(v)) or np.any(v < 0):
            raise ValidationError("doses must be finite and nonnegative")
        object.__setattr__(self, "values", _frozen(v))

    def __len__(self):
        return self.values.size

    def scaled(self, c: float) -> "DoseVector":
        return DoseVector(self.values * c, f"{self.label} x {c:g}")


@dataclass(frozen=True, eq=False)
class DoseMatrix:
    values: np.ndarray
    kind: str = "raw-realizations"
    provenance: Mapping = field(default_factory=dict)

    def __post_init__(self):
        v = np.array(self.values, dtype=float, copy=True)
        if v.ndim == 1:
            v = v[:, None]
        if v.ndim != 2 or v.size == 0:
            raise ValidationError("empty dose matrix")
        if not np.all(np.isfinite(v)) or np.any(v < 0):
            raise ValidationError("doses must be finite and nonnegative")
        if self.kind not in MATRIX_KINDS:
            raise ValidationError(f"unknown matrix kind {self.kind!r}")
        object.__setattr__(self, "values", _frozen(v))
        object.__setattr__(self, "provenance", dict(self.provenance))

    @property
    def N(self) -> int:
        return self.values.shape[0]

    @property
    def K(self) -> int:
        return self.values.shape[1]

    @property
    def labels(self) -> list[str]:
        return [column_label(k) for k in range(self.K)]

    def column(self, k: int) -> DoseVector:
        return DoseVector(self.values[:, k], f"column {column_label(k)} ({self.kind})")

    def without_column(self, k: int) -> "DoseMatrix":
        if not 0 <= k < self.K:
            raise IndexError(k)
        keep = np.delete(np.arange(self.K), k)
        prov = dict(self.provenance)
        prov["excluded_column"] = int(k)
        return DoseMatrix(self.values[:, keep], self.kind, prov)


def collapse_to_vector(matrix, stat: str = "mean") -> DoseVector:
    """Per-subject mean or median across the K realizations."""
    v = matrix.values if isinstance(matrix, DoseMatrix) else np.asarray(matrix, dtype=float)
    if v.ndim != 2 or v.size == 0:
        raise ValidationError("empty dose matrix")
    if stat == "mean":
        out = v.mean(axis=1)
    elif stat == "median":
        # numpy averages the two middle order statistics for even K
        out = np.median(v, axis=1)
    else:
        raise ValidationError(f"stat must be 'mean' or 'median', got {stat!r}")
    return DoseVector(out, f"per-subject {stat} of {v.shape[1]} realizations")


def _cohort_stats(v: np.ndarray) -> dict[str, np.ndarray]:
    # column-wise statistics over subjects; v is N x K
    return {
        "min": v.min(axis=0),
        "max": v.max(axis=0),
        "median": np.median(v, axis=0),
        "mean": v.mean(axis=0),
        "variance": v.var(axis=0),
    }


@dataclass(frozen=True)
class DoseSummary:
    """Cohort dose statistics of one matrix, summarized across its realizations.

    For each statistic: its value on the collapsed mean vector, on the
    collapsed median vector, and the 2.5 / 97.5 percentiles of that
    statistic across the K dose vectors.
    """

    mean_vector: dict
    median_vector: dict
    ci_low: dict
    ci_high: dict
    kind: str
    K: int

    def rows(self) -> list[tuple[str, float, float, float, float]]:
        return [(s, self.mean_vector[s], self.median_vector[s], self.ci_low[s], self.ci_high[s]) for s in SUMMARY_STATS]


def summarize_matrix(matrix: DoseMatrix) -> DoseSummary:
    v = matrix.values
    per_vector = _cohort_stats(v)
    mean_vec = _cohort_stats(collapse_to_vector(matrix, "mean").values[:, None])
    median_vec = _cohort_stats(collapse_to_vector(matrix, "median").values[:, None])
    lo, hi = {}, {}
    for s in SUMMARY_STATS:
        lo[s], hi[s] = (float(q) for q in np.percentile(per_vector[s], [2.5, 97.5]))
    return DoseSummary(
        mean_vector={s: float(mean_vec[s][0]) for s in SUMMARY_STATS},
        median_vector={s: float(median_vec[s][0]) for s in SUMMARY_STATS},
        ci_low=lo,
        ci_high=hi,
        kind=matrix.kind,
        K=matrix.K,
    )


def synthetic_cohort(
    n: int,
    subgroup_shares: Mapping[str, float],
    *,
    male_fraction: float = 0.45,
    seed: int = 0,
) -> Cohort:
    """Build a cohort with covariates ``(male, female, age)``.

    Sex is coded as two indicator columns with no separate intercept; age is a
    standardized value in [0, 1]. Subgroup sizes follow ``subgroup_shares``
    with largest-remainder rounding, and subjects are listed subgroup by
    subgroup.
    """
    if n < 1:
        raise ValidationError("n must be positive")
    labels = sorted(subgroup_shares)
    w = np.array([subgroup_shares[g] for g in labels], dtype=float)
    if np.any(w < 0) or w.sum() <= 0:
        raise ValidationError("subgroup shares must be nonnegative with a positive sum")
    raw = w / w.sum() * n
    counts = np.floor(raw).astype(int)
    for i in np.argsort(-(raw - counts), kind="stable")[: n - counts.sum()]:
        counts[i] += 1
    rng = stream(seed, "cohort")
    male = (rng.random(n) < male_fraction).astype(float)
    age = rng.random(n)
    groups = np.repeat(labels, counts)
    X = np.column_stack([male, 1.0 - male, age])
    ids = tuple(f"s{i + 1:05d}" for i in range(n))
    return Cohort(ids, X, tuple(groups), ("male", "female", "age"))


# -- file formats ------------------------------------------------------------


def _data_lines(path) -> Iterable[str]:
    with open(path, newline="") as fh:
        for line in fh:
            if line.startswith("#"):
                continue
            yield line


def write_cohort_csv(path, cohort: Cohort) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(FORMAT_HEADER + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject_id", "subgroup", "disease", *cohort.covariate_names])
        for i in range(cohort.N):
            d = ""
            if cohort.disease is not None and cohort.disease[i] >= 0:
                d = str(int(cohort.disease[i]))
            w.writerow([cohort.ids[i], cohort.subgroups[i], d, *(repr(float(x)) for x in cohort.covariates[i])])


def read_cohort_csv(path) -> Cohort:
    reader = csv.reader(_data_lines(path))
    try:
        header = next(reader)
    except StopIteration:
        raise ValidationError(f"{path}: empty cohort file") from None
    if header[:3] != ["subject_id", "subgroup", "disease"]:
        raise ValidationError(f"{path}: header must start with subject_id,subgroup,disease")
    ids, groups, ys, rows = [], [], [], []
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise ValidationError(f"{path}: row {lineno} has {len(row)} fields, expected {len(header)}")
        ids.append(row[0])
        groups.append(row[1])
        cell = row[2].strip()
        if cell == "":
            ys.append(-1)
        elif cell in ("0", "1"):
            ys.append(int(cell))
        else:
            raise ValidationError(f"{path}: row {lineno}: disease must be 0, 1 or blank, got {cell!r}")
        try:
            rows.append([float(x) for x in row[3:]])
        except ValueError as exc:
            raise ValidationError(f"{path}: row {lineno}: {exc}") from None
    X = np.array(rows, dtype=float).reshape(len(rows), len(header) - 3)
    disease = None if all(y < 0 for y in ys) else ys
    return Cohort(tuple(ids), X, tuple(groups), tuple(header[3:]), disease)


def write_matrix_csv(path, matrix: DoseMatrix, subject_ids: Sequence[str] | None = None) -> None:
    ids = subject_ids if subject_ids is not None else [f"s{i + 1:05d}" for i in range(matrix.N)]
    if len(ids) != matrix.N:
        raise ValidationError("one subject id per matrix row is required")
    with open(path, "w", newline="") as fh:
        fh.write(FORMAT_HEADER + "\n")
        fh.write(",".join(["subject_id", *matrix.labels]) + "\n")
        for sid, row in zip(ids, matrix.values):
            # repr gives the shortest string that round-trips exactly
            fh.write(sid + "," + ",".join(map(repr, row.tolist())) + "\n")


def read_matrix_csv(path, kind: str = "raw-realizations") -> tuple[DoseMatrix, list[str]]:
    reader = csv.reader(_data_lines(path))
    try:
        header = next(reader)
    except StopIteration:
        raise ValidationError(f"{path}: empty dose matrix") from None
    if not header or header[0] != "subject_id":
        raise ValidationError(f"{path}: header must start with subject_id")
    ids, rows = [], []
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise ValidationError(f"{path}: row {lineno} has {len(row)} fields, expected {len(header)}")
        ids.append(row[0])
        try:
            rows.append([float(x) for x in row[1:]])
        except ValueError as exc:
            raise ValidationError(f"{path}: row {lineno}: {exc}") from None
    if not rows or len(header) < 2:
        raise ValidationError(f"{path}: empty dose matrix")
    return DoseMatrix(np.array(rows), kind, {"source": str(path)}), ids


def write_matrix_binary(path, matrix: DoseMatrix) -> None:
    """Compact format: magic, N and K as little-endian uint64, then float64 row-major."""
    with open(path, "wb") as fh:
        fh.write(BINARY_MAGIC)
        fh.write(struct.pack("<QQ", matrix.N, matrix.K))
        fh.write(np.ascontiguousarray(matrix.values, dtype="<f8").tobytes())


def read_matrix_binary(path, kind: str = "raw-realizations") -> DoseMatrix:
    data = Path(path).read_bytes()
    if data[:8] != BINARY_MAGIC:
        raise ValidationError(f"{path}: not a dosebma binary matrix")
    n, k = struct.unpack("<QQ", data[8:24])
    body = data[24:]
    if len(body) != 8 * n * k:
        raise ValidationError(f"{path}: truncated matrix body")
    return DoseMatrix(np.frombuffer(body, dtype="<f8").reshape(n, k), kind, {"source": str(path)})
