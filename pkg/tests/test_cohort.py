import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dosebma.cohort import (
    Cohort,
    DoseMatrix,
    DoseVector,
    Subject,
    collapse_to_vector,
    read_cohort_csv,
    read_matrix_binary,
    read_matrix_csv,
    summarize_matrix,
    synthetic_cohort,
    write_cohort_csv,
    write_matrix_binary,
    write_matrix_csv,
)
from dosebma.errors import ValidationError

doses = arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 8)),
               elements=st.floats(0, 50, allow_nan=False, width=64))


class TestCohort:
    def test_from_subjects(self):
        c = Cohort.from_subjects([Subject("a", (1.0, 0.0, 0.3), "g1", 1), Subject("b", (0.0, 1.0, 0.5), "g2")],
                                 ("male", "female", "age"))
        assert c.N == 2 and c.J == 3
        assert list(c.disease) == [1, -1]
        assert not c.has_disease
        assert c.subjects[1].disease is None

    def test_duplicate_ids(self):
        with pytest.raises(ValidationError):
            Cohort(("a", "a"), np.zeros((2, 1)), ("g", "g"), ("x",))

    def test_disease_must_be_binary(self):
        with pytest.raises(ValidationError):
            Subject("a", (1.0,), "g", 2)

    def test_covariate_length_fixed(self):
        with pytest.raises(ValidationError):
            Cohort.from_subjects([Subject("a", (1.0,), "g"), Subject("b", (1.0, 2.0), "g")])

    def test_missing_outcome_rejected(self):
        c = synthetic_cohort(5, {"g": 1.0})
        with pytest.raises(ValidationError, match="missing disease"):
            c.outcomes()

    def test_synthetic_shares(self):
        c = synthetic_cohort(101, {"a": 1.0, "b": 2.0, "c": 1.0}, seed=3)
        counts = {g: c.subgroups.count(g) for g in "abc"}
        assert sum(counts.values()) == 101
        assert counts["b"] in (50, 51)
        # sex indicators are exclusive and exhaustive
        assert np.all(c.covariates[:, 0] + c.covariates[:, 1] == 1.0)
        assert np.all((c.covariates[:, 2] >= 0) & (c.covariates[:, 2] <= 1))


class TestCollapse:
    def test_constant_row_mean(self):
        assert collapse_to_vector(DoseMatrix([[1.0, 1.0, 1.0]]), "mean").values[0] == 1.0

    def test_even_count_median(self):
        assert collapse_to_vector(DoseMatrix([[1.0, 2.0, 4.0, 8.0]]), "median").values[0] == 3.0

    def test_lognormal_moments(self):
        rng = np.random.default_rng(11)
        row = 0.1 * np.exp(math.log(3.0) * rng.standard_normal(10_000))
        m = DoseMatrix(row[None, :])
        mean = collapse_to_vector(m, "mean").values[0]
        med = collapse_to_vector(m, "median").values[0]
        assert mean == pytest.approx(0.1 * math.exp(math.log(3.0) ** 2 / 2), rel=0.05)
        assert med == pytest.approx(0.1, rel=0.05)

    def test_empty(self):
        with pytest.raises(ValidationError, match="empty dose matrix"):
            collapse_to_vector(np.empty((0, 0)))

    def test_bad_stat(self):
        with pytest.raises(ValidationError):
            collapse_to_vector(DoseMatrix([[1.0]]), "mode")

    @given(doses, st.randoms())
    def test_mean_permutation_invariant(self, v, r):
        perm = list(range(v.shape[1]))
        r.shuffle(perm)
        a = collapse_to_vector(DoseMatrix(v), "mean").values
        b = collapse_to_vector(DoseMatrix(v[:, perm]), "mean").values
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12)

    def test_skewed_rows_mean_exceeds_median(self):
        rng = np.random.default_rng(2)
        v = np.exp(rng.normal(np.log(0.05), np.log(2.5), size=(200, 2000)))
        m = DoseMatrix(v)
        assert np.all(collapse_to_vector(m, "mean").values >= collapse_to_vector(m, "median").values)


class TestSummarize:
    def test_constant_matrix(self):
        s = summarize_matrix(DoseMatrix(np.full((4, 6), 0.5)))
        for stat in ("min", "max", "median", "mean"):
            assert s.ci_low[stat] == s.ci_high[stat] == 0.5
        assert s.ci_low["variance"] == s.ci_high["variance"] == 0.0

    def test_symmetric_2x2(self):
        s = summarize_matrix(DoseMatrix([[1.0, 3.0], [3.0, 1.0]]))
        assert s.ci_low["mean"] == s.ci_high["mean"] == 2.0
        assert s.mean_vector["mean"] == 2.0

    @given(arrays(np.float64, st.integers(1, 10), elements=st.floats(0, 100, allow_nan=False, width=64)))
    def test_single_column_degenerate(self, v):
        s = summarize_matrix(DoseMatrix(v[:, None]))
        for stat, _, _, lo, hi in s.rows():
            assert lo == hi

    def test_recovers_generator_parameters(self):
        # one subgroup: cohort mean over subjects of dose = GM * exp(s^2/2)
        rng = np.random.default_rng(4)
        gm, gsd = 0.2, 1.8
        v = gm * np.exp(math.log(gsd) * rng.standard_normal((4000, 50)))
        s = summarize_matrix(DoseMatrix(v))
        expect = gm * math.exp(math.log(gsd) ** 2 / 2)
        assert s.ci_low["mean"] < expect < s.ci_high["mean"]
        assert s.median_vector["median"] == pytest.approx(gm, rel=0.03)


class TestTypes:
    def test_negative_dose(self):
        with pytest.raises(ValidationError):
            DoseVector([0.1, -0.2])
        with pytest.raises(ValidationError):
            DoseMatrix([[0.1, -0.2]])

    def test_without_column(self):
        m = DoseMatrix(np.arange(12, dtype=float).reshape(3, 4))
        r = m.without_column(1)
        assert r.K == 3
        assert r.provenance["excluded_column"] == 1
        np.testing.assert_array_equal(r.values, m.values[:, [0, 2, 3]])

    def test_immutable(self):
        m = DoseMatrix([[1.0, 2.0]])
        with pytest.raises(ValueError):
            m.values[0, 0] = 5.0


class TestFiles:
    def test_cohort_round_trip(self, tmp_path):
        c = synthetic_cohort(20, {"a": 1, "b": 1}, seed=1)
        c = c.with_disease(np.arange(20) % 2)
        write_cohort_csv(tmp_path / "c.csv", c)
        r = read_cohort_csv(tmp_path / "c.csv")
        assert r.ids == c.ids and r.subgroups == c.subgroups and r.covariate_names == c.covariate_names
        np.testing.assert_array_equal(r.covariates, c.covariates)
        np.testing.assert_array_equal(r.disease, c.disease)

    def test_unknown_disease_blank(self, tmp_path):
        c = synthetic_cohort(3, {"a": 1}, seed=1)
        write_cohort_csv(tmp_path / "c.csv", c)
        assert read_cohort_csv(tmp_path / "c.csv").disease is None
        assert (tmp_path / "c.csv").read_text().splitlines()[2].split(",")[2] == ""

    @settings(max_examples=25, deadline=None)
    @given(doses)
    def test_matrix_csv_exact(self, v):
        import tempfile
        from pathlib import Path

        with tempfile.TemporaryDirectory() as d:
            p = Path(d) / "m.csv"
            write_matrix_csv(p, DoseMatrix(v))
            m, ids = read_matrix_csv(p)
            np.testing.assert_array_equal(m.values, v)
            assert len(ids) == v.shape[0]
            assert p.read_text().splitlines()[1].startswith("subject_id,v0001")

    def test_matrix_binary_exact(self, tmp_path):
        v = np.random.default_rng(0).random((7, 3))
        write_matrix_binary(tmp_path / "m.bin", DoseMatrix(v))
        np.testing.assert_array_equal(read_matrix_binary(tmp_path / "m.bin").values, v)
