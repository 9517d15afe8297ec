import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dosebma.cohort import Cohort, DoseVector
from dosebma.errors import ValidationError
from dosebma.risk import (
    DomainError,
    EorParams,
    RiskParams,
    disease_probability,
    excess_odds_ratio,
    log_likelihood,
    log_likelihood_gradient,
    log_likelihood_hessian,
    odds,
)


def _cohort(X, y=None):
    X = np.atleast_2d(np.asarray(X, dtype=float))
    n = X.shape[0]
    return Cohort(tuple(f"s{i}" for i in range(n)), X, ("g",) * n, tuple(f"x{j}" for j in range(X.shape[1])), y)


def _random_problem(seed, n=40, J=3):
    rng = np.random.default_rng(seed)
    X = np.column_stack([np.ones(n), rng.normal(size=(n, J - 1))])
    D = rng.lognormal(-1.0, 1.0, n)
    y = (rng.random(n) < 0.4).astype(int)
    alpha = rng.normal(0, 1, J)
    beta = float(rng.lognormal(0.0, 1.0))
    return _cohort(X, y), DoseVector(D), RiskParams(alpha, beta)


class TestProbability:
    def test_even_odds(self):
        assert disease_probability(RiskParams([0.0], 0.0), [1.0], 0.7) == 0.5

    @given(st.floats(-5, 5), st.floats(0, 100))
    def test_zero_dose_ignores_beta(self, a, b):
        p = disease_probability(RiskParams([a], b), [1.0], 0.0)
        assert p == pytest.approx(1 / (1 + math.exp(-a)), rel=1e-12)

    def test_hand_value(self):
        p = disease_probability(RiskParams([-3.0], 12.0), [1.0], 0.1)
        assert p == pytest.approx(math.exp(-3) * 2.2 / (1 + math.exp(-3) * 2.2), rel=1e-12)
        assert p == pytest.approx(0.09872, abs=5e-6)

    @given(st.floats(-4, 4), st.floats(0.01, 50), st.floats(0, 5), st.floats(0.001, 1))
    def test_monotone_in_dose_and_beta(self, a, b, d, h):
        p = lambda beta, dose: disease_probability(RiskParams([a], beta), [1.0], dose)
        assert p(b, d + h) >= p(b, d)
        if d > 0:
            assert p(b + h, d) >= p(b, d)
        # strictness where float resolution allows it
        if abs(a) < 2 and b * d < 10:
            assert p(b, d + h) > p(b, d)

    @given(st.floats(-4, 4), st.floats(0, 50), st.floats(0, 5), st.floats(0.01, 100))
    def test_dose_scale_invariance(self, a, b, d, c):
        p1 = disease_probability(RiskParams([a], b), [1.0], d)
        p2 = disease_probability(RiskParams([a], b / c), [1.0], d * c)
        assert p1 == pytest.approx(p2, rel=1e-9)

    def test_negative_beta_rejected(self):
        with pytest.raises(ValidationError):
            RiskParams([0.0], -0.1)

    def test_extreme_predictor_stable(self):
        c = _cohort([[600.0], [-600.0]], [1, 0])
        assert log_likelihood(RiskParams([1.0], 0.0), c, DoseVector([0.0, 0.0])) == pytest.approx(0.0, abs=1e-12)


class TestLikelihood:
    def test_single_subject(self):
        for y in (0, 1):
            assert log_likelihood(RiskParams([0.0], 0.0), _cohort([[1.0]], [y]), DoseVector([0.0])) == pytest.approx(
                math.log(0.5))

    def test_two_subject_product(self):
        # probabilities 0.9 and 0.2 through the intercept alone
        X = [[1.0, 0.0], [0.0, 1.0]]
        alpha = [math.log(9.0), math.log(0.25)]
        ll = log_likelihood(RiskParams(alpha, 0.0), _cohort(X, [1, 0]), DoseVector([0.0, 0.0]))
        assert ll == pytest.approx(math.log(0.9) + math.log(0.8), rel=1e-12)
        assert ll == pytest.approx(-0.3285, abs=5e-5)

    @given(st.integers(0, 10_000), st.randoms())
    @settings(max_examples=25)
    def test_permutation_invariant(self, seed, r):
        c, d, p = _random_problem(seed, n=15)
        order = list(range(c.N))
        r.shuffle(order)
        cp = c.permuted(order)
        assert log_likelihood(p, cp, DoseVector(d.values[order])) == pytest.approx(log_likelihood(p, c, d),
                                                                                    rel=1e-12)

    def test_missing_status(self):
        with pytest.raises(ValidationError):
            log_likelihood(RiskParams([0.0], 1.0), _cohort([[1.0]]), DoseVector([0.1]))

    def test_length_mismatch(self):
        with pytest.raises(ValidationError):
            log_likelihood(RiskParams([0.0], 1.0), _cohort([[1.0]], [1]), DoseVector([0.1, 0.2]))


class TestGradient:
    @given(st.integers(0, 2**31 - 1))
    @settings(max_examples=100, deadline=None)
    def test_central_differences(self, seed):
        c, d, p = _random_problem(seed)
        g = log_likelihood_gradient(p, c, d)
        theta = p.vector
        num = np.empty_like(theta)
        for j in range(theta.size):
            h = 1e-6 * max(1.0, abs(theta[j]))
            e = np.zeros_like(theta)
            e[j] = h
            num[j] = (log_likelihood(RiskParams.from_vector(theta + e), c, d)
                      - log_likelihood(RiskParams.from_vector(theta - e), c, d)) / (2 * h)
        assert np.linalg.norm(g - num) / max(np.linalg.norm(num), 1e-3) < 1e-6

    def test_beta_component_zero_without_dose(self):
        c, _, p = _random_problem(1)
        assert log_likelihood_gradient(p, c, DoseVector(np.zeros(c.N)))[-1] == 0.0

    @given(st.integers(0, 2**31 - 1))
    @settings(max_examples=30, deadline=None)
    def test_hessian_matches_gradient_differences(self, seed):
        c, d, p = _random_problem(seed)
        H = log_likelihood_hessian(p, c, d)
        theta = p.vector
        for j in range(theta.size):
            h = 1e-5 * max(1.0, abs(theta[j]))
            e = np.zeros_like(theta)
            e[j] = h
            col = (log_likelihood_gradient(RiskParams.from_vector(theta + e), c, d)
                   - log_likelihood_gradient(RiskParams.from_vector(theta - e), c, d)) / (2 * h)
            np.testing.assert_allclose(H[:, j], col, rtol=1e-5, atol=1e-6)

    @given(st.integers(0, 2**31 - 1))
    @settings(max_examples=50, deadline=None)
    def test_concave_in_alpha(self, seed):
        c, d, p = _random_problem(seed)
        H = log_likelihood_hessian(p, c, d)[:-1, :-1]
        assert np.all(np.linalg.eigvalsh(H) < 0)


class TestExcessOddsRatio:
    def test_no_dose(self):
        p = EorParams([0.2], [5.0, 3.0], [0.7])
        assert excess_odds_ratio(p, [0.0, 0.0], [1.0]) == 0.0
        assert odds(p, [1.0], [0.0, 0.0], [1.0]) == pytest.approx(math.exp(0.2))

    def test_no_modification(self):
        p = EorParams([0.0], [5.0, 3.0], [0.0])
        assert excess_odds_ratio(p, [0.1, 0.2], [-1.0]) == pytest.approx(5.0 * 0.1 + 3.0 * 0.2)

    def test_sex_modifier_ratio(self):
        # modifier coded -1 male, +1 female: male/female EOR = exp(-2 gamma)
        ratio = 9.99 / 0.35
        gamma = -math.log(ratio) / 2
        p = EorParams([0.0], [4.0], [gamma])
        male = excess_odds_ratio(p, [0.3], [-1.0])
        female = excess_odds_ratio(p, [0.3], [1.0])
        assert male / female == pytest.approx(math.exp(-2 * gamma), rel=1e-12)
        assert 28.0 < male / female < 30.0

    def test_nonpositive_odds_ratio(self):
        with pytest.raises(DomainError):
            excess_odds_ratio(EorParams([0.0], [-5.0], [0.0]), [0.5], [0.0])

    def test_shape_mismatch(self):
        with pytest.raises(ValidationError):
            excess_odds_ratio(EorParams([0.0], [1.0], [0.0]), [0.5, 0.1], [0.0])
