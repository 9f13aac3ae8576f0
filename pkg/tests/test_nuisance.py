import math
from fractions import Fraction

import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import expit, logit

from ptx.data import ValidatedDataset
from ptx.errors import DimensionError, FitError, FoldError, SeparationError, SingularError
from ptx.nuisance import (
    FeatureMode,
    FeatureSpec,
    NuisanceSpecs,
    NuisanceValues,
    fit_logistic,
    fit_nuisances,
    fit_ols,
    make_folds,
    strata_of,
    transform_features,
)
from ptx.simulation import Misspec, SimScenario, simulate, true_functions


def gaussian_elimination(a, b):
    """Textbook partial-pivot elimination on the augmented matrix (test oracle)."""
    m = [list(map(float, row)) + [float(v)] for row, v in zip(a, b)]
    n = len(m)
    for col in range(n):
        piv = max(range(col, n), key=lambda i: abs(m[i][col]))
        m[col], m[piv] = m[piv], m[col]
        for i in range(col + 1, n):
            f = m[i][col] / m[col][col]
            for j in range(col, n + 1):
                m[i][j] -= f * m[col][j]
    x = [0.0] * n
    for i in reversed(range(n)):
        x[i] = (m[i][n] - math.fsum(m[i][j] * x[j] for j in range(i + 1, n))) / m[i][i]
    return np.array(x)


class TestTransform:

    def test_correct_at_one(self):
        out = transform_features([1.0, 0, 0, 0, 1], FeatureSpec(FeatureMode.CORRECT, 5))
        assert out[0] == 0.0

    def test_misspecified_at_quarter(self):
        out = transform_features([0.25, 0, 0, 0, 1], FeatureSpec(FeatureMode.MISSPECIFIED, 5))
        assert out[0] == 0.0

    def test_correct_vector(self):
        out = transform_features([2, 2, 2, 2, 1], FeatureSpec(FeatureMode.CORRECT, 5))
        npt.assert_allclose(out, [3 / math.sqrt(2)] * 4 + [1.0], rtol=0, atol=1e-15)

    def test_identity_and_matrix_input(self):
        x = np.arange(10.0).reshape(2, 5)
        npt.assert_array_equal(transform_features(x, FeatureSpec(FeatureMode.IDENTITY, 5)), x)

    def test_wrong_length(self):
        with pytest.raises(DimensionError):
            transform_features([1.0, 2.0], FeatureSpec(FeatureMode.CORRECT, 5))


class TestLogistic:

    def test_intercept_only(self):
        y = np.array([1] * 6 + [0] * 4)
        model = fit_logistic(np.empty((10, 0)), y)
        npt.assert_allclose(model.coefficients[0], math.log(6 / 4), atol=1e-12)

    def test_binary_feature_slope(self):
        f = np.repeat([0.0, 1.0], 10)
        y = np.array([1] * 3 + [0] * 7 + [1] * 7 + [0] * 3)
        model = fit_logistic(f, y)
        # grid-search oracle on the profile log-likelihood
        grid = np.linspace(1.6, 1.8, 200_001)
        b0 = logit(0.3)
        ll = 3 * np.log(expit(b0)) + 7 * np.log1p(-expit(b0)) \
            + 7 * np.log(expit(b0 + grid)) + 3 * np.log1p(-expit(b0 + grid))
        assert abs(grid[np.argmax(ll)] - 1.69460) < 1e-5
        npt.assert_allclose(model.coefficients[1], 1.69460, atol=1e-5)
        npt.assert_allclose(model.coefficients[1], logit(0.7) - logit(0.3), atol=1e-10)

    def test_all_ones(self):
        with pytest.raises(SeparationError):
            fit_logistic(np.zeros((5, 1)) + np.arange(5)[:, None], np.ones(5))

    def test_perfect_separation(self):
        f = np.arange(10.0)
        with pytest.raises(SeparationError):
            fit_logistic(f, (f > 4.5).astype(float))

    def test_rank_deficient(self):
        f = np.column_stack([np.arange(10.0), 2 * np.arange(10.0)])
        y = np.array([0, 1] * 5)
        with pytest.raises(SingularError):
            fit_logistic(f, y)

    def test_score_is_zero_at_solution(self):
        rng = np.random.default_rng(3)
        f = rng.normal(size=(500, 3))
        y = rng.binomial(1, expit(0.3 + f @ [1.0, -0.5, 0.2]))
        model = fit_logistic(f, y)
        design = np.column_stack([np.ones(500), f])
        score = design.T @ (y - model.predict_features(f)) / 500
        assert np.max(np.abs(score)) <= 1e-10

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 49), st.integers(50, 200))
    def test_intercept_only_is_logit_mean(self, k, n):
        y = np.zeros(n)
        y[:k] = 1
        model = fit_logistic(np.empty((n, 0)), y)
        assert abs(model.coefficients[0] - logit(k / n)) <= 1e-8


class TestOls:

    def test_exact_affine(self):
        f = np.arange(6.0)
        npt.assert_allclose(fit_ols(f, 2 + 3 * f).coefficients, [2, 3], atol=1e-12)

    def test_constant_response(self):
        f = np.random.default_rng(0).normal(size=(8, 2))
        npt.assert_allclose(fit_ols(f, np.full(8, 5.0)).coefficients, [5, 0, 0], atol=1e-12)

    def test_matches_elimination_oracle(self):
        rng = np.random.default_rng(11)
        f = rng.normal(size=(20, 3))
        y = rng.normal(size=20)
        design = np.column_stack([np.ones(20), f])
        oracle = gaussian_elimination(design.T @ design, design.T @ y)
        npt.assert_allclose(fit_ols(f, y).coefficients, oracle, rtol=0, atol=1e-10)

    def test_underdetermined(self):
        with pytest.raises(SingularError):
            fit_ols(np.ones((2, 3)), np.ones(2))


def dataset_with_strata(n_target, n_treated, n_control, seed=0):
    rng = np.random.default_rng(seed)
    n_trial = n_treated + n_control
    return ValidatedDataset.from_arrays(
        r=np.r_[np.ones(n_trial, int), np.zeros(n_target, int)],
        x=rng.normal(size=(n_trial + n_target, 2)),
        a=np.r_[np.ones(n_treated), np.zeros(n_control)],
        c=rng.binomial(1, 0.5, n_trial), y=rng.normal(size=n_trial),
    )


class TestFolds:

    def test_single_stratum_even_split(self):
        # target stratum of 10, trial arms sized so K=2 deals 5 and 5 in each
        ds = dataset_with_strata(10, 2, 2)
        folds = make_folds(ds, 2, seed=1)
        target = strata_of(ds)[0]
        npt.assert_array_equal(np.bincount(folds.fold_of_unit[target]), [5, 5])

    def test_deterministic(self):
        ds = dataset_with_strata(20, 20, 10)
        assert make_folds(ds, 10, 7) == make_folds(ds, 10, 7)
        assert make_folds(ds, 10, 7) != make_folds(ds, 10, 8)

    def test_every_fold_sees_every_stratum(self):
        ds = dataset_with_strata(20, 20, 10)
        folds = make_folds(ds, 10, 0)
        for idx in strata_of(ds):
            assert set(folds.fold_of_unit[idx]) == set(range(10))

    def test_k_too_large(self):
        with pytest.raises(FoldError):
            make_folds(dataset_with_strata(20, 20, 5), 6, 0)

    def test_k_below_two(self):
        with pytest.raises(FoldError):
            make_folds(dataset_with_strata(4, 4, 4), 1, 0)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(2, 30), st.integers(2, 30), st.integers(2, 30), st.integers(2, 6), st.integers(0, 2**32))
    def test_balanced_partition(self, n0, n1, n2, k, seed):
        k = min(k, n0, n1, n2)
        ds = dataset_with_strata(n0, n1, n2)
        folds = make_folds(ds, k, seed)
        sizes = np.bincount(folds.fold_of_unit, minlength=k)
        assert sizes.max() - sizes.min() <= 1
        for idx in strata_of(ds):
            counts = np.bincount(folds.fold_of_unit[idx], minlength=k)
            assert counts.max() - counts.min() <= 1


class TestFitNuisances:

    def test_perfect_compliance_hits_clip(self):
        rng = np.random.default_rng(0)
        a = rng.binomial(1, 0.5, 200)
        ds = ValidatedDataset.from_arrays(np.r_[np.ones(200, int), np.zeros(100, int)],
                                          rng.normal(size=(300, 2)), a=a, c=a, y=rng.normal(size=200))
        nu = fit_nuisances(ds, clip_delta=0.005)
        npt.assert_allclose(nu.p1, 0.995)
        npt.assert_allclose(nu.p0, 0.005)

    def test_balanced_membership(self):
        rng = np.random.default_rng(1)
        n = 400
        x = np.tile(rng.normal(size=(n // 2, 2)), (2, 1))  # same covariates in both populations
        a = rng.binomial(1, 0.5, n // 2)
        ds = ValidatedDataset.from_arrays(np.r_[np.ones(n // 2, int), np.zeros(n // 2, int)], x,
                                          a=a, c=a, y=rng.normal(size=n // 2))
        npt.assert_allclose(fit_nuisances(ds).rho, 0.5, atol=1e-8)

    def test_recovers_generating_functions(self):
        draw = simulate(SimScenario(Fraction(1, 2), 300_000, Misspec.ALL_CORRECT, seed=5), 0)
        ds = draw.dataset
        nu = fit_nuisances(ds, Misspec.ALL_CORRECT.specs())
        truth = true_functions(ds.x, draw.beta0).clipped(0.005)
        for name in ("pi", "rho", "p1", "p0", "mu11", "mu00"):
            rms = np.sqrt(np.mean((getattr(nu, name) - getattr(truth, name)) ** 2))
            assert rms < 0.02, name

    def test_large_sample_treatment_coefficients(self):
        rng = np.random.default_rng(2)
        x = np.column_stack([rng.uniform(-2, 2, (50_000, 4)), rng.binomial(1, 0.55, 50_000)])
        feats = transform_features(x, FeatureSpec(FeatureMode.CORRECT, 5))
        a = rng.binomial(1, expit(0.4 * feats[:, :4].sum(axis=1)))
        coef = fit_logistic(feats, a).coefficients
        npt.assert_allclose(coef, [0, 0.4, 0.4, 0.4, 0.4, 0], atol=0.05)

    def test_clip_bounds(self):
        ds = simulate(SimScenario("1/3", 500, "NoneCorrect", seed=1), 0).dataset
        nu = fit_nuisances(ds, Misspec.NONE_CORRECT.specs(), clip_delta=0.05)
        for name in ("pi", "rho", "p1", "p0"):
            v = getattr(nu, name)
            assert v.min() >= 0.05 and v.max() <= 0.95

    def test_one_sided_skips_p0(self):
        ds = dataset_with_strata(30, 30, 30)
        nu = fit_nuisances(ds, one_sided=True)
        assert np.all(nu.p0 == 0.0)
        assert nu.one_sided

    def test_crossfit_ignores_own_fold_outcomes(self):
        ds = simulate(SimScenario("1/2", 400, "AllCorrect", seed=2), 0).dataset
        folds = make_folds(ds, 5, 0)
        specs = Misspec.ALL_CORRECT.specs()
        base = fit_nuisances(ds, specs, folds)
        in_fold = np.flatnonzero((folds.fold_of_unit == 3) & (ds.r == 1))
        y = ds.y.copy()
        y[in_fold] = np.random.default_rng(0).permutation(y[in_fold]) + 100.0
        moved = fit_nuisances(ds.with_outcome(y), specs, folds)
        mask = folds.fold_of_unit == 3
        npt.assert_array_equal(moved.mu11[mask], base.mu11[mask])
        npt.assert_array_equal(moved.mu00[mask], base.mu00[mask])
        assert not np.allclose(moved.mu11[~mask], base.mu11[~mask])

    def test_error_names_nuisance_and_fold(self):
        # a constant covariate duplicates the intercept
        rng = np.random.default_rng(0)
        n = 60
        a = np.tile([1, 0], 20)
        x = np.column_stack([np.ones(n), rng.normal(size=n)])
        ds = ValidatedDataset.from_arrays(np.r_[np.ones(40, int), np.zeros(20, int)], x,
                                          a=a, c=rng.binomial(1, 0.5, 40), y=rng.normal(size=40))
        with pytest.raises(FitError, match=r"rho.*fold 0"):
            fit_nuisances(ds, folds=make_folds(ds, 2, 0))

    def test_spec_dimension_mismatch(self):
        with pytest.raises(DimensionError):
            fit_nuisances(dataset_with_strata(5, 5, 5), NuisanceSpecs.uniform("correct", 5))


class TestNuisanceValues:

    def test_one_sided_requires_zero_p0(self):
        with pytest.raises(ValueError):
            NuisanceValues.constant(3, pi=.5, rho=.5, p1=.5, p0=.1, mu11=0, mu00=0, one_sided=True)

    def test_clipped(self):
        nu = NuisanceValues(pi=[0.0, 1.0], rho=[0.5, 0.5], p1=[0.5, 0.5], p0=[0.2, 0.2],
                            mu11=[1, 2], mu00=[3, 4]).clipped(0.01)
        npt.assert_array_equal(nu.pi, [0.01, 0.99])
        assert nu.clip_delta == 0.01
