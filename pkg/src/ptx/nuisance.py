"""Nuisance models: treatment probability, participation probability,
principal scores and outcome regressions.

All models are parametric GLMs with an intercept.  Logistic fits use
Newton-Raphson (IRLS) with step halving; linear fits use least squares.
Predictions can be cross-fitted over a stratified K-fold partition.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import expit

from ptx.data import ValidatedDataset
from ptx.errors import (
    ConvergenceError,
    DimensionError,
    FitError,
    FoldError,
    SeparationError,
    SingularError,
)

__all__ = [
    "FeatureMode",
    "FeatureSpec",
    "Family",
    "GlmModel",
    "FoldAssignment",
    "NuisanceSpecs",
    "NuisanceValues",
    "transform_features",
    "fit_logistic",
    "fit_ols",
    "make_folds",
    "fit_nuisances",
    "DEFAULT_CLIP",
]

DEFAULT_CLIP = 0.005
RIDGE_JITTER = 1e-8
_PROB_GUARD = 1e-10
_SQRT2 = math.sqrt(2.0)


class FeatureMode(str, enum.Enum):
    CORRECT = "correct"
    MISSPECIFIED = "misspecified"
    IDENTITY = "identity"


@dataclass(frozen=True)
class FeatureSpec:
    """Covariate transform applied before a nuisance model.

    ``CORRECT`` maps the first four coordinates to ``(x**2 - 1)/sqrt(2)``,
    ``MISSPECIFIED`` to ``x - 0.25``; remaining coordinates pass through.
    """

    mode: FeatureMode
    p: int

    def __post_init__(self):
        object.__setattr__(self, "mode", FeatureMode(self.mode))


def transform_features(x, spec: FeatureSpec) -> np.ndarray:
    """Apply ``spec`` to a covariate vector or to each row of a matrix."""
    x = np.asarray(x, dtype=float)
    if x.ndim not in (1, 2) or x.shape[-1] != spec.p:
        raise DimensionError(f"expected {spec.p} covariates, got shape {x.shape}")
    if spec.mode is FeatureMode.IDENTITY:
        return x.copy()
    out = x.copy()
    k = min(4, spec.p)
    head = x[..., :k]
    if spec.mode is FeatureMode.CORRECT:
        out[..., :k] = (head**2 - 1.0) / _SQRT2
    else:
        out[..., :k] = head - 0.25
    return out


class Family(str, enum.Enum):
    LOGISTIC = "logistic"
    LINEAR = "linear"


@dataclass(frozen=True)
class GlmModel:
    family: Family
    coefficients: np.ndarray  # intercept first
    feature_spec: Optional[FeatureSpec] = None
    n_iter: int = 0

    def linear_predictor(self, features) -> np.ndarray:
        features = np.atleast_2d(np.asarray(features, dtype=float))
        return self.coefficients[0] + features @ self.coefficients[1:]

    def predict_features(self, features) -> np.ndarray:
        eta = self.linear_predictor(features)
        return expit(eta) if self.family is Family.LOGISTIC else eta

    def predict(self, x) -> np.ndarray:
        """Predict from raw covariates (the feature transform is applied)."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if self.feature_spec is not None:
            x = transform_features(x, self.feature_spec)
        return self.predict_features(x)


def _design(features, n_expected=None):
    features = np.asarray(features, dtype=float)
    if features.ndim == 1:
        features = features[:, None]
    n = features.shape[0]
    if n_expected is not None and n != n_expected:
        raise DimensionError(f"features have {n} rows, labels have {n_expected}")
    return np.column_stack([np.ones(n), features])


def _check_rank(design):
    n, q = design.shape
    if n < q:
        raise SingularError(f"{n} rows for {q} coefficients")
    if np.linalg.matrix_rank(design) < q:
        raise SingularError("design matrix is rank-deficient")


def _newton_step(hessian, score):
    try:
        chol = np.linalg.cholesky(hessian)
    except np.linalg.LinAlgError:
        try:
            chol = np.linalg.cholesky(hessian + RIDGE_JITTER * np.eye(hessian.shape[0]))
        except np.linalg.LinAlgError:
            raise SingularError("Hessian is not positive definite after ridge jitter") from None
    z = np.linalg.solve(chol, score)
    return np.linalg.solve(chol.T, z)


def _loglik(eta, y):
    # mean Bernoulli log-likelihood, stable in eta
    return float(np.mean(y * eta - np.logaddexp(0.0, eta)))


def fit_logistic(features, labels, max_iter: int = 100, tol: float = 1e-10,
                 feature_spec: Optional[FeatureSpec] = None) -> GlmModel:
    """Maximum-likelihood logistic regression by IRLS.

    Parameters
    ----------
    features : array (n, q)
        Already-transformed features; an intercept column is added.
    labels : array (n,)
        Binary labels with both classes present.
    max_iter, tol
        Convergence requires the max-abs mean score ``X'(y - p)/n`` to be at
        most ``tol``.

    Raises
    ------
    SeparationError
        Single-class labels, or fitted probabilities leaving
        ``[1e-10, 1 - 1e-10]`` before convergence.
    SingularError
        Rank-deficient design.
    ConvergenceError
        ``max_iter`` reached without meeting ``tol``.
    """
    y = np.asarray(labels, dtype=float)
    design = _design(features, y.shape[0])
    n = y.shape[0]
    if n == 0:
        raise SingularError("no rows to fit")
    ybar = y.mean()
    if ybar <= 0.0 or ybar >= 1.0:
        raise SeparationError("labels contain a single class")
    _check_rank(design)

    beta = np.zeros(design.shape[1])
    beta[0] = math.log(ybar / (1.0 - ybar))
    eta = design @ beta
    ll = _loglik(eta, y)
    for it in range(max_iter + 1):
        p = expit(eta)
        score = design.T @ (y - p) / n
        if np.max(np.abs(score)) <= tol:
            return GlmModel(Family.LOGISTIC, beta, feature_spec, it)
        if it == max_iter:
            break
        if p.min() < _PROB_GUARD or p.max() > 1.0 - _PROB_GUARD:
            raise SeparationError("fitted probabilities reached 0 or 1 before convergence")
        w = p * (1.0 - p)
        hessian = (design * w[:, None]).T @ design / n
        step = _newton_step(hessian, score)
        for _ in range(40):
            cand = beta + step
            eta_c = design @ cand
            ll_c = _loglik(eta_c, y)
            if ll_c >= ll - 1e-15 * max(1.0, abs(ll)):
                break
            step = step / 2.0
        else:
            raise ConvergenceError("step halving failed to increase the likelihood")
        if np.array_equal(cand, beta):
            # step below floating resolution; score is at its numerical floor
            return GlmModel(Family.LOGISTIC, beta, feature_spec, it)
        beta, eta, ll = cand, eta_c, ll_c
    raise ConvergenceError(f"IRLS did not converge in {max_iter} iterations "
                           f"(max score {np.max(np.abs(score)):.3g})")


def fit_ols(features, response, feature_spec: Optional[FeatureSpec] = None) -> GlmModel:
    """Ordinary least squares with intercept."""
    y = np.asarray(response, dtype=float)
    design = _design(features, y.shape[0])
    _check_rank(design)
    beta, *_ = np.linalg.lstsq(design, y, rcond=None)
    return GlmModel(Family.LINEAR, beta, feature_spec)


@dataclass(frozen=True, eq=False)
class FoldAssignment:
    fold_of_unit: np.ndarray
    K: int

    def __post_init__(self):
        f = np.asarray(self.fold_of_unit, dtype=np.int64)
        f.setflags(write=False)
        object.__setattr__(self, "fold_of_unit", f)

    def __eq__(self, other):
        return (isinstance(other, FoldAssignment) and self.K == other.K
                and np.array_equal(self.fold_of_unit, other.fold_of_unit))

    def take(self, index) -> "FoldAssignment":
        return FoldAssignment(self.fold_of_unit[np.asarray(index)], self.K)


def strata_of(dataset: ValidatedDataset) -> list:
    """Index arrays for the fold strata: target, trial treated, trial control."""
    trial = dataset.r == 1
    return [
        np.flatnonzero(~trial),
        np.flatnonzero(trial & (dataset.a == 1)),
        np.flatnonzero(trial & (dataset.a == 0)),
    ]


def make_folds(dataset: ValidatedDataset, K: int, seed: int) -> FoldAssignment:
    """Stratified K-fold partition.

    Each stratum (target; trial with a=1; trial with a=0) is shuffled with its
    own draw from a generator seeded by ``seed`` and dealt round-robin.  The
    dealing continues where the previous stratum stopped so overall fold
    sizes also stay balanced.
    """
    if K < 2:
        raise FoldError("K must be at least 2")
    strata = strata_of(dataset)
    for idx in strata:
        if K > idx.size:
            raise FoldError(f"K={K} exceeds a stratum of size {idx.size}")
    rng = np.random.default_rng(seed)
    folds = np.empty(dataset.n, dtype=np.int64)
    offset = 0
    for idx in strata:
        perm = rng.permutation(idx)
        folds[perm] = (offset + np.arange(perm.size)) % K
        offset += perm.size
    return FoldAssignment(folds, K)


@dataclass(frozen=True)
class NuisanceSpecs:
    """Feature transform for each nuisance group: treatment probability (pi),
    participation probability (rho), principal scores (ps) and outcome
    models (om)."""

    pi: FeatureSpec
    rho: FeatureSpec
    ps: FeatureSpec
    om: FeatureSpec

    @classmethod
    def uniform(cls, mode, p: int) -> "NuisanceSpecs":
        spec = FeatureSpec(FeatureMode(mode), p)
        return cls(spec, spec, spec, spec)


_PROB_FIELDS = ("pi", "rho", "p1", "p0")


@dataclass(frozen=True, eq=False)
class NuisanceValues:
    """Per-unit nuisance predictions."""

    pi: np.ndarray
    rho: np.ndarray
    p1: np.ndarray
    p0: np.ndarray
    mu11: np.ndarray
    mu00: np.ndarray
    one_sided: bool = False
    clip_delta: Optional[float] = None

    def __post_init__(self):
        n = None
        for name in ("pi", "rho", "p1", "p0", "mu11", "mu00"):
            arr = np.array(getattr(self, name), dtype=float)
            arr = np.broadcast_to(arr, arr.shape if arr.ndim else (1,)).copy()
            if n is None:
                n = arr.shape[0]
            if arr.shape != (n,):
                raise DimensionError(f"nuisance {name} has shape {arr.shape}, expected ({n},)")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if self.one_sided and np.any(self.p0 != 0.0):
            raise ValueError("one-sided nuisances require p0 == 0")

    @classmethod
    def constant(cls, n, *, pi, rho, p1, p0, mu11, mu00, one_sided=False):
        full = lambda v: np.full(n, float(v))
        return cls(full(pi), full(rho), full(p1), full(p0), full(mu11), full(mu00), one_sided)

    @property
    def n(self) -> int:
        return int(self.pi.shape[0])

    def take(self, index) -> "NuisanceValues":
        index = np.asarray(index)
        return NuisanceValues(
            self.pi[index], self.rho[index], self.p1[index], self.p0[index],
            self.mu11[index], self.mu00[index], self.one_sided, self.clip_delta,
        )

    def clipped(self, delta: float) -> "NuisanceValues":
        lo, hi = delta, 1.0 - delta
        p0 = np.zeros(self.n) if self.one_sided else np.clip(self.p0, lo, hi)
        return NuisanceValues(
            np.clip(self.pi, lo, hi), np.clip(self.rho, lo, hi), np.clip(self.p1, lo, hi), p0,
            self.mu11, self.mu00, self.one_sided, delta,
        )


class _FeatureCache:
    def __init__(self, x):
        self.x = x
        self._cache = {}

    def __call__(self, spec: FeatureSpec):
        if spec not in self._cache:
            self._cache[spec] = transform_features(self.x, spec)
        return self._cache[spec]


def _fit_probability(features, labels, spec):
    ybar = float(np.mean(labels)) if labels.size else math.nan
    if labels.size and ybar in (0.0, 1.0):
        # MLE limit for a single-class subsample: constant 0 or 1 (clipped later)
        return lambda f: np.full(f.shape[0], ybar)
    model = fit_logistic(features, labels, feature_spec=spec)
    return model.predict_features


def _fit_mean(features, response, spec):
    if response.size == 0:
        raise SingularError("no rows to fit")
    model = fit_ols(features, response, feature_spec=spec)
    return model.predict_features


def fit_nuisances(dataset: ValidatedDataset, specs: Optional[NuisanceSpecs] = None,
                  folds: Optional[FoldAssignment] = None, one_sided: bool = False,
                  clip_delta: float = DEFAULT_CLIP) -> NuisanceValues:
    """Fit all nuisance models and evaluate them on every unit.

    Without ``folds`` each model is fit once on its full eligible subsample.
    With ``folds`` a unit's prediction comes from models fit on the units
    outside its fold.  Probabilities are clipped to
    ``[clip_delta, 1 - clip_delta]``; in one-sided mode ``p0`` is identically
    zero and its model is not fit.
    """
    if specs is None:
        specs = NuisanceSpecs.uniform(FeatureMode.IDENTITY, dataset.p)
    for spec in (specs.pi, specs.rho, specs.ps, specs.om):
        if spec.p != dataset.p:
            raise DimensionError(f"feature spec expects p={spec.p}, data has p={dataset.p}")
    n = dataset.n
    if folds is not None and folds.fold_of_unit.shape[0] != n:
        raise FoldError("fold assignment does not cover the dataset")

    feats = _FeatureCache(dataset.x)
    r = dataset.r.astype(float)
    a, c, y = dataset.filled()
    trial = dataset.r == 1
    treated = trial & (dataset.a == 1)
    control = trial & (dataset.a == 0)
    jobs = [
        ("rho", specs.rho, np.ones(n, dtype=bool), r, _fit_probability),
        ("pi", specs.pi, trial, a, _fit_probability),
        ("p1", specs.ps, treated, c, _fit_probability),
        ("p0", specs.ps, control, c, _fit_probability),
        ("mu11", specs.om, treated & (dataset.c == 1), y, _fit_mean),
        ("mu00", specs.om, control & (dataset.c == 0), y, _fit_mean),
    ]
    if one_sided:
        jobs = [j for j in jobs if j[0] != "p0"]

    out = {name: np.empty(n) for name in ("rho", "pi", "p1", "p0", "mu11", "mu00")}
    if folds is None:
        partitions = [(None, np.ones(n, dtype=bool), np.ones(n, dtype=bool))]
    else:
        partitions = [(k, folds.fold_of_unit != k, folds.fold_of_unit == k) for k in range(folds.K)]

    for fold, train, predict in partitions:
        for name, spec, eligible, target, fitter in jobs:
            F = feats(spec)
            rows = train & eligible
            try:
                predictor = fitter(F[rows], target[rows], spec)
            except FitError as err:
                raise err.annotate(name, fold) from err
            out[name][predict] = predictor(F[predict])

    if one_sided:
        out["p0"][:] = 0.0
    values = NuisanceValues(out["pi"], out["rho"], out["p1"], out["p0"],
                            out["mu11"], out["mu00"], one_sided)
    return values.clipped(clip_delta)
