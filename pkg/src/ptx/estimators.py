"""Estimators of the treatment effect among target-population compliers.

Four estimators share one set of nuisance values:

* plug-in:  ``Pn[e (1-rho) (mu11 - mu00)] / Pn[e (1-rho)]``
* IPW:      weighted complier outcome means in each trial arm, transported to
            the target with ``(1 - rho)/rho`` (Hajek-normalised by default)
* OM:       ``Pn[e (1-R) (mu11 - mu00)] / Pn[e (1-R)]``
* EIF:      ``Pn[phi1 - phi0] / Pn[lambda]`` from the uncentered
            influence-function terms, with a closed-form standard error

where ``e = p1 - p0`` is the conditional complier probability.  In one-sided
mode ``p0`` is identically zero and ``e = p1``.
"""
from __future__ import annotations

import enum
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np

from ptx.data import ValidatedDataset
from ptx.errors import (
    BootstrapError,
    DegenerateDenominator,
    EmptyPopulationError,
    NonFiniteTerm,
    PtxError,
)
from ptx.nuisance import (
    DEFAULT_CLIP,
    FeatureMode,
    NuisanceSpecs,
    NuisanceValues,
    fit_nuisances,
    make_folds,
)

__all__ = [
    "Method",
    "Estimate",
    "EifTerms",
    "EstimatorConfig",
    "BootstrapResult",
    "Z_975",
    "estimate_plugin",
    "estimate_ipw",
    "estimate_om",
    "compute_eif_terms",
    "estimate_eif",
    "trim_by_participation",
    "fit_and_estimate",
    "bootstrap_se",
]

log = logging.getLogger(__name__)

Z_975 = 1.959964
DENOM_EPS = 1e-12


class Method(str, enum.Enum):
    PLUGIN = "plugin"
    IPW = "ipw"
    OM = "om"
    EIF = "eif"


@dataclass(frozen=True)
class Estimate:
    tau_hat: float
    method: Method
    n_trial: int
    n_target: int
    se: Optional[float] = None
    ci_low: Optional[float] = None
    ci_high: Optional[float] = None
    n_trimmed: int = 0
    one_sided: bool = False

    @classmethod
    def with_se(cls, tau_hat, se, **kw):
        return cls(tau_hat=tau_hat, se=se, ci_low=tau_hat - Z_975 * se,
                   ci_high=tau_hat + Z_975 * se, **kw)

    def covers(self, value: float) -> bool:
        if self.ci_low is None:
            raise ValueError("estimate has no confidence interval")
        return self.ci_low <= value <= self.ci_high

    def to_dict(self) -> dict:
        d = asdict(self)
        d["method"] = self.method.value
        return d


def _counts(dataset, nuisances):
    return dict(n_trial=dataset.n_trial, n_target=dataset.n_target, one_sided=nuisances.one_sided)


def _check_lengths(dataset, nuisances):
    if dataset.n != nuisances.n:
        raise ValueError(f"dataset has {dataset.n} units but nuisances have {nuisances.n}")


def _ratio(num, den, what):
    if abs(den) < DENOM_EPS:
        raise DegenerateDenominator(f"{what} denominator is {den:.3g}")
    return num / den


def estimate_plugin(dataset: ValidatedDataset, nuisances: NuisanceValues) -> Estimate:
    _check_lengths(dataset, nuisances)
    nu = nuisances
    w = (nu.p1 - nu.p0) * (1.0 - nu.rho)
    tau = _ratio(np.mean(w * (nu.mu11 - nu.mu00)), np.mean(w), "plug-in")
    return Estimate(tau_hat=float(tau), method=Method.PLUGIN, **_counts(dataset, nu))


def ipw_weights(dataset: ValidatedDataset, nuisances: NuisanceValues):
    """Per-unit IPW weights for the treated-complier and control-noncomplier
    outcome means."""
    nu = nuisances
    a, c, _ = dataset.filled()
    r = dataset.r.astype(float)
    e = nu.p1 - nu.p0
    transport = (1.0 - nu.rho) / nu.rho
    w1 = c * a * r * e / nu.p1 / nu.pi * transport
    w0 = (1.0 - c) * (1.0 - a) * r * e / (1.0 - nu.p0) / (1.0 - nu.pi) * transport
    return w1, w0


def estimate_ipw(dataset: ValidatedDataset, nuisances: NuisanceValues, hajek: bool = True) -> Estimate:
    """IPW estimator.

    With ``hajek=False`` both arm sums are divided by
    ``Pn[(p1 - p0)(1 - rho)]``; with ``hajek=True`` each arm is divided by its
    own weight total.
    """
    _check_lengths(dataset, nuisances)
    nu = nuisances
    _, _, y = dataset.filled()
    w1, w0 = ipw_weights(dataset, nu)
    if hajek:
        m1 = _ratio(np.sum(w1 * y), np.sum(w1), "IPW treated-arm")
        m0 = _ratio(np.sum(w0 * y), np.sum(w0), "IPW control-arm")
        tau = m1 - m0
    else:
        d = np.mean((nu.p1 - nu.p0) * (1.0 - nu.rho))
        tau = _ratio(np.mean(w1 * y) - np.mean(w0 * y), d, "IPW")
    return Estimate(tau_hat=float(tau), method=Method.IPW, **_counts(dataset, nu))


def estimate_om(dataset: ValidatedDataset, nuisances: NuisanceValues) -> Estimate:
    _check_lengths(dataset, nuisances)
    nu = nuisances
    w = (nu.p1 - nu.p0) * (1.0 - dataset.r)
    tau = _ratio(np.mean(w * (nu.mu11 - nu.mu00)), np.mean(w), "OM")
    return Estimate(tau_hat=float(tau), method=Method.OM, **_counts(dataset, nu))


@dataclass(frozen=True, eq=False)
class EifTerms:
    """Uncentered influence-function components per unit."""

    phi1: np.ndarray
    phi0: np.ndarray
    lam: np.ndarray

    @property
    def n(self):
        return int(self.phi1.shape[0])


def _psi(indicator, f, cond_mean, density):
    # I(A=a)I(R=1)[f - E(f|X,a,1)] / {P(A=a|R=1,X) P(R=1|X)} + E(f|X,a,1)
    resid = np.where(indicator, f - cond_mean, 0.0)
    return resid / density + cond_mean


def compute_eif_terms(dataset: ValidatedDataset, nuisances: NuisanceValues) -> EifTerms:
    """Evaluate ``phi1``, ``phi0`` and ``lambda`` for every unit."""
    _check_lengths(dataset, nuisances)
    nu = nuisances
    a, c, y = dataset.filled()
    r = dataset.r.astype(float)
    treated = (dataset.r == 1) & (a == 1)
    control = (dataset.r == 1) & (a == 0)
    p1, p0, rho, pi = nu.p1, nu.p0, nu.rho, nu.pi
    mu11, mu00 = nu.mu11, nu.mu00
    e = p1 - p0
    dens1 = pi * rho
    dens0 = (1.0 - pi) * rho

    psi_yc1 = _psi(treated, y * c, mu11 * p1, dens1)
    psi_c1 = _psi(treated, c, p1, dens1)
    psi_c0 = _psi(control, c, p0, dens0)
    psi_y0 = _psi(control, y * (1.0 - c), mu00 * (1.0 - p0), dens0)
    psi_1mc1 = _psi(treated, 1.0 - c, 1.0 - p1, dens1)
    psi_1mc0 = _psi(control, 1.0 - c, 1.0 - p0, dens0)
    psi_1mr = (1.0 - r) - (1.0 - rho)

    with np.errstate(divide="ignore", invalid="ignore"):
        phi1 = (e / p1 * (1.0 - rho) * psi_yc1
                - mu11 * (1.0 - rho) * (psi_c0 - p0 / p1 * psi_c1)
                + e * psi_1mr * mu11)
        phi0 = (e / (1.0 - p0) * (1.0 - rho) * psi_y0
                - mu00 * (1.0 - rho) * (psi_1mc1 - psi_1mc0 * (1.0 - p1) / (1.0 - p0))
                + e * psi_1mr * mu00)
        lam = (psi_c1 - psi_c0) * (1.0 - rho) + e * psi_1mr
    for name, arr in (("phi1", phi1), ("phi0", phi0), ("lambda", lam)):
        if not np.all(np.isfinite(arr)):
            bad = int(np.flatnonzero(~np.isfinite(arr))[0]) + 1
            raise NonFiniteTerm(f"{name} is not finite at row {bad}")
    return EifTerms(phi1, phi0, lam)


def estimate_eif(dataset: ValidatedDataset, nuisances: NuisanceValues,
                 terms: Optional[EifTerms] = None) -> Estimate:
    """Influence-function estimator with a closed-form standard error.

    ``nuisances`` should be cross-fitted.  The variance estimate is the mean
    square of the estimated centered influence function
    ``(phi1 - phi0 - tau*lambda) / Pn[lambda]``, divided by n.
    """
    _check_lengths(dataset, nuisances)
    if terms is None:
        terms = compute_eif_terms(dataset, nuisances)
    diff = terms.phi1 - terms.phi0
    lam_bar = float(np.mean(terms.lam))
    tau = _ratio(float(np.mean(diff)), lam_bar, "EIF")
    centered = (diff - tau * terms.lam) / lam_bar
    se = math.sqrt(float(np.mean(centered**2)) / terms.n)
    return Estimate.with_se(float(tau), se, method=Method.EIF, **_counts(dataset, nuisances))


def trim_by_participation(dataset: ValidatedDataset, nuisances: NuisanceValues,
                          low: float = 0.10, high: float = 0.90):
    """Drop units whose participation probability lies outside ``[low, high]``.

    Returns ``(dataset, nuisances, n_trimmed)``; raises
    ``EmptyPopulationError`` when a population or trial arm is emptied.
    """
    if not low < high:
        raise ValueError("trim bounds must satisfy low < high")
    _check_lengths(dataset, nuisances)
    keep = (nuisances.rho >= low) & (nuisances.rho <= high)
    n_trimmed = int(dataset.n - keep.sum())
    if n_trimmed == 0:
        return dataset, nuisances, 0
    try:
        kept = dataset.take(keep)
    except EmptyPopulationError as err:
        raise EmptyPopulationError(f"trimming to [{low}, {high}] removed too much: {err}") from err
    return kept, nuisances.take(keep), n_trimmed


@dataclass(frozen=True)
class EstimatorConfig:
    """Options for the fit-then-estimate pipeline.

    ``specs=None`` means identity features on every nuisance.  Plug-in, IPW
    and OM use full-sample fits; EIF uses ``folds``-fold cross-fitting with
    fold assignment seeded by ``seed`` (``folds=None`` disables it).
    """

    specs: Optional[NuisanceSpecs] = None
    folds: Optional[int] = 10
    one_sided: bool = False
    clip_delta: float = DEFAULT_CLIP
    hajek: bool = True
    seed: int = 0


_SIMPLE = {Method.PLUGIN: estimate_plugin, Method.OM: estimate_om}


def fit_and_estimate(dataset: ValidatedDataset, methods, config: EstimatorConfig = EstimatorConfig(),
                     n_trimmed: int = 0) -> dict:
    """Fit nuisances as each method requires and return ``{Method: Estimate}``."""
    methods = [Method(m) for m in methods]
    specs = config.specs or NuisanceSpecs.uniform(FeatureMode.IDENTITY, dataset.p)
    out = {}
    full = None
    for m in methods:
        if m is Method.EIF:
            folds = make_folds(dataset, config.folds, config.seed) if config.folds else None
            nu = fit_nuisances(dataset, specs, folds, config.one_sided, config.clip_delta)
            est = estimate_eif(dataset, nu)
        else:
            if full is None:
                full = fit_nuisances(dataset, specs, None, config.one_sided, config.clip_delta)
            if m is Method.IPW:
                est = estimate_ipw(dataset, full, hajek=config.hajek)
            else:
                est = _SIMPLE[m](dataset, full)
        out[m] = replace(est, n_trimmed=n_trimmed)
    return out


@dataclass(frozen=True)
class BootstrapResult:
    se: float
    ci_low: float
    ci_high: float
    estimates: np.ndarray
    n_failed: int


def _stratified_resample(dataset, rng):
    trial = np.flatnonzero(dataset.r == 1)
    target = np.flatnonzero(dataset.r == 0)
    idx = np.concatenate([rng.choice(trial, trial.size), rng.choice(target, target.size)])
    return dataset.take(np.sort(idx))


def _bootstrap_one(args):
    dataset, method, config, seed, b = args
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(b,)))
    for attempt in range(2):
        try:
            sample = _stratified_resample(dataset, rng)
            cfg = replace(config, seed=int(rng.integers(2**31)))
            return fit_and_estimate(sample, [method], cfg)[method].tau_hat
        except PtxError as err:
            log.debug("bootstrap resample %d attempt %d failed: %s", b, attempt, err)
    return None


def bootstrap_se(dataset: ValidatedDataset, method, B: int = 200, seed: int = 0,
                 config: EstimatorConfig = EstimatorConfig(), n_jobs: int = 1) -> BootstrapResult:
    """Nonparametric bootstrap with trial and target resampled separately.

    Nuisances are refit inside every resample.  A failing resample is redrawn
    once; if more than 10% of resamples still fail, ``BootstrapError``.
    Results are identical for any ``n_jobs``.
    """
    if B < 2:
        raise ValueError("B must be at least 2")
    method = Method(method)
    tasks = [(dataset, method, config, seed, b) for b in range(B)]
    if n_jobs == 0:
        n_jobs = os.cpu_count() or 1
    if n_jobs > 1:
        with ProcessPoolExecutor(n_jobs) as pool:
            results = list(pool.map(_bootstrap_one, tasks, chunksize=max(1, B // (4 * n_jobs))))
    else:
        results = [_bootstrap_one(t) for t in tasks]
    ok = np.array([v for v in results if v is not None], dtype=float)
    n_failed = B - ok.size
    if n_failed > 0.10 * B or ok.size < 2:
        raise BootstrapError(f"{n_failed} of {B} bootstrap resamples failed")
    lo, hi = np.percentile(ok, [2.5, 97.5])
    return BootstrapResult(float(np.std(ok, ddof=1)), float(lo), float(hi), ok, n_failed)
