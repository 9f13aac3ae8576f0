"""Simulation study: data-generating process, ground truth and the
bias / RMSE / coverage harness.

Covariates are ``X1..X4 ~ Uniform(-2, 2)`` and ``X5 ~ Bernoulli(0.55)``.  With
``T_i = (X_i**2 - 1)/sqrt(2)`` and ``S = T_1 + ... + T_4``:

* participation ``P(R=1|X) = expit(b0 + T_1 + T_2 + T_3)`` with ``b0`` chosen so
  the mean participation equals the trial:total ratio,
* assignment ``pi(X) = expit(0.4 S)``,
* principal scores ``p_a(X) = expit(0.4 (2a - (a-1) S))``,
* outcomes ``Y = (1 + A + C)/4 (S + X5) + N(0, 1)``.

Every random draw comes from a ``SeedSequence`` keyed by the master seed,
the scenario's data identity (ratio, trial size), the replication index and a
stream label, so any subset of a grid can be re-run and reproduces exactly.
"""
from __future__ import annotations

import csv
import enum
import io
import itertools
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.optimize import brentq
from scipy.special import expit

from ptx.data import ValidatedDataset
from ptx.errors import BracketError, PtxError, ScenarioError
from ptx.estimators import estimate_eif, estimate_ipw, estimate_om
from ptx.nuisance import (
    DEFAULT_CLIP,
    FeatureMode,
    FeatureSpec,
    NuisanceSpecs,
    NuisanceValues,
    fit_nuisances,
    make_folds,
)

__all__ = [
    "Misspec",
    "SimScenario",
    "SimDraw",
    "SimResult",
    "EstimatorStats",
    "solve_balancing_intercept",
    "true_functions",
    "simulate",
    "simulate_dataset",
    "true_tau",
    "run_scenario",
    "run_grid",
    "full_grid",
    "load_grid_config",
    "write_grid_csv",
    "format_summary",
    "GRID_COLUMNS",
]

log = logging.getLogger(__name__)

P_COVARIATES = 5
GRID_RATIOS = (Fraction(1, 21), Fraction(1, 3), Fraction(1, 2))
GRID_TRIAL_SIZES = (500, 1000, 2000, 50000)
_STREAMS = {"covariates": 0, "membership": 1, "treatment": 2, "compliance": 3,
            "outcome": 4, "folds": 5, "truth": 6}


class Misspec(str, enum.Enum):
    """Which nuisance groups get correctly specified features.

    TP = treatment probability, OM = outcome models, PP = participation
    probability, PS = principal scores.
    """

    ALL_CORRECT = "AllCorrect"
    NONE_CORRECT = "NoneCorrect"
    OM_PS_CORRECT = "OmPsCorrect"
    TP_OM_PP_CORRECT = "TpOmPpCorrect"
    TP_PS_PP_CORRECT = "TpPsPpCorrect"

    @property
    def correct(self) -> frozenset:
        return _CORRECT_SETS[self]

    def specs(self, p: int = P_COVARIATES) -> NuisanceSpecs:
        def pick(group):
            mode = FeatureMode.CORRECT if group in self.correct else FeatureMode.MISSPECIFIED
            return FeatureSpec(mode, p)
        return NuisanceSpecs(pi=pick("tp"), rho=pick("pp"), ps=pick("ps"), om=pick("om"))


_CORRECT_SETS = {
    Misspec.ALL_CORRECT: frozenset({"tp", "om", "pp", "ps"}),
    Misspec.NONE_CORRECT: frozenset(),
    Misspec.OM_PS_CORRECT: frozenset({"om", "ps"}),
    Misspec.TP_OM_PP_CORRECT: frozenset({"tp", "om", "pp"}),
    Misspec.TP_PS_PP_CORRECT: frozenset({"tp", "ps", "pp"}),
}


def _as_fraction(value) -> Fraction:
    if isinstance(value, Fraction):
        return value
    if isinstance(value, float):
        return Fraction(value).limit_denominator(1000)
    return Fraction(str(value))


@dataclass(frozen=True)
class SimScenario:
    ratio: Fraction
    trial_size: int
    misspec: Misspec = Misspec.ALL_CORRECT
    reps: int = 100
    seed: int = 0
    k_folds: int = 10
    clip_delta: float = DEFAULT_CLIP
    mc_draws: int = 2_000_000

    def __post_init__(self):
        object.__setattr__(self, "ratio", _as_fraction(self.ratio))
        object.__setattr__(self, "misspec", Misspec(self.misspec))
        if not 0 < self.ratio < 1:
            raise ValueError("ratio must lie in (0, 1)")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")
        if self.trial_size < 1 or self.reps < 1:
            raise ValueError("trial_size and reps must be positive")

    @property
    def target_size(self) -> int:
        return int(round(self.trial_size * (1 - self.ratio) / self.ratio))

    @property
    def n_total(self) -> int:
        return self.trial_size + self.target_size

    @property
    def ratio_label(self) -> str:
        return f"{self.ratio.numerator}/{self.ratio.denominator}"

    def stream(self, rep: int, label: str) -> np.random.Generator:
        key = (self.ratio.numerator, self.ratio.denominator, self.trial_size, rep, _STREAMS[label])
        return np.random.default_rng(np.random.SeedSequence(self.seed, spawn_key=key))


def solve_balancing_intercept(linear_predictors, target_prop: float,
                              bracket=(-20.0, 20.0), tol: float = 1e-10) -> float:
    """Intercept ``b0`` such that ``mean(expit(b0 + lp)) == target_prop``.

    The mean is increasing in ``b0``, so the root in ``bracket`` is unique.
    """
    if not 0.0 < target_prop < 1.0:
        raise BracketError("target proportion must lie in (0, 1)")
    lp = np.asarray(linear_predictors, dtype=float)

    def gap(b0):
        return float(np.mean(expit(b0 + lp))) - target_prop

    lo, hi = bracket
    g_lo, g_hi = gap(lo), gap(hi)
    if g_lo > 0 or g_hi < 0:
        raise BracketError(f"target {target_prop} not attainable for intercepts in {bracket}")
    if g_lo == 0:
        return lo
    if g_hi == 0:
        return hi
    root = brentq(gap, lo, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=200)
    if abs(gap(root)) > tol:
        raise BracketError(f"intercept search stalled with gap {gap(root):.3g}")
    return float(root)


def _transformed(x):
    return (x[:, :4] ** 2 - 1.0) / math.sqrt(2.0)


def true_pscore(a: int, s):
    return expit(0.4 * (2 * a - (a - 1) * s))


def true_outcome(a: int, c: int, s, x5):
    return (1 + a + c) / 4.0 * (s + x5)


def true_functions(x, beta0: float) -> NuisanceValues:
    """The generating nuisance functions evaluated at covariates ``x``."""
    x = np.asarray(x, dtype=float)
    t = _transformed(x)
    s = t.sum(axis=1)
    return NuisanceValues(
        pi=expit(0.4 * s),
        rho=expit(beta0 + t[:, :3].sum(axis=1)),
        p1=true_pscore(1, s),
        p0=true_pscore(0, s),
        mu11=true_outcome(1, 1, s, x[:, 4]),
        mu00=true_outcome(0, 0, s, x[:, 4]),
    )


def _draw_covariates(rng, n):
    x = np.empty((n, P_COVARIATES))
    x[:, :4] = rng.uniform(-2.0, 2.0, size=(n, 4))
    x[:, 4] = rng.binomial(1, 0.55, size=n)
    return x


@dataclass(frozen=True)
class SimDraw:
    dataset: ValidatedDataset
    beta0: float


def simulate(scenario: SimScenario, rep_index: int) -> SimDraw:
    """Draw one replication of the combined sample."""
    n = scenario.n_total
    x = _draw_covariates(scenario.stream(rep_index, "covariates"), n)
    t = _transformed(x)
    s = t.sum(axis=1)
    lp = t[:, :3].sum(axis=1)
    beta0 = solve_balancing_intercept(lp, scenario.trial_size / n)
    r = scenario.stream(rep_index, "membership").binomial(1, expit(beta0 + lp))
    trial = r == 1
    m = int(trial.sum())
    st, sx5 = s[trial], x[trial, 4]
    a = scenario.stream(rep_index, "treatment").binomial(1, expit(0.4 * st))
    pc = np.where(a == 1, true_pscore(1, st), true_pscore(0, st))
    c = scenario.stream(rep_index, "compliance").binomial(1, pc)
    noise = scenario.stream(rep_index, "outcome").standard_normal(m)
    y = (1 + a + c) / 4.0 * (st + sx5) + noise
    ds = ValidatedDataset.from_arrays(r, x, a=a, c=c, y=y)
    return SimDraw(ds, beta0)


def simulate_dataset(scenario: SimScenario, rep_index: int) -> ValidatedDataset:
    return simulate(scenario, rep_index).dataset


def true_tau(scenario: SimScenario, mc_draws: Optional[int] = None, seed: Optional[int] = None,
             outcome_fn: Optional[Callable] = None) -> float:
    """Monte Carlo value of the estimand under the generating functions.

    ``E[e (1-rho) (mu11 - mu00)] / E[e (1-rho)]`` over fresh covariate draws,
    with the participation intercept solved on the same draws.
    ``outcome_fn(a, c, s, x5)`` overrides the outcome means (test hook).
    """
    mc_draws = scenario.mc_draws if mc_draws is None else int(mc_draws)
    if seed is None:
        key = (scenario.ratio.numerator, scenario.ratio.denominator, _STREAMS["truth"])
        rng = np.random.default_rng(np.random.SeedSequence(scenario.seed, spawn_key=key))
    else:
        rng = np.random.default_rng(seed)
    mu = true_outcome if outcome_fn is None else outcome_fn
    chunk = 1_000_000
    lp = np.empty(mc_draws)
    s = np.empty(mc_draws)
    x5 = np.empty(mc_draws)
    for start in range(0, mc_draws, chunk):
        stop = min(start + chunk, mc_draws)
        x = _draw_covariates(rng, stop - start)
        t = _transformed(x)
        lp[start:stop] = t[:, :3].sum(axis=1)
        s[start:stop] = t.sum(axis=1)
        x5[start:stop] = x[:, 4]
    beta0 = solve_balancing_intercept(lp, float(scenario.ratio))
    w = (true_pscore(1, s) - true_pscore(0, s)) * (1.0 - expit(beta0 + lp))
    effect = mu(1, 1, s, x5) - mu(0, 0, s, x5)
    return float(math.fsum(w * effect) / math.fsum(w))


@dataclass(frozen=True)
class EstimatorStats:
    bias: float
    rmse: float
    sd: float
    coverage: Optional[float] = None


ESTIMATOR_NAMES = ("EIF", "IPW", "OM")


@dataclass(frozen=True, eq=False)
class SimResult:
    scenario: SimScenario
    true_tau: float
    reps_completed: int
    n_failed: int
    stats: dict
    estimates: dict  # name -> array of per-rep estimates (completed reps, rep order)
    eif_se: np.ndarray


def _run_rep(args):
    scenario, rep = args
    try:
        draw = simulate(scenario, rep)
        ds = draw.dataset
        specs = scenario.misspec.specs()
        full = fit_nuisances(ds, specs, None, False, scenario.clip_delta)
        ipw = estimate_ipw(ds, full, hajek=True).tau_hat
        om = estimate_om(ds, full).tau_hat
        seed = int(scenario.stream(rep, "folds").integers(2**63))
        folds = make_folds(ds, scenario.k_folds, seed)
        cf = fit_nuisances(ds, specs, folds, False, scenario.clip_delta)
        eif = estimate_eif(ds, cf)
        return (eif.tau_hat, eif.se, ipw, om), None
    except (PtxError, FloatingPointError, np.linalg.LinAlgError) as err:
        return None, f"rep {rep}: {type(err).__name__}: {err}"


def _resolve_jobs(n_jobs):
    if n_jobs is None or n_jobs == 1:
        return 1
    if n_jobs == 0:
        return os.cpu_count() or 1
    return int(n_jobs)


def _map(fn, tasks, n_jobs):
    n_jobs = _resolve_jobs(n_jobs)
    if n_jobs == 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(n_jobs) as pool:
        return list(pool.map(fn, tasks, chunksize=max(1, len(tasks) // (8 * n_jobs))))


def _truth_key(scenario):
    return (scenario.ratio, scenario.seed, scenario.mc_draws)


def _summarize(scenario, truth, outputs) -> SimResult:
    done = [o for o, err in outputs if o is not None]
    errors = [err for o, err in outputs if err is not None]
    for err in errors:
        log.warning("%s %s/%d: %s", scenario.misspec.value, scenario.ratio_label, scenario.trial_size, err)
    if len(errors) > 0.01 * len(outputs):
        raise ScenarioError(f"{len(errors)} of {len(outputs)} replications failed; first: {errors[0]}")
    arr = np.array(done, dtype=float).reshape(-1, 4)
    eif, eif_se, ipw, om = arr.T
    estimates = {"EIF": eif, "IPW": ipw, "OM": om}
    stats = {}
    for name, est in estimates.items():
        err = est - truth
        cov = None
        if name == "EIF":
            cov = float(np.mean(np.abs(err) <= 1.959964 * eif_se))
        stats[name] = EstimatorStats(
            bias=float(np.mean(err)), rmse=float(np.sqrt(np.mean(err**2))),
            sd=float(np.std(est, ddof=1)) if est.size > 1 else 0.0, coverage=cov,
        )
    return SimResult(scenario, truth, len(done), len(errors), stats, estimates, eif_se)


def run_scenario(scenario: SimScenario, n_jobs: int = 1, truth: Optional[float] = None) -> SimResult:
    """Run all replications of one scenario and aggregate bias, RMSE and
    EIF confidence-interval coverage of the Monte Carlo truth."""
    if truth is None:
        truth = true_tau(scenario)
    outputs = _map(_run_rep, [(scenario, rep) for rep in range(scenario.reps)], n_jobs)
    return _summarize(scenario, truth, outputs)


GRID_COLUMNS = ("ratio", "trial_size", "misspec", "estimator", "bias", "rmse", "coverage", "reps", "error")


def _truth_task(scenario):
    return true_tau(scenario)


def run_grid(scenarios: Sequence[SimScenario], n_jobs: int = 1) -> list:
    """Run every scenario; replications of all scenarios share one pool.

    Returns long-format rows (one per scenario and estimator).  A scenario
    that fails gets a single row with its ``error`` set.
    """
    scenarios = list(scenarios)
    if not scenarios:
        raise ValueError("empty scenario list")
    truth_keys = list(dict.fromkeys(_truth_key(s) for s in scenarios))
    first = {k: next(s for s in scenarios if _truth_key(s) == k) for k in truth_keys}
    truths = dict(zip(truth_keys, _map(_truth_task, [first[k] for k in truth_keys], n_jobs)))

    tasks = [(s, rep) for s in scenarios for rep in range(s.reps)]
    outputs = _map(_run_rep, tasks, n_jobs)
    rows = []
    pos = 0
    for s in scenarios:
        chunk = outputs[pos:pos + s.reps]
        pos += s.reps
        base = {"ratio": s.ratio_label, "trial_size": s.trial_size, "misspec": s.misspec.value}
        try:
            res = _summarize(s, truths[_truth_key(s)], chunk)
        except PtxError as err:
            rows.append({**base, "estimator": "", "bias": None, "rmse": None, "coverage": None,
                         "reps": 0, "error": f"{type(err).__name__}: {err}"})
            continue
        for name in ESTIMATOR_NAMES:
            st = res.stats[name]
            rows.append({**base, "estimator": name, "bias": st.bias, "rmse": st.rmse,
                         "coverage": st.coverage, "reps": res.reps_completed, "error": ""})
    return rows


def full_grid(reps: int = 1000, seed: int = 0, **kw) -> list:
    """The full 3 ratios x 4 trial sizes x 5 misspecification grid."""
    return [
        SimScenario(ratio, size, misspec, reps=reps, seed=seed, **kw)
        for ratio in GRID_RATIOS for size in GRID_TRIAL_SIZES for misspec in Misspec
    ]


_SCENARIO_KEYS = {"ratio", "trial_size", "misspec", "reps", "seed", "k_folds", "clip_delta", "mc_draws"}


def load_grid_config(source) -> list:
    """Parse a grid document.

    Top-level keys ``seed``, ``reps``, ``k_folds``, ``clip_delta`` and
    ``mc_draws`` set defaults.  Scenarios come from an explicit
    ``"scenarios"`` list, from a ``"grid"`` object with ``ratios``,
    ``trial_sizes`` and ``misspec`` lists (cartesian product), or from
    ``"full_grid": true``.
    """
    if isinstance(source, (str, os.PathLike)) and os.path.exists(source):
        with open(source, encoding="utf-8") as fh:
            doc = json.load(fh)
    elif isinstance(source, dict):
        doc = source
    else:
        doc = json.loads(source)
    if not isinstance(doc, dict):
        raise ValueError("grid config must be a JSON object")
    defaults = {k: doc[k] for k in _SCENARIO_KEYS & doc.keys() if k not in ("ratio", "trial_size", "misspec")}
    entries = []
    if doc.get("full_grid"):
        entries += [{"ratio": r, "trial_size": t, "misspec": m.value}
                    for r in GRID_RATIOS for t in GRID_TRIAL_SIZES for m in Misspec]
    if "grid" in doc:
        g = doc["grid"]
        entries += [{"ratio": r, "trial_size": t, "misspec": m}
                    for r, t, m in itertools.product(g["ratios"], g["trial_sizes"], g["misspec"])]
    for entry in doc.get("scenarios", []):
        unknown = set(entry) - _SCENARIO_KEYS
        if unknown:
            raise ValueError(f"unknown scenario keys: {sorted(unknown)}")
        entries.append(entry)
    if not entries:
        raise ValueError("grid config defines no scenarios")
    return [SimScenario(**{**defaults, **e}) for e in entries]


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return format(v, ".17g")
    return str(v)


def write_grid_csv(rows, dest=None) -> Optional[str]:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(GRID_COLUMNS)
    for row in rows:
        writer.writerow([_fmt(row[k]) for k in GRID_COLUMNS])
    text = buf.getvalue()
    if dest is None:
        return text
    with open(dest, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    return None


def format_summary(rows) -> str:
    """Human-readable table: one line per scenario, estimator columns."""
    grouped = {}
    for row in rows:
        key = (row["ratio"], row["trial_size"], row["misspec"])
        grouped.setdefault(key, {})[row["estimator"]] = row
    head = f"{'ratio':>6} {'trial':>6} {'misspec':<14} " + " ".join(
        f"{n + ' bias':>9} {n + ' rmse':>9}" for n in ESTIMATOR_NAMES) + f" {'EIF cov':>8}"
    lines = [head, "-" * len(head)]
    for (ratio, size, mis), by_est in grouped.items():
        if "" in by_est:
            lines.append(f"{ratio:>6} {size:>6} {mis:<14} ERROR {by_est['']['error']}")
            continue
        cells = " ".join(f"{by_est[n]['bias']:>9.3f} {by_est[n]['rmse']:>9.3f}" for n in ESTIMATOR_NAMES)
        lines.append(f"{ratio:>6} {size:>6} {mis:<14} {cells} {by_est['EIF']['coverage']:>8.3f}")
    return "\n".join(lines)
