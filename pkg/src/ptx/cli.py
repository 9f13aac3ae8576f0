"""Command-line front end: ``analyze``, ``simulate`` and ``oracle``.

Exit codes: 0 success, 1 oracle gap above tolerance, 2 invalid input or
config, 3 estimation failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from ptx import __version__
from ptx.data import load_dataset, summarize
from ptx.errors import PtxError, ValidationError
from ptx.estimators import (
    EstimatorConfig,
    Method,
    bootstrap_se,
    fit_and_estimate,
    trim_by_participation,
)
from ptx.nuisance import DEFAULT_CLIP, FeatureMode, NuisanceSpecs, fit_nuisances
from ptx.oracle import enumerate_eif_checks, enumerate_identified, enumerate_true_tau, random_world
from ptx.simulation import format_summary, load_grid_config, run_grid, write_grid_csv

__all__ = ["AnalysisConfig", "cmd_analyze", "cmd_simulate", "cmd_oracle", "main"]

log = logging.getLogger(__name__)

EXIT_OK, EXIT_GAP, EXIT_INPUT, EXIT_ESTIMATION = 0, 1, 2, 3


@dataclass(frozen=True)
class AnalysisConfig:
    estimator: str = "all"
    folds: int = 10
    one_sided: bool = False
    trim: Optional[tuple] = None
    bootstrap: Optional[int] = None
    feature_mode: str = "identity"
    seed: int = 0
    clip_delta: float = DEFAULT_CLIP

    def __post_init__(self):
        if self.estimator != "all":
            Method(self.estimator)
        FeatureMode(self.feature_mode)
        if self.trim is not None and not self.trim[0] < self.trim[1]:
            raise ValueError("trim requires LO < HI")
        if Method.EIF in self.methods and self.folds < 2:
            raise ValueError("--folds must be at least 2 for the EIF estimator")
        if self.bootstrap is not None and self.bootstrap < 2:
            raise ValueError("--bootstrap needs at least 2 resamples")
        if not 0.0 <= self.clip_delta < 0.5:
            raise ValueError("--clip-delta must lie in [0, 0.5)")

    @property
    def methods(self) -> list:
        if self.estimator == "all":
            return list(Method)
        return [Method(self.estimator)]

    def to_dict(self) -> dict:
        return {
            "estimator": self.estimator, "folds": self.folds, "one_sided": self.one_sided,
            "trim": list(self.trim) if self.trim else None, "bootstrap": self.bootstrap,
            "feature_mode": self.feature_mode, "seed": self.seed, "clip_delta": self.clip_delta,
        }


def _default_seed() -> int:
    raw = os.environ.get("PTX_SEED")
    if raw is None or raw.strip() == "":
        return 0
    try:
        return int(raw)
    except ValueError:
        raise SystemExit(f"error: PTX_SEED must be an integer, got {raw!r}") from None


def _parse_trim(text: str):
    try:
        lo, hi = (float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError("expected LO,HI") from None
    return (lo, hi)


def _json_float(v):
    if v is None or (isinstance(v, float) and not math.isfinite(v)):
        return None
    return v


def cmd_analyze(data_path, config: AnalysisConfig, out=None, err=None) -> int:
    """Fit nuisances, run the requested estimators and print a JSON report."""
    out = out or sys.stdout
    err = err or sys.stderr
    try:
        dataset = load_dataset(data_path)
    except (ValidationError, OSError, UnicodeDecodeError) as exc:
        print(f"error: {exc}", file=err)
        return EXIT_INPUT

    notes = []
    if config.one_sided:
        trial = dataset.r == 1
        if np.any(trial & (dataset.a == 0) & (dataset.c == 1)):
            notes.append("one-sided mode: some control units received treatment; p0 forced to 0 anyway")
        else:
            notes.append("one-sided mode: p0 forced to 0")

    specs = NuisanceSpecs.uniform(FeatureMode(config.feature_mode), dataset.p)
    est_config = EstimatorConfig(specs=specs, folds=config.folds, one_sided=config.one_sided,
                                 clip_delta=config.clip_delta, seed=config.seed)
    try:
        n_trimmed = 0
        if config.trim is not None:
            full = fit_nuisances(dataset, specs, None, config.one_sided, config.clip_delta)
            dataset, _, n_trimmed = trim_by_participation(dataset, full, *config.trim)
            if n_trimmed:
                notes.append(f"trimmed {n_trimmed} units with participation outside "
                             f"[{config.trim[0]}, {config.trim[1]}]; nuisances refit on the rest")
        estimates = fit_and_estimate(dataset, config.methods, est_config, n_trimmed=n_trimmed)
        if config.bootstrap:
            for m, est in estimates.items():
                if m is Method.EIF:
                    continue
                boot = bootstrap_se(dataset, m, B=config.bootstrap, seed=config.seed, config=est_config)
                estimates[m] = replace(est, se=boot.se, ci_low=boot.ci_low, ci_high=boot.ci_high)
                if boot.n_failed:
                    notes.append(f"{m.value}: {boot.n_failed} bootstrap resamples failed")
    except ValidationError as exc:
        print(f"error: {exc}", file=err)
        return EXIT_INPUT
    except PtxError as exc:
        print(f"estimation error: {type(exc).__name__}: {exc}", file=err)
        return EXIT_ESTIMATION

    report = {
        "version": __version__,
        "data": str(data_path),
        "n_trial": dataset.n_trial,
        "n_target": dataset.n_target,
        "n_trimmed": n_trimmed,
        "summary": summarize(dataset).to_dict(),
        "estimates": {
            m.value: {k: _json_float(getattr(e, k)) for k in ("tau_hat", "se", "ci_low", "ci_high")}
            for m, e in estimates.items()
        },
        "config": config.to_dict(),
        "notes": notes,
    }
    json.dump(report, out, indent=2)
    out.write("\n")
    return EXIT_OK


def cmd_simulate(config_path, out_path, threads: int = 1, out=None, err=None) -> int:
    """Run a simulation grid, write the long-format CSV and print a summary."""
    out = out or sys.stdout
    err = err or sys.stderr
    try:
        scenarios = load_grid_config(config_path)
    except (OSError, ValueError, TypeError, KeyError) as exc:
        print(f"config error: {exc}", file=err)
        return EXIT_INPUT
    if threads < 0:
        print("config error: --threads must be >= 0", file=err)
        return EXIT_INPUT
    rows = run_grid(scenarios, n_jobs=threads)
    write_grid_csv(rows, out_path)
    print(format_summary(rows), file=out)
    return EXIT_OK


def cmd_oracle(worlds: int = 20, seed: int = 0, tol: float = 1e-10, one_sided: bool = False,
               out=None) -> int:
    """Check every identification formula and the influence-function
    identities on random finite worlds; exit 1 if any gap exceeds ``tol``."""
    out = out or sys.stdout
    if worlds < 1:
        raise ValueError("worlds must be at least 1")
    worst = {"plugin": 0.0, "ipw": 0.0, "om": 0.0, "eif_mean": 0.0, "eif_centering": 0.0, "eif_estimate": 0.0}
    where = dict.fromkeys(worst, 0)
    for w in range(worlds):
        ss = np.random.SeedSequence(seed, spawn_key=(w,))
        world = random_world(2 + w % 5, ss, one_sided=one_sided)
        truth = enumerate_true_tau(world)
        gaps = {f: abs(enumerate_identified(world, f) - truth) for f in ("plugin", "ipw", "om")}
        checks = enumerate_eif_checks(world)
        gaps.update(eif_mean=checks.mean_phi_gap, eif_centering=max(checks.centering_gaps),
                    eif_estimate=checks.est_eqn_gap)
        for k, v in gaps.items():
            if not v <= worst[k]:
                worst[k], where[k] = v, w
    failed = [k for k, v in worst.items() if not v <= tol]
    mode = "one-sided" if one_sided else "two-sided"
    print(f"oracle: {worlds} {mode} worlds, seed {seed}, tol {tol:g}", file=out)
    for k, v in worst.items():
        flag = "FAIL" if k in failed else "ok"
        print(f"  {k:<14} worst gap {v:.3e} (world {where[k]})  {flag}", file=out)
    print("FAIL" if failed else "PASS", file=out)
    return EXIT_GAP if failed else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ptx", description="Complier effects transported to a target population.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    an = sub.add_parser("analyze", help="estimate the target complier effect from a CSV")
    an.add_argument("--data", required=True, help="CSV with header r,a,c,y,x1,...,xp")
    an.add_argument("--estimator", default="all", choices=[m.value for m in Method] + ["all"])
    an.add_argument("--folds", type=int, default=10, help="cross-fitting folds for EIF (default 10)")
    an.add_argument("--one-sided", action="store_true", help="no treatment access under control (p0 = 0)")
    an.add_argument("--trim", type=_parse_trim, metavar="LO,HI",
                    help="drop units with fitted participation probability outside [LO, HI]")
    an.add_argument("--bootstrap", type=int, metavar="B", help="bootstrap SEs for plugin/ipw/om")
    an.add_argument("--seed", type=int, default=None, help="default: $PTX_SEED or 0")
    an.add_argument("--feature-mode", default="identity", choices=[m.value for m in FeatureMode])
    an.add_argument("--clip-delta", type=float, default=DEFAULT_CLIP)

    sim = sub.add_parser("simulate", help="run a simulation grid")
    sim.add_argument("--config", required=True, help="grid JSON")
    sim.add_argument("--out", required=True, help="output CSV path")
    sim.add_argument("--threads", type=int, default=1, help="worker processes; 0 = all cores")

    orc = sub.add_parser("oracle", help="exact checks on random finite worlds")
    orc.add_argument("--worlds", type=int, default=20)
    orc.add_argument("--seed", type=int, default=None, help="default: $PTX_SEED or 0")
    orc.add_argument("--tol", type=float, default=1e-10)
    orc.add_argument("--one-sided", action="store_true")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    seed = args.seed if getattr(args, "seed", None) is not None else _default_seed()
    if args.command == "analyze":
        try:
            config = AnalysisConfig(
                estimator=args.estimator, folds=args.folds, one_sided=args.one_sided, trim=args.trim,
                bootstrap=args.bootstrap, feature_mode=args.feature_mode, seed=seed,
                clip_delta=args.clip_delta,
            )
        except ValueError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_INPUT
        return cmd_analyze(args.data, config)
    if args.command == "simulate":
        return cmd_simulate(args.config, args.out, args.threads)
    if args.worlds < 1:
        print("error: --worlds must be at least 1", file=sys.stderr)
        return EXIT_INPUT
    return cmd_oracle(args.worlds, seed, args.tol, args.one_sided)


if __name__ == "__main__":
    sys.exit(main())
