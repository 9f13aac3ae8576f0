"""Exact finite-support worlds for checking the identification formulas.

A :class:`DiscreteWorld` specifies a structural law over a finite covariate
support: participation and assignment probabilities, principal-stratum
probabilities ``(q11, q10, q00)`` (no defiers) and binary-outcome means
``m_a(x, u)`` with principal ignorability built in.  The observed-data law is
enumerated exactly, so every expectation is a finite sum, accumulated with
``math.fsum``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from ptx.data import ValidatedDataset
from ptx.errors import DegenerateStratum
from ptx.estimators import compute_eif_terms
from ptx.nuisance import NuisanceValues

__all__ = [
    "DiscreteWorld",
    "ObservedLaw",
    "EifChecks",
    "random_world",
    "enumerate_true_tau",
    "observed_law",
    "implied_nuisances",
    "enumerate_identified",
    "enumerate_eif_checks",
    "sample_world",
    "STRATA",
]

# column order for q, m1, m0
STRATA = ("11", "10", "00")
_C_OF = {"11": (1, 1), "10": (1, 0), "00": (0, 0)}  # stratum -> (C(1), C(0))


def _arr(v):
    a = np.array(v, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class DiscreteWorld:
    """Structural law on ``len(px)`` covariate cells.

    ``q``, ``m1`` and ``m0`` have one row per cell and columns ordered as
    :data:`STRATA`.  ``m1[:, j]`` is ``P(Y(1)=1 | U, x)`` and ``m0[:, j]`` is
    ``P(Y(0)=1 | U, x)``; neither depends on R.
    """

    px: np.ndarray
    rho: np.ndarray
    pi: np.ndarray
    q: np.ndarray
    m1: np.ndarray
    m0: np.ndarray
    one_sided: bool = False

    def __post_init__(self):
        for name in ("px", "rho", "pi", "q", "m1", "m0"):
            object.__setattr__(self, name, _arr(getattr(self, name)))
        k = self.px.shape[0]
        if self.rho.shape != (k,) or self.pi.shape != (k,):
            raise ValueError("rho and pi need one entry per covariate cell")
        for name in ("q", "m1", "m0"):
            if getattr(self, name).shape != (k, 3):
                raise ValueError(f"{name} must have shape ({k}, 3)")
        if not math.isclose(math.fsum(self.px), 1.0, abs_tol=1e-12):
            raise ValueError("px must sum to 1")
        if not np.allclose(self.q.sum(axis=1), 1.0, atol=1e-12):
            raise ValueError("stratum probabilities must sum to 1 in every cell")
        if self.one_sided and np.any(self.q[:, 0] != 0):
            raise ValueError("one-sided worlds have q11 = 0")

    @property
    def num_x(self) -> int:
        return int(self.px.shape[0])

    def satisfies_assumptions(self, tol: float = 0.0) -> bool:
        """Monotonicity is structural; check principal ignorability and
        strict positivity."""
        pi_ok = (np.all(np.abs(self.m1[:, 0] - self.m1[:, 1]) <= tol)
                 and np.all(np.abs(self.m0[:, 2] - self.m0[:, 1]) <= tol))
        interior = lambda v: np.all((v > 0) & (v < 1))
        pos_ok = interior(self.rho) and interior(self.pi) and np.all(self.q[:, 1] > 0)
        if not self.one_sided:
            pos_ok = pos_ok and np.all(self.q[:, 0] > 0) and np.all(self.q[:, 2] > 0)
        return bool(pi_ok and pos_ok)

    def to_dict(self) -> dict:
        return {
            "one_sided": self.one_sided,
            "cells": [
                {
                    "px": float(self.px[i]),
                    "rho": float(self.rho[i]),
                    "pi": float(self.pi[i]),
                    "q": dict(zip(STRATA, map(float, self.q[i]))),
                    "m1": dict(zip(STRATA, map(float, self.m1[i]))),
                    "m0": dict(zip(STRATA, map(float, self.m0[i]))),
                }
                for i in range(self.num_x)
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, doc: dict) -> "DiscreteWorld":
        cells = doc["cells"]
        row = lambda key: [[c[key][u] for u in STRATA] for c in cells]
        return cls(
            px=[c["px"] for c in cells],
            rho=[c["rho"] for c in cells],
            pi=[c["pi"] for c in cells],
            q=row("q"), m1=row("m1"), m0=row("m0"),
            one_sided=bool(doc.get("one_sided", False)),
        )

    @classmethod
    def from_json(cls, text: str) -> "DiscreteWorld":
        return cls.from_dict(json.loads(text))


def random_world(num_x: int, seed, one_sided: bool = False) -> DiscreteWorld:
    """Random world satisfying monotonicity, principal ignorability,
    stratum exchangeability and positivity by construction.

    Every free probability is drawn from Uniform(0.05, 0.95); ``px`` and the
    stratum probabilities are renormalised.
    """
    if num_x < 1:
        raise ValueError("num_x must be at least 1")
    rng = np.random.default_rng(seed)
    u = lambda *shape: rng.uniform(0.05, 0.95, size=shape)
    px = u(num_x)
    px = px / px.sum()
    rho, pi = u(num_x), u(num_x)
    q = u(num_x, 3)
    if one_sided:
        q[:, 0] = 0.0
    q = q / q.sum(axis=1, keepdims=True)
    m1 = u(num_x, 3)
    m1[:, 0] = m1[:, 1]  # E[Y(1)|U=11] = E[Y(1)|U=10]
    m0 = u(num_x, 3)
    m0[:, 2] = m0[:, 1]  # E[Y(0)|U=00] = E[Y(0)|U=10]
    return DiscreteWorld(px, rho, pi, q, m1, m0, one_sided)


def enumerate_true_tau(world: DiscreteWorld) -> float:
    """Complier effect in the target population by direct summation of the
    structural law."""
    w = world.px * (1.0 - world.rho) * world.q[:, 1]
    den = math.fsum(w)
    if den <= 0.0:
        raise DegenerateStratum("no complier mass in the target population")
    return math.fsum(w * (world.m1[:, 1] - world.m0[:, 1])) / den


@dataclass(frozen=True, eq=False)
class ObservedLaw:
    """Support points of the observed-data law with their probabilities.

    Target cells have ``r = 0`` and NaN ``a``, ``c``, ``y``.
    """

    cell: np.ndarray  # covariate cell index
    r: np.ndarray
    a: np.ndarray
    c: np.ndarray
    y: np.ndarray
    prob: np.ndarray

    def dataset(self) -> ValidatedDataset:
        return ValidatedDataset(r=self.r.astype(int), a=self.a, c=self.c, y=self.y,
                                x=self.cell[:, None].astype(float))

    def expect(self, values) -> float:
        return math.fsum(self.prob * np.asarray(values, dtype=float))


def observed_law(world: DiscreteWorld) -> ObservedLaw:
    """Enumerate P(x, r, a, c, y) implied by the structural world."""
    rows = []
    for i in range(world.num_x):
        rows.append((i, 0, math.nan, math.nan, math.nan, world.px[i] * (1.0 - world.rho[i])))
        for a in (1, 0):
            pa = world.pi[i] if a == 1 else 1.0 - world.pi[i]
            m = world.m1 if a == 1 else world.m0
            for c in (1, 0):
                for y in (1, 0):
                    mass = 0.0
                    for j, u in enumerate(STRATA):
                        if _C_OF[u][1 - a] != c:
                            continue
                        py = m[i, j] if y == 1 else 1.0 - m[i, j]
                        mass += world.q[i, j] * py
                    prob = world.px[i] * world.rho[i] * pa * mass
                    if prob > 0.0:
                        rows.append((i, 1, a, c, y, prob))
    cols = list(zip(*rows))
    return ObservedLaw(
        cell=np.array(cols[0], dtype=int), r=np.array(cols[1], dtype=int),
        a=np.array(cols[2], dtype=float), c=np.array(cols[3], dtype=float),
        y=np.array(cols[4], dtype=float), prob=np.array(cols[5], dtype=float),
    )


def implied_nuisances(world: DiscreteWorld, law: Optional[ObservedLaw] = None) -> dict:
    """Observed-data nuisance functions per covariate cell, computed by
    conditioning the enumerated observed law (not from the structural
    parameters)."""
    law = observed_law(world) if law is None else law
    k = world.num_x
    out = {name: np.zeros(k) for name in ("pi", "rho", "p1", "p0", "mu11", "mu00")}
    for i in range(k):
        here = law.cell == i
        trial = here & (law.r == 1)
        px = math.fsum(law.prob[here])
        p_trial = math.fsum(law.prob[trial])
        out["rho"][i] = p_trial / px
        out["pi"][i] = math.fsum(law.prob[trial & (law.a == 1)]) / p_trial
        for a, name in ((1, "p1"), (0, "p0")):
            arm = trial & (law.a == a)
            out[name][i] = math.fsum(law.prob[arm & (law.c == 1)]) / math.fsum(law.prob[arm])
        for a, c, name in ((1, 1, "mu11"), (0, 0, "mu00")):
            cellmask = trial & (law.a == a) & (law.c == c)
            out[name][i] = math.fsum(law.prob[cellmask] * law.y[cellmask]) / math.fsum(law.prob[cellmask])
    return out


def _unit_nuisances(world, cells, law=None) -> NuisanceValues:
    nu = implied_nuisances(world, law)
    p0 = np.zeros(len(cells)) if world.one_sided else nu["p0"][cells]
    return NuisanceValues(
        pi=nu["pi"][cells], rho=nu["rho"][cells], p1=nu["p1"][cells], p0=p0,
        mu11=nu["mu11"][cells], mu00=nu["mu00"][cells], one_sided=world.one_sided,
    )


def enumerate_identified(world: DiscreteWorld, formula: str) -> float:
    """Population value of an identification formula over the observed law.

    ``formula`` is ``"plugin"``, ``"ipw"`` or ``"om"``.
    """
    law = observed_law(world)
    nu = _unit_nuisances(world, law.cell, law)
    e = nu.p1 - nu.p0
    r = law.r.astype(float)
    formula = str(getattr(formula, "value", formula)).lower()
    if formula == "plugin":
        w = e * (1.0 - nu.rho)
        return law.expect(w * (nu.mu11 - nu.mu00)) / law.expect(w)
    if formula == "om":
        w = e * (1.0 - r)
        return law.expect(w * (nu.mu11 - nu.mu00)) / law.expect(w)
    if formula == "ipw":
        a = np.nan_to_num(law.a)
        c = np.nan_to_num(law.c)
        y = np.nan_to_num(law.y)
        d = law.expect(e * (1.0 - nu.rho))
        transport = (1.0 - nu.rho) / nu.rho
        arm1 = c * a * r * e / nu.p1 / nu.pi * transport * y
        arm0 = (1.0 - c) * (1.0 - a) * r * e / (1.0 - nu.p0) / (1.0 - nu.pi) * transport * y
        return (law.expect(arm1) - law.expect(arm0)) / d
    raise ValueError(f"unknown formula {formula!r}")


@dataclass(frozen=True)
class EifChecks:
    mean_phi_gap: float
    centering_gaps: tuple  # (phi1, phi0, lambda)
    est_eqn_gap: float

    @property
    def worst(self) -> float:
        return max(self.mean_phi_gap, self.est_eqn_gap, *self.centering_gaps)


def enumerate_eif_checks(world: DiscreteWorld) -> EifChecks:
    """Exact mean-zero, centering and estimating-equation checks of the
    influence-function terms produced by :func:`ptx.estimators.compute_eif_terms`."""
    law = observed_law(world)
    nu = _unit_nuisances(world, law.cell, law)
    terms = compute_eif_terms(law.dataset(), nu)
    truth = enumerate_true_tau(world)

    e = nu.p1 - nu.p0
    # X-only functionals, integrated over the same law
    d = law.expect(e * (1.0 - nu.rho))
    t1 = law.expect(e * (1.0 - nu.rho) * nu.mu11)
    t0 = law.expect(e * (1.0 - nu.rho) * nu.mu00)
    psi = (t1 - t0) / d

    centered = (terms.phi1 - terms.phi0 - psi * terms.lam) / d
    mean_phi = abs(law.expect(centered))
    gaps = (abs(law.expect(terms.phi1) - t1), abs(law.expect(terms.phi0) - t0),
            abs(law.expect(terms.lam) - d))
    est = (law.expect(terms.phi1) - law.expect(terms.phi0)) / law.expect(terms.lam)
    return EifChecks(mean_phi, gaps, abs(est - truth))


def sample_world(world: DiscreteWorld, n: int, seed):
    """Draw ``n`` i.i.d. observed units; return ``(dataset, true_nuisances)``."""
    rng = np.random.default_rng(seed)
    cells = rng.choice(world.num_x, size=n, p=world.px)
    r = rng.binomial(1, world.rho[cells])
    a = rng.binomial(1, world.pi[cells])
    u = (rng.random(n)[:, None] > np.cumsum(world.q[cells], axis=1)).sum(axis=1)
    u = np.minimum(u, 2)
    c1 = np.where(u <= 1, 1, 0)
    c0 = np.where(u == 0, 1, 0)
    c = np.where(a == 1, c1, c0)
    m = np.where(a == 1, world.m1[cells, u], world.m0[cells, u])
    y = rng.binomial(1, m).astype(float)
    trial = r == 1
    ds = ValidatedDataset.from_arrays(r, cells[:, None].astype(float),
                                      a=a[trial], c=c[trial], y=y[trial])
    return ds, _unit_nuisances(world, cells)
