import math

import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings, strategies as st

from ptx.errors import DegenerateStratum
from ptx.oracle import (
    DiscreteWorld,
    enumerate_eif_checks,
    enumerate_identified,
    enumerate_true_tau,
    implied_nuisances,
    observed_law,
    random_world,
    sample_world,
)

FORMULAS = ("plugin", "ipw", "om")


def hand_world():
    # two equiprobable cells, complier share 1/2 and 1/4, effects 1 and 0
    return DiscreteWorld(
        px=[0.5, 0.5], rho=[0.4, 0.4], pi=[0.5, 0.5],
        q=[[0.25, 0.5, 0.25], [0.25, 0.25, 0.5]],
        m1=[[0.7, 0.7, 0.2], [0.3, 0.3, 0.6]],
        m0=[[0.1, 0.2, 0.2], [0.5, 0.3, 0.3]],
    )


class TestRandomWorld:

    def test_single_cell(self):
        w = random_world(1, 0)
        assert w.num_x == 1 and w.satisfies_assumptions()

    def test_one_sided(self):
        w = random_world(4, 2, one_sided=True)
        assert np.all(w.q[:, 0] == 0)
        npt.assert_array_equal(implied_nuisances(w)["p0"], 0.0)

    def test_reproducible(self):
        a, b = random_world(5, 9), random_world(5, 9)
        for name in ("px", "rho", "pi", "q", "m1", "m0"):
            npt.assert_array_equal(getattr(a, name), getattr(b, name))

    def test_json_round_trip(self):
        w = random_world(3, 4)
        back = DiscreteWorld.from_json(w.to_json())
        npt.assert_array_equal(back.q, w.q)
        assert back.one_sided == w.one_sided

    def test_rejects_bad_probabilities(self):
        with pytest.raises(ValueError):
            DiscreteWorld(px=[0.5, 0.6], rho=[.5, .5], pi=[.5, .5], q=[[1 / 3] * 3] * 2,
                          m1=[[.5] * 3] * 2, m0=[[.5] * 3] * 2)


class TestTrueTau:

    def test_constant_effect(self):
        w = random_world(4, 1)
        m0 = w.m0 * 0.8  # keeps m0 + 0.15 inside [0, 1]
        m1 = w.m1.copy()
        m1[:, 0] = m1[:, 1] = m0[:, 1] + 0.15
        shifted = DiscreteWorld(w.px, w.rho, w.pi, w.q, m1, m0)
        assert shifted.satisfies_assumptions()
        assert enumerate_true_tau(shifted) == pytest.approx(0.15, abs=1e-14)

    def test_hand_fraction(self):
        # (1/2 * 1/2 * 1) / (1/2 * 1/2 + 1/2 * 1/4) with effects m1-m0 = 0.5 and 0.0
        w = hand_world()
        expected = (0.5 * 0.5 * 0.5 + 0.5 * 0.25 * 0.0) / (0.5 * 0.5 + 0.5 * 0.25)
        assert enumerate_true_tau(w) == pytest.approx(expected, abs=1e-15)
        assert expected == pytest.approx(2 / 3 * 0.5)

    def test_one_sided_functional(self):
        w = random_world(5, 3, one_sided=True)
        nu = implied_nuisances(w)
        num = math.fsum(w.px * nu["p1"] * (nu["mu11"] - nu["mu00"]) * (1 - w.rho))
        den = math.fsum(w.px * nu["p1"] * (1 - w.rho))
        assert enumerate_true_tau(w) == pytest.approx(num / den, abs=1e-12)

    def test_no_compliers(self):
        w = DiscreteWorld(px=[1.0], rho=[.5], pi=[.5], q=[[0.5, 0.0, 0.5]], m1=[[.5] * 3], m0=[[.5] * 3])
        with pytest.raises(DegenerateStratum):
            enumerate_true_tau(w)


class TestObservedLaw:

    def test_total_mass(self):
        law = observed_law(random_world(6, 0))
        assert math.fsum(law.prob) == pytest.approx(1.0, abs=1e-14)

    def test_implied_nuisances_match_structure(self):
        w = random_world(4, 8)
        nu = implied_nuisances(w)
        npt.assert_allclose(nu["rho"], w.rho, atol=1e-14)
        npt.assert_allclose(nu["pi"], w.pi, atol=1e-14)
        npt.assert_allclose(nu["p1"], w.q[:, 0] + w.q[:, 1], atol=1e-14)
        npt.assert_allclose(nu["p0"], w.q[:, 0], atol=1e-14)


class TestIdentification:

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 6), st.integers(0, 2**32 - 1), st.booleans())
    def test_triangle(self, num_x, seed, one_sided):
        w = random_world(num_x, seed, one_sided)
        truth = enumerate_true_tau(w)
        for f in FORMULAS:
            assert abs(enumerate_identified(w, f) - truth) <= 1e-12

    def test_broken_ignorability(self):
        w = random_world(3, 5)
        m1 = w.m1.copy()
        m1[:, 0] = np.clip(m1[:, 0] + 0.3, 0, 1) if np.all(m1[:, 0] < 0.6) else m1[:, 0] - 0.3
        broken = DiscreteWorld(w.px, w.rho, w.pi, w.q, m1, w.m0)
        assert not broken.satisfies_assumptions()
        assert abs(enumerate_identified(broken, "plugin") - enumerate_true_tau(broken)) > 1e-3

    def test_unknown_formula(self):
        with pytest.raises(ValueError):
            enumerate_identified(random_world(2, 0), "tmle")


class TestEifChecks:

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 6), st.integers(0, 2**32 - 1), st.booleans())
    def test_identities(self, num_x, seed, one_sided):
        checks = enumerate_eif_checks(random_world(num_x, seed, one_sided))
        assert checks.worst <= 1e-12

    def test_constant_nuisances(self):
        w = random_world(1, 17)
        checks = enumerate_eif_checks(w)
        assert checks.worst <= 1e-14


class TestSampleWorld:

    def test_shapes_and_truth(self):
        w = random_world(3, 2)
        ds, nu = sample_world(w, 5000, 1)
        assert ds.n == nu.n == 5000
        nu_x = implied_nuisances(w)
        cells = ds.x[:, 0].astype(int)
        npt.assert_array_equal(nu.p1, nu_x["p1"][cells])
        # empirical participation rate by cell tracks rho
        for i in range(3):
            assert abs(np.mean(ds.r[cells == i]) - w.rho[i]) < 0.05

    def test_one_sided_never_treats_controls(self):
        ds, nu = sample_world(random_world(3, 2, one_sided=True), 3000, 0)
        trial = ds.r == 1
        assert not np.any(trial & (ds.a == 0) & (ds.c == 1))
        assert nu.one_sided
