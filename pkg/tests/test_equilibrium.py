import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from twostage_market.dispatch import solve_spp
from twostage_market.equilibrium import (PriceSystem, check_welfare_theorems, construct_sceq,
                                         iso_surplus, verify_sceq)
from twostage_market.instances import random_instance
from twostage_market.model import ModelError


def test_example1_prices(ex1):
    alloc, prices = construct_sceq(*ex1)
    np.testing.assert_allclose(prices.p1, [520.0, 180.0], atol=1e-6)
    cert = verify_sceq(*ex1, alloc, prices)
    assert cert.passed
    assert cert.max_gap <= 1e-6 * (1 + abs(cert.welfare))
    assert cert.welfare == pytest.approx(-12390.0, abs=1e-6)


def test_zero_demand_passes_with_zero_gaps(zero_demand):
    alloc, prices = construct_sceq(*zero_demand)
    cert = verify_sceq(*zero_demand, alloc, prices)
    assert cert.passed
    assert cert.max_gap <= cert.threshold_gap
    np.testing.assert_allclose(alloc.yL1, 0.0, atol=1e-6)


def test_two_scenario_passes(two):
    alloc, prices = construct_sceq(*two)
    cert = verify_sceq(*two, alloc, prices)
    assert cert.passed
    assert cert.max_clearing <= 1e-7


def test_inflated_price_fails_for_lses_there(ex1):
    alloc, prices = construct_sceq(*ex1)
    cert = verify_sceq(*ex1, alloc, prices.shifted(0, 10.0))
    assert not cert.passed
    gaps = {g.agent: g.gap for g in cert.gaps}
    # at 530 LSE 0 prefers 4.5 units to 5; the loss is the DR curvature 10 times 0.5**2
    assert gaps["L0"] == pytest.approx(10.0 * 0.5 ** 2, rel=1e-6)
    assert any(r.startswith("L0 gains") for r in cert.reasons)


def test_clearing_violation_reported(ex1):
    alloc, prices = construct_sceq(*ex1)
    bad = alloc.copy()
    bad.yG1[0] += 1.0
    cert = verify_sceq(*ex1, bad, prices)
    assert not cert.passed
    assert cert.clearing["stage1"] == pytest.approx(1.0, abs=1e-7)
    assert "stage1 imbalance 1" in cert.reasons


def test_price_dimensions_checked(ex1):
    alloc, _ = construct_sceq(*ex1)
    with pytest.raises(ModelError):
        verify_sceq(*ex1, alloc, PriceSystem([1.0, 2.0, 3.0], []))


def test_non_finite_prices_rejected():
    with pytest.raises(ModelError):
        PriceSystem([np.nan], [])


def test_certificate_json_has_gap_table(two):
    d = verify_sceq(*two, *construct_sceq(*two)).to_dict()
    assert d["verdict"] == "pass"
    assert [g["agent"] for g in d["gaps"]] == ["G0", "L0"]
    assert set(d["gaps"][0]) == {"agent", "best", "at_allocation", "gap"}


# -- ISO problem ---------------------------------------------------------------------


def test_example1_congestion_rent(ex1):
    alloc, prices = construct_sceq(*ex1)
    rep = iso_surplus(*ex1, prices, alloc)
    assert rep.surplus == pytest.approx((520.0 - 180.0) * 2.0, abs=1e-5)
    assert abs(rep.gap) <= 1e-6 * (1 + rep.optimum)


def test_uniform_prices_give_no_surplus(two):
    alloc, prices = construct_sceq(*two)
    rep = iso_surplus(*two, prices, alloc)
    assert rep.surplus == pytest.approx(0.0, abs=1e-7)
    assert rep.optimum == pytest.approx(0.0, abs=1e-7)


# -- welfare theorems ------------------------------------------------------------------


@pytest.mark.parametrize("name", ["ex1", "two", "zero_demand"])
def test_welfare_theorems(name, request):
    rep = check_welfare_theorems(*request.getfixturevalue(name))
    assert rep.first_theorem and rep.second_theorem
    assert rep.sceq_welfare == pytest.approx(rep.planner_welfare, abs=1e-6 * (1 + abs(rep.planner_welfare)))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_sceq_welfare_matches_planner(seed):
    net, scen = random_instance(np.random.default_rng(seed), max_scenarios=2)
    rep = check_welfare_theorems(net, scen)
    assert rep.passed, rep.certificate.reasons


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31 - 1), st.data())
def test_price_translation_is_detected(seed, data):
    """A unit price shift at a bus with a producing generator must be caught.

    The generator re-optimises and gains 1/(4a). An LSE alone need not gain:
    with demand below its DR marginal and dearer real-time power it keeps
    buying the same day-ahead quantity at the higher price.
    """
    net, scen = random_instance(np.random.default_rng(seed))
    alloc, prices = construct_sceq(net, scen)
    bus = data.draw(st.integers(0, net.n_buses - 1))
    cert = verify_sceq(net, scen, alloc, prices.shifted(bus, 1.0))
    gaps = {g.agent: g.gap for g in cert.gaps}
    for k in net.gens_at(bus):
        if alloc.yG1[k] > 1e-3:
            assert not cert.passed
            assert gaps[f"G{k}"] == pytest.approx(1.0 / (4 * net.generators[k].primary_cost.a), rel=1e-4)


def test_price_translation_blind_spot():
    # bus 0 hosts only an LSE whose day-ahead purchase stays optimal at +1
    net, scen = random_instance(np.random.default_rng(371))
    alloc, prices = construct_sceq(net, scen)
    assert net.gens_at(0) == [] and alloc.yL1[0] > 1.0
    assert verify_sceq(net, scen, alloc, prices.shifted(0, 1.0)).passed


def test_gauge_independence(two, ex1):
    for net, scen in (ex1, two):
        alloc, prices = construct_sceq(net, scen)
        shifted = alloc.copy()
        shifted.theta1 = shifted.theta1 + 3.0
        shifted.theta2 = shifted.theta2 + 3.0
        a = verify_sceq(net, scen, alloc, prices).to_dict()
        b = verify_sceq(net, scen, shifted, prices).to_dict()
        a.pop("allocation"), b.pop("allocation")
        assert a == b


def test_solution_reused_when_given(two):
    sol = solve_spp(*two)
    alloc, prices = construct_sceq(*two, planner=sol)
    assert alloc is sol.allocation
    np.testing.assert_array_equal(prices.p1, sol.lambda1)
