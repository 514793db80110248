import numpy as np
import pytest

from twostage_market.instances import example1, two_scenario
from twostage_market.model import Generator, Lse, Network, QuadCost, ScenarioSet


@pytest.fixture
def ex1():
    return example1()


@pytest.fixture
def two():
    return two_scenario()


@pytest.fixture
def zero_demand():
    """Bundled two-bus topology with no demand at all."""
    net, scen = example1()
    lses = tuple(Lse(l.bus, 0.0, l.dr_cost, l.blackout_cost, l.renewable_cap) for l in net.lses)
    return Network(net.n_buses, net.lines, net.generators, lses, net.reference_bus, net.stage2), scen


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def single_bus(gen_c1, gen_c2, demand, dr, bo, outputs, probs, wcap=4.0):
    from twostage_market.model import Scenario
    gen = Generator(0, QuadCost(*gen_c1), QuadCost(*gen_c2))
    lse = Lse(0, demand, QuadCost(*dr), QuadCost(*bo), wcap)
    scen = ScenarioSet(tuple(Scenario((float(w),), float(p)) for w, p in zip(outputs, probs)))
    return Network(1, (), (gen,), (lse,)), scen
