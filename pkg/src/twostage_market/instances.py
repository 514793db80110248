"""Bundled and randomly generated market instances."""
from __future__ import annotations

import json
from importlib import resources

import numpy as np

from .model import (Generator, Line, Lse, Network, QuadCost, Scenario, ScenarioSet,
                    problem_from_dict)


def example1() -> tuple[Network, ScenarioSet]:
    """Two-bus single-stage instance with a congested line."""
    text = resources.files("twostage_market").joinpath("data/example1.json").read_text()
    return problem_from_dict(json.loads(text))


def example1_path():
    return resources.files("twostage_market").joinpath("data/example1.json")


def two_scenario() -> tuple[Network, ScenarioSet]:
    """One bus, one generator, one LSE and two equally likely renewable outcomes."""
    gen = Generator(0, QuadCost(1.0, 1.0), QuadCost(2.0, 1.0))
    lse = Lse(0, 4.0, QuadCost(10.0, 1.0), QuadCost(100.0, 50.0), 2.0)
    net = Network(1, (), (gen,), (lse,))
    scen = ScenarioSet((Scenario((0.0,), 0.5), Scenario((2.0,), 0.5)))
    return net, scen


def _cost(rng, a_range, b_range) -> QuadCost:
    return QuadCost(float(rng.uniform(*a_range)), float(rng.uniform(*b_range)))


def _lines(rng, n_buses: int, max_lines: int, fmax_range) -> tuple[Line, ...]:
    """Random spanning tree plus optional extra edges."""
    order = rng.permutation(n_buses)
    pairs = [(int(order[t]), int(order[rng.integers(0, t)])) for t in range(1, n_buses)]
    candidates = [(i, j) for i in range(n_buses) for j in range(i + 1, n_buses)
                  if (i, j) not in pairs and (j, i) not in pairs]
    rng.shuffle(candidates)
    while len(pairs) < max_lines and candidates and rng.random() < 0.5:
        pairs.append(candidates.pop())
    return tuple(Line(i, j, float(rng.uniform(0.5, 2.0)), float(rng.uniform(*fmax_range)))
                 for i, j in pairs)


def _scenarios(rng, lses, n_scen: int) -> ScenarioSet:
    if n_scen == 1:
        p = np.ones(1)
    else:
        p = rng.dirichlet(np.ones(n_scen))
        p = np.maximum(p, 0.05)
        p /= p.sum()
        p[-1] = 1.0 - p[:-1].sum()
    out = []
    for w in range(n_scen):
        vals = tuple(float(rng.uniform(0.0, l.renewable_cap)) for l in lses)
        out.append(Scenario(vals, float(p[w])))
    return ScenarioSet(tuple(out))


def _agents(rng, counts_g, counts_l):
    gens, lses = [], []
    for bus, n in enumerate(counts_g):
        for _ in range(n):
            gens.append(Generator(bus, _cost(rng, (0.5, 3.0), (1.0, 10.0)),
                                  _cost(rng, (1.0, 6.0), (5.0, 20.0))))
    for bus, n in enumerate(counts_l):
        for _ in range(n):
            lses.append(Lse(bus, float(rng.uniform(2.0, 10.0)), _cost(rng, (0.5, 3.0), (10.0, 30.0)),
                            _cost(rng, (2.0, 10.0), (50.0, 100.0)), float(rng.uniform(1.0, 4.0))))
    return tuple(gens), tuple(lses)


def random_instance(rng: np.random.Generator, max_buses: int = 3, max_lines: int = 3,
                    max_per_bus: int = 2, max_scenarios: int = 3) -> tuple[Network, ScenarioSet]:
    """Small random instance; at least one generator and one LSE overall."""
    n = int(rng.integers(1, max_buses + 1))
    while True:
        cg = rng.integers(0, max_per_bus + 1, n)
        cl = rng.integers(0, max_per_bus + 1, n)
        if cg.sum() and cl.sum():
            break
    gens, lses = _agents(rng, cg, cl)
    lines = _lines(rng, n, max_lines, (0.5, 5.0))
    net = Network(n, lines, gens, lses)
    return net, _scenarios(rng, lses, int(rng.integers(1, max_scenarios + 1)))


def monopoly_free_instance(rng: np.random.Generator, max_buses: int = 3,
                           max_scenarios: int = 2) -> tuple[Network, ScenarioSet]:
    """Every bus hosts zero or two generators and zero or two LSEs."""
    n = int(rng.integers(1, max_buses + 1))
    while True:
        cg = 2 * rng.integers(0, 2, n)
        cl = 2 * rng.integers(0, 2, n)
        if cg.sum() and cl.sum():
            break
    gens, lses = _agents(rng, cg, cl)
    lines = _lines(rng, n, n, (0.5, 5.0))
    net = Network(n, lines, gens, lses)
    return net, _scenarios(rng, lses, int(rng.integers(1, max_scenarios + 1)))


def congestion_free_instance(rng: np.random.Generator, max_buses: int = 3,
                             max_scenarios: int = 2) -> tuple[Network, ScenarioSet]:
    """One agent of each kind per bus at most, with line limits far above any flow.

    Limits exceed total demand over the smallest susceptance, so no flow can
    reach them.
    """
    n = int(rng.integers(1, max_buses + 1))
    while True:
        cg = rng.integers(0, 2, n)
        cl = rng.integers(0, 2, n)
        if cg.sum() and cl.sum():
            break
    gens, lses = _agents(rng, cg, cl)
    lines = _lines(rng, n, n, (1.0, 1.0))
    big = 10.0 * (sum(l.demand for l in lses) + 1.0)
    lines = tuple(Line(l.i, l.j, l.susceptance, big) for l in lines)
    net = Network(n, lines, gens, lses)
    return net, _scenarios(rng, lses, int(rng.integers(1, max_scenarios + 1)))
