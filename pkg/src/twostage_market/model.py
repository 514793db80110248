"""Network, agent and scenario types for the two-stage market.

Buses are indexed ``0..N-1``. Generators and LSEs are indexed by their
position in ``Network.generators`` / ``Network.lses`` and referred to in
reports as ``G<k>`` and ``L<k>``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

PROB_TOL = 1e-12


class ModelError(ValueError):
    """Raised for malformed problem data or impossible lookups."""


@dataclass(frozen=True)
class QuadCost:
    """cost(x) = a*x**2 + b*x on x >= 0."""

    a: float
    b: float

    def __call__(self, x):
        return self.a * x * x + self.b * x

    def marginal(self, x):
        return 2.0 * self.a * x + self.b

    def supply(self, price):
        """Quantity maximising price*x - cost(x) over x >= 0."""
        return np.maximum(0.0, (np.asarray(price, dtype=float) - self.b) / (2.0 * self.a))


@dataclass(frozen=True)
class Generator:
    bus: int
    primary_cost: QuadCost
    ancillary_cost: Optional[QuadCost] = None


@dataclass(frozen=True)
class Lse:
    bus: int
    demand: float
    dr_cost: QuadCost
    blackout_cost: QuadCost
    renewable_cap: float


@dataclass(frozen=True)
class Line:
    i: int
    j: int
    susceptance: float
    flow_limit: float


@dataclass(frozen=True)
class Network:
    """DC network with the agents attached to it.

    ``stage2=False`` closes the real-time energy market: no ancillary
    generation and no stage-2 purchases. LSE recourse (DR, blackout) is
    still available per scenario.
    """

    n_buses: int
    lines: tuple[Line, ...] = ()
    generators: tuple[Generator, ...] = ()
    lses: tuple[Lse, ...] = ()
    reference_bus: int = 0
    stage2: bool = True

    @property
    def n_gens(self) -> int:
        return len(self.generators)

    @property
    def n_lses(self) -> int:
        return len(self.lses)

    @cached_property
    def gen_bus(self) -> np.ndarray:
        return np.array([g.bus for g in self.generators], dtype=int)

    @cached_property
    def lse_bus(self) -> np.ndarray:
        return np.array([l.bus for l in self.lses], dtype=int)

    @cached_property
    def demand(self) -> np.ndarray:
        return np.array([l.demand for l in self.lses], dtype=float)

    @cached_property
    def incidence(self) -> np.ndarray:
        """Line-by-bus matrix with +1 at the ``i`` end and -1 at the ``j`` end."""
        a = np.zeros((len(self.lines), self.n_buses))
        for e, line in enumerate(self.lines):
            a[e, line.i] += 1.0
            a[e, line.j] -= 1.0
        return a

    @cached_property
    def susceptance(self) -> np.ndarray:
        return np.array([line.susceptance for line in self.lines], dtype=float)

    @cached_property
    def flow_limit(self) -> np.ndarray:
        return np.array([line.flow_limit for line in self.lines], dtype=float)

    @cached_property
    def laplacian(self) -> np.ndarray:
        """Net injection at each bus is ``laplacian @ theta``."""
        a = self.incidence
        return a.T @ (self.susceptance[:, None] * a)

    def line_flows(self, theta) -> np.ndarray:
        """Flow on each line in its stored i->j orientation."""
        return self.susceptance * (self.incidence @ np.asarray(theta, dtype=float))

    def gens_at(self, bus: int) -> list[int]:
        return [k for k, g in enumerate(self.generators) if g.bus == bus]

    def lses_at(self, bus: int) -> list[int]:
        return [k for k, l in enumerate(self.lses) if l.bus == bus]

    def without_generator(self, k: int) -> "Network":
        gens = self.generators[:k] + self.generators[k + 1:]
        return Network(self.n_buses, self.lines, gens, self.lses, self.reference_bus, self.stage2)


@dataclass(frozen=True)
class Scenario:
    w: tuple[float, ...]
    p: float


@dataclass(frozen=True)
class ScenarioSet:
    scenarios: tuple[Scenario, ...]

    def __len__(self) -> int:
        return len(self.scenarios)

    @cached_property
    def probs(self) -> np.ndarray:
        return np.array([s.p for s in self.scenarios], dtype=float)

    @cached_property
    def outputs(self) -> np.ndarray:
        """Renewable output, shape (scenarios, lses)."""
        if not self.scenarios:
            return np.zeros((0, 0))
        return np.array([s.w for s in self.scenarios], dtype=float).reshape(len(self.scenarios), -1)

    @classmethod
    def certain(cls, n_lses: int) -> "ScenarioSet":
        return cls((Scenario(tuple([0.0] * n_lses), 1.0),))


@dataclass
class Allocation:
    """Primal decisions for both stages; stage-2 arrays are (scenarios, agents)."""

    yG1: np.ndarray
    yL1: np.ndarray
    theta1: np.ndarray
    yG2: np.ndarray
    yL2: np.ndarray
    xL2: np.ndarray
    zL2: np.ndarray
    theta2: np.ndarray

    @classmethod
    def zeros(cls, network: Network, n_scenarios: int) -> "Allocation":
        g, l, n, w = network.n_gens, network.n_lses, network.n_buses, n_scenarios
        return cls(np.zeros(g), np.zeros(l), np.zeros(n), np.zeros((w, g)), np.zeros((w, l)),
                   np.zeros((w, l)), np.zeros((w, l)), np.zeros((w, n)))

    def copy(self) -> "Allocation":
        return Allocation(*(np.array(getattr(self, f), dtype=float) for f in _ALLOC_FIELDS))

    def to_dict(self) -> dict:
        out = {"yG1": self.yG1.tolist(), "yL1": self.yL1.tolist(), "theta1": self.theta1.tolist()}
        out["scenarios"] = [
            {"yG2": self.yG2[w].tolist(), "yL2": self.yL2[w].tolist(), "xL2": self.xL2[w].tolist(),
             "zL2": self.zL2[w].tolist(), "theta2": self.theta2[w].tolist()}
            for w in range(self.yG2.shape[0])
        ]
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "Allocation":
        sc = d.get("scenarios", [])

        def stack(key, width):
            if not sc:
                return np.zeros((0, width))
            return np.array([s[key] for s in sc], dtype=float).reshape(len(sc), width)

        yG1 = np.asarray(d["yG1"], dtype=float)
        yL1 = np.asarray(d["yL1"], dtype=float)
        theta1 = np.asarray(d["theta1"], dtype=float)
        return cls(yG1, yL1, theta1, stack("yG2", yG1.size), stack("yL2", yL1.size),
                   stack("xL2", yL1.size), stack("zL2", yL1.size), stack("theta2", theta1.size))


_ALLOC_FIELDS = ("yG1", "yL1", "theta1", "yG2", "yL2", "xL2", "zL2", "theta2")


@dataclass(frozen=True)
class Issue:
    """One violated invariant; ``where`` names the offending object."""

    where: str
    message: str

    def __str__(self) -> str:
        return f"{self.where}: {self.message}"


def _cost_issues(where: str, cost: QuadCost) -> list[Issue]:
    out = []
    if not (np.isfinite(cost.a) and cost.a > 0):
        out.append(Issue(where, f"curvature a must be > 0, got {cost.a}"))
    if not (np.isfinite(cost.b) and cost.b >= 0):
        out.append(Issue(where, f"coefficient b must be >= 0, got {cost.b}"))
    return out


def _connected(n: int, lines: Sequence[Line]) -> bool:
    if n <= 1:
        return True
    adj = [[] for _ in range(n)]
    for line in lines:
        if 0 <= line.i < n and 0 <= line.j < n:
            adj[line.i].append(line.j)
            adj[line.j].append(line.i)
    seen = {0}
    stack = [0]
    while stack:
        u = stack.pop()
        for v in adj[u]:
            if v not in seen:
                seen.add(v)
                stack.append(v)
    return len(seen) == n


def validate(network: Network, scenarios: ScenarioSet) -> list[Issue]:
    """Check every structural invariant; an empty list means the problem is valid."""
    issues: list[Issue] = []
    n = network.n_buses
    if n < 1:
        issues.append(Issue("network", "need at least one bus"))
    if not 0 <= network.reference_bus < max(n, 1):
        issues.append(Issue("network", f"reference bus {network.reference_bus} out of range"))

    seen_pairs = set()
    for e, line in enumerate(network.lines):
        where = f"line {e} ({line.i}-{line.j})"
        if not (0 <= line.i < n and 0 <= line.j < n):
            issues.append(Issue(where, "endpoint out of range"))
            continue
        if line.i == line.j:
            issues.append(Issue(where, "self loop"))
        pair = frozenset((line.i, line.j))
        if pair in seen_pairs:
            issues.append(Issue(where, "duplicate line between the same buses"))
        seen_pairs.add(pair)
        if not line.susceptance > 0:
            issues.append(Issue(where, f"susceptance must be > 0, got {line.susceptance}"))
        if not line.flow_limit >= 0:
            issues.append(Issue(where, f"flow limit must be >= 0, got {line.flow_limit}"))
    if n >= 1 and not _connected(n, network.lines):
        issues.append(Issue("network", "bus graph is disconnected"))

    for k, g in enumerate(network.generators):
        where = f"G{k}"
        if not 0 <= g.bus < n:
            issues.append(Issue(where, f"bus {g.bus} does not exist"))
        issues += _cost_issues(f"{where}.c1", g.primary_cost)
        if g.ancillary_cost is not None:
            issues += _cost_issues(f"{where}.c2", g.ancillary_cost)
        elif network.stage2:
            issues.append(Issue(where, "ancillary cost c2 required while stage 2 is enabled"))

    for k, lse in enumerate(network.lses):
        where = f"L{k}"
        if not 0 <= lse.bus < n:
            issues.append(Issue(where, f"bus {lse.bus} does not exist"))
        if not lse.demand >= 0:
            issues.append(Issue(where, f"negative demand {lse.demand}"))
        if not lse.renewable_cap > 0:
            issues.append(Issue(where, f"renewable cap must be > 0, got {lse.renewable_cap}"))
        issues += _cost_issues(f"{where}.dr", lse.dr_cost)
        issues += _cost_issues(f"{where}.bo", lse.blackout_cost)

    if len(scenarios) == 0:
        issues.append(Issue("scenarios", "need at least one scenario"))
    total = 0.0
    for s_idx, sc in enumerate(scenarios.scenarios):
        where = f"scenario {s_idx}"
        if not sc.p > 0:
            issues.append(Issue(where, f"probability must be > 0, got {sc.p}"))
        total += sc.p
        if len(sc.w) != network.n_lses:
            issues.append(Issue(where, f"expected {network.n_lses} renewable outputs, got {len(sc.w)}"))
            continue
        for k, (wk, lse) in enumerate(zip(sc.w, network.lses)):
            if wk < 0:
                issues.append(Issue(where, f"L{k} renewable output {wk} is negative"))
            elif wk > lse.renewable_cap:
                issues.append(Issue(where, f"L{k} renewable output {wk} above cap {lse.renewable_cap}"))
    if len(scenarios) and abs(total - 1.0) > PROB_TOL:
        issues.append(Issue("scenarios", f"probabilities sum to {total:.12g}"))
    return issues


def flow(network: Network, theta, i: int, j: int) -> float:
    """Signed flow from bus i to bus j over the line joining them."""
    theta = np.asarray(theta, dtype=float)
    for line in network.lines:
        if (line.i, line.j) == (i, j) or (line.i, line.j) == (j, i):
            return float(line.susceptance * (theta[i] - theta[j]))
    raise ModelError(f"no line between buses {i} and {j}")


def nodal_imbalance(network: Network, allocation: Allocation, stage: int,
                    scenario: Optional[int] = None) -> np.ndarray:
    """Generation minus consumption minus outflow at each bus.

    Stage 2 uses incremental flows, i.e. flows at ``theta2`` minus flows at
    ``theta1``.
    """
    n = network.n_buses
    a = allocation
    if a.theta1.shape != (n,) or a.yG1.shape != (network.n_gens,) or a.yL1.shape != (network.n_lses,):
        raise ModelError("allocation dimensions do not match the network")
    lap = network.laplacian
    if stage == 1:
        gen, load = a.yG1, a.yL1
        out = lap @ a.theta1
    elif stage == 2:
        if scenario is None or not 0 <= scenario < a.yG2.shape[0]:
            raise ModelError("stage 2 imbalance needs a valid scenario index")
        gen, load = a.yG2[scenario], a.yL2[scenario]
        out = lap @ (a.theta2[scenario] - a.theta1)
    else:
        raise ModelError(f"stage must be 1 or 2, got {stage}")
    res = -out
    np.add.at(res, network.gen_bus, gen)
    np.subtract.at(res, network.lse_bus, load)
    return res


# -- JSON problem files -------------------------------------------------------

def _cost(d) -> QuadCost:
    return QuadCost(float(d["a"]), float(d["b"]))


def problem_from_dict(d: dict) -> tuple[Network, ScenarioSet]:
    try:
        stage2 = d.get("stage2", "enabled")
        if stage2 not in ("enabled", "disabled", True, False):
            raise ModelError(f"stage2 must be 'enabled' or 'disabled', got {stage2!r}")
        lines = tuple(Line(int(l["i"]), int(l["j"]), float(l["b"]), float(l["fmax"]))
                      for l in d.get("lines", []))
        gens = tuple(Generator(int(g["bus"]), _cost(g["c1"]),
                               _cost(g["c2"]) if g.get("c2") is not None else None)
                     for g in d.get("generators", []))
        lses = tuple(Lse(int(l["bus"]), float(l["demand"]), _cost(l["dr"]), _cost(l["bo"]),
                         float(l["wcap"]))
                     for l in d.get("lses", []))
        net = Network(int(d["buses"]), lines, gens, lses, int(d.get("reference_bus", 0)),
                      stage2 in ("enabled", True))
        scen = ScenarioSet(tuple(Scenario(tuple(float(v) for v in s["w"]), float(s["p"]))
                                 for s in d.get("scenarios", [])))
    except (KeyError, TypeError) as exc:
        raise ModelError(f"malformed problem: missing or bad field {exc}") from exc
    return net, scen


def problem_to_dict(network: Network, scenarios: ScenarioSet) -> dict:
    def cost(c):
        return {"a": c.a, "b": c.b}

    return {
        "buses": network.n_buses,
        "reference_bus": network.reference_bus,
        "stage2": "enabled" if network.stage2 else "disabled",
        "lines": [{"i": l.i, "j": l.j, "b": l.susceptance, "fmax": l.flow_limit} for l in network.lines],
        "generators": [
            {"bus": g.bus, "c1": cost(g.primary_cost),
             "c2": cost(g.ancillary_cost) if g.ancillary_cost is not None else None}
            for g in network.generators
        ],
        "lses": [
            {"bus": l.bus, "demand": l.demand, "dr": cost(l.dr_cost), "bo": cost(l.blackout_cost),
             "wcap": l.renewable_cap}
            for l in network.lses
        ],
        "scenarios": [{"w": list(s.w), "p": s.p} for s in scenarios.scenarios],
    }


def load_problem(path) -> tuple[Network, ScenarioSet]:
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ModelError(f"cannot read problem file {path}: {exc}") from exc
    return problem_from_dict(data)
