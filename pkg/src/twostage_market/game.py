"""Strategic layer: dispatch under linear bids, payoffs and deviation search.

Clearing LPs are usually degenerate (at the efficient profile every agent at
a bus bids the same price), so the dispatch is selected in two steps: the LP
fixes prices and the optimal face, then a true-cost QP over that face picks
the allocation. Prices always come from the LP multipliers.

Each LSE's purchase is capped at its demand in every scenario. Consumption
beyond demand has no value, and without the cap an LSE bidding above the
cheapest reachable generator makes the LP unbounded.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from .dispatch import (PlannerSolution, SolverFailure, _network_core, add_service_block,
                       extract_allocation, lse_utility, solve_spp, solve_spp_u, welfare_of)
from .model import Allocation, ModelError, Network, ScenarioSet
from .qp import (UNBOUNDED, ProgramBuilder, SolveResult, StandardProgram, kkt_residual,
                 optimal_face, restrict_to_face, solve)

LP_TOL = 1e-10
FACE_TOL = 1e-9


class UnboundedClearing(SolverFailure):
    """Clearing LP without a finite optimum; names the bids that drive it."""

    def __init__(self, coordinates: Sequence[str], result: Optional[SolveResult] = None):
        super().__init__("clearing LP unbounded", result)
        self.coordinates = list(coordinates)

    def __str__(self) -> str:
        return f"clearing LP unbounded; LSE bids above every generator bid: {', '.join(self.coordinates)}"


# -- bids -------------------------------------------------------------------------

def agent_ids(network: Network) -> list[str]:
    return [f"G{k}" for k in range(network.n_gens)] + [f"L{k}" for k in range(network.n_lses)]


def parse_agent(network: Network, agent: str) -> tuple[str, int]:
    if len(agent) < 2 or agent[0] not in "GL" or not agent[1:].isdigit():
        raise ModelError(f"bad agent id {agent!r}")
    k = int(agent[1:])
    count = network.n_gens if agent[0] == "G" else network.n_lses
    if k >= count:
        raise ModelError(f"no agent {agent}")
    return agent[0], k


@dataclass
class BidProfile:
    """Scalar linear bids; stage-2 arrays are (agents, scenarios)."""

    gen1: np.ndarray
    gen2: np.ndarray
    lse1: np.ndarray
    lse2: np.ndarray

    def __post_init__(self):
        self.gen1 = np.asarray(self.gen1, dtype=float)
        self.lse1 = np.asarray(self.lse1, dtype=float)
        self.gen2 = np.asarray(self.gen2, dtype=float).reshape(self.gen1.size, -1)
        self.lse2 = np.asarray(self.lse2, dtype=float).reshape(self.lse1.size, -1)
        for arr in (self.gen1, self.gen2, self.lse1, self.lse2):
            if not np.isfinite(arr).all() or (arr < 0).any():
                raise ModelError("bids must be finite and nonnegative")

    def get(self, agent: str) -> np.ndarray:
        """Bid vector ``[b1, b2[0], ...]`` of one agent."""
        kind, k = agent[0], int(agent[1:])
        if kind == "G":
            return np.concatenate([[self.gen1[k]], self.gen2[k]])
        return np.concatenate([[self.lse1[k]], self.lse2[k]])

    def with_agent(self, agent: str, vec) -> "BidProfile":
        vec = np.asarray(vec, dtype=float)
        out = BidProfile(self.gen1.copy(), self.gen2.copy(), self.lse1.copy(), self.lse2.copy())
        kind, k = agent[0], int(agent[1:])
        if kind == "G":
            out.gen1[k], out.gen2[k] = vec[0], vec[1:]
        else:
            out.lse1[k], out.lse2[k] = vec[0], vec[1:]
        return out

    def to_dict(self) -> dict:
        out = {}
        for k in range(self.gen1.size):
            out[f"G{k}"] = {"b1": float(self.gen1[k]), "b2": self.gen2[k].tolist()}
        for k in range(self.lse1.size):
            out[f"L{k}"] = {"b1": float(self.lse1[k]), "b2": self.lse2[k].tolist()}
        return out

    @classmethod
    def from_dict(cls, d: dict, network: Network, n_scenarios: int) -> "BidProfile":
        width = n_scenarios if network.stage2 else 0

        def read(prefix, count):
            b1, b2 = np.zeros(count), np.zeros((count, width))
            for k in range(count):
                key = f"{prefix}{k}"
                if key not in d:
                    raise ModelError(f"bid profile has no entry for {key}")
                b1[k] = float(d[key]["b1"])
                if width:
                    vals = d[key].get("b2", [])
                    if len(vals) != width:
                        raise ModelError(f"{key}: expected {width} stage-2 bids, got {len(vals)}")
                    b2[k] = vals
            return b1, b2

        g1, g2 = read("G", network.n_gens)
        l1, l2 = read("L", network.n_lses)
        return cls(g1, g2, l1, l2)


# -- DED clearing ---------------------------------------------------------------------

@dataclass
class ClearingOutcome:
    allocation: Allocation
    lambda1: np.ndarray
    lambda2: np.ndarray
    gamma1: np.ndarray
    gamma2: np.ndarray
    payoffs: dict[str, float]
    welfare: float
    bid_objective: float
    tie_broken: bool
    mu: Optional[np.ndarray] = None

    def to_dict(self) -> dict:
        out = {"allocation": self.allocation.to_dict(), "lambda1": self.lambda1.tolist(),
               "lambda2": self.lambda2.tolist(), "gamma1": self.gamma1.tolist(),
               "gamma2": self.gamma2.tolist(), "payoffs": dict(self.payoffs), "welfare": self.welfare,
               "bid_objective": self.bid_objective, "tie_broken": self.tie_broken}
        if self.mu is not None:
            out["mu"] = self.mu.tolist()
        return out


def _face_is_point(p: StandardProgram, fixed: np.ndarray, tight: np.ndarray) -> bool:
    rows = [p.A_eq, p.A_in[tight], np.eye(p.n)[fixed]]
    A = np.vstack([r for r in rows if r.size])
    return A.shape[0] >= p.n and np.linalg.matrix_rank(A) == p.n


def _tie_break(lp: StandardProgram, res: SolveResult, ext: StandardProgram):
    """True-cost QP over the LP's optimal face; None when no selection is needed or it fails."""
    fixed, tight = optimal_face(lp, res)
    if _face_is_point(lp, fixed, tight):
        return None
    face = restrict_to_face(ext, fixed, tight, separable=ext.separable)
    sel = solve(face, tol=FACE_TOL)
    return sel.x if sel.ok else None


class DedClearing:
    """Clearing LP for one instance; only the cost vector depends on the bids."""

    def __init__(self, network: Network, scenarios: ScenarioSet):
        self.network, self.scenarios = network, scenarios
        W, probs = len(scenarios), scenarios.probs
        b = ProgramBuilder()
        lay = _network_core(b, network, W, probs)
        lay.cap = np.zeros((W, network.n_lses), dtype=int)
        for w in range(W):
            p = probs[w] if network.stage2 else 1.0
            for k, lse in enumerate(network.lses):
                idx = [lay.yL1[k]] + ([lay.yL2[w, k]] if network.stage2 else [])
                lay.cap[w, k] = b.add_le(idx, [p] * len(idx), p * lse.demand)
            if not network.stage2:
                break
        self.lp = b.build()
        self.n_lp = self.lp.n
        self.lp_layout = replace(lay)
        # same prefix, plus service variables and true costs for tie-breaking
        for k, g in enumerate(network.generators):
            b.add_cost(lay.yG1[k], g.primary_cost.a, g.primary_cost.b)
            if network.stage2:
                for w, p in enumerate(probs):
                    b.add_cost(lay.yG2[w, k], p * g.ancillary_cost.a, p * g.ancillary_cost.b)
        add_service_block(b, network, scenarios, lay)
        self.ext = b.build()
        self.layout = lay

    def cost_vector(self, bids: BidProfile) -> np.ndarray:
        net, lay, probs = self.network, self.layout, self.scenarios.probs
        c = np.zeros(self.n_lp)
        c[lay.yG1] = bids.gen1
        c[lay.yL1] = -bids.lse1
        if net.stage2:
            c[lay.yG2] = probs[:, None] * bids.gen2.T
            c[lay.yL2] = -probs[:, None] * bids.lse2.T
        return c

    def _offenders(self, bids: BidProfile) -> list[str]:
        floor = bids.gen1.min(initial=math.inf)
        return [f"L{k}.b1" for k in range(bids.lse1.size) if bids.lse1[k] > floor]

    def solve_lp(self, bids: BidProfile, rhs: Optional[np.ndarray] = None):
        lp = self.lp
        prog = StandardProgram(lp.Q, self.cost_vector(bids), lp.A_eq,
                               lp.b_eq if rhs is None else rhs, lp.A_in, lp.b_in, lp.nonneg)
        res = solve(prog, tol=LP_TOL)
        if res.status == UNBOUNDED:
            raise UnboundedClearing(self._offenders(bids), res)
        if not res.ok:
            raise SolverFailure("clearing LP", res)
        return prog, res

    def clear(self, bids: BidProfile, tie_break: bool = True) -> ClearingOutcome:
        net, sc, lay = self.network, self.scenarios, self.layout
        lp, res = self.solve_lp(bids)
        x = res.x
        picked = _tie_break(lp, res, self.ext) if tie_break else None
        if picked is not None:
            x = picked[:self.n_lp]
        W = len(sc)
        alloc = extract_allocation(net, x, self.lp_layout, W)
        lam1 = res.lambda_eq[lay.bal1]
        g1 = res.mu_in[lay.flow1] if lay.flow1.size else np.zeros((0, 2))
        if net.stage2:
            lam2 = res.lambda_eq[lay.bal2]
            g2 = res.mu_in[lay.flow2] if lay.flow2.size else np.zeros((W, 0, 2))
        else:
            lam2 = np.zeros((W, net.n_buses))
            g2 = np.zeros((W, len(net.lines), 2))
        pay = ded_payoffs(net, sc, alloc, lam1, lam2)
        return ClearingOutcome(alloc, lam1, lam2, g1, g2, pay, welfare_of(net, sc, alloc),
                               float(self.cost_vector(bids) @ res.x), picked is not None)


def ded_payoffs(network: Network, scenarios: ScenarioSet, alloc: Allocation,
                lambda1: np.ndarray, lambda2: np.ndarray) -> dict[str, float]:
    """Expected payoffs at nodal prices with true costs and utilities."""
    probs, out = scenarios.probs, scenarios.outputs
    pay = {}
    for k, g in enumerate(network.generators):
        i = g.bus
        v = lambda1[i] * alloc.yG1[k] - g.primary_cost(alloc.yG1[k])
        if network.stage2:
            y2 = alloc.yG2[:, k]
            v += float(probs @ (lambda2[:, i] * y2 - g.ancillary_cost(y2)))
        pay[f"G{k}"] = float(v)
    for k, l in enumerate(network.lses):
        i = l.bus
        v = -lambda1[i] * alloc.yL1[k]
        for w, p in enumerate(probs):
            y2 = alloc.yL2[w, k] if network.stage2 else 0.0
            v += p * (lse_utility(l, alloc.yL1[k], y2, out[w, k])[0] - lambda2[w, i] * y2)
        pay[f"L{k}"] = float(v)
    return pay


def clear_ded(network: Network, scenarios: ScenarioSet, bids: BidProfile) -> ClearingOutcome:
    return DedClearing(network, scenarios).clear(bids)


def efficient_bids(network: Network, scenarios: ScenarioSet,
                   planner: Optional[PlannerSolution] = None) -> BidProfile:
    """Every agent bids its bus's planner price in each stage and scenario.

    Negative multipliers (possible at buses without LSEs when loop flows
    congest) are clipped to zero, as bids must be nonnegative.
    """
    sol = planner if planner is not None else solve_spp(network, scenarios)
    W = len(scenarios)
    p1 = np.maximum(sol.lambda1, 0.0)
    p2 = np.maximum(sol.lambda2, 0.0) if network.stage2 else np.zeros((W, network.n_buses))
    width = W if network.stage2 else 0
    g2 = p2[:, network.gen_bus].T[:, :width] if network.n_gens else np.zeros((0, width))
    l2 = p2[:, network.lse_bus].T[:, :width] if network.n_lses else np.zeros((0, width))
    return BidProfile(p1[network.gen_bus], g2, p1[network.lse_bus], l2)


def _one_sided_prices(value: Callable[[np.ndarray], float], rhs: np.ndarray, row: int,
                      step: float) -> tuple[float, float]:
    """Left and right derivatives of an LP value in the rhs of one balance row."""
    base = value(rhs)
    up, down = rhs.copy(), rhs.copy()
    up[row] += step
    down[row] -= step
    return (base - value(up)) / step, (value(down) - base) / step


def price_interval(network: Network, scenarios: ScenarioSet, bids: BidProfile, bus: int,
                   scenario: Optional[int] = None, delta: float = 1e-3,
                   clearing: Optional[DedClearing] = None) -> tuple[float, float]:
    """Range of supporting prices at a bus, from one-sided value derivatives.

    Solves the clearing LP with a little extra and a little less demand at the
    bus; the LP value is piecewise linear in that demand, so the one-sided
    differences are the ends of the price interval for small ``delta``.
    """
    cl = clearing or DedClearing(network, scenarios)
    lay = cl.layout
    if scenario is None:
        row, p = lay.bal1[bus], 1.0
    else:
        if not network.stage2:
            raise ModelError("stage-2 prices need stage 2 enabled")
        row, p = lay.bal2[scenario, bus], scenarios.probs[scenario]
    return _one_sided_prices(lambda r: cl.solve_lp(bids, r)[1].objective, cl.lp.b_eq, row, p * delta)


# -- conditions ---------------------------------------------------------------------------

def congestion_free(planner: PlannerSolution, network: Network, slack_tol: float = 1e-6) -> bool:
    """No line flow within ``slack_tol * fmax`` of its limit in any stage or scenario."""
    a = planner.allocation
    thetas = [a.theta1] + ([a.theta2[w] for w in range(a.theta2.shape[0])] if network.stage2 else [])
    for th in thetas:
        for line in network.lines:
            f = abs(line.susceptance * (th[line.i] - th[line.j]))
            if f > line.flow_limit * (1.0 - slack_tol):
                return False
    return True


def monopoly_free(network: Network) -> bool:
    """Every bus hosts zero or at least two generators, and likewise LSEs."""
    for i in range(network.n_buses):
        if len(network.gens_at(i)) == 1 or len(network.lses_at(i)) == 1:
            return False
    return True


def survives_generator_outage(network: Network, scenarios: ScenarioSet) -> bool:
    """The utility planner stays solvable with any single generator removed."""
    for k in range(network.n_gens):
        try:
            solve_spp_u(network.without_generator(k), scenarios)
        except SolverFailure:
            return False
    return True


# -- deviation search -----------------------------------------------------------------------

@dataclass(frozen=True)
class SearchSpec:
    """Per-coordinate grid and refinement settings.

    The grid is log-uniform over ``[low, high]`` times the current bid, plus
    zero and the current bid itself; a zero bid uses ``reference`` as its
    scale. Refinement is golden-section around the best grid point.
    """

    grid: int = 50
    low: float = 0.1
    high: float = 10.0
    rel_width: float = 1e-4
    reference: float = 1.0
    refine: bool = True


@dataclass
class Probe:
    agent: str
    coordinate: str
    bid: float
    payoff: float
    gain: float


@dataclass
class DeviationResult:
    agent: str
    base_bid: np.ndarray
    best_bid: np.ndarray
    base_payoff: float
    best_payoff: float
    probes: list[Probe] = field(default_factory=list)
    failures: list[tuple[str, float, str]] = field(default_factory=list)

    @property
    def gain(self) -> float:
        return max(0.0, self.best_payoff - self.base_payoff)

    def to_dict(self) -> dict:
        return {"agent": self.agent, "base_bid": self.base_bid.tolist(),
                "best_bid": self.best_bid.tolist(), "base_payoff": self.base_payoff,
                "best_payoff": self.best_payoff, "gain": self.gain,
                "probes": len(self.probes), "failures": len(self.failures)}


_INV_PHI = (math.sqrt(5.0) - 1.0) / 2.0


def coordinate_search(agent: str, payoff: Callable[[np.ndarray], float], start: np.ndarray,
                      labels: Sequence[str], spec: SearchSpec = SearchSpec()) -> DeviationResult:
    """Greedy single sweep over bid coordinates maximising ``payoff``.

    Each coordinate is scanned on the grid with the others held at their
    current best values, then refined by golden-section search between the
    grid neighbours of the best point. Failing probes are recorded and
    skipped.
    """
    start = np.asarray(start, dtype=float)
    base = payoff(start)
    result = DeviationResult(agent, start.copy(), start.copy(), base, base)
    cache: dict[tuple, float] = {tuple(start): base}

    def evaluate(vec, label):
        key = tuple(vec)
        if key in cache:
            return cache[key]
        try:
            val = payoff(vec)
        except (SolverFailure, ModelError) as exc:
            result.failures.append((label, float(vec[labels.index(label)]), str(exc)))
            val = -math.inf
        cache[key] = val
        if math.isfinite(val):
            result.probes.append(Probe(agent, label, float(vec[labels.index(label)]), val, val - base))
        return val

    for c, label in enumerate(labels):
        cur = result.best_bid.copy()
        v = cur[c]
        scale = v if v > 0 else spec.reference
        pts = np.unique(np.concatenate([[0.0, v], np.geomspace(spec.low * scale, spec.high * scale, spec.grid)]))

        def at(t):
            trial = cur.copy()
            trial[c] = t
            return evaluate(trial, label)

        vals = np.array([at(t) for t in pts])
        j = int(np.argmax(vals))
        best_t, best_val = pts[j], vals[j]
        if spec.refine and math.isfinite(best_val):
            lo, hi = pts[max(j - 1, 0)], pts[min(j + 1, pts.size - 1)]
            width = spec.rel_width * max(abs(best_t), spec.rel_width * scale)
            a, b = lo + (1 - _INV_PHI) * (hi - lo), lo + _INV_PHI * (hi - lo)
            fa, fb = at(a), at(b)
            while hi - lo > width:
                if fa >= fb:
                    hi, b, fb = b, a, fa
                    a = lo + (1 - _INV_PHI) * (hi - lo)
                    fa = at(a)
                else:
                    lo, a, fa = a, b, fb
                    b = lo + _INV_PHI * (hi - lo)
                    fb = at(b)
            for t, f in ((a, fa), (b, fb)):
                if f > best_val:
                    best_t, best_val = t, f
        if best_val > result.best_payoff:
            result.best_payoff = float(best_val)
            result.best_bid[c] = best_t
    return result


def best_deviation(network: Network, scenarios: ScenarioSet, bids: BidProfile, agent: str,
                   spec: SearchSpec = SearchSpec(),
                   clearing: Optional[DedClearing] = None) -> DeviationResult:
    """Most profitable unilateral change of one agent's bids found by the search."""
    parse_agent(network, agent)
    cl = clearing or DedClearing(network, scenarios)
    start = bids.get(agent)
    labels = ["b1"] + [f"b2[{w}]" for w in range(start.size - 1)]

    def payoff(vec):
        return cl.clear(bids.with_agent(agent, vec)).payoffs[agent]

    ref = max(float(np.max(np.concatenate([bids.gen1, bids.lse1, bids.gen2.ravel(), bids.lse2.ravel(), [0.0]]))), 1.0)
    spec = SearchSpec(spec.grid, spec.low, spec.high, spec.rel_width, ref, spec.refine)
    return coordinate_search(agent, payoff, start, labels, spec)


# -- demand-response bidding variant ----------------------------------------------------------

class DrClearing:
    """Single-stage clearing where LSEs bid on demand response instead of energy.

    The ISO buys energy from generators at their bids and demand reduction
    from LSEs at theirs, subject to each LSE's demand being covered.
    """

    def __init__(self, network: Network, scenarios: ScenarioSet):
        if network.stage2 or len(scenarios) != 1:
            raise ModelError("demand-response bidding needs one scenario with stage 2 disabled")
        self.network, self.scenarios = network, scenarios
        L = network.n_lses
        b = ProgramBuilder()
        lay = _network_core(b, network, 1, scenarios.probs)
        lay.xL2 = b.variables((1, L))
        lay.service = np.zeros((1, L), dtype=int)
        out = scenarios.outputs[0]
        for k, lse in enumerate(network.lses):
            lay.service[0, k] = b.add_le([lay.yL1[k], lay.xL2[0, k]], [-1.0, -1.0], -(lse.demand - out[k]))
            b.add_le([lay.yL1[k]], [1.0], lse.demand)
            b.add_le([lay.xL2[0, k]], [1.0], lse.demand)
        self.lp = b.build()
        for k, g in enumerate(network.generators):
            b.add_cost(lay.yG1[k], g.primary_cost.a, g.primary_cost.b)
        for k, lse in enumerate(network.lses):
            b.add_cost(lay.xL2[0, k], lse.dr_cost.a, lse.dr_cost.b)
        self.ext = b.build()
        self.layout = lay

    def program(self, gen_bids, dr_bids) -> StandardProgram:
        lay = self.layout
        gen_bids = np.asarray(gen_bids, dtype=float)
        dr_bids = np.asarray(dr_bids, dtype=float)
        if (gen_bids < 0).any() or (dr_bids < 0).any():
            raise ModelError("bids must be nonnegative")
        c = np.zeros(self.lp.n)
        c[lay.yG1] = gen_bids
        c[lay.xL2[0]] = dr_bids
        return StandardProgram(self.lp.Q, c, self.lp.A_eq, self.lp.b_eq, self.lp.A_in, self.lp.b_in,
                               self.lp.nonneg)

    def certificate_residual(self, gen_bids, dr_bids, yG, yL, x, lambda1, mu, gamma) -> float:
        """KKT residual of a stated primal-dual point for the clearing LP.

        Angles follow from the dispatch and the reference-bus duals from
        stationarity; purchase-cap duals are zero.
        """
        net, lay = self.network, self.layout
        lp = self.program(gen_bids, dr_bids)
        yG, yL = np.asarray(yG, float), np.asarray(yL, float)
        v = np.zeros(self.lp.n)
        v[lay.yG1], v[lay.yL1], v[lay.xL2[0]] = yG, yL, np.asarray(x, float)
        inj = np.zeros(net.n_buses)
        np.add.at(inj, net.gen_bus, yG)
        np.subtract.at(inj, net.lse_bus, yL)
        keep = np.arange(net.n_buses) != net.reference_bus
        theta = np.zeros(net.n_buses)
        if keep.any():
            theta[keep] = np.linalg.lstsq(net.laplacian[np.ix_(keep, keep)], inj[keep], rcond=None)[0]
        v[lay.theta1] = theta
        lam = np.zeros(lp.A_eq.shape[0])
        lam[lay.bal1] = lambda1
        m = np.zeros(lp.A_in.shape[0])
        m[lay.service[0]] = mu
        if lay.flow1.size:
            m[lay.flow1] = np.asarray(gamma, float).reshape(lay.flow1.shape)
        grad = lp.gradient(v) + lp.A_eq.T @ lam + lp.A_in.T @ m
        lam[lay.ref[0]] = -grad[lay.theta1[net.reference_bus]]
        return kkt_residual(lp, v, lam, m)

    def price_interval(self, gen_bids, dr_bids, bus: int, delta: float = 1e-3) -> tuple[float, float]:
        """Supporting price range at a bus, as for the energy-bid clearing."""
        lp = self.program(gen_bids, dr_bids)

        def value(rhs):
            res = solve(replace(lp, b_eq=rhs), tol=LP_TOL)
            if not res.ok:
                raise SolverFailure("demand-response clearing LP", res)
            return res.objective

        return _one_sided_prices(value, lp.b_eq, int(self.layout.bal1[bus]), delta)

    def clear(self, gen_bids, dr_bids, tie_break: bool = True) -> ClearingOutcome:
        net, lay = self.network, self.layout
        lp = self.program(gen_bids, dr_bids)
        c = lp.c
        res = solve(lp, tol=LP_TOL)
        if not res.ok:
            raise SolverFailure("demand-response clearing LP", res)
        picked = _tie_break(lp, res, self.ext) if tie_break else None
        x = res.x if picked is None else picked
        alloc = Allocation.zeros(net, 1)
        alloc.yG1, alloc.yL1, alloc.theta1 = x[lay.yG1], x[lay.yL1], x[lay.theta1]
        alloc.theta2 = alloc.theta1[None, :].copy()
        alloc.xL2 = x[lay.xL2]
        lam1 = res.lambda_eq[lay.bal1]
        mu = res.mu_in[lay.service]
        g1 = res.mu_in[lay.flow1] if lay.flow1.size else np.zeros((0, 2))
        pay = {}
        for k, g in enumerate(net.generators):
            pay[f"G{k}"] = float(lam1[g.bus] * alloc.yG1[k] - g.primary_cost(alloc.yG1[k]))
        for k, l in enumerate(net.lses):
            pay[f"L{k}"] = float(-lam1[l.bus] * alloc.yL1[k] - l.dr_cost(alloc.xL2[0, k]))
        welfare = sum(pay.values()) + float(lam1 @ _net_load(net, alloc))
        return ClearingOutcome(alloc, lam1, np.zeros((1, net.n_buses)), g1,
                               np.zeros((1, len(net.lines), 2)), pay, welfare, float(c @ res.x),
                               picked is not None, mu)


def _net_load(network: Network, alloc: Allocation) -> np.ndarray:
    v = np.zeros(network.n_buses)
    np.add.at(v, network.lse_bus, alloc.yL1)
    np.subtract.at(v, network.gen_bus, alloc.yG1)
    return v


def clear_dr_bid_game(network: Network, scenarios: ScenarioSet, dr_bids, gen_bids) -> ClearingOutcome:
    return DrClearing(network, scenarios).clear(gen_bids, dr_bids)


def dr_best_deviation(network: Network, scenarios: ScenarioSet, gen_bids, dr_bids, agent: str,
                      spec: SearchSpec = SearchSpec(),
                      clearing: Optional[DrClearing] = None) -> DeviationResult:
    """Deviation search in the demand-response bidding variant (one bid per agent)."""
    kind, k = parse_agent(network, agent)
    cl = clearing or DrClearing(network, scenarios)
    gen_bids = np.asarray(gen_bids, dtype=float)
    dr_bids = np.asarray(dr_bids, dtype=float)

    def payoff(vec):
        g, d = gen_bids.copy(), dr_bids.copy()
        (g if kind == "G" else d)[k] = vec[0]
        return cl.clear(g, d).payoffs[agent]

    start = np.array([(gen_bids if kind == "G" else dr_bids)[k]])
    ref = max(float(np.max(np.concatenate([gen_bids, dr_bids, [0.0]]))), 1.0)
    spec = SearchSpec(spec.grid, spec.low, spec.high, spec.rel_width, ref, spec.refine)
    return coordinate_search(agent, payoff, start, ["b_dr" if kind == "L" else "b1"], spec)
