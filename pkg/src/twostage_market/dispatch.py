"""Planner programs, the LSE service subproblem and agent best responses.

Sign conventions shared by every program assembled here:

* nodal balance rows read ``load - generation + L theta = 0`` so the
  equality multiplier is the nodal price;
* stage-2 rows (balance, flow limits, service requirement) are multiplied by
  the scenario probability, so their multipliers are per-scenario prices
  rather than probability-weighted ones;
* each line contributes a forward row ``B(theta_i - theta_j) <= fmax`` and a
  backward row ``B(theta_j - theta_i) <= fmax``; ``gamma[..., 0]`` and
  ``gamma[..., 1]`` hold their multipliers.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .model import Allocation, Lse, ModelError, Network, QuadCost, ScenarioSet, Generator
from .qp import ProgramBuilder, SolveResult, StandardProgram, kkt_residual, solve

PLANNER_TOL = 1e-11


class SolverFailure(RuntimeError):
    """An embedded solve ended without an optimal status."""

    def __init__(self, what: str, result: Optional[SolveResult] = None):
        status = result.status if result is not None else "error"
        super().__init__(f"{what}: solver status {status}")
        self.result = result


# -- LSE service subproblem ---------------------------------------------------

@dataclass(frozen=True)
class ServiceCost:
    """Least cost of covering a shortfall ``s`` with demand response and blackout.

    For quadratic costs the optimal split equalises marginals, so the value
    is piecewise quadratic in ``s``: the cheaper plant alone up to the point
    where its marginal reaches the other plant's intercept, both beyond it.
    """

    dr: QuadCost
    bo: QuadCost

    @property
    def _order(self):
        return (self.dr, self.bo) if self.dr.b <= self.bo.b else (self.bo, self.dr)

    @property
    def knee(self) -> float:
        lo, hi = self._order
        return (hi.b - lo.b) / (2.0 * lo.a)

    @property
    def joint_slope(self) -> float:
        a1, a2 = self.dr.a, self.bo.a
        return 2.0 * a1 * a2 / (a1 + a2)

    def marginal(self, s: float) -> float:
        lo, hi = self._order
        s = max(s, 0.0)
        if s <= self.knee:
            return 2.0 * lo.a * s + lo.b
        return hi.b + self.joint_slope * (s - self.knee)

    def value(self, s: float) -> float:
        lo, hi = self._order
        s = max(s, 0.0)
        k = self.knee
        if s <= k:
            return lo.a * s * s + lo.b * s
        d = s - k
        return lo.a * k * k + lo.b * k + hi.b * d + 0.5 * self.joint_slope * d * d

    def derivative(self, s: float) -> float:
        return self.marginal(s)

    def curvature(self, s: float) -> float:
        lo, _ = self._order
        return 2.0 * lo.a if s <= self.knee else self.joint_slope

    def split(self, s: float) -> tuple[float, float]:
        """(demand response, blackout) covering a shortfall ``s``."""
        if s <= 0.0:
            return 0.0, 0.0
        m = self.marginal(s)
        x, z = float(self.dr.supply(m)), float(self.bo.supply(m))
        # absorb rounding so x + z == s exactly
        if x >= z:
            x = s - z
        else:
            z = s - x
        return x, z


def service_cost(lse: Lse) -> ServiceCost:
    return ServiceCost(lse.dr_cost, lse.blackout_cost)


def lse_utility(lse: Lse, y1: float, y2: float, w: float) -> tuple[float, tuple[float, float]]:
    """Utility of consuming ``y1 + y2`` in one scenario and its subgradient interval.

    The interval is taken with respect to total consumption; it is a single
    point except where the residual demand is exactly zero.
    """
    residual = lse.demand - w - y1 - y2
    psi = service_cost(lse)
    if residual < 0.0:
        return 0.0, (0.0, 0.0)
    if residual == 0.0:
        return 0.0, (0.0, psi.marginal(0.0))
    m = psi.marginal(residual)
    return -psi.value(residual), (m, m)


def lse_service_split(lse: Lse, y1: float, y2, scenarios: ScenarioSet,
                      index: Optional[int] = None) -> tuple[np.ndarray, np.ndarray]:
    """Per-scenario demand response and blackout minimising service cost.

    ``index`` selects this LSE's column of the scenario outputs; it defaults to
    0 for single-LSE scenario sets.
    """
    col = 0 if index is None else index
    y2 = np.broadcast_to(np.asarray(y2, dtype=float), (len(scenarios),))
    psi = service_cost(lse)
    x = np.zeros(len(scenarios))
    z = np.zeros(len(scenarios))
    for w in range(len(scenarios)):
        s = lse.demand - scenarios.outputs[w, col] - y1 - y2[w]
        x[w], z[w] = psi.split(s)
    return x, z


# -- planner programs ----------------------------------------------------------

@dataclass
class Layout:
    """Variable and row indices of an assembled market program."""

    yG1: np.ndarray
    yL1: np.ndarray
    theta1: np.ndarray
    yG2: np.ndarray
    yL2: np.ndarray
    theta2: np.ndarray
    xL2: Optional[np.ndarray] = None
    zL2: Optional[np.ndarray] = None
    short: Optional[np.ndarray] = None
    bal1: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    bal2: np.ndarray = field(default_factory=lambda: np.zeros((0, 0), dtype=int))
    flow1: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=int))
    flow2: np.ndarray = field(default_factory=lambda: np.zeros((0, 0, 2), dtype=int))
    service: np.ndarray = field(default_factory=lambda: np.zeros((0, 0), dtype=int))
    cap: np.ndarray = field(default_factory=lambda: np.zeros((0, 0), dtype=int))
    ref: list = field(default_factory=list)


def _network_core(b: ProgramBuilder, net: Network, n_scen: int, probs: np.ndarray) -> Layout:
    """Energy variables, balance, flow-limit and reference rows for both stages."""
    G, L, N, W = net.n_gens, net.n_lses, net.n_buses, n_scen
    yG1 = b.variables(G)
    yL1 = b.variables(L)
    theta1 = b.variables(N, nonneg=False)
    if net.stage2:
        yG2 = b.variables((W, G))
        yL2 = b.variables((W, L))
        theta2 = b.variables((W, N), nonneg=False)
    else:
        yG2 = np.zeros((W, 0), dtype=int)
        yL2 = np.zeros((W, 0), dtype=int)
        theta2 = np.zeros((W, 0), dtype=int)
    lap = net.laplacian
    lay = Layout(yG1, yL1, theta1, yG2, yL2, theta2)

    def balance(gen_idx, load_idx, th, th_prev, scale):
        rows = []
        for i in range(N):
            idx = [*load_idx[net.lse_bus == i], *gen_idx[net.gen_bus == i]]
            coef = [1.0] * int((net.lse_bus == i).sum()) + [-1.0] * int((net.gen_bus == i).sum())
            nz = np.flatnonzero(lap[i])
            idx += list(th[nz])
            coef += list(lap[i, nz])
            if th_prev is not None:
                idx += list(th_prev[nz])
                coef += list(-lap[i, nz])
            rows.append(b.add_eq(idx, scale * np.asarray(coef), 0.0))
        return np.array(rows, dtype=int)

    def flows(th, scale):
        out = np.zeros((len(net.lines), 2), dtype=int)
        for l, line in enumerate(net.lines):
            pair = [th[line.i], th[line.j]]
            B = line.susceptance
            out[l, 0] = b.add_le(pair, [scale * B, -scale * B], scale * line.flow_limit)
            out[l, 1] = b.add_le(pair, [-scale * B, scale * B], scale * line.flow_limit)
        return out

    lay.bal1 = balance(yG1, yL1, theta1, None, 1.0)
    lay.flow1 = flows(theta1, 1.0)
    lay.ref.append(b.add_eq([theta1[net.reference_bus]], [1.0], 0.0))
    if net.stage2:
        lay.bal2 = np.array([balance(yG2[w], yL2[w], theta2[w], theta1, probs[w])
                             for w in range(W)], dtype=int).reshape(W, N)
        lay.flow2 = np.array([flows(theta2[w], probs[w]) for w in range(W)],
                             dtype=int).reshape(W, len(net.lines), 2)
        for w in range(W):
            lay.ref.append(b.add_eq([theta2[w, net.reference_bus]], [1.0], 0.0))
    return lay


def _consumption(lay: Layout, w: int, k: int) -> list[int]:
    idx = [int(lay.yL1[k])]
    if lay.yL2.shape[1]:
        idx.append(int(lay.yL2[w, k]))
    return idx


def _add_generation_costs(b: ProgramBuilder, net: Network, lay: Layout, probs: np.ndarray) -> None:
    for k, g in enumerate(net.generators):
        b.add_cost(lay.yG1[k], g.primary_cost.a, g.primary_cost.b)
        if net.stage2:
            for w, p in enumerate(probs):
                b.add_cost(lay.yG2[w, k], p * g.ancillary_cost.a, p * g.ancillary_cost.b)


def add_service_block(b: ProgramBuilder, net: Network, scenarios: ScenarioSet, lay: Layout) -> None:
    """Demand-response/blackout variables and service rows with true costs."""
    W, L = len(scenarios), net.n_lses
    probs, out = scenarios.probs, scenarios.outputs
    lay.xL2 = b.variables((W, L))
    lay.zL2 = b.variables((W, L))
    lay.service = np.zeros((W, L), dtype=int)
    for w in range(W):
        p = probs[w]
        for k, lse in enumerate(net.lses):
            idx = _consumption(lay, w, k) + [lay.xL2[w, k], lay.zL2[w, k]]
            lay.service[w, k] = b.add_le(idx, [-p] * len(idx), -p * (lse.demand - out[w, k]))
            b.add_cost(lay.xL2[w, k], p * lse.dr_cost.a, p * lse.dr_cost.b)
            b.add_cost(lay.zL2[w, k], p * lse.blackout_cost.a, p * lse.blackout_cost.b)


def add_shortfall_block(b: ProgramBuilder, net: Network, scenarios: ScenarioSet, lay: Layout) -> None:
    """Shortfall variables priced by the LSE service-cost function."""
    W, L = len(scenarios), net.n_lses
    probs, out = scenarios.probs, scenarios.outputs
    lay.short = b.variables((W, L))
    lay.service = np.zeros((W, L), dtype=int)
    for w in range(W):
        p = probs[w]
        for k, lse in enumerate(net.lses):
            idx = _consumption(lay, w, k) + [lay.short[w, k]]
            lay.service[w, k] = b.add_le(idx, [-p] * len(idx), -p * (lse.demand - out[w, k]))
            b.add_term(lay.short[w, k], _Scaled(service_cost(lse), p))


@dataclass(frozen=True)
class _Scaled:
    term: ServiceCost
    p: float

    def value(self, s):
        return self.p * self.term.value(s)

    def derivative(self, s):
        return self.p * self.term.derivative(s)

    def curvature(self, s):
        return self.p * self.term.curvature(s)


def spp_program(network: Network, scenarios: ScenarioSet) -> tuple[StandardProgram, Layout]:
    b = ProgramBuilder()
    lay = _network_core(b, network, len(scenarios), scenarios.probs)
    _add_generation_costs(b, network, lay, scenarios.probs)
    add_service_block(b, network, scenarios, lay)
    return b.build(), lay


def spp_u_program(network: Network, scenarios: ScenarioSet) -> tuple[StandardProgram, Layout]:
    b = ProgramBuilder()
    lay = _network_core(b, network, len(scenarios), scenarios.probs)
    _add_generation_costs(b, network, lay, scenarios.probs)
    add_shortfall_block(b, network, scenarios, lay)
    return b.build(), lay


@dataclass
class PlannerSolution:
    allocation: Allocation
    lambda1: np.ndarray
    lambda2: np.ndarray
    mu: np.ndarray
    gamma1: np.ndarray
    gamma2: np.ndarray
    welfare: float
    kkt_residual: float = 0.0
    result: Optional[SolveResult] = field(default=None, repr=False)

    def to_dict(self) -> dict:
        out = self.allocation.to_dict()
        out.update(lambda1=self.lambda1.tolist(), lambda2=self.lambda2.tolist(), mu=self.mu.tolist(),
                   gamma1=self.gamma1.tolist(), gamma2=self.gamma2.tolist(), welfare=self.welfare)
        return out


def extract_allocation(net: Network, x: np.ndarray, lay: Layout, n_scen: int) -> Allocation:
    a = Allocation.zeros(net, n_scen)
    a.yG1, a.yL1, a.theta1 = x[lay.yG1].copy(), x[lay.yL1].copy(), x[lay.theta1].copy()
    if net.stage2:
        a.yG2, a.yL2, a.theta2 = x[lay.yG2], x[lay.yL2], x[lay.theta2]
    else:
        a.theta2 = np.tile(a.theta1, (n_scen, 1))
    if lay.xL2 is not None:
        a.xL2, a.zL2 = x[lay.xL2], x[lay.zL2]
    return a


def _prices(net: Network, res: SolveResult, lay: Layout, n_scen: int):
    lam1 = res.lambda_eq[lay.bal1]
    gamma1 = res.mu_in[lay.flow1] if lay.flow1.size else np.zeros((0, 2))
    if net.stage2:
        lam2 = res.lambda_eq[lay.bal2]
        gamma2 = res.mu_in[lay.flow2] if lay.flow2.size else np.zeros((n_scen, 0, 2))
    else:
        lam2 = np.zeros((n_scen, net.n_buses))
        gamma2 = np.zeros((n_scen, len(net.lines), 2))
    mu = res.mu_in[lay.service]
    return lam1, lam2, mu, gamma1, gamma2


def welfare_of(network: Network, scenarios: ScenarioSet, alloc: Allocation) -> float:
    """Expected welfare: LSE utilities less generation costs (prices cancel)."""
    probs, out = scenarios.probs, scenarios.outputs
    total = -sum(g.primary_cost(alloc.yG1[k]) for k, g in enumerate(network.generators))
    for w, p in enumerate(probs):
        if network.stage2:
            total -= p * sum(g.ancillary_cost(alloc.yG2[w, k]) for k, g in enumerate(network.generators))
        for k, lse in enumerate(network.lses):
            y2 = alloc.yL2[w, k] if network.stage2 else 0.0
            total += p * lse_utility(lse, alloc.yL1[k], y2, out[w, k])[0]
    return float(total)


def canonical_consumption(network: Network, scenarios: ScenarioSet, alloc: Allocation,
                          tol: float = 1e-10) -> Allocation:
    """Pick one representative among welfare-equivalent consumption schedules.

    At a planner optimum only generation and each LSE's service shortfall
    ``max(D - w - y1 - y2, 0)`` are unique; the day-ahead/real-time split of
    purchases can move whenever the network absorbs the shift or an LSE is
    over-supplied. This returns the schedule minimising expected squared
    purchases over that optimal face, so different planner formulations
    report the same split. Falls back to the input when the solve fails.
    """
    if not network.stage2 or network.n_lses == 0:
        return alloc
    W, N, L = len(scenarios), network.n_buses, network.n_lses
    probs = scenarios.probs
    resid = lse_residual_demand(network, scenarios)
    short = np.maximum(resid - alloc.yL1[None, :] - alloc.yL2, 0.0)
    pinned = short > 1e-7
    lap = network.laplacian
    b = ProgramBuilder()
    y1 = b.variables(L)
    y2 = b.variables((W, L))
    th1 = b.variables(N, nonneg=False)
    th2 = b.variables((W, N), nonneg=False)
    for k in range(L):
        b.add_cost(y1[k], 1.0, 0.0)
        for w in range(W):
            b.add_cost(y2[w, k], probs[w], 0.0)
            target = resid[w, k] - short[w, k]
            if pinned[w, k]:
                b.add_eq([y1[k], y2[w, k]], [1.0, 1.0], target)
            else:
                b.add_le([y1[k], y2[w, k]], [-1.0, -1.0], -target)

    def balance(y, th, prev, gen, skip_ref):
        for i in range(N):
            if skip_ref and i == network.reference_bus:
                continue
            at = np.flatnonzero(network.lse_bus == i)
            nz = np.flatnonzero(lap[i])
            idx = list(y[at]) + list(th[nz]) + (list(prev[nz]) if prev is not None else [])
            coef = [1.0] * at.size + list(lap[i, nz]) + (list(-lap[i, nz]) if prev is not None else [])
            b.add_eq(idx, coef, gen[i])
        b.add_eq([th[network.reference_bus]], [1.0], 0.0)

    gen1 = np.zeros(N)
    np.add.at(gen1, network.gen_bus, alloc.yG1)
    balance(y1, th1, None, gen1, False)
    for w in range(W):
        gen2 = np.zeros(N)
        np.add.at(gen2, network.gen_bus, alloc.yG2[w])
        # with every total pinned the stage-2 rows sum to an identity
        balance(y2[w], th2[w], th1, gen2, bool(pinned[w].all()))
    for line in network.lines:
        B = line.susceptance
        for th in [th1] + [th2[w] for w in range(W)]:
            b.add_le([th[line.i], th[line.j]], [B, -B], line.flow_limit)
            b.add_le([th[line.i], th[line.j]], [-B, B], line.flow_limit)
    res = solve(b.build(), tol=tol)
    if not res.ok:
        return alloc
    out = alloc.copy()
    out.yL1, out.yL2 = np.maximum(res.x[y1], 0.0), np.maximum(res.x[y2], 0.0)
    out.theta1, out.theta2 = res.x[th1], res.x[th2]
    return out


def _solve_planner(network, scenarios, builder_fn, what, tol) -> PlannerSolution:
    prog, lay = builder_fn(network, scenarios)
    res = solve(prog, tol=tol)
    if not res.ok:
        raise SolverFailure(what, res)
    W = len(scenarios)
    alloc = canonical_consumption(network, scenarios, extract_allocation(network, res.x, lay, W))
    if lay.short is not None:
        for k, lse in enumerate(network.lses):
            y2 = alloc.yL2[:, k] if network.stage2 else 0.0
            alloc.xL2[:, k], alloc.zL2[:, k] = lse_service_split(lse, alloc.yL1[k], y2, scenarios, k)
    lam1, lam2, mu, g1, g2 = _prices(network, res, lay, W)
    return PlannerSolution(alloc, lam1, lam2, mu, g1, g2, -res.objective, res.kkt_residual, res)


def solve_spp(network: Network, scenarios: ScenarioSet, tol: float = PLANNER_TOL) -> PlannerSolution:
    """Expected-welfare planner with explicit demand-response and blackout decisions."""
    return _solve_planner(network, scenarios, spp_program, "planner", tol)


def solve_spp_u(network: Network, scenarios: ScenarioSet, tol: float = PLANNER_TOL) -> PlannerSolution:
    """Planner written over consumption only, with LSE utilities in the objective.

    Demand response and blackout are recovered afterwards from the
    closed-form split.
    """
    return _solve_planner(network, scenarios, spp_u_program, "utility planner", tol)


def planner_certificate_residual(network: Network, scenarios: ScenarioSet, alloc: Allocation,
                                 lambda1, lambda2, mu, gamma1, gamma2) -> float:
    """KKT residual of the explicit planner at a stated primal-dual point."""
    prog, lay = spp_program(network, scenarios)
    x = np.zeros(prog.n)
    x[lay.yG1], x[lay.yL1], x[lay.theta1] = alloc.yG1, alloc.yL1, alloc.theta1
    if network.stage2:
        x[lay.yG2], x[lay.yL2], x[lay.theta2] = alloc.yG2, alloc.yL2, alloc.theta2
    x[lay.xL2], x[lay.zL2] = alloc.xL2, alloc.zL2
    lam = np.zeros(prog.b_eq.size)
    mu_in = np.zeros(prog.b_in.size)
    lam[lay.bal1] = lambda1
    if network.stage2:
        lam[lay.bal2] = lambda2
        if lay.flow2.size:
            mu_in[lay.flow2] = gamma2
    if lay.flow1.size:
        mu_in[lay.flow1] = gamma1
    mu_in[lay.service] = mu
    return kkt_residual(prog, x, lam, mu_in)


# -- agent problems -------------------------------------------------------------

@dataclass
class AgentResponse:
    y1: float
    y2: np.ndarray
    payoff: float
    x2: Optional[np.ndarray] = None
    z2: Optional[np.ndarray] = None


def gen_profit(gen: Generator, p1: float, p2, y1: float, y2, probs, stage2: bool = True) -> float:
    val = p1 * y1 - gen.primary_cost(y1)
    if stage2:
        p2, y2 = np.asarray(p2, dtype=float), np.asarray(y2, dtype=float)
        val += float(probs @ (p2 * y2 - gen.ancillary_cost(y2)))
    return float(val)


def gen_best_response(gen: Generator, p1: float, p2, scenarios: ScenarioSet,
                      stage2: bool = True) -> AgentResponse:
    """Price-taking generator: produce where marginal cost meets price."""
    p2 = np.broadcast_to(np.asarray(p2, dtype=float), (len(scenarios),))
    y1 = float(gen.primary_cost.supply(p1))
    y2 = gen.ancillary_cost.supply(p2) if stage2 else np.zeros(len(scenarios))
    return AgentResponse(y1, y2, gen_profit(gen, p1, p2, y1, y2, scenarios.probs, stage2))


def lse_payoff(lse: Lse, p1: float, p2, y1: float, y2, scenarios: ScenarioSet, index: int,
               stage2: bool = True) -> float:
    """Price-taking LSE payoff with service costs settled optimally."""
    W = len(scenarios)
    p2 = np.broadcast_to(np.asarray(p2, dtype=float), (W,))
    y2 = np.broadcast_to(np.asarray(y2, dtype=float), (W,)) if stage2 else np.zeros(W)
    val = -p1 * y1
    for w, p in enumerate(scenarios.probs):
        u = lse_utility(lse, y1, y2[w], scenarios.outputs[w, index])[0]
        val += p * (u - (p2[w] * y2[w] if stage2 else 0.0))
    return float(val)


def lse_best_response(lse: Lse, p1: float, p2, scenarios: ScenarioSet, index: int,
                      stage2: bool = True, tol: float = PLANNER_TOL) -> AgentResponse:
    """Price-taking LSE: two-stage purchase, demand-response and blackout plan.

    Purchases are capped at ``demand + 1``; with nonnegative prices this
    never binds at an optimum and keeps zero-price problems bounded.
    """
    W = len(scenarios)
    p2 = np.broadcast_to(np.asarray(p2, dtype=float), (W,))
    probs, out = scenarios.probs, scenarios.outputs
    b = ProgramBuilder()
    y1 = b.variables(1)[0]
    y2 = b.variables(W) if stage2 else None
    x = b.variables(W)
    z = b.variables(W)
    b.add_cost(y1, 0.0, p1)
    b.add_le([y1], [1.0], lse.demand + 1.0)
    for w, p in enumerate(probs):
        idx = [y1, x[w], z[w]]
        if stage2:
            idx.append(y2[w])
            b.add_cost(y2[w], 0.0, p * p2[w])
            b.add_le([y2[w]], [1.0], lse.demand + 1.0)
        b.add_le(idx, [-p] * len(idx), -p * (lse.demand - out[w, index]))
        b.add_cost(x[w], p * lse.dr_cost.a, p * lse.dr_cost.b)
        b.add_cost(z[w], p * lse.blackout_cost.a, p * lse.blackout_cost.b)
    res = solve(b.build(), tol=tol)
    if not res.ok:
        raise SolverFailure("LSE best response", res)
    y2v = res.x[y2] if stage2 else np.zeros(W)
    return AgentResponse(float(res.x[y1]), y2v, -res.objective, res.x[x], res.x[z])


def lse_residual_demand(network: Network, scenarios: ScenarioSet) -> np.ndarray:
    """Demand net of renewable output, shape (scenarios, lses)."""
    if scenarios.outputs.shape[1] != network.n_lses:
        raise ModelError("scenario vectors do not match the LSE count")
    return network.demand[None, :] - scenarios.outputs
