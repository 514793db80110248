"""Competitive equilibrium construction, verification and welfare checks."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .dispatch import (PlannerSolution, SolverFailure, gen_best_response, gen_profit,
                       lse_best_response, lse_payoff, planner_certificate_residual, solve_spp,
                       welfare_of)
from .model import Allocation, ModelError, Network, ScenarioSet
from .qp import ProgramBuilder, solve

DEFAULT_TOL = 1e-6


@dataclass
class PriceSystem:
    p1: np.ndarray
    p2: np.ndarray

    def __post_init__(self):
        self.p1 = np.asarray(self.p1, dtype=float)
        self.p2 = np.asarray(self.p2, dtype=float).reshape(-1, self.p1.size)
        if not (np.isfinite(self.p1).all() and np.isfinite(self.p2).all()):
            raise ModelError("prices must be finite")

    def shifted(self, bus: int, delta: float, stage: int = 1) -> "PriceSystem":
        p1, p2 = self.p1.copy(), self.p2.copy()
        if stage == 1:
            p1[bus] += delta
        else:
            p2[:, bus] += delta
        return PriceSystem(p1, p2)

    def to_dict(self) -> dict:
        return {"p1": self.p1.tolist(), "p2": self.p2.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "PriceSystem":
        return cls(d["p1"], d.get("p2", []))


@dataclass
class AgentGap:
    agent: str
    best: float
    at_allocation: float

    @property
    def gap(self) -> float:
        return max(0.0, self.best - self.at_allocation)


@dataclass
class SceqCertificate:
    allocation: Allocation
    prices: PriceSystem
    gaps: list[AgentGap]
    clearing: dict[str, float]
    welfare: float
    threshold_gap: float
    threshold_clearing: float
    reasons: list[str] = field(default_factory=list)

    @property
    def max_gap(self) -> float:
        return max((g.gap for g in self.gaps), default=0.0)

    @property
    def max_clearing(self) -> float:
        return max(self.clearing.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return not self.reasons

    def to_dict(self) -> dict:
        return {
            "verdict": "pass" if self.passed else "fail",
            "reasons": list(self.reasons),
            "welfare": self.welfare,
            "max_gap": self.max_gap,
            "max_clearing": self.max_clearing,
            "gaps": [{"agent": g.agent, "best": g.best, "at_allocation": g.at_allocation, "gap": g.gap}
                     for g in self.gaps],
            "clearing": dict(self.clearing),
            "prices": self.prices.to_dict(),
            "allocation": self.allocation.to_dict(),
        }


def construct_sceq(network: Network, scenarios: ScenarioSet,
                   planner: Optional[PlannerSolution] = None) -> tuple[Allocation, PriceSystem]:
    """Planner allocation paired with its balance-row multipliers as prices."""
    sol = planner if planner is not None else solve_spp(network, scenarios)
    return sol.allocation, PriceSystem(sol.lambda1, sol.lambda2)


def clearing_residuals(network: Network, allocation: Allocation, n_scen: int) -> dict[str, float]:
    out = {"stage1": abs(float(allocation.yG1.sum() - allocation.yL1.sum()))}
    if network.stage2:
        for w in range(n_scen):
            out[f"stage2[{w}]"] = abs(float(allocation.yG2[w].sum() - allocation.yL2[w].sum()))
    return out


def verify_sceq(network: Network, scenarios: ScenarioSet, allocation: Allocation,
                prices: PriceSystem, tol: float = DEFAULT_TOL,
                clearing_tol: Optional[float] = None) -> SceqCertificate:
    """Check price-taking optimality of every agent and market clearing.

    Gaps are compared with ``tol * (1 + |welfare|)``; clearing residuals with
    ``clearing_tol`` (defaults to ``tol``).
    """
    W, N = len(scenarios), network.n_buses
    if prices.p1.shape != (N,) or (network.stage2 and prices.p2.shape != (W, N)):
        raise ModelError("price dimensions do not match the network and scenarios")
    p2 = prices.p2 if network.stage2 else np.zeros((W, N))
    stage2 = network.stage2
    gaps = []
    for k, g in enumerate(network.generators):
        i = g.bus
        best = gen_best_response(g, prices.p1[i], p2[:, i], scenarios, stage2).payoff
        y2 = allocation.yG2[:, k] if stage2 else np.zeros(W)
        at = gen_profit(g, prices.p1[i], p2[:, i], allocation.yG1[k], y2, scenarios.probs, stage2)
        gaps.append(AgentGap(f"G{k}", best, at))
    for k, l in enumerate(network.lses):
        i = l.bus
        best = lse_best_response(l, prices.p1[i], p2[:, i], scenarios, k, stage2).payoff
        y2 = allocation.yL2[:, k] if stage2 else np.zeros(W)
        at = lse_payoff(l, prices.p1[i], p2[:, i], allocation.yL1[k], y2, scenarios, k, stage2)
        gaps.append(AgentGap(f"L{k}", best, at))
    welfare = welfare_of(network, scenarios, allocation)
    clearing = clearing_residuals(network, allocation, W)
    thr_gap = tol * (1.0 + abs(welfare))
    thr_clear = tol if clearing_tol is None else clearing_tol
    reasons = [f"{g.agent} gains {g.gap:.6g} by re-optimising" for g in gaps if g.gap > thr_gap]
    reasons += [f"{key} imbalance {v:.6g}" for key, v in clearing.items() if v > thr_clear]
    return SceqCertificate(allocation, prices, gaps, clearing, welfare, thr_gap, thr_clear, reasons)


# -- ISO problem ----------------------------------------------------------------

@dataclass
class IsoReport:
    surplus: float
    optimum: float

    @property
    def gap(self) -> float:
        return self.optimum - self.surplus


def _surplus(network: Network, scenarios: ScenarioSet, prices: PriceSystem, allocation: Allocation) -> float:
    G, L = network.gen_bus, network.lse_bus
    N = network.n_buses

    def net_load(gen, load):
        v = np.zeros(N)
        np.add.at(v, L, load)
        np.subtract.at(v, G, gen)
        return v

    val = float(prices.p1 @ net_load(allocation.yG1, allocation.yL1))
    if network.stage2:
        for w, p in enumerate(scenarios.probs):
            val += p * float(prices.p2[w] @ net_load(allocation.yG2[w], allocation.yL2[w]))
    return val


def iso_surplus(network: Network, scenarios: ScenarioSet, prices: PriceSystem,
                allocation: Allocation, tol: float = 1e-10) -> IsoReport:
    """Merchandising surplus at the allocation against the best the ISO could do.

    With balance imposed, injections are ``L theta``, so the ISO program is an
    LP in the angles alone: each bus's injection is sign-restricted by which
    agent types it hosts, and flows obey their limits.
    """
    N, W = network.n_buses, len(scenarios)
    lap = network.laplacian
    has_g = np.isin(np.arange(N), network.gen_bus)
    has_l = np.isin(np.arange(N), network.lse_bus)
    b = ProgramBuilder()
    th1 = b.variables(N, nonneg=False)
    stages = [(th1, None, prices.p1, 1.0)]
    if network.stage2:
        th2 = b.variables((W, N), nonneg=False)
        stages += [(th2[w], th1, prices.p2[w], p) for w, p in enumerate(scenarios.probs)]
    for th, prev, price, p in stages:
        b.add_eq([th[network.reference_bus]], [1.0], 0.0)
        # surplus = -price . injection, injection = L (th - prev)
        coef = -p * (lap.T @ price)
        for i in range(N):
            b.add_cost(th[i], 0.0, -coef[i])
            if prev is not None:
                b.add_cost(prev[i], 0.0, coef[i])
        for i in range(N):
            nz = np.flatnonzero(lap[i])
            idx = list(th[nz]) + (list(prev[nz]) if prev is not None else [])
            row = list(lap[i, nz]) + (list(-lap[i, nz]) if prev is not None else [])
            if not has_g[i] and not has_l[i]:
                b.add_eq(idx, row, 0.0)
            elif not has_l[i]:
                b.add_le(idx, -np.asarray(row), 0.0)
            elif not has_g[i]:
                b.add_le(idx, row, 0.0)
        for line in network.lines:
            B = line.susceptance
            b.add_le([th[line.i], th[line.j]], [B, -B], line.flow_limit)
            b.add_le([th[line.i], th[line.j]], [-B, B], line.flow_limit)
    res = solve(b.build(), tol=tol)
    if not res.ok:
        raise SolverFailure("ISO problem", res)
    return IsoReport(_surplus(network, scenarios, prices, allocation), -res.objective)


# -- welfare theorems ------------------------------------------------------------

@dataclass
class WelfareReport:
    planner_welfare: float
    sceq_welfare: float
    certificate: SceqCertificate
    iso: IsoReport
    dual_residual: float
    tol: float

    @property
    def first_theorem(self) -> bool:
        """The equilibrium allocation is efficient and the ISO cannot do better."""
        scale = 1.0 + abs(self.planner_welfare)
        return (self.certificate.passed and abs(self.sceq_welfare - self.planner_welfare) <= self.tol * scale
                and self.iso.gap <= self.tol * scale)

    @property
    def second_theorem(self) -> bool:
        """The efficient allocation carries a supporting dual certificate."""
        return self.dual_residual <= self.tol * (1.0 + abs(self.planner_welfare))

    @property
    def passed(self) -> bool:
        return self.first_theorem and self.second_theorem

    def to_dict(self) -> dict:
        return {"planner_welfare": self.planner_welfare, "sceq_welfare": self.sceq_welfare,
                "iso_surplus": self.iso.surplus, "iso_optimum": self.iso.optimum,
                "iso_gap": self.iso.gap, "dual_residual": self.dual_residual,
                "first_theorem": self.first_theorem, "second_theorem": self.second_theorem,
                "certificate": self.certificate.to_dict()}


def check_welfare_theorems(network: Network, scenarios: ScenarioSet,
                           tol: float = DEFAULT_TOL) -> WelfareReport:
    sol = solve_spp(network, scenarios)
    alloc, prices = construct_sceq(network, scenarios, sol)
    cert = verify_sceq(network, scenarios, alloc, prices, tol)
    iso = iso_surplus(network, scenarios, prices, alloc)
    resid = planner_certificate_residual(network, scenarios, alloc, sol.lambda1, sol.lambda2,
                                         sol.mu, sol.gamma1, sol.gamma2)
    return WelfareReport(sol.welfare, welfare_of(network, scenarios, alloc), cert, iso, resid, tol)
