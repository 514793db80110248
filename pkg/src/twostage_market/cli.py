"""Command-line front end.

Exit codes: 0 solved or passed, 1 solver failure, 2 invalid input,
3 equilibrium falsified (a profitable deviation or a failed check).
"""
from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path
from typing import Optional

import numpy as np

from .dispatch import (SolverFailure, gen_best_response, gen_profit, lse_best_response, lse_payoff,
                       lse_service_split, solve_spp, solve_spp_u)
from .equilibrium import (DEFAULT_TOL, PriceSystem, clearing_residuals, construct_sceq,
                          iso_surplus, verify_sceq)
from .game import (BidProfile, DedClearing, DrClearing, SearchSpec, agent_ids, best_deviation,
                   congestion_free, dr_best_deviation, efficient_bids, monopoly_free, parse_agent,
                   price_interval, survives_generator_outage)
from .model import Allocation, ModelError, Network, ScenarioSet, load_problem, validate
from .report import deviation_csv, render

EXIT_OK, EXIT_SOLVER, EXIT_INPUT, EXIT_FALSIFIED = 0, 1, 2, 3


class InvalidProblem(ModelError):
    def __init__(self, issues):
        super().__init__(f"{len(issues)} validation issue(s)")
        self.issues = issues


def _load(path) -> tuple[Network, ScenarioSet]:
    net, scen = load_problem(path)
    issues = validate(net, scen)
    if issues:
        raise InvalidProblem(issues)
    return net, scen


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ModelError(f"cannot read {path}: {exc}") from exc


def _threshold(tol: float, value: float) -> float:
    return tol * (1.0 + abs(value))


# -- commands --------------------------------------------------------------------

def cmd_validate(args) -> tuple[dict, int]:
    net, scen = load_problem(args.file)
    issues = validate(net, scen)
    out = {"valid": not issues, "buses": net.n_buses, "lines": len(net.lines),
           "generators": net.n_gens, "lses": net.n_lses, "scenarios": len(scen),
           "issues": [{"where": i.where, "message": i.message} for i in issues]}
    return out, EXIT_INPUT if issues else EXIT_OK


def cmd_solve(args) -> tuple[dict, int]:
    net, scen = _load(args.file)
    sol = solve_spp_u(net, scen) if args.reformulated else solve_spp(net, scen)
    out = {"formulation": "shortfall" if args.reformulated else "direct",
           "welfare": sol.welfare, "kkt_residual": sol.kkt_residual}
    out.update(sol.to_dict())
    return out, EXIT_OK


def cmd_verify_sceq(args) -> tuple[dict, int]:
    net, scen = _load(args.file)
    if (args.alloc is None) != (args.prices is None):
        raise ModelError("--alloc and --prices must be given together")
    if args.alloc is None:
        alloc, prices = construct_sceq(net, scen)
        source = "constructed"
    else:
        alloc = Allocation.from_dict(_read_json(args.alloc))
        prices = PriceSystem.from_dict(_read_json(args.prices))
        source = "supplied"
    cert = verify_sceq(net, scen, alloc, prices, args.tol)
    out = {"source": source}
    out.update(cert.to_dict())
    out["iso"] = vars(iso_surplus(net, scen, prices, alloc)) if cert.passed else None
    return out, EXIT_OK if cert.passed else EXIT_FALSIFIED


def run_mechanism(network: Network, scenarios: ScenarioSet, scenario: int,
                  tol: float = DEFAULT_TOL) -> dict:
    """Announce planner prices, let agents respond on their own, then settle.

    Agents' quantities come from their individual best responses. When an
    agent is indifferent between its response and the announced allocation
    (payoff gap within tolerance), the announced quantity is used; otherwise
    the agent is flagged.
    """
    W = len(scenarios)
    if not 0 <= scenario < W:
        raise ModelError(f"scenario index {scenario} out of range 0..{W - 1}")
    sol = solve_spp(network, scenarios)
    alloc, stage2 = sol.allocation, network.stage2
    p1 = sol.lambda1
    p2 = sol.lambda2 if stage2 else np.zeros((W, network.n_buses))
    rows, flagged = [], []
    final = alloc.copy()
    for k, g in enumerate(network.generators):
        i = g.bus
        resp = gen_best_response(g, p1[i], p2[:, i], scenarios, stage2)
        y2 = alloc.yG2[:, k] if stage2 else np.zeros(W)
        at = gen_profit(g, p1[i], p2[:, i], alloc.yG1[k], y2, scenarios.probs, stage2)
        gap = max(0.0, resp.payoff - at)
        diff = max(abs(resp.y1 - alloc.yG1[k]), float(np.abs(resp.y2 - y2).max(initial=0.0)))
        if gap > _threshold(tol, resp.payoff):
            flagged.append(f"G{k}")
            final.yG1[k] = resp.y1
            if stage2:
                final.yG2[:, k] = resp.y2
        q1 = float(final.yG1[k])
        q2 = float(final.yG2[scenario, k]) if stage2 else 0.0
        rows.append({"agent": f"G{k}", "bus": i, "da_qty": q1, "da_cash": p1[i] * q1,
                     "rt_qty": q2, "rt_cash": p2[scenario, i] * q2, "delivered": q1 + q2,
                     "response_gap": gap, "response_diff": diff})
    for k, l in enumerate(network.lses):
        i = l.bus
        resp = lse_best_response(l, p1[i], p2[:, i], scenarios, k, stage2)
        y2 = alloc.yL2[:, k] if stage2 else np.zeros(W)
        at = lse_payoff(l, p1[i], p2[:, i], alloc.yL1[k], y2, scenarios, k, stage2)
        gap = max(0.0, resp.payoff - at)
        diff = max(abs(resp.y1 - alloc.yL1[k]), float(np.abs(resp.y2 - y2).max(initial=0.0)))
        if gap > _threshold(tol, resp.payoff):
            flagged.append(f"L{k}")
            final.yL1[k] = resp.y1
            if stage2:
                final.yL2[:, k] = resp.y2
        q1 = float(final.yL1[k])
        q2 = float(final.yL2[scenario, k]) if stage2 else 0.0
        fy2 = final.yL2[:, k] if stage2 else np.zeros(W)
        x, z = lse_service_split(l, q1, fy2, scenarios, k)
        rows.append({"agent": f"L{k}", "bus": i, "da_qty": q1, "da_cash": -p1[i] * q1,
                     "rt_qty": q2, "rt_cash": -p2[scenario, i] * q2, "delivered": q1 + q2,
                     "demand_response": float(x[scenario]), "blackout": float(z[scenario]),
                     "response_gap": gap, "response_diff": diff})
    clearing = clearing_residuals(network, final, W)
    keys = ["stage1"] + ([f"stage2[{scenario}]"] if stage2 else [])
    imbalance = max(clearing[k] for k in keys)
    reasons = [f"{a} does not accept the announced allocation" for a in flagged]
    if imbalance > tol:
        reasons.append(f"settled quantities leave an imbalance of {imbalance:.6g}")
    return {"scenario": scenario, "probability": float(scenarios.probs[scenario]),
            "verdict": "pass" if not reasons else "fail", "reasons": reasons,
            "da_prices": p1, "rt_prices": p2[scenario], "imbalance": imbalance,
            "welfare": sol.welfare, "settlements": rows}


def cmd_mechanism(args) -> tuple[dict, int]:
    net, scen = _load(args.file)
    out = run_mechanism(net, scen, args.scenario, args.tol)
    return out, EXIT_OK if out["verdict"] == "pass" else EXIT_FALSIFIED


def _bids(args, net, scen) -> tuple[BidProfile, str]:
    if args.bids is None:
        return efficient_bids(net, scen), "efficient"
    return BidProfile.from_dict(_read_json(args.bids), net, len(scen)), str(args.bids)


def cmd_clear_ded(args) -> tuple[dict, int]:
    net, scen = _load(args.file)
    bids = BidProfile.from_dict(_read_json(args.bids), net, len(scen))
    outcome = DedClearing(net, scen).clear(bids)
    return outcome.to_dict(), EXIT_OK


def cmd_efficient_bids(args) -> tuple[dict, int]:
    net, scen = _load(args.file)
    sol = solve_spp_u(net, scen)
    bids = efficient_bids(net, scen, sol)
    cl = DedClearing(net, scen)
    outcome = cl.clear(bids)
    intervals = [{"bus": i, "low": lo, "high": hi}
                 for i in range(net.n_buses)
                 for lo, hi in [price_interval(net, scen, bids, i, clearing=cl)]]
    gap = abs(outcome.welfare - sol.welfare)
    return {"bids": bids.to_dict(), "planner_welfare": sol.welfare, "cleared_welfare": outcome.welfare,
            "welfare_gap": gap, "da_price_intervals": intervals}, EXIT_OK


def cmd_nash_check(args) -> tuple[dict, int]:
    net, scen = _load(args.file)
    bids, source = _bids(args, net, scen)
    spec = SearchSpec(grid=args.grid)
    cl = DedClearing(net, scen)
    planner = solve_spp(net, scen)
    results = [best_deviation(net, scen, bids, a, spec, cl) for a in agent_ids(net)]
    if args.csv:
        Path(args.csv).write_text(deviation_csv(results))
    rows, reasons = [], []
    for r in results:
        thr = _threshold(args.tol, r.base_payoff)
        rows.append(r.to_dict())
        if r.gain > thr:
            reasons.append(f"{r.agent} gains {r.gain:.6g} by bidding {r.best_bid.tolist()}")
    out = {"bids": source, "search": _search_summary(spec),
           "verdict": NO_DEVIATION if not reasons else "deviation found", "reasons": reasons,
           "congestion_free": congestion_free(planner, net), "monopoly_free": monopoly_free(net),
           "survives_generator_outage": survives_generator_outage(net, scen), "agents": rows}
    return out, EXIT_OK if not reasons else EXIT_FALSIFIED


NO_DEVIATION = "no profitable deviation found at this resolution"


def _search_summary(spec: SearchSpec) -> dict:
    return {"grid": spec.grid, "range": f"[{spec.low:g}, {spec.high:g}] x current bid, plus 0",
            "refine_to": spec.rel_width}


def _parse_probe(text: str) -> tuple[str, float]:
    agent, sep, value = text.partition("=")
    if not sep:
        raise ModelError(f"probe must look like AGENT=BID, got {text!r}")
    try:
        return agent, float(value)
    except ValueError as exc:
        raise ModelError(f"bad probe bid {value!r}") from exc


def _dr_summary(outcome) -> dict:
    a = outcome.allocation
    return {"generation": a.yG1, "purchases": a.yL1, "demand_response": a.xL2[0],
            "prices": outcome.lambda1, "payoffs": outcome.payoffs}


def cmd_dr_counterexample(args) -> tuple[dict, int]:
    """Demand-response bidding at planner-derived bids, and its deviations."""
    start = time.perf_counter()
    net, scen = _load(args.file)
    sol = solve_spp(net, scen)
    cl = DrClearing(net, scen)
    gen_bids = sol.lambda1[net.gen_bus]
    dr_bids = sol.mu[0]
    a = sol.allocation
    resid = cl.certificate_residual(gen_bids, dr_bids, a.yG1, a.yL1, a.xL2[0], sol.lambda1,
                                    sol.mu[0], sol.gamma1)
    base = cl.clear(gen_bids, dr_bids)
    probes = []
    for text in args.probe:
        agent, bid = _parse_probe(text)
        kind, k = parse_agent(net, agent)
        g, d = gen_bids.copy(), dr_bids.copy()
        (g if kind == "G" else d)[k] = bid
        o = cl.clear(g, d)
        intervals = [list(cl.price_interval(g, d, i)) for i in range(net.n_buses)]
        probes.append({"agent": agent, "bid": bid, "payoff": o.payoffs[agent],
                       "gain": o.payoffs[agent] - base.payoffs[agent], "outcome": _dr_summary(o),
                       "price_intervals": intervals})
    spec = SearchSpec(grid=args.grid)
    devs, reasons = [], []
    for k in range(net.n_lses):
        r = dr_best_deviation(net, scen, gen_bids, dr_bids, f"L{k}", spec, cl)
        devs.append(r.to_dict())
        if r.gain > _threshold(args.tol, r.base_payoff):
            reasons.append(f"L{k} gains {r.gain:.6g} by bidding {r.best_bid[0]:.6g}")
    out = {"certificate": {"generation": a.yG1, "purchases": a.yL1, "demand_response": a.xL2[0],
                           "prices": sol.lambda1, "service_duals": sol.mu[0], "line_duals": sol.gamma1,
                           "kkt_residual": resid},
           "gen_bids": gen_bids, "dr_bids": dr_bids, "at_bids": _dr_summary(base),
           "probes": probes, "search": _search_summary(spec), "deviations": devs,
           "verdict": "deviation found" if reasons else NO_DEVIATION,
           "reasons": reasons}
    if args.timing:
        out["seconds"] = time.perf_counter() - start
    return out, EXIT_FALSIFIED if reasons else EXIT_OK


# -- entry point --------------------------------------------------------------------

COMMANDS = {
    "solve": cmd_solve,
    "verify-sceq": cmd_verify_sceq,
    "mechanism": cmd_mechanism,
    "clear-ded": cmd_clear_ded,
    "efficient-bids": cmd_efficient_bids,
    "nash-check": cmd_nash_check,
    "dr-counterexample": cmd_dr_counterexample,
    "validate": cmd_validate,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("file", help="problem JSON file")
    common.add_argument("--tol", type=float, default=DEFAULT_TOL, help="relative check tolerance")
    common.add_argument("--seed", type=int, default=0, help="seed for randomized checks")
    common.add_argument("--out", help="write the report here instead of standard output")
    common.add_argument("--format", choices=("text", "json"), default="text")

    parser = argparse.ArgumentParser(prog="twostage-market",
                                     description="Two-stage electricity market analyses.")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("solve", parents=[common], help="solve the social planner problem")
    p.add_argument("--reformulated", action="store_true", help="use the shortfall formulation")
    p = sub.add_parser("verify-sceq", parents=[common], help="check a competitive equilibrium")
    p.add_argument("--alloc", help="allocation JSON")
    p.add_argument("--prices", help="price JSON with p1 and p2")
    p = sub.add_parser("mechanism", parents=[common], help="run the two-stage settlement")
    p.add_argument("--scenario", type=int, required=True, help="realized scenario index")
    p = sub.add_parser("clear-ded", parents=[common], help="clear the bid-based dispatch")
    p.add_argument("--bids", required=True, help="bid profile JSON")
    sub.add_parser("efficient-bids", parents=[common], help="bids that reproduce the planner outcome")
    p = sub.add_parser("nash-check", parents=[common], help="search for profitable bid deviations")
    p.add_argument("--bids", help="bid profile JSON (default: efficient bids)")
    p.add_argument("--grid", type=int, default=50, help="grid points per bid coordinate")
    p.add_argument("--csv", help="write every probe to this CSV file")
    p = sub.add_parser("dr-counterexample", parents=[common],
                       help="demand-response bidding at planner-derived bids")
    p.add_argument("--probe", action="append", default=[], metavar="AGENT=BID",
                   help="also clear with one agent's bid replaced (repeatable)")
    p.add_argument("--grid", type=int, default=50, help="grid points for the deviation search")
    p.add_argument("--timing", action="store_true", help="include wall-clock seconds in the report")
    sub.add_parser("validate", parents=[common], help="check the problem file")
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        payload, code = COMMANDS[args.command](args)
    except InvalidProblem as exc:
        payload = {"valid": False, "issues": [{"where": i.where, "message": i.message} for i in exc.issues]}
        code = EXIT_INPUT
    except ModelError as exc:
        payload, code = {"error": str(exc)}, EXIT_INPUT
    except SolverFailure as exc:
        payload, code = {"error": str(exc)}, EXIT_SOLVER
    text = render(payload, args.format)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return code


if __name__ == "__main__":
    sys.exit(main())
