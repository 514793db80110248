"""Brute-force reference computations, independent of the package.

Everything here enumerates grids with numpy; nothing imports the solver or the
model, so agreement with the package is evidence rather than tautology.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np


def quad(a: float, b: float) -> Callable[[np.ndarray], np.ndarray]:
    return lambda x: a * np.asarray(x) ** 2 + b * np.asarray(x)


def grid(hi: float, step: float) -> np.ndarray:
    n = int(round(hi / step))
    return np.arange(n + 1) * step


# -- service cost -----------------------------------------------------------------

def service_split(dr, bo, residual: float, step: float = 1e-3) -> tuple[float, float, float]:
    """Cheapest (x, z) with x + z = residual, by enumerating x."""
    if residual <= 0:
        return 0.0, 0.0, 0.0
    x = grid(residual, step)
    x = np.append(x[x < residual], residual)
    cost = dr(x) + bo(residual - x)
    j = int(np.argmin(cost))
    return float(cost[j]), float(x[j]), float(residual - x[j])


def service_table(dr, bo, hi: float, step: float) -> np.ndarray:
    """Service cost at every residual on the grid, by pairwise enumeration."""
    r = grid(hi, step)
    x = grid(hi, step)
    cost = dr(x)[None, :] + bo(np.maximum(r[:, None] - x[None, :], 0.0))
    cost[x[None, :] > r[:, None] + 1e-12] = np.inf
    return cost.min(axis=1)


# -- bundled two-bus instance: exports from bus 1 capped by the line ------

@dataclass
class Example1Oracle:
    welfare: float
    yG: tuple[float, float]
    yL: tuple[float, float]
    x: tuple[float, float]
    z: tuple[float, float]


def example1_planner(step: float = 0.01) -> Example1Oracle:
    """Enumerate the bundled two-bus instance on a ``step`` grid.

    Both LSEs sit at bus 0 with generator 0; generator 1 at bus 1 can only
    export, so its output is the line flow and is capped at the limit.
    Blackout is priced out (intercept 10000), so service is pure DR, which
    the enumeration confirms by also scanning the split.
    """
    c0, c1 = quad(80, 40), quad(40, 20)
    lses = [(30.0, quad(10, 20)), (20.0, quad(10, 30))]
    bo = quad(1, 10000)
    fmax = 2.0
    ymax = 8.0
    y = grid(ymax, step)
    # f_k(consumption) on the grid
    tables = []
    for D, dr in lses:
        t = service_table(dr, bo, D, step)
        resid_idx = np.clip(np.round((D - y) / step).astype(int), 0, t.size - 1)
        f = np.where(y >= D, 0.0, t[resid_idx])
        tables.append(f)
    # g(S) = min over splits of total consumption S between the two LSEs
    n = y.size
    g = np.full(n, np.inf)
    arg = np.zeros(n, dtype=int)
    for s in range(n):
        vals = tables[0][:s + 1] + tables[1][s::-1]
        j = int(np.argmin(vals))
        g[s], arg[s] = vals[j], j
    y1 = y[y <= fmax + 1e-12]
    tot = np.rint((y[:, None] + y1[None, :]) / step).astype(int)
    ok = tot < n
    w = np.where(ok, -c0(y)[:, None] - c1(y1)[None, :] - g[np.minimum(tot, n - 1)], -np.inf)
    i, j = np.unravel_index(int(np.argmax(w)), w.shape)
    s = tot[i, j]
    a = arg[s]
    yl = (y[a], y[s - a])
    splits = [service_split(dr, bo, max(D - q, 0.0), step) for (D, dr), q in zip(lses, yl)]
    return Example1Oracle(float(w[i, j]), (float(y[i]), float(y1[j])), (float(yl[0]), float(yl[1])),
                          (splits[0][1], splits[1][1]), (splits[0][2], splits[1][2]))


# -- single bus, one seller, one buyer, several scenarios ----------------------------

@dataclass
class TwoStageOracle:
    value: float
    y1: float
    y2: np.ndarray
    bound: float


def two_stage(first: Callable, second: Sequence[Callable], dr, bo, demand: float,
              outputs: Sequence[float], probs: Sequence[float], step: float = 0.005,
              hi: float | None = None, marginal_bound: float = 0.0) -> TwoStageOracle:
    """Maximise ``-first(y1) - sum_w p_w [second_w(y2_w) + psi(D - w - y1 - y2_w)]``.

    ``psi`` is the cheapest DR/blackout cover of a residual. The inner problem
    over ``y2`` for each ``y1`` is a min-convolution on the grid. ``bound`` is
    the grid step times ``marginal_bound`` (the largest marginal cost on the
    search box), the error allowed for a grid optimum.
    """
    hi = demand if hi is None else hi
    y = grid(hi, step)
    psi = service_table(dr, bo, demand, step)
    total = y[:, None] + y[None, :]
    inner = []
    for w, sec in zip(outputs, second):
        resid = np.maximum(demand - w - total, 0.0)
        idx = np.clip(np.round(resid / step).astype(int), 0, psi.size - 1)
        cost = sec(y)[None, :] + psi[idx]
        inner.append((cost.min(axis=1), y[cost.argmin(axis=1)]))
    val = -first(y) - sum(p * c for p, (c, _) in zip(probs, inner))
    i = int(np.argmax(val))
    return TwoStageOracle(float(val[i]), float(y[i]), np.array([arg[i] for _, arg in inner]),
                          step * marginal_bound)


# -- QPs with a known optimum ------------------------------------------------------

@dataclass
class SynthesizedQP:
    Q: np.ndarray
    c: np.ndarray
    A_eq: np.ndarray
    b_eq: np.ndarray
    A_in: np.ndarray
    b_in: np.ndarray
    nonneg: np.ndarray
    x: np.ndarray
    lambda_eq: np.ndarray
    mu_in: np.ndarray


def synthesize_qp(rng: np.random.Generator, max_vars: int = 20, max_cond: float = 1e4) -> SynthesizedQP:
    """Strictly convex QP built backwards from a chosen KKT point.

    Pick the optimum, the active set and the multipliers first, then set the
    linear cost so that stationarity holds exactly. Strict convexity makes the
    chosen primal point the unique optimum. Draws whose active constraints are
    nearly dependent (condition number above ``max_cond``) are redrawn: there
    a KKT residual of 1e-10 no longer pins the primal point to 1e-7.
    """
    while True:
        n = int(rng.integers(2, max_vars + 1))
        me = int(rng.integers(0, n // 2 + 1))
        mi = int(rng.integers(0, n + 1))
        R = rng.normal(size=(n, n))
        Q = R @ R.T + 0.1 * np.eye(n)
        x = rng.uniform(0.5, 3.0, n)
        nonneg = rng.random(n) < 0.7
        at_zero = nonneg & (rng.random(n) < 0.3)
        x[at_zero] = 0.0
        A_eq = rng.normal(size=(me, n))
        A_in = rng.normal(size=(mi, n))
        active = rng.random(mi) < 0.4
        act = np.vstack([A_eq, A_in[active], np.eye(n)[at_zero]])
        if act.shape[0] and np.linalg.cond(act) > max_cond:
            continue
        slack = np.where(active, 0.0, rng.uniform(0.5, 2.0, mi))
        mu = np.where(active, rng.uniform(0.5, 3.0, mi), 0.0)
        nu = np.where(at_zero, rng.uniform(0.5, 3.0, n), 0.0)
        lam = rng.normal(size=me)
        c = -Q @ x - A_eq.T @ lam - A_in.T @ mu + nu
        return SynthesizedQP(Q, c, A_eq, A_eq @ x, A_in, A_in @ x + slack, nonneg, x, lam, mu)
