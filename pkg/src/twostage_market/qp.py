"""Dense primal-dual interior-point solver for convex QPs and LPs.

Programs have the form::

    minimise    0.5 x'Qx + c'x + sum_j psi_j(x_j)
    subject to  A_eq x  = b_eq      (multiplier lambda_eq, free)
                A_in x <= b_in      (multiplier mu_in >= 0)
                x_j    >= 0         for j in nonneg (multiplier mu_bound >= 0)

with Lagrangian ``f + lambda_eq'(A_eq x - b_eq) + mu_in'(A_in x - b_in) - mu_bound'x``.
The optional ``psi_j`` are convex, once-differentiable scalar terms with a
piecewise-constant second derivative; LPs are the ``Q = 0`` case.
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass
from typing import Optional, Protocol, Sequence

import numpy as np
from scipy.linalg import LinAlgWarning, lu_factor, lu_solve

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
UNBOUNDED = "unbounded"
MAX_ITERS = "max-iters"

_DIVERGENCE = 1e8
_STEP_FRACTION = 0.995
_CORRECTOR_KEEP = 0.9
_NEIGHBOURHOOD = 1e-3


class ScalarTerm(Protocol):
    def value(self, x: float) -> float: ...

    def derivative(self, x: float) -> float: ...

    def curvature(self, x: float) -> float: ...


@dataclass(frozen=True)
class StandardProgram:
    Q: np.ndarray
    c: np.ndarray
    A_eq: np.ndarray
    b_eq: np.ndarray
    A_in: np.ndarray
    b_in: np.ndarray
    nonneg: np.ndarray
    separable: tuple = ()

    @property
    def n(self) -> int:
        return self.c.size

    def check(self) -> None:
        n = self.c.size
        if self.Q.shape != (n, n):
            raise ValueError(f"Q has shape {self.Q.shape}, expected {(n, n)}")
        if self.A_eq.shape != (self.b_eq.size, n) or self.A_in.shape != (self.b_in.size, n):
            raise ValueError("constraint matrices do not match variable count")
        if self.nonneg.shape != (n,):
            raise ValueError("nonneg mask has wrong length")
        scale = max(1.0, float(np.abs(self.Q).max(initial=0.0)))
        if np.abs(self.Q - self.Q.T).max(initial=0.0) > 1e-12 * scale:
            raise ValueError("Q is not symmetric")
        if n and np.linalg.eigvalsh(self.Q).min() < -1e-10 * scale:
            raise ValueError("Q is not positive semidefinite")
        for j, _ in self.separable:
            if not 0 <= j < n:
                raise ValueError(f"separable term on missing variable {j}")

    def objective(self, x) -> float:
        x = np.asarray(x, dtype=float)
        val = 0.5 * x @ self.Q @ x + self.c @ x
        for j, term in self.separable:
            val += term.value(x[j])
        return float(val)

    def gradient(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        g = self.Q @ x + self.c
        for j, term in self.separable:
            g[j] += term.derivative(x[j])
        return g

    def to_dict(self) -> dict:
        """Debug dump of the assembled standard form."""
        return {
            "Q": self.Q.tolist(), "c": self.c.tolist(),
            "A_eq": self.A_eq.tolist(), "b_eq": self.b_eq.tolist(),
            "A_in": self.A_in.tolist(), "b_in": self.b_in.tolist(),
            "nonneg": self.nonneg.astype(bool).tolist(),
            "separable": [j for j, _ in self.separable],
        }

    def dump(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)


@dataclass
class SolveResult:
    x: np.ndarray
    lambda_eq: np.ndarray
    mu_in: np.ndarray
    mu_bound: np.ndarray
    status: str
    kkt_residual: float
    iterations: int
    objective: float

    @property
    def ok(self) -> bool:
        return self.status == OPTIMAL


class ProgramBuilder:
    """Incremental assembly of a StandardProgram from sparse rows."""

    def __init__(self):
        self.n = 0
        self._nonneg: list[bool] = []
        self._quad: dict[int, float] = {}
        self._lin: dict[int, float] = {}
        self._eq: list[tuple[np.ndarray, np.ndarray, float]] = []
        self._in: list[tuple[np.ndarray, np.ndarray, float]] = []
        self._sep: list[tuple[int, ScalarTerm]] = []

    def variables(self, shape, nonneg: bool = True) -> np.ndarray:
        count = int(np.prod(shape))
        idx = np.arange(self.n, self.n + count).reshape(shape)
        self.n += count
        self._nonneg += [nonneg] * count
        return idx

    def add_cost(self, j: int, a: float, b: float) -> None:
        """Add a*x_j**2 + b*x_j to the objective."""
        self._quad[j] = self._quad.get(j, 0.0) + 2.0 * a
        self._lin[j] = self._lin.get(j, 0.0) + b

    def add_term(self, j: int, term: ScalarTerm) -> None:
        self._sep.append((int(j), term))

    @staticmethod
    def _row(idx, coef):
        return np.asarray(idx, dtype=int).ravel(), np.asarray(coef, dtype=float).ravel()

    def add_eq(self, idx, coef, rhs: float) -> int:
        self._eq.append((*self._row(idx, coef), float(rhs)))
        return len(self._eq) - 1

    def add_le(self, idx, coef, rhs: float) -> int:
        self._in.append((*self._row(idx, coef), float(rhs)))
        return len(self._in) - 1

    @property
    def n_eq(self) -> int:
        return len(self._eq)

    @property
    def n_in(self) -> int:
        return len(self._in)

    def build(self) -> StandardProgram:
        n = self.n
        Q = np.zeros((n, n))
        c = np.zeros(n)
        for j, v in self._quad.items():
            Q[j, j] += v
        for j, v in self._lin.items():
            c[j] += v

        def dense(rows):
            A = np.zeros((len(rows), n))
            b = np.zeros(len(rows))
            for r, (idx, coef, rhs) in enumerate(rows):
                np.add.at(A[r], idx, coef)
                b[r] = rhs
            return A, b

        A_eq, b_eq = dense(self._eq)
        A_in, b_in = dense(self._in)
        return StandardProgram(Q, c, A_eq, b_eq, A_in, b_in, np.array(self._nonneg, dtype=bool),
                               tuple(self._sep))


def _separable_parts(p: StandardProgram, x: np.ndarray):
    g = np.zeros(p.n)
    h = np.zeros(p.n)
    for j, term in p.separable:
        g[j] += term.derivative(x[j])
        h[j] += term.curvature(x[j])
    return g, h


def kkt_residual(p: StandardProgram, x, lambda_eq, mu_in, mu_bound=None) -> float:
    """Infinity norm of every KKT violation at a candidate primal-dual point.

    Covers stationarity, primal feasibility, multiplier signs and the
    complementarity products. When ``mu_bound`` is omitted it is taken as the
    reduced cost of each sign-constrained variable, so only sign and
    complementarity of those reduced costs are tested.
    """
    x = np.asarray(x, dtype=float)
    lam = np.asarray(lambda_eq, dtype=float)
    mu = np.asarray(mu_in, dtype=float)
    J = p.nonneg
    grad = p.gradient(x) + p.A_eq.T @ lam + p.A_in.T @ mu
    if mu_bound is None:
        nu = np.where(J, grad, 0.0)
    else:
        nu = np.where(J, np.asarray(mu_bound, dtype=float), 0.0)
    parts = [0.0]
    parts.append(np.abs(grad - nu).max(initial=0.0))
    parts.append(np.abs(p.A_eq @ x - p.b_eq).max(initial=0.0))
    slack = p.b_in - p.A_in @ x
    parts.append(np.maximum(-slack, 0.0).max(initial=0.0))
    parts.append(np.maximum(-x[J], 0.0).max(initial=0.0))
    parts.append(np.maximum(-mu, 0.0).max(initial=0.0))
    parts.append(np.maximum(-nu[J], 0.0).max(initial=0.0))
    parts.append(np.abs(mu * slack).max(initial=0.0))
    parts.append(np.abs(nu[J] * x[J]).max(initial=0.0))
    return float(max(parts))


def dual_objective(p: StandardProgram, x, lambda_eq, mu_in) -> float:
    """Wolfe dual value at a stationary point; exact only without separable terms."""
    x = np.asarray(x, dtype=float)
    return float(-0.5 * x @ p.Q @ x - p.b_eq @ lambda_eq - p.b_in @ mu_in)


def _max_step(v: np.ndarray, dv: np.ndarray) -> float:
    """Largest step in [0, 1] keeping ``v + t dv`` nonnegative, for ``v > 0``."""
    if not v.size:
        return 1.0
    m = float((-dv / v).max())
    return 1.0 / m if m > 1.0 else 1.0


def _steps(sv, dv, step, linear: bool) -> tuple[float, float]:
    """Damped primal and dual step lengths; QPs take a common step."""
    ap = min(1.0, _STEP_FRACTION * _max_step(sv, step[2]))
    ad = min(1.0, _STEP_FRACTION * _max_step(dv, step[3]))
    if not linear:
        ap = ad = min(ap, ad)
    return ap, ad

def _factor(K: np.ndarray, n: int):
    """LU of the KKT matrix, boosting the diagonal if a pivot vanishes.

    Near convergence the barrier terms reach ~1e12 and can cancel exactly in
    elimination; a boost relative to the largest diagonal entry restores a
    usable (slightly inexact) Newton direction.
    """
    big = float(np.abs(np.diag(K)).max(initial=1.0))
    for boost in (0.0, 1e-14, 1e-12, 1e-10):
        Kb = K
        if boost:
            Kb = K.copy()
            d = np.diag_indices(Kb.shape[0])
            Kb[d] += np.where(np.arange(Kb.shape[0]) < n, boost * big, -boost * big)
        with warnings.catch_warnings():
            warnings.simplefilter("error", LinAlgWarning)
            try:
                lu = lu_factor(Kb, check_finite=False)
            except LinAlgWarning:
                continue
        if np.isfinite(lu[0]).all():
            return lu
    return None


def solve(p: StandardProgram, tol: float = 1e-8, max_iters: int = 200,
          init: Optional[float] = None) -> SolveResult:
    """Mehrotra predictor-corrector on the full KKT system.

    Termination requires primal residual, dual residual and the largest
    complementarity product all below ``tol * (1 + max(|b|, |c|))``.
    ``init`` sets the starting slack and multiplier magnitude (default: the
    square root of that scale).
    """
    if not 0 < tol <= 1e-2:
        raise ValueError(f"tol must be in (0, 1e-2], got {tol}")
    p.check()
    n, me, mi = p.n, p.b_eq.size, p.b_in.size
    Q, c, Ae, be, Ai, bi = p.Q, p.c, p.A_eq, p.b_eq, p.A_in, p.b_in
    J = np.flatnonzero(p.nonneg)
    nj = J.size
    mc = mi + nj
    linear = not p.separable and not Q.any()
    scale = 1.0 + max(np.abs(be).max(initial=0.0), np.abs(bi).max(initial=0.0),
                      np.abs(c).max(initial=0.0))
    threshold = tol * scale

    x = np.zeros(n)
    # starting iterate sized to the data; unit starts cost extra iterations at large scales
    v0 = math.sqrt(scale) if init is None else float(init)
    if not v0 > 0:
        raise ValueError(f"init must be positive, got {init}")
    x[J] = v0
    s = np.maximum(bi - Ai @ x, v0)
    mu = np.full(mi, v0)
    nu = np.full(nj, v0)
    y = np.zeros(me)
    reg_p, reg_d = 1e-12 * scale, 1e-12 * scale

    # constant blocks of the augmented KKT matrix; diagonals are refreshed per iteration
    # (forming A_in' diag(mu/s) A_in instead cancels catastrophically near the end)
    K0 = np.zeros((n + me + mi, n + me + mi))
    K0[:n, :n] = Q
    K0[:n, n:n + me] = Ae.T
    K0[n:n + me, :n] = Ae
    K0[:n, n + me:] = Ai.T
    K0[n + me:, :n] = Ai
    diag = np.diag_indices(n + me + mi)
    base_diag = np.concatenate([np.diag(Q) + reg_p, np.full(me + mi, -reg_d)])

    status = MAX_ITERS
    it = 0
    for it in range(max_iters + 1):
        g, h = _separable_parts(p, x) if p.separable else (0.0, None)
        xJ = x[J]
        rd = Q @ x + c + g + Ae.T @ y + Ai.T @ mu
        rd[J] -= nu
        req = Ae @ x - be
        rin = Ai @ x + s - bi
        # complementarity pairs: slacks with row duals, bounded variables with bound duals
        sv = np.concatenate([s, xJ])
        dv = np.concatenate([mu, nu])
        comp = np.abs(sv * dv).max(initial=0.0)
        rp = max(np.abs(req).max(initial=0.0), np.abs(rin).max(initial=0.0))
        rdn = np.abs(rd).max(initial=0.0)
        if rp <= threshold and rdn <= threshold and comp <= threshold:
            status = OPTIMAL
            break
        if it == max_iters:
            break
        if np.abs(x).max(initial=0.0) > _DIVERGENCE * scale:
            status = UNBOUNDED
            break
        if max(np.abs(y).max(initial=0.0), dv.max(initial=0.0)) > _DIVERGENCE * scale:
            status = INFEASIBLE
            break
        tau = (sv @ dv) / mc if mc else 0.0

        dg = base_diag.copy()
        if h is not None:
            dg[:n] += h
        dg[J] += nu / xJ
        dg[n + me:] -= s / mu
        K = K0.copy()
        K[diag] = dg
        lu = _factor(K, n)
        if lu is None:
            break

        def direction(r_c):
            r_smu, r_xnu = r_c[:mi], r_c[mi:]
            rhs1 = -rd.copy()
            rhs1[J] -= r_xnu / xJ
            rhs = np.concatenate([rhs1, -req, -rin + r_smu / mu])
            sol = lu_solve(lu, rhs, check_finite=False)
            dx, dy, dmu = sol[:n], sol[n:n + me], sol[n + me:]
            ds = (-r_smu - s * dmu) / mu
            dnu = (-r_xnu - nu * dx[J]) / xJ
            return dx, dy, np.concatenate([ds, dx[J]]), np.concatenate([dmu, dnu])

        dx, dy, dsv, ddv = direction(sv * dv)
        ap, ad = _max_step(sv, dsv), _max_step(dv, ddv)
        if not linear:
            ap = ad = min(ap, ad)
        if mc:
            tau_aff = ((sv + ap * dsv) @ (dv + ad * ddv)) / mc
            sigma = min(1.0, (tau_aff / tau) ** 3) if tau > 0 else 0.0
            a_aff = min(ap, ad)
            step = direction(sv * dv + dsv * ddv - sigma * tau)
            ap, ad = _steps(sv, dv, step, linear)
            if min(ap, ad) < _CORRECTOR_KEEP * a_aff:
                # the second-order term is hurting; fall back to pure centring
                step = direction(sv * dv - sigma * tau)
                ap, ad = _steps(sv, dv, step, linear)
            dx, dy, dsv, ddv = step
        else:
            ap = ad = 1.0
        if not (np.isfinite(dx).all() and np.isfinite(dy).all()):
            break
        if mc:
            # stay in a wide neighbourhood of the central path: no
            # complementarity product may fall far below the average
            for _ in range(30):
                prod = (sv + ap * dsv) * (dv + ad * ddv)
                if prod.min() >= _NEIGHBOURHOOD * prod.mean():
                    break
                ap *= 0.8
                ad *= 0.8
        x = x + ap * dx
        y = y + ad * dy
        # guard against an exact zero from the step rule
        s = np.maximum(s + ap * dsv[:mi], 1e-300)
        x[J] = np.maximum(x[J], 1e-300)
        mu = mu + ad * ddv[:mi]
        nu = nu + ad * ddv[mi:]

    mu_bound = np.zeros(n)
    mu_bound[J] = nu
    return SolveResult(x, y, mu, mu_bound, status, kkt_residual(p, x, y, mu, mu_bound), it,
                       p.objective(x))


# -- optimal-face utilities ---------------------------------------------------

def optimal_face(p: StandardProgram, res: SolveResult) -> tuple[np.ndarray, np.ndarray]:
    """Classify constraints at an interior-point solution of a degenerate LP.

    Returns ``(fixed, tight)``: sign-constrained variables whose reduced cost
    dominates their value (zero on every optimal solution) and inequality
    rows whose multiplier dominates their slack (active on every optimal
    solution). Relies on the strict complementarity of the central path limit.
    """
    slack = p.b_in - p.A_in @ res.x
    fixed = p.nonneg & (res.mu_bound > res.x)
    tight = res.mu_in > slack
    return fixed, tight


def restrict_to_face(p: StandardProgram, fixed: np.ndarray, tight: np.ndarray,
                     Q: Optional[np.ndarray] = None, c: Optional[np.ndarray] = None,
                     separable: Sequence = ()) -> StandardProgram:
    """Feasible set of ``p`` intersected with an optimal face, new objective.

    ``fixed``/``tight`` may be shorter than the program's variable/row counts;
    the remaining entries are left free (used when ``p`` extends the program the
    face was computed on).
    """
    n = p.n
    fixed_full = np.zeros(n, dtype=bool)
    fixed_full[:fixed.size] = fixed
    tight_full = np.zeros(p.b_in.size, dtype=bool)
    tight_full[:tight.size] = tight
    fix_rows = np.eye(n)[fixed_full]
    A_eq = np.vstack([p.A_eq, p.A_in[tight_full], fix_rows])
    b_eq = np.concatenate([p.b_eq, p.b_in[tight_full], np.zeros(fix_rows.shape[0])])
    nonneg = p.nonneg & ~fixed_full
    return StandardProgram(p.Q if Q is None else Q, p.c if c is None else c, A_eq, b_eq,
                           p.A_in[~tight_full], p.b_in[~tight_full], nonneg, tuple(separable))
