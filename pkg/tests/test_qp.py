import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import synthesize_qp
from twostage_market.qp import (INFEASIBLE, OPTIMAL, UNBOUNDED, ProgramBuilder, StandardProgram,
                                dual_objective, kkt_residual, optimal_face, restrict_to_face, solve)


def program(Q, c, A_eq=None, b_eq=None, A_in=None, b_in=None, nonneg=None):
    c = np.asarray(c, dtype=float)
    n = c.size
    Q = np.asarray(Q, dtype=float).reshape(n, n)
    A_eq = np.zeros((0, n)) if A_eq is None else np.asarray(A_eq, dtype=float)
    A_in = np.zeros((0, n)) if A_in is None else np.asarray(A_in, dtype=float)
    b_eq = np.zeros(0) if b_eq is None else np.asarray(b_eq, dtype=float)
    b_in = np.zeros(0) if b_in is None else np.asarray(b_in, dtype=float)
    nonneg = np.ones(n, bool) if nonneg is None else np.asarray(nonneg, bool)
    return StandardProgram(Q, c, A_eq, b_eq, A_in, b_in, nonneg)


def from_synth(s):
    return StandardProgram(s.Q, s.c, s.A_eq, s.b_eq, s.A_in, s.b_in, s.nonneg)


def test_scalar_quadratic():
    res = solve(program([[2.0]], [-2.0]))
    assert res.status == OPTIMAL
    assert res.x[0] == pytest.approx(1.0, abs=1e-8)
    assert res.objective == pytest.approx(-1.0, abs=1e-8)


# default tol 1e-8 scaled by 1 + max(|b|, |c|) = 2
SCALED = 2e-8


def test_lp_lower_bound_row_dual():
    res = solve(program([[0.0]], [1.0], A_in=[[-1.0]], b_in=[-1.0], nonneg=[False]))
    assert res.status == OPTIMAL and res.kkt_residual <= SCALED
    assert res.x[0] == pytest.approx(1.0, abs=SCALED)
    assert res.mu_in[0] == pytest.approx(1.0, abs=SCALED)


def test_lp_bound_dual():
    res = solve(program([[0.0]], [1.0]))
    assert res.x[0] == pytest.approx(0.0, abs=SCALED)
    assert res.mu_bound[0] == pytest.approx(1.0, abs=SCALED)


def test_unbounded_and_infeasible_detected():
    assert solve(program([[0.0]], [-1.0])).status == UNBOUNDED
    infeasible = program([[1.0]], [0.0], A_in=[[1.0]], b_in=[-1.0])
    assert solve(infeasible).status == INFEASIBLE


def test_tolerance_range_checked():
    with pytest.raises(ValueError):
        solve(program([[2.0]], [-2.0]), tol=0.1)


def test_check_rejects_bad_matrices():
    with pytest.raises(ValueError, match="symmetric"):
        solve(program([[1.0, 1.0], [0.0, 1.0]], [0.0, 0.0]))
    with pytest.raises(ValueError, match="semidefinite"):
        solve(program([[-1.0]], [0.0]))


def test_kkt_residual_zero_program():
    p = program(np.zeros((2, 2)), np.zeros(2))
    assert kkt_residual(p, np.zeros(2), np.zeros(0), np.zeros(0)) == 0.0


def test_kkt_residual_detects_each_violation():
    p = program([[2.0]], [-2.0], A_in=[[1.0]], b_in=[0.5], nonneg=[False])
    # x = 0.5 with mu = 1 is the optimum
    assert kkt_residual(p, [0.5], [], [1.0]) == pytest.approx(0.0, abs=1e-12)
    assert kkt_residual(p, [0.5], [], [1.5]) == pytest.approx(0.5)
    assert kkt_residual(p, [0.7], [], [0.6]) == pytest.approx(0.2)  # infeasible row
    assert kkt_residual(p, [0.5], [], [-1.0]) >= 1.0  # negative multiplier


def test_builder_layout():
    b = ProgramBuilder()
    x = b.variables(2)
    t = b.variables((2, 2), nonneg=False)
    b.add_cost(x[0], 1.5, -1.0)
    b.add_eq([x[0], x[1]], [1, 1], 3)
    b.add_le([t[1, 0]], [2], 4)
    p = b.build()
    assert p.n == 6 and t.shape == (2, 2)
    assert p.Q[0, 0] == 3.0 and p.c[0] == -1.0
    assert list(p.nonneg) == [True, True, False, False, False, False]
    assert b.n_eq == 1 and b.n_in == 1
    assert p.A_in[0, t[1, 0]] == 2.0


def test_dump_round_trips(tmp_path):
    p = program([[2.0]], [-2.0], A_in=[[1.0]], b_in=[0.5])
    path = tmp_path / "p.json"
    p.dump(path)
    d = json.loads(path.read_text())
    assert d["Q"] == [[2.0]] and d["b_in"] == [0.5] and d["nonneg"] == [True]


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_recovers_synthesized_optimum(seed):
    s = synthesize_qp(np.random.default_rng(seed), max_vars=12)
    res = solve(from_synth(s), tol=1e-11)
    assert res.ok
    np.testing.assert_allclose(res.x, s.x, atol=1e-7)
    assert res.kkt_residual <= 1e-8


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_strong_duality(seed):
    p = from_synth(synthesize_qp(np.random.default_rng(seed), max_vars=10))
    tol = 1e-9
    res = solve(p, tol=tol)
    assert res.ok
    primal = res.objective
    # bound multipliers enter the Wolfe dual through the nonnegative variables' complementarity
    dual = dual_objective(p, res.x, res.lambda_eq, res.mu_in) - res.mu_bound @ res.x
    assert abs(primal - dual) <= 10 * tol * (1 + abs(primal)) * (1 + np.abs(p.c).max())


def test_deterministic(rng):
    p = from_synth(synthesize_qp(rng))
    a, b = solve(p), solve(p)
    assert np.array_equal(a.x, b.x) and np.array_equal(a.mu_in, b.mu_in)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_start_independence(seed):
    p = from_synth(synthesize_qp(np.random.default_rng(seed), max_vars=10))
    a = solve(p, tol=1e-11)
    b = solve(p, tol=1e-11, init=1.0)
    c = solve(p, tol=1e-11, init=50.0)
    assert a.ok and b.ok and c.ok
    np.testing.assert_allclose(a.x, b.x, atol=1e-7)
    np.testing.assert_allclose(a.x, c.x, atol=1e-7)


def test_optimal_face_of_degenerate_lp():
    # min x1 + x2 s.t. x1 + x2 >= 1: every split is optimal
    lp = program(np.zeros((2, 2)), [1.0, 1.0], A_in=[[-1.0, -1.0]], b_in=[-1.0])
    res = solve(lp, tol=1e-10)
    fixed, tight = optimal_face(lp, res)
    assert not fixed.any() and tight.all()
    face = restrict_to_face(lp, fixed, tight, Q=np.diag([2.0, 2.0]), c=np.zeros(2))
    sel = solve(face)
    np.testing.assert_allclose(sel.x, [0.5, 0.5], atol=1e-8)


def test_optimal_face_fixes_priced_out_variable():
    # x2 costs more and is zero on every optimum
    lp = program(np.zeros((2, 2)), [1.0, 2.0], A_in=[[-1.0, -1.0]], b_in=[-1.0])
    res = solve(lp, tol=1e-10)
    fixed, tight = optimal_face(lp, res)
    assert list(fixed) == [False, True] and tight.all()
