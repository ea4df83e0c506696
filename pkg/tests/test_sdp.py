import io
import math
import warnings

import numpy as np
import pytest

from seqbell import npa, sdp
from seqbell.bell import CHSH
from seqbell.sdp import SdpProblem, SdpSolution, Status, residuals, solve


def correlation_2x2():
    """max 2 x12 over [[1, x], [x, 1]] psd."""
    p = SdpProblem([2])
    p.add_objective(0, 0, 1, 1.0)
    p.add_constraint([(0, 0, 0, 1.0)], 1.0)
    p.add_constraint([(0, 1, 1, 1.0)], 1.0)
    return p


def trace_3x3():
    p = SdpProblem([3])
    for i in range(3):
        p.add_objective(0, i, i, 1.0)
    p.add_constraint([(0, i, i, 1.0) for i in range(3)], 1.0)
    return p


def random_problem(rng, dims=(3, 4), m=5):
    """Feasible and bounded: b from a psd X0, C = A*(y0) - S0 with S0 psd."""
    p = SdpProblem(list(dims))
    X0 = []
    for d in dims:
        g = rng.standard_normal((d, d))
        X0.append(g @ g.T + np.eye(d))
    for _ in range(m):
        entries = []
        for blk, d in enumerate(dims):
            for i in range(d):
                for j in range(i, d):
                    entries.append((blk, i, j, float(rng.standard_normal())))
        p.add_constraint(entries, 0.0)
    p._rhs = [float(sum(np.sum(a * x) for a, x in zip(p.constraint_matrices(k), X0))) for k in range(m)]
    y0 = rng.standard_normal(m)
    for blk, d in enumerate(dims):
        g = rng.standard_normal((d, d))
        S0 = g @ g.T + np.eye(d)
        aty = sum(y0[k] * p.constraint_matrices(k)[blk] for k in range(m))
        p.c[blk] = aty - S0
    return p


def test_two_by_two_boundary():
    sol = solve(correlation_2x2())
    assert sol.status is Status.OPTIMAL
    assert np.isclose(sol.primal_obj, 2.0, atol=1e-6)
    assert np.isclose(sol.x_blocks[0][0, 1], 1.0, atol=1e-4)


def test_trace_constraint():
    sol = solve(trace_3x3())
    assert sol.status is Status.OPTIMAL
    assert np.isclose(sol.primal_obj, 1.0, atol=1e-7)


def test_chsh_bell_sdp():
    prob, offset = npa.build_bell_sdp(CHSH, npa.build_basis(npa.Scenario(2, 2), 2))
    sol = solve(prob)
    assert sol.status is Status.OPTIMAL
    assert abs(offset - sol.primal_obj - 2 * math.sqrt(2)) <= 1e-5


def test_optimal_invariants():
    rng = np.random.default_rng(0)
    for _ in range(5):
        p = random_problem(rng)
        sol = solve(p)
        assert sol.optimal
        assert sol.gap <= 1e-7 and sol.primal_res <= 1e-7 and sol.dual_res <= 1e-7
        for blk in sol.x_blocks + sol.s_blocks:
            assert np.linalg.eigvalsh(0.5 * (blk + blk.T))[0] >= -1e-9
        pres, dres, gap = residuals(p, sol)
        assert pres <= 1e-7 and dres <= 1e-7 and gap <= 1e-7


def hand_pair():
    p = correlation_2x2()
    X = np.ones((2, 2))
    # dual: min y1 + y2 with [[y1, -1], [-1, y2]] psd, optimum y = (1, 1)
    y = np.array([1.0, 1.0])
    S = np.array([[1.0, -1.0], [-1.0, 1.0]])
    return p, SdpSolution([X], y, [S], Status.OPTIMAL, 0.0, 0.0, 0.0, 2.0, 2.0, 0)


def test_residuals_hand_pair():
    p, sol = hand_pair()
    assert max(residuals(p, sol)) <= 1e-10


def test_residuals_primal_perturbation():
    p, sol = hand_pair()
    sol.x_blocks = [sol.x_blocks[0] + 1e-3 * np.eye(2)]
    pres, dres, _ = residuals(p, sol)
    assert np.isclose(pres, 1e-3, rtol=1e-9)
    assert dres <= 1e-12


def test_residuals_suboptimal_gap():
    p, sol = hand_pair()
    sol.x_blocks = [np.eye(2)]  # feasible, objective 0
    pres, dres, gap = residuals(p, sol)
    assert pres <= 1e-12 and gap > 0.5


def test_weak_duality_along_iterates():
    rng = np.random.default_rng(1)
    problems = [random_problem(rng) for _ in range(4)]
    problems.append(npa.build_guessing_sdp(
        np.full((2, 2, 2, 2), 0.25), 1, npa.build_basis(npa.Scenario(2, 2), 2)).problem)
    for p in problems:
        sol = solve(p)
        checked = 0
        for h in sol.history:
            if h["pres"] <= 1e-6 and h["dres"] <= 1e-6:
                assert h["pobj"] <= h["dobj"] + 1e-8
                checked += 1
        assert checked >= 1


def test_determinism():
    rng = np.random.default_rng(2)
    p = random_problem(rng)
    a, b = solve(p), solve(p)
    assert a.iterations == b.iterations
    for x, y in zip(a.x_blocks + a.s_blocks, b.x_blocks + b.s_blocks):
        assert np.array_equal(x, y)
    assert np.array_equal(a.y, b.y)


def test_returned_blocks_pass_cholesky():
    rng = np.random.default_rng(3)
    for p in (random_problem(rng), correlation_2x2(), trace_3x3()):
        sol = solve(p)
        for blk in sol.x_blocks + sol.s_blocks:
            sym = 0.5 * (blk + blk.T)
            np.linalg.cholesky(sym + 1e-9 * np.eye(len(sym)))


def test_dependent_rows_dropped_with_warning():
    p = trace_3x3()
    p.add_constraint([(0, i, i, 2.0) for i in range(3)], 2.0)
    with pytest.warns(UserWarning, match="linearly dependent"):
        sol = solve(p)
    assert sol.dropped_rows == [1] or sol.dropped_rows == [0]
    assert sol.optimal and np.isclose(sol.primal_obj, 1.0, atol=1e-7)


def test_inconsistent_rows_infeasible():
    p = trace_3x3()
    p.add_constraint([(0, i, i, 1.0) for i in range(3)], 2.0)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        sol = solve(p)
    assert sol.status is Status.INFEASIBLE


def test_psd_infeasible():
    p = SdpProblem([2])
    p.add_objective(0, 0, 0, 1.0)
    p.add_constraint([(0, 0, 0, 1.0)], -1.0)
    sol = solve(p)
    assert sol.status is not Status.OPTIMAL


def test_sdpa_round_trip():
    rng = np.random.default_rng(4)
    p = random_problem(rng)
    buf = io.StringIO()
    sdp.write_sdpa(p, buf)
    q = sdp.read_sdpa(io.StringIO(buf.getvalue()))
    assert q.block_dims == p.block_dims and q.m == p.m
    assert np.array_equal(q.b, p.b)
    for k in range(p.m):
        for a, c in zip(p.constraint_matrices(k), q.constraint_matrices(k)):
            assert np.array_equal(a, c)
    for a, c in zip(p.c, q.c):
        assert np.array_equal(a, c)
    assert np.isclose(solve(q).primal_obj, solve(p).primal_obj, atol=1e-9)


def test_rejects_asymmetric_objective():
    p = SdpProblem([2])
    p.c[0][0, 1] = 1.0
    with pytest.raises(ValueError):
        solve(p)


def test_matches_cvxpy():
    cp = pytest.importorskip("cvxpy")
    rng = np.random.default_rng(5)
    p = random_problem(rng, dims=(3,), m=3)
    X = cp.Variable((3, 3), symmetric=True)
    cons = [X >> 0] + [cp.trace(p.constraint_matrices(k)[0] @ X) == p.b[k] for k in range(p.m)]
    ref = cp.Problem(cp.Maximize(cp.trace(p.c[0] @ X)), cons).solve(solver=cp.CLARABEL)
    assert np.isclose(solve(p).primal_obj, ref, atol=1e-5)
