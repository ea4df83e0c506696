import itertools
import math

import numpy as np
import pytest

from seqbell import npa
from seqbell.bell import CHSH, BellParams, classical_bound, correlators_from_distribution, eval_inequality
from seqbell.errors import CapacityError, ConsistencyError
from seqbell.npa import Mode, Scenario, build_basis, build_guessing_sdp, guessing_probability, solve_guessing

from oracles import deterministic_table, dilated_projectors, tailored_table, word_moment

S22 = Scenario(2, 2)


def enumerate_words(n_alice, n_bob, level):
    """Distinct words under commutation across parties and idempotence, by brute force."""
    letters = [(0, x) for x in range(n_alice)] + [(1, y) for y in range(n_bob)]
    seen = set()
    for length in range(level + 1):
        for w in itertools.product(letters, repeat=length):
            a = [l for l in w if l[0] == 0]
            b = [l for l in w if l[0] == 1]
            red = []
            for part in (a, b):
                for l in part:
                    if red and red[-1] == l:
                        continue
                    red.append(l)
            seen.add(tuple(red))
    return {w for w in seen if len(w) <= level}


def noisy(p, v):
    return v * p + (1 - v) * 0.25


def random_interior(rng):
    th = rng.uniform(0.2, math.pi / 4)
    xi = rng.uniform(0.0, 0.4)
    return noisy(tailored_table(th, xi), rng.uniform(0.9, 0.99))


def test_basis_counts():
    assert len(build_basis(S22, 1)) == 5
    assert len(build_basis(S22, 2)) == 13
    assert len(build_basis(S22, 3)) == 25
    for sc, lvl in ((S22, 1), (S22, 2), (S22, 3), (Scenario(6, 2), 2), (Scenario(3, 3), 2)):
        assert set(build_basis(sc, lvl).words) == enumerate_words(sc.alice_settings, sc.bob_settings, lvl)
    assert len(build_basis(Scenario(6, 2), 2)) == 53


def test_basis_order():
    words = build_basis(S22, 2).words
    assert words[:5] == ((), ((0, 0),), ((0, 1),), ((1, 0),), ((1, 1),))
    assert len(set(words)) == len(words)
    assert list(words[5:]) == sorted(words[5:])


def test_level_cap():
    with pytest.raises(CapacityError):
        build_basis(S22, 4)


def test_guessing_sdp_structure():
    g = build_guessing_sdp(tailored_table(0.5, 0.1), 1, build_basis(S22, 2))
    assert g.problem.block_dims == [13, 13]
    G, h = g.program.equalities()
    norm_row = np.zeros(G.shape[1])
    norm_row[g.program.var(0, ())] = norm_row[g.program.var(1, ())] = 1.0
    hits = [k for k in range(len(h)) if np.array_equal(G[k], norm_row)]
    assert hits and h[hits[0]] == 1.0
    gb = build_guessing_sdp(None, 1, build_basis(S22, 2), Mode.BELL_VALUE, CHSH, 2.5)
    G, h = gb.program.equalities()
    assert len(h) == 2 and any(np.array_equal(row, norm_row) for row in G)


def test_signaling_input_rejected():
    p = tailored_table(0.5, 0.1)
    p[0, 0] = [[0.5, 0.0], [0.0, 0.5]]
    p[0, 1] = [[0.5, 0.5], [0.0, 0.0]]
    with pytest.raises(ConsistencyError):
        build_guessing_sdp(p, 1, build_basis(S22, 2))


def test_maximal_violation_gives_one_bit():
    res = guessing_probability(tailored_table(math.pi / 4, 0.0), level=2)
    assert abs(res.g_upper - 0.5) <= 1e-4


def test_local_deterministic_gives_no_randomness():
    for assignment in itertools.product((0, 1), repeat=4):
        res = guessing_probability(deterministic_table(*assignment), level=2)
        assert abs(res.g_upper - 1.0) <= 1e-6
        assert res.bits <= 1e-5


def test_bell_value_mode_at_tsirelson():
    res = guessing_probability(None, level=2, mode=Mode.BELL_VALUE, bell=CHSH, bell_value=2 * math.sqrt(2))
    assert abs(res.g_upper - 0.5) <= 1e-4


@pytest.mark.parametrize("theta, xi, bits", [
    (math.pi / 4, 0.213, 0.533),
    (math.pi / 8, 0.200, 0.371),
    (math.pi / 32, 0.013, 0.823),
])
def test_table_rows(theta, xi, bits):
    res = guessing_probability(tailored_table(theta, xi), level=2)
    assert abs(res.bits - bits) <= 0.02


def test_physical_point_is_feasible():
    rng = np.random.default_rng(0)
    for th, xi in [(math.pi / 4, 0.0), (math.pi / 8, 0.2)] + [tuple(rng.uniform(0.05, 0.78, 2)) for _ in range(3)]:
        state, alice, bob = dilated_projectors(th, xi)
        # the dilation reproduces the behaviour
        p = tailored_table(th, xi)
        for x, y in itertools.product(range(2), repeat=2):
            assert np.isclose(word_moment(state, alice, bob, ((0, x), (1, y))), p[x, y, 0, 0], atol=1e-12)
        for level in (1, 2, 3):
            g = build_guessing_sdp(p, 1, build_basis(S22, level))
            prog = g.program
            v = np.zeros(prog.n_blocks * prog.n_keys)
            for key in prog.keys:
                v[prog.var(0, key)] = word_moment(state, alice, bob, key)
            G, h = prog.equalities()
            assert np.max(np.abs(G @ v - h)) <= 1e-8
            t = g.null.T @ (v - g.v0)
            assert np.max(np.abs(g.v0 + g.null @ t - v)) <= 1e-8
            for blk in prog.moment_matrices(v):
                assert np.linalg.eigvalsh(blk)[0] >= -1e-10


def test_relaxation_monotone_in_level():
    rng = np.random.default_rng(1)
    for _ in range(10):
        p = random_interior(rng)
        g = [guessing_probability(p, level=k).g_upper for k in (1, 2, 3)]
        assert g[1] <= g[0] + 1e-6
        assert g[2] <= g[1] + 1e-6


def test_bound_validity():
    rng = np.random.default_rng(2)
    cases = [random_interior(rng) for _ in range(4)]
    cases.append(noisy(deterministic_table(0, 1, 1, 0), 0.7))
    cases.append(0.5 * deterministic_table(0, 0, 0, 0) + 0.5 * tailored_table(0.6, 0.1))
    for p in cases:
        for y0 in (0, 1):
            res = guessing_probability(p, target_input=y0, level=2)
            assert res.g_upper >= p[0, y0].sum(axis=0).max() - 1e-8


def test_bell_value_mode_looser():
    rng = np.random.default_rng(3)
    for _ in range(4):
        th = rng.uniform(0.3, math.pi / 4)
        p = noisy(tailored_table(th, rng.uniform(0.0, 0.3)), 0.97)
        params = BellParams.for_theta(th)
        i_val = eval_inequality(correlators_from_distribution(p), params)
        full = guessing_probability(p, level=2).g_upper
        loose = guessing_probability(None, level=2, mode=Mode.BELL_VALUE, bell=params, bell_value=i_val).g_upper
        assert loose >= full - 1e-6


def test_moment_matrices_symmetric():
    res = guessing_probability(tailored_table(math.pi / 8, 0.2), level=2)
    for m in res.solution.s_blocks:
        assert np.max(np.abs(m - m.T)) <= 1e-10
    for m in res.moment_matrices:
        assert np.linalg.eigvalsh(m)[0] >= -1e-9


def test_bell_sdp_examples():
    assert abs(npa.bell_max_sdp(CHSH, build_basis(S22, 2)) - 2.828427) <= 1e-5
    assert abs(npa.bell_max_sdp(BellParams.for_theta(math.pi / 8), build_basis(S22, 2)) - 3.265986) <= 1e-4


def test_bell_functional_at_deterministic_points():
    for params in (CHSH, BellParams(1.5, 0.8), BellParams(2.0, 0.3)):
        coeffs = npa.bell_moment_coeffs(params)
        best = -math.inf
        for assignment in itertools.product((0, 1), repeat=4):
            mom = npa.projector_moments(deterministic_table(*assignment))
            best = max(best, sum(c * mom[w] for w, c in coeffs.items()))
        assert np.isclose(best, classical_bound(params), atol=1e-12)


def test_bell_sdp_monotone_in_level():
    for params in (CHSH, BellParams(1.4, 0.6), BellParams.for_theta(0.3)):
        vals = [npa.bell_max_sdp(params, build_basis(S22, k)) for k in (1, 2, 3)]
        assert vals[1] <= vals[0] + 1e-7 and vals[2] <= vals[1] + 1e-7
        assert vals[2] >= math.sqrt((1 + params.alpha**2) * (4 + params.beta**2)) - 1e-5
