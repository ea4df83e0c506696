import itertools
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from seqbell import protocol, qcore
from seqbell.bell import CHSH, correlators_from_distribution, eval_inequality
from seqbell.errors import CapacityError, ConditioningError, DomainError
from seqbell.protocol import (alice_observable, canonicalize_branch, conditional_step_distribution, kraus_pair,
                              measure_bob, psi_theta, run_sequence, sample_mode)
from seqbell.qcore import I2, SX, SZ, PureBipartiteState

from oracles import kraus_by_hand, svd_theta, tailored_table

angles = st.floats(0.01, math.pi / 4 - 0.01)
weak = st.floats(0.0, math.pi / 4)


def test_psi_theta_examples():
    assert np.allclose(psi_theta(math.pi / 4).amps, [1 / math.sqrt(2), 0, 0, 1 / math.sqrt(2)])
    assert np.allclose(psi_theta(0.0).amps, [1, 0, 0, 0])
    assert protocol.is_separable_theta(0.0)
    assert np.allclose(psi_theta(math.pi / 8).amps, [0.92388, 0, 0, 0.38268], atol=1e-5)
    with pytest.raises(DomainError):
        psi_theta(-0.1)
    with pytest.raises(DomainError):
        psi_theta(2.0)


def test_kraus_pair_examples():
    kp = kraus_pair(0.0)
    plus = np.array([1, 1]) / math.sqrt(2)
    minus = np.array([1, -1]) / math.sqrt(2)
    assert np.allclose(kp.m_plus, np.outer(plus, plus))
    assert np.allclose(kp.m_minus, np.outer(minus, minus))
    kp = kraus_pair(math.pi / 4)
    assert np.allclose(kp.m_plus, I2 / math.sqrt(2)) and np.allclose(kp.m_minus, I2 / math.sqrt(2))
    for xi in (0.1, 0.3, 0.7):
        kp = kraus_pair(xi)
        assert np.allclose(kp.observable(), math.cos(2 * xi) * SX, atol=1e-12)
        mp, mm = kraus_by_hand(xi)
        assert np.allclose(kp.m_plus, mp) and np.allclose(kp.m_minus, mm)
    with pytest.raises(DomainError):
        kraus_pair(1.0)


def test_kraus_completeness_grid():
    for xi in np.linspace(0.0, math.pi / 4, 100):
        e_plus, e_minus = kraus_pair(xi).effects()
        assert np.max(np.abs(e_plus + e_minus - I2)) <= 1e-12


def test_measure_bob_examples():
    for th in np.linspace(0.05, math.pi / 2 - 0.05, 7):
        for xi in np.linspace(0.0, math.pi / 4, 7):
            r_plus, r_minus = measure_bob(psi_theta(th), kraus_pair(xi))
            assert np.isclose(r_plus.prob, 0.5) and np.isclose(r_minus.prob, 0.5)
            assert np.isclose(np.linalg.norm(r_plus.post_state.amps), 1.0)
    for rec in measure_bob(psi_theta(0.4), kraus_pair(0.0)):
        assert np.isclose(qcore.schmidt_canonicalize(rec.post_state).theta, 0.0, atol=1e-12)
    for rec in measure_bob(psi_theta(math.pi / 4), kraus_pair(math.pi / 8)):
        assert np.isclose(svd_theta(rec.post_state.amps), math.pi / 8, atol=1e-10)


def test_measure_bob_zero_probability_flag():
    proj = protocol.KrausPair(0.0, np.diag([1.0, 0.0]).astype(complex), np.diag([0.0, 1.0]).astype(complex))
    r_plus, r_minus = measure_bob(PureBipartiteState(np.array([1, 0, 0, 0], dtype=complex)), proj)
    assert not r_plus.zero_probability
    assert r_minus.zero_probability and r_minus.post_state is None


def check_canonical(post, theta, u_step, v_corr):
    lhs = np.kron(I2, v_corr.conj().T) @ post.amps
    rhs = np.kron(u_step, I2) @ psi_theta(theta).amps
    assert np.max(np.abs(lhs - rhs)) <= 1e-10


def test_canonicalize_branch_examples():
    th, u, v = canonicalize_branch(psi_theta(0.3))
    assert np.isclose(th, 0.3) and np.allclose(u, I2) and np.allclose(v, I2)
    for rec in measure_bob(psi_theta(math.pi / 4), kraus_pair(math.pi / 8)):
        th, u, v = canonicalize_branch(rec.post_state)
        assert np.isclose(th, math.pi / 8, atol=1e-10)
        check_canonical(rec.post_state, th, u, v)
    vec, w = qcore.apply_bob_operator(psi_theta(0.3), np.diag([1, 0]))
    post = PureBipartiteState.from_vector(vec)
    th, u, v = canonicalize_branch(post)
    assert np.isclose(th, 0.0)
    check_canonical(post, th, u, v)


@settings(max_examples=200, deadline=None)
@given(angles, weak)
def test_branch_schmidt_recursion(theta, xi):
    expected = math.sin(2 * theta) * math.sin(2 * xi)
    for rec in measure_bob(psi_theta(theta), kraus_pair(xi)):
        th, u, v = canonicalize_branch(rec.post_state)
        assert abs(math.sin(2 * svd_theta(rec.post_state.amps)) - expected) <= 1e-10
        assert abs(math.sin(2 * th) - expected) <= 1e-10
        if xi == 0.0:
            assert th <= 1e-12
        elif xi > 1e-6:
            assert th > 0.0
        check_canonical(rec.post_state, th, u, v)


def test_alice_observable_examples():
    r2 = math.sqrt(2)
    assert np.allclose(alice_observable(math.pi / 4, I2, 0), (SZ + SX) / r2, atol=1e-12)
    assert np.allclose(alice_observable(math.pi / 4, I2, 1), (SZ - SX) / r2, atol=1e-12)
    mu = math.atan(math.sin(math.pi / 4))
    assert np.isclose(mu, 0.61548, atol=1e-5)
    assert np.allclose(alice_observable(math.pi / 8, I2, 0), math.cos(mu) * SZ + math.sin(mu) * SX, atol=1e-12)


def test_alice_observable_is_dichotomic():
    rng = np.random.default_rng(0)
    for _ in range(50):
        q, _ = np.linalg.qr(rng.standard_normal((2, 2)) + 1j * rng.standard_normal((2, 2)))
        o = alice_observable(rng.uniform(0, math.pi / 4), q, int(rng.integers(2)))
        assert qcore.is_hermitian(o)
        assert np.allclose(np.linalg.eigvalsh(o), [-1, 1], atol=1e-12)


def test_run_sequence_chsh_maximum():
    _, seq = run_sequence(math.pi / 4, [0.0])
    p = conditional_step_distribution(seq, 1, ())
    assert abs(eval_inequality(correlators_from_distribution(p), CHSH) - 2 * math.sqrt(2)) <= 1e-9


def test_setting_counts():
    for n in (1, 2, 3, 4):
        _, seq = run_sequence(0.3, [0.1] * n)
        assert len(seq.settings) == protocol.setting_count(n) == 2 * (2**n - 1)
    assert len(run_sequence(0.3, [0.1, 0.2])[1].settings) == 6


def test_non_interacting_sequence():
    _, seq = run_sequence(math.pi / 4, [math.pi / 4, math.pi / 4])
    pb = seq.bob_marginal()
    for x in range(len(seq.settings)):
        assert np.allclose(pb[x, 3], 0.25, atol=1e-12)
        # y = (1, 1): Bob's outcomes independent of Alice's
        pa = seq.alice_marginal()[x, 3]
        assert np.allclose(seq.table[x, 3], np.outer(pa, pb[x, 3]), atol=1e-12)


def test_capacity_cap():
    with pytest.raises(CapacityError):
        run_sequence(0.3, [0.1] * 9)
    with pytest.raises(CapacityError):
        run_sequence(0.3, [0.1] * 3, max_steps=2)


def test_step_one_is_standard_scenario():
    for th, xi in ((math.pi / 4, 0.0), (math.pi / 8, 0.2), (0.1, 0.4)):
        _, seq = run_sequence(th, [xi, 0.3])
        assert np.allclose(conditional_step_distribution(seq, 1, ()), tailored_table(th, xi), atol=1e-12)


def test_second_step_after_plus_outcome():
    xi2 = 0.17
    _, seq = run_sequence(math.pi / 4, [math.pi / 8, xi2])
    p = conditional_step_distribution(seq, 2, (1,))
    assert np.allclose(p.sum(axis=(2, 3)), 1.0)
    assert np.allclose(p, tailored_table(math.pi / 8, xi2), atol=1e-10)


def test_correction_makes_branches_equivalent():
    rng = np.random.default_rng(11)
    for _ in range(10):
        th = rng.uniform(0.05, math.pi / 4)
        xis = list(rng.uniform(0.05, math.pi / 4, size=3))
        tree, seq = run_sequence(th, xis)
        for step in (2, 3):
            ref = conditional_step_distribution(seq, step, (1,) * (step - 1))
            for hist in itertools.product((1, -1), repeat=step - 1):
                assert np.allclose(conditional_step_distribution(seq, step, hist), ref, atol=1e-10)
                assert np.isclose(tree.nodes[hist].theta, tree.nodes[(1,) * (step - 1)].theta, atol=1e-12)


def test_history_length_checked():
    _, seq = run_sequence(0.3, [0.1, 0.2])
    with pytest.raises(DomainError):
        conditional_step_distribution(seq, 2, ())


def test_conditioning_error_on_null_history():
    seq = run_sequence(math.pi / 4, [0.0, 0.2])[1]
    table = seq.table.copy()
    # zero out every event with b1 = -1 to fake a null history
    n = seq.n
    for b in range(2**n):
        if protocol.bits_to_tuple(b, n)[0] == 1:
            table[..., b] = 0.0
    fake = protocol.SequenceDistribution(n, seq.settings, table)
    with pytest.raises(ConditioningError):
        conditional_step_distribution(fake, 2, (-1,))


def check_sequence_invariants(seq, tol=1e-10):
    t = seq.table
    assert np.all(t >= 0)
    assert np.max(np.abs(t.sum(axis=(2, 3)) - 1.0)) <= tol
    pb = seq.bob_marginal()
    assert np.max(np.abs(pb - pb[:1])) <= tol  # Bob independent of Alice's setting
    pa = seq.alice_marginal()
    assert np.max(np.abs(pa - pa[:, :1])) <= tol  # Alice independent of Bob's inputs
    n = seq.n
    for steps in range(1, n):
        pm = seq.prefix_marginal(steps)
        rest = n - steps
        # y = (prefix, suffix); later inputs must not matter
        pm = pm.reshape(pm.shape[0], 2**steps, 2**rest, 2, 2**steps)
        assert np.max(np.abs(pm - pm[:, :, :1])) <= tol


@settings(max_examples=40, deadline=None)
@given(st.floats(0.0, math.pi / 4), st.lists(weak, min_size=1, max_size=3))
def test_sequence_distribution_invariants(theta, xis):
    _, seq = run_sequence(theta, xis)
    check_sequence_invariants(seq)


def test_branch_probabilities_sum_to_one():
    tree, _ = run_sequence(0.5, [0.1, 0.2, 0.3])
    for depth in range(4):
        assert np.isclose(sum(r.branch_prob for r in tree.level(depth)), 1.0, atol=1e-10)


def test_sample_mode_converges():
    shots = 10**6
    counts, seq = sample_mode(math.pi / 8, [0.2], [0.5], shots, seed=3)
    exact = seq.table
    tot = counts.sum(axis=(2, 3), keepdims=True)
    freq = counts / tot
    sigma = np.sqrt(exact * (1 - exact) / tot)
    assert np.all(np.abs(freq - exact) <= 5 * sigma + 1e-12)


def test_sample_mode_deterministic():
    a, _ = sample_mode(0.3, [0.1, 0.2], [0.3, 0.6], 5000, seed=9)
    b, _ = sample_mode(0.3, [0.1, 0.2], [0.3, 0.6], 5000, seed=9)
    assert np.array_equal(a, b)


def test_sample_mode_input_marginal():
    shots = 200_000
    counts, _ = sample_mode(0.4, [0.2], [0.5], shots, seed=1)
    frac_z = counts[:, 0].sum() / shots
    assert abs(frac_z - 0.5) <= 5 * math.sqrt(0.25 / shots)


def test_sample_mode_rejects_bad_gamma():
    with pytest.raises(DomainError):
        sample_mode(0.4, [0.2], [1.0], 10, seed=1)


def test_tree_json_layout():
    tree, seq = run_sequence(0.4, [0.1, 0.2])
    doc = json.loads(protocol.tree_json(tree))
    assert len(doc["nodes"]) == 1 + 2 + 4
    node = doc["nodes"][1]
    assert set(node) >= {"history", "theta", "branch_prob", "u_alice"}
    header = seq.to_csv().splitlines()[0]
    assert header == "x,y_vec,a,b_vec,p"
