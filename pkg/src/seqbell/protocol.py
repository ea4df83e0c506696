"""Sequential weak-measurement protocol on a two-qubit state.

Bob's qubit passes through ``n`` devices.  Device ``i`` measures either
sigma_z (input 0) or the weakened sigma_x instrument with strength ``xi_i``
(input 1); after a weak measurement it applies the unitary that brings the
post-measurement state back to the canonical form ``(U (x) I)(c|00> + s|11>)``.
Alice makes a single measurement chosen from two observables per node of
the weak-measurement branch tree.

Outcomes are stored as indices: 0 means ``+1`` and 1 means ``-1``.  Input
and outcome strings are packed into integers with step 1 as the most
significant bit.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from . import qcore
from .errors import CapacityError, ConditioningError, DomainError
from .qcore import I2, SX, SZ, PureBipartiteState

ZERO_PROB = 1e-14
DEFAULT_MAX_STEPS = 8

_PLUS = np.array([1, 1], dtype=complex) / math.sqrt(2)
_MINUS = np.array([1, -1], dtype=complex) / math.sqrt(2)
_Z_PROJ = (np.diag([1, 0]).astype(complex), np.diag([0, 1]).astype(complex))


def sign_of(index: int) -> int:
    return 1 - 2 * index


def psi_theta(theta: float) -> PureBipartiteState:
    """``cos(theta)|00> + sin(theta)|11>``, defined for theta in [0, pi/2]."""
    if not (0.0 <= theta <= math.pi / 2):
        raise DomainError(f"theta must lie in [0, pi/2], got {theta!r}")
    return PureBipartiteState(np.array([math.cos(theta), 0, 0, math.sin(theta)], dtype=complex))


def is_separable_theta(theta: float) -> bool:
    return theta == 0.0 or theta == math.pi / 2


@dataclass(frozen=True, eq=False)
class KrausPair:
    xi: float
    m_plus: np.ndarray
    m_minus: np.ndarray

    def operator(self, outcome_index: int) -> np.ndarray:
        return self.m_plus if outcome_index == 0 else self.m_minus

    def effects(self) -> tuple[np.ndarray, np.ndarray]:
        return (self.m_plus.conj().T @ self.m_plus, self.m_minus.conj().T @ self.m_minus)

    def observable(self) -> np.ndarray:
        e_plus, e_minus = self.effects()
        return e_plus - e_minus


def kraus_pair(xi: float) -> KrausPair:
    """Two-outcome weak sigma_x measurement ``M_pm = cos xi |pm><pm| + sin xi |mp><mp|``."""
    if not (0.0 <= xi <= math.pi / 4 + 1e-15):
        raise DomainError(f"xi must lie in [0, pi/4], got {xi!r}")
    c, s = math.cos(xi), math.sin(xi)
    pp = np.outer(_PLUS, _PLUS.conj())
    mm = np.outer(_MINUS, _MINUS.conj())
    m_plus = c * pp + s * mm
    m_minus = c * mm + s * pp
    m_plus.flags.writeable = False
    m_minus.flags.writeable = False
    return KrausPair(xi=float(xi), m_plus=m_plus, m_minus=m_minus)


@dataclass(frozen=True)
class MeasurementRecord:
    outcome: int
    prob: float
    post_state: PureBipartiteState | None
    zero_probability: bool = False


def measure_bob(s: PureBipartiteState, kp: KrausPair) -> tuple[MeasurementRecord, MeasurementRecord]:
    records = []
    for idx in (0, 1):
        vec, w = qcore.apply_bob_operator(s, kp.operator(idx))
        if w < ZERO_PROB:
            records.append(MeasurementRecord(sign_of(idx), w, None, zero_probability=True))
        else:
            records.append(MeasurementRecord(sign_of(idx), w, PureBipartiteState.from_vector(vec)))
    return records[0], records[1]


def canonicalize_branch(post_state: PureBipartiteState) -> tuple[float, np.ndarray, np.ndarray]:
    """Return ``(theta', u_step, v_correction)`` for a post-measurement state.

    Applying ``I (x) v_correction^dag`` to ``post_state`` gives
    ``(u_step (x) I)(cos theta'|00> + sin theta'|11>)``.
    """
    sf = qcore.schmidt_canonicalize(post_state)
    return sf.theta, np.array(sf.u_alice), np.array(sf.v_bob)


def mu_angle(theta: float) -> float:
    return math.atan(math.sin(2 * theta))


def alice_observable(theta_branch: float, u_accum, k: int) -> np.ndarray:
    """``U [cos mu sz + (-1)^k sin mu sx] U^dag`` with ``tan mu = sin 2 theta``."""
    if not (0.0 <= theta_branch <= math.pi / 4 + 1e-12):
        raise DomainError(f"branch angle must lie in [0, pi/4], got {theta_branch!r}")
    mu = mu_angle(theta_branch)
    u = qcore.as_mat2(u_accum)
    obs = math.cos(mu) * SZ + (-1) ** k * math.sin(mu) * SX
    out = u @ obs @ u.conj().T
    return 0.5 * (out + out.conj().T)


@dataclass(frozen=True, eq=False)
class BranchRecord:
    """Node of the weak-measurement branch tree (all previous inputs equal 1)."""

    history: tuple[int, ...]
    theta: float
    u_alice: np.ndarray
    branch_prob: float
    v_correction: np.ndarray = field(default_factory=lambda: I2.copy())
    zero_probability: bool = False

    @property
    def depth(self) -> int:
        return len(self.history)

    def to_json(self) -> dict:
        u = np.asarray(self.u_alice)
        return {
            "history": list(self.history),
            "theta": self.theta,
            "branch_prob": self.branch_prob,
            "u_alice": [[float(z.real), float(z.imag)] for z in u.reshape(-1)],
        }


@dataclass(frozen=True)
class AliceSetting:
    step: int
    history: tuple[int, ...]
    k: int


def enumerate_alice_settings(n: int) -> list[AliceSetting]:
    """Settings in lexicographic order of (step, history bits, k)."""
    out = []
    for step in range(1, n + 1):
        for bits in range(2 ** (step - 1)):
            hist = tuple(sign_of((bits >> (step - 2 - j)) & 1) for j in range(step - 1))
            for k in (0, 1):
                out.append(AliceSetting(step, hist, k))
    return out


def setting_count(n: int) -> int:
    return 2 * (2**n - 1)


def history_index(history: Sequence[int]) -> int:
    idx = 0
    for b in history:
        idx = (idx << 1) | (0 if b == 1 else 1)
    return idx


def bits_to_tuple(value: int, n: int) -> tuple[int, ...]:
    return tuple((value >> (n - 1 - j)) & 1 for j in range(n))


@dataclass(frozen=True, eq=False)
class BranchTree:
    theta1: float
    xis: tuple[float, ...]
    nodes: dict[tuple[int, ...], BranchRecord]

    @property
    def n(self) -> int:
        return len(self.xis)

    def level(self, depth: int) -> list[BranchRecord]:
        return [r for h, r in sorted(self.nodes.items(), key=lambda kv: history_index(kv[0])) if len(h) == depth]

    def __iter__(self) -> Iterator[BranchRecord]:
        for depth in range(self.n + 1):
            yield from self.level(depth)

    def to_json(self) -> dict:
        return {
            "theta1": self.theta1,
            "xis": list(self.xis),
            "nodes": [r.to_json() for r in self],
        }


def build_branch_tree(theta1: float, xis: Sequence[float]) -> BranchTree:
    """Canonical angle and accumulated Alice unitary along every weak-measurement path."""
    state = psi_theta(theta1)
    sf = qcore.schmidt_canonicalize(state)
    root = BranchRecord((), sf.theta, np.array(sf.u_alice), 1.0, v_correction=np.array(sf.v_bob))
    nodes = {(): root}
    frontier = [root]
    for xi in xis:
        kp = kraus_pair(xi)
        nxt = []
        for rec in frontier:
            for idx in (0, 1):
                hist = rec.history + (sign_of(idx),)
                if rec.zero_probability:
                    child = BranchRecord(hist, 0.0, rec.u_alice, 0.0, zero_probability=True)
                    nodes[hist] = child
                    nxt.append(child)
                    continue
                canon = psi_theta(rec.theta)
                vec, w = qcore.apply_bob_operator(canon, kp.operator(idx))
                if w < ZERO_PROB:
                    child = BranchRecord(hist, 0.0, rec.u_alice, 0.0, zero_probability=True)
                else:
                    post = PureBipartiteState.from_vector(vec)
                    th, u_step, v_corr = canonicalize_branch(post)
                    child = BranchRecord(hist, th, rec.u_alice @ u_step, rec.branch_prob * w, v_correction=v_corr)
                nodes[hist] = child
                nxt.append(child)
        frontier = nxt
    return BranchTree(float(theta1), tuple(float(x) for x in xis), nodes)


@dataclass(frozen=True, eq=False)
class SequenceDistribution:
    """Exact table ``p(a, b | x, y)`` indexed ``table[x, y, a, b]``.

    ``x`` enumerates :func:`enumerate_alice_settings`; ``y`` and ``b`` are
    packed bit strings (step 1 most significant, outcome bit 1 meaning -1);
    ``a`` is 0 for +1 and 1 for -1.
    """

    n: int
    settings: tuple[AliceSetting, ...]
    table: np.ndarray

    def prob(self, x: int, y_vec: Sequence[int], a: int, b_vec: Sequence[int]) -> float:
        y = int("".join(str(v) for v in y_vec), 2) if self.n else 0
        return float(self.table[x, y, 0 if a == 1 else 1, history_index(b_vec)])

    def bob_marginal(self) -> np.ndarray:
        """``p(b | x, y)`` with shape ``(X, 2**n, 2**n)``."""
        return self.table.sum(axis=2)

    def alice_marginal(self) -> np.ndarray:
        return self.table.sum(axis=3)

    def prefix_marginal(self, steps: int) -> np.ndarray:
        """Marginal over ``b_{steps+1..n}``: shape ``(X, 2**n, 2, 2**steps)``."""
        rest = self.n - steps
        t = self.table.reshape(self.table.shape[:3] + (2**steps, 2**rest))
        return t.sum(axis=4)

    def to_csv(self, fh=None) -> str | None:
        buf = fh if fh is not None else io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["x", "y_vec", "a", "b_vec", "p"])
        X, Y, _, B = self.table.shape
        for x in range(X):
            for y in range(Y):
                ystr = "".join(str(v) for v in bits_to_tuple(y, self.n))
                for a in (0, 1):
                    for b in range(B):
                        bstr = "".join("+" if v == 0 else "-" for v in bits_to_tuple(b, self.n))
                        w.writerow([x, ystr, sign_of(a), bstr, f"{self.table[x, y, a, b]:.15e}"])
        if fh is None:
            return buf.getvalue()
        return None


def _bob_instrument(tree: BranchTree, y_vec: tuple[int, ...]) -> np.ndarray:
    """Products ``K_b`` of Bob's step operators for every outcome string ``b``.

    Returns an array of shape ``(2**n, 2, 2)``; the effect of ``b`` is
    ``K_b^dag K_b``.
    """
    ops = np.eye(2, dtype=complex)[None, :, :]
    for step, y in enumerate(y_vec):
        new = np.empty((ops.shape[0] * 2, 2, 2), dtype=complex)
        if y == 1:
            kp = kraus_pair(tree.xis[step])
        for prev in range(ops.shape[0]):
            prev_hist = tuple(sign_of(v) for v in bits_to_tuple(prev, step))
            for idx in (0, 1):
                if y == 0:
                    k = _Z_PROJ[idx]
                else:
                    node = tree.nodes[prev_hist + (sign_of(idx),)]
                    k = node.v_correction.conj().T @ kp.operator(idx)
                new[2 * prev + idx] = k @ ops[prev]
        ops = new
    return ops


def run_sequence(theta1: float, xis: Sequence[float], max_steps: int = DEFAULT_MAX_STEPS):
    """Exact sequence distribution for the protocol with weak strengths ``xis``.

    Returns ``(tree, SequenceDistribution)``.
    """
    n = len(xis)
    if not (0.0 <= theta1 <= math.pi / 4):
        raise DomainError(f"initial angle must lie in [0, pi/4], got {theta1!r}")
    if n < 1:
        raise DomainError("need at least one measurement step")
    if n > max_steps:
        raise CapacityError(f"n = {n} exceeds the table cap of {max_steps} steps")
    for xi in xis:
        if not (0.0 <= xi <= math.pi / 4 + 1e-15):
            raise DomainError(f"xi must lie in [0, pi/4], got {xi!r}")
    tree = build_branch_tree(theta1, xis)
    settings = enumerate_alice_settings(n)

    # Alice projectors onto a = +1 / -1 for each setting
    alice = np.empty((len(settings), 2, 2, 2), dtype=complex)
    for x, st in enumerate(settings):
        node = tree.nodes[st.history]
        obs = alice_observable(node.theta, node.u_alice, st.k)
        alice[x, 0] = 0.5 * (I2 + obs)
        alice[x, 1] = 0.5 * (I2 - obs)

    c = psi_theta(theta1).coeffs
    table = np.empty((len(settings), 2**n, 2, 2**n))
    for y in range(2**n):
        kops = _bob_instrument(tree, bits_to_tuple(y, n))
        # Bob-side transformed coefficients: (I (x) K_b)|psi> has coefficients C K_b^T
        cb = np.einsum("ij,bkj->bik", c, kops)
        # p = <cb| Pi_a (x) I |cb> = tr(cb^dag Pi cb)
        vals = np.einsum("bij,xaik,bkj->xab", cb.conj(), alice, cb).real
        table[:, y, :, :] = vals
    np.clip(table, 0.0, None, out=table)
    return tree, SequenceDistribution(n, tuple(settings), table)


def _setting_index(settings: Sequence[AliceSetting], step: int, history: tuple[int, ...], k: int) -> int:
    for x, st in enumerate(settings):
        if st.step == step and st.history == history and st.k == k:
            return x
    raise KeyError((step, history, k))


def conditional_step_distribution(seq: SequenceDistribution, step: int, history: Sequence[int]) -> np.ndarray:
    """Bipartite table ``P[x, y, a, b]`` between Alice's two step settings and device ``step``.

    Conditions on ``y_1..y_{step-1} = 1`` and on the given earlier outcomes.
    Inputs of later devices are set to 1; causality makes them irrelevant.
    """
    history = tuple(int(b) for b in history)
    if len(history) != step - 1 or not (1 <= step <= seq.n):
        raise DomainError("history length must equal step - 1")
    marg = seq.prefix_marginal(step)
    hbits = history_index(history)
    out = np.zeros((2, 2, 2, 2))
    for k in (0, 1):
        x = _setting_index(seq.settings, step, history, k)
        for yi in (0, 1):
            yvec = (1,) * (step - 1) + (yi,) + (1,) * (seq.n - step)
            y = int("".join(map(str, yvec)), 2)
            for bi in (0, 1):
                out[k, yi, :, bi] = marg[x, y, :, (hbits << 1) | bi]
    norms = out.sum(axis=(2, 3))
    if np.any(norms < ZERO_PROB):
        raise ConditioningError(f"history {history} has zero probability")
    return out / norms[:, :, None, None]


def sample_mode(theta1: float, xis: Sequence[float], gammas: Sequence[float], shots: int, seed: int,
                max_steps: int = DEFAULT_MAX_STEPS):
    """Simulate ``shots`` protocol rounds with random inputs.

    Alice picks a setting uniformly; device ``i`` picks sigma_z with
    probability ``gammas[i]``.  Returns ``(counts, seq)`` where ``counts`` has
    the same shape as ``seq.table``.
    """
    if shots < 1:
        raise DomainError("shots must be >= 1")
    if len(gammas) != len(xis):
        raise DomainError("one gamma per step is required")
    for g in gammas:
        if not (0.0 < g < 1.0):
            raise DomainError(f"gamma must lie in (0, 1), got {g!r}")
    _, seq = run_sequence(theta1, xis, max_steps=max_steps)
    n = seq.n
    X = len(seq.settings)
    py = np.ones(2**n)
    for y in range(2**n):
        for g, bit in zip(gammas, bits_to_tuple(y, n)):
            py[y] *= g if bit == 0 else 1.0 - g
    p_inputs = np.outer(np.full(X, 1.0 / X), py).reshape(-1)
    rng = np.random.default_rng(seed)
    input_counts = rng.multinomial(shots, p_inputs / p_inputs.sum()).reshape(X, 2**n)
    counts = np.zeros_like(seq.table, dtype=np.int64)
    for x in range(X):
        for y in range(2**n):
            m = int(input_counts[x, y])
            if m == 0:
                continue
            p = seq.table[x, y].reshape(-1)
            counts[x, y] = rng.multinomial(m, p / p.sum()).reshape(2, 2**n)
    return counts, seq


def frequencies(counts: np.ndarray) -> np.ndarray:
    tot = counts.sum(axis=(2, 3), keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(tot > 0, counts / np.maximum(tot, 1), 0.0)


def tree_json(tree: BranchTree) -> str:
    return json.dumps(tree.to_json(), indent=2, sort_keys=True)
