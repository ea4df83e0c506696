"""Moment-matrix (NPA) relaxations for two-party, two-outcome scenarios.

Each dichotomic setting is represented by the projector onto outcome +1,
``P = (1 + O)/2``.  Operator words are tuples of letters ``(party, setting)``
with party 0 for Alice and 1 for Bob.  Alice's letters commute with Bob's
and projectors are idempotent; letters of one party do not otherwise
commute.  Moment matrices are taken real symmetric, which identifies each
word with its reverse.

The guessing-probability relaxation splits the observed behaviour into one
unnormalized moment matrix per guess ``e`` of Bob's outcome for the target
input, and maximizes the probability that the guess is right.
"""
from __future__ import annotations

import enum
import itertools
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.linalg as sla

from . import sdp
from .bell import BellParams, CertifiedBits
from .errors import CapacityError, ConsistencyError, DomainError, NormalizationError, SolverError

Letter = tuple[int, int]
Word = tuple[Letter, ...]
IDENTITY: Word = ()

MAX_LEVEL = 3


@dataclass(frozen=True)
class Scenario:
    alice_settings: int = 2
    bob_settings: int = 2

    def __post_init__(self):
        if self.alice_settings < 1 or self.bob_settings < 1:
            raise DomainError("setting counts must be >= 1")

    def letters(self) -> list[Letter]:
        return [(0, x) for x in range(self.alice_settings)] + [(1, y) for y in range(self.bob_settings)]


def _collapse(letters: Sequence[Letter]) -> tuple[Letter, ...]:
    out: list[Letter] = []
    for l in letters:
        if out and out[-1] == l:
            continue
        out.append(l)
    return tuple(out)


def normal_form(word: Sequence[Letter]) -> Word:
    """Alice letters first, then Bob letters, with repeats collapsed."""
    a = _collapse([l for l in word if l[0] == 0])
    b = _collapse([l for l in word if l[0] == 1])
    return a + b


def adjoint(word: Word) -> Word:
    a = tuple(l for l in word if l[0] == 0)
    b = tuple(l for l in word if l[0] == 1)
    return a[::-1] + b[::-1]


def moment_key(word: Sequence[Letter]) -> Word:
    """Canonical label of ``<word>`` in a real moment matrix."""
    w = normal_form(word)
    return min(w, adjoint(w))


def word_str(word: Word) -> str:
    if not word:
        return "1"
    return "".join(("A" if p == 0 else "B") + str(s) for p, s in word)


@dataclass(frozen=True)
class MonomialBasis:
    scenario: Scenario
    level: int
    words: tuple[Word, ...]

    def __len__(self) -> int:
        return len(self.words)

    def index(self, word: Word) -> int:
        return self.words.index(word)


def build_basis(s: Scenario, level: int) -> MonomialBasis:
    """Words of length <= ``level`` in normal form.

    Order: identity, Alice singles, Bob singles, then longer words by
    length and lexicographically.
    """
    if level < 1:
        raise DomainError("level must be >= 1")
    if level > MAX_LEVEL:
        raise CapacityError(f"level {level} exceeds the supported maximum {MAX_LEVEL}")
    letters = s.letters()
    seen = {IDENTITY}
    words: list[Word] = [IDENTITY]
    for length in range(1, level + 1):
        batch = set()
        for w in itertools.product(letters, repeat=length):
            nf = normal_form(w)
            if len(nf) == length and nf not in seen:
                batch.add(nf)
        for w in sorted(batch):
            seen.add(w)
            words.append(w)
    return MonomialBasis(s, level, tuple(words))


def moment_structure(basis: MonomialBasis) -> dict[Word, list[tuple[int, int]]]:
    """Upper-triangle positions of each distinct moment, in row-major order."""
    pos: dict[Word, list[tuple[int, int]]] = {}
    w = basis.words
    for i in range(len(w)):
        for j in range(i, len(w)):
            key = moment_key(adjoint(w[i]) + w[j])
            pos.setdefault(key, []).append((i, j))
    return pos


class MomentProgram:
    """Moment matrices written as an affine function of free parameters.

    Each block is a moment matrix over ``basis``; the moment vector ``v``
    stacks the distinct moments of all blocks.  Linear equalities ``G v = h``
    are eliminated by ``v = v0 + N t`` with ``N`` an orthonormal null-space
    basis of ``G``.  The program maximizes ``w . v`` and is handed to the
    solver in its dual (minimization) form: the parameters ``t`` are the
    dual variables and the moment matrices are the dual slack blocks.
    """

    def __init__(self, basis: MonomialBasis, n_blocks: int):
        self.basis = basis
        self.n_blocks = n_blocks
        self.structure = moment_structure(basis)
        self.keys = list(self.structure)
        self.key_index = {k: i for i, k in enumerate(self.keys)}
        self.n_keys = len(self.keys)
        self._eq_rows: list[np.ndarray] = []
        self._eq_rhs: list[float] = []
        self.objective = np.zeros(self.n_blocks * self.n_keys)

    def var(self, block: int, word: Sequence[Letter]) -> int:
        return block * self.n_keys + self.key_index[moment_key(word)]

    def add_equality(self, coeffs: dict[int, float], rhs: float) -> None:
        row = np.zeros(self.n_blocks * self.n_keys)
        for k, v in coeffs.items():
            row[k] += v
        self._eq_rows.append(row)
        self._eq_rhs.append(float(rhs))

    def add_objective(self, coeffs: dict[int, float]) -> None:
        for k, v in coeffs.items():
            self.objective[k] += v

    def equalities(self) -> tuple[np.ndarray, np.ndarray]:
        """``(G, h)`` of the imposed moment equalities."""
        return np.array(self._eq_rows), np.array(self._eq_rhs)

    def parametrization(self) -> tuple[np.ndarray, np.ndarray]:
        nv = self.n_blocks * self.n_keys
        if not self._eq_rows:
            return np.zeros(nv), np.eye(nv)
        G = np.array(self._eq_rows)
        h = np.array(self._eq_rhs)
        v0, *_ = np.linalg.lstsq(G, h, rcond=None)
        if np.max(np.abs(G @ v0 - h)) > 1e-9:
            raise ConsistencyError("moment equalities are inconsistent")
        N = sla.null_space(G)
        N[np.abs(N) < 1e-15] = 0.0
        return v0, N

    def _basis_matrices(self) -> list[np.ndarray]:
        d = len(self.basis)
        mats = []
        for key in self.keys:
            F = np.zeros((d, d))
            for i, j in self.structure[key]:
                F[i, j] = F[j, i] = 1.0
            mats.append(F)
        return mats

    def build(self) -> tuple[sdp.SdpProblem, np.ndarray, np.ndarray, float]:
        """Return ``(problem, v0, N, offset)``.

        The maximized moment objective equals ``offset - b . y`` for the
        dual variables ``y`` of ``problem``.
        """
        v0, N = self.parametrization()
        F = np.array(self._basis_matrices())
        d = len(self.basis)
        prob = sdp.SdpProblem([d] * self.n_blocks)
        iu = np.triu_indices(d)
        blocks = [slice(k * self.n_keys, (k + 1) * self.n_keys) for k in range(self.n_blocks)]
        # S_blk = sum_j t_j A_j - C,  A_j = sum_k N[k, j] F_k,  C = -sum_k v0[k] F_k
        for blk, sl in enumerate(blocks):
            prob.c[blk] = -np.einsum("k,kij->ij", v0[sl], F)
        b = -(N.T @ self.objective)
        for j in range(N.shape[1]):
            entries = []
            for blk, sl in enumerate(blocks):
                if not np.any(N[sl, j]):
                    continue
                A = np.einsum("k,kij->ij", N[sl, j], F)
                entries += [(blk, r, c, A[r, c]) for r, c in zip(*iu) if A[r, c] != 0.0]
            prob.add_constraint(entries, b[j])
        offset = float(self.objective @ v0)
        return prob, v0, N, offset

    def moment_matrices(self, v: np.ndarray) -> list[np.ndarray]:
        F = np.array(self._basis_matrices())
        return [np.einsum("k,kij->ij", v[b * self.n_keys:(b + 1) * self.n_keys], F) for b in range(self.n_blocks)]


# --- behaviours ---------------------------------------------------------------

def projector_moments(dist) -> dict[Word, float]:
    """Moments ``<P_A>``, ``<P_B>``, ``<P_A P_B>`` of a table ``P[x, y, a, b]``.

    Index 0 of ``a``/``b`` is outcome +1.  Requires a no-signaling table.
    """
    p = np.asarray(dist, dtype=float)
    X, Y = p.shape[:2]
    check_no_signaling(p)
    mom: dict[Word, float] = {IDENTITY: 1.0}
    for x in range(X):
        mom[((0, x),)] = float(np.mean(p[x, :, 0, :].sum(axis=1)))
    for y in range(Y):
        mom[((1, y),)] = float(np.mean(p[:, y, :, 0].sum(axis=1)))
    for x in range(X):
        for y in range(Y):
            mom[((0, x), (1, y))] = float(p[x, y, 0, 0])
    return mom


def check_no_signaling(p: np.ndarray, tol: float = 1e-9) -> None:
    if np.any(p < -tol) or np.any(np.abs(p.sum(axis=(2, 3)) - 1.0) > tol):
        raise NormalizationError("behaviour is not normalized")
    pa = p.sum(axis=3)  # [x, y, a]
    pb = p.sum(axis=2)  # [x, y, b]
    if np.max(np.abs(pa - pa[:, :1, :])) > tol or np.max(np.abs(pb - pb[:1, :, :])) > tol:
        raise ConsistencyError("behaviour is signaling")


def bell_moment_coeffs(params: BellParams) -> dict[Word, float]:
    """The Bell functional written in projector moments (including the constant)."""
    coef: dict[Word, float] = {}

    def add(w, v):
        coef[w] = coef.get(w, 0.0) + v

    A = lambda x: ((0, x),)
    B = lambda y: ((1, y),)
    # <B> = 2<P_B> - 1 ; <AB> = 4<P_A P_B> - 2<P_A> - 2<P_B> + 1
    add(B(0), 2 * params.beta)
    add(IDENTITY, -params.beta)
    for x, y, w in ((0, 0, params.alpha), (1, 0, params.alpha), (0, 1, 1.0), (1, 1, -1.0)):
        add(((0, x), (1, y)), 4 * w)
        add(A(x), -2 * w)
        add(B(y), -2 * w)
        add(IDENTITY, w)
    return coef


class Mode(enum.Enum):
    FULL_STATISTICS = "full"
    BELL_VALUE = "bell"


@dataclass
class GuessingSdp:
    """A built guessing relaxation.

    The two moment matrices are the dual slack blocks of ``problem``;
    ``offset - b . y`` is the guessing probability at dual point ``y`` and
    ``offset - <C, X>`` is the bound certified by a primal point ``X``.
    """

    problem: sdp.SdpProblem
    program: MomentProgram = field(repr=False)
    target_input: int
    mode: Mode
    offset: float
    v0: np.ndarray = field(repr=False)
    null: np.ndarray = field(repr=False)

    @property
    def basis(self) -> MonomialBasis:
        return self.program.basis

    @property
    def block_dim(self) -> int:
        return len(self.basis)


def _observed_words(s: Scenario) -> list[Word]:
    words = [IDENTITY]
    words += [((0, x),) for x in range(s.alice_settings)]
    words += [((1, y),) for y in range(s.bob_settings)]
    words += [((0, x), (1, y)) for x in range(s.alice_settings) for y in range(s.bob_settings)]
    return words


def build_guessing_sdp(p_obs, target_input: int, basis: MonomialBasis, mode: Mode = Mode.FULL_STATISTICS,
                       bell: BellParams | None = None, bell_value: float | None = None) -> GuessingSdp:
    """Relaxation of Eve's probability to guess Bob's outcome for ``target_input``.

    Block ``0`` is the part of the behaviour where Eve guesses +1, block ``1``
    where she guesses -1.  ``FULL_STATISTICS`` ties the summed blocks to every
    observed moment; ``BELL_VALUE`` ties only the normalization and the
    value of the Bell functional.
    """
    s = basis.scenario
    if not (0 <= target_input < s.bob_settings):
        raise DomainError("target input out of range")
    prog = MomentProgram(basis, 2)
    if mode is Mode.FULL_STATISTICS:
        p = np.asarray(p_obs, dtype=float)
        if p.shape[:2] != (s.alice_settings, s.bob_settings):
            raise DomainError("behaviour shape does not match the scenario")
        mom = projector_moments(p)
        for w in _observed_words(s):
            prog.add_equality({prog.var(0, w): 1.0, prog.var(1, w): 1.0}, mom[w])
    else:
        if bell is None or bell_value is None:
            raise DomainError("BELL_VALUE mode needs Bell parameters and a target value")
        if s.alice_settings != 2 or s.bob_settings != 2:
            raise DomainError("BELL_VALUE mode is defined for the 2x2 scenario")
        prog.add_equality({prog.var(0, IDENTITY): 1.0, prog.var(1, IDENTITY): 1.0}, 1.0)
        coeffs: dict[int, float] = {}
        for w, c in bell_moment_coeffs(bell).items():
            for blk in (0, 1):
                k = prog.var(blk, w)
                coeffs[k] = coeffs.get(k, 0.0) + c
        prog.add_equality(coeffs, float(bell_value))

    # <P_B>_0 + <1>_1 - <P_B>_1
    pb = ((1, target_input),)
    prog.add_objective({prog.var(0, pb): 1.0})
    prog.add_objective({prog.var(1, IDENTITY): 1.0})
    prog.add_objective({prog.var(1, pb): -1.0})
    prob, v0, N, offset = prog.build()
    return GuessingSdp(prob, prog, target_input, mode, offset, v0, N)


@dataclass
class GuessingResult:
    certified: CertifiedBits
    solution: sdp.SdpSolution
    level: int
    g_moment: float

    @property
    def g_upper(self) -> float:
        return self.certified.g_upper

    @property
    def bits(self) -> float:
        return self.certified.bits

    @property
    def moment_matrices(self) -> list[np.ndarray]:
        return [0.5 * (S + S.T) for S in self.solution.s_blocks]


CERT_RES_TOL = 1e-8
CERT_GAP_TOL = 5e-2


def _certificate_ok(sol: sdp.SdpSolution) -> bool:
    """A stalled run still certifies a bound if its certificate side is feasible."""
    if sol.primal_res > CERT_RES_TOL or sol.gap > CERT_GAP_TOL:
        return False
    return all(np.linalg.eigvalsh(0.5 * (x + x.T))[0] >= -1e-9 for x in sol.x_blocks)


def _solve_certified(problem: sdp.SdpProblem, opts: sdp.SolverOptions | None) -> sdp.SdpSolution:
    sol = sdp.solve(problem, opts)
    if sol.optimal or (sol.status is not sdp.Status.INFEASIBLE and _certificate_ok(sol)):
        return sol
    raise SolverError(
        f"SDP solver stopped with status {sol.status.value}",
        diagnostics=dict(status=sol.status.value, gap=sol.gap, primal_res=sol.primal_res,
                         dual_res=sol.dual_res, iterations=sol.iterations),
    )


def solve_guessing(gsdp: GuessingSdp, opts: sdp.SolverOptions | None = None) -> GuessingResult:
    """Solve the relaxation and return the bound certified by the primal point.

    Near extremal behaviours the optimal certificate is not attained and the
    iteration stalls a little short of the optimum; the feasible certificate
    reached by then is still a valid, slightly loose, bound.
    """
    sol = _solve_certified(gsdp.problem, opts)
    g_cert = gsdp.offset - sol.primal_obj
    g_mom = gsdp.offset - sol.dual_obj
    return GuessingResult(CertifiedBits.from_guess(g_cert), sol, gsdp.basis.level, g_mom)


def guessing_probability(p_obs, target_input: int = 1, level: int = 2, mode: Mode = Mode.FULL_STATISTICS,
                         bell: BellParams | None = None, bell_value: float | None = None,
                         opts: sdp.SolverOptions | None = None) -> GuessingResult:
    p = np.asarray(p_obs, dtype=float)
    scen = Scenario(p.shape[0], p.shape[1]) if mode is Mode.FULL_STATISTICS else Scenario(2, 2)
    basis = build_basis(scen, level)
    return solve_guessing(build_guessing_sdp(p, target_input, basis, mode, bell, bell_value), opts)


def build_bell_sdp(params: BellParams, basis: MonomialBasis) -> tuple[sdp.SdpProblem, float]:
    """Bell maximization over one normalized moment matrix; returns ``(problem, offset)``."""
    prog = MomentProgram(basis, 1)
    prog.add_equality({prog.var(0, IDENTITY): 1.0}, 1.0)
    prog.add_objective({prog.var(0, w): c for w, c in bell_moment_coeffs(params).items()})
    prob, _, _, offset = prog.build()
    return prob, offset


def bell_max_sdp(params: BellParams, basis: MonomialBasis, opts: sdp.SolverOptions | None = None) -> float:
    """NPA upper bound on the quantum maximum of the Bell functional."""
    if basis.scenario != Scenario(2, 2):
        raise DomainError("the Bell family is defined for the 2x2 scenario")
    prob, offset = build_bell_sdp(params, basis)
    sol = _solve_certified(prob, opts)
    return offset - sol.primal_obj
