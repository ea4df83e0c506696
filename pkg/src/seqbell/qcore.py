"""Dense complex linear algebra for one and two qubits.

Matrices are plain ``numpy`` arrays of dtype ``complex128``.  Two-qubit
amplitudes are ordered ``|00>, |01>, |10>, |11>`` with Alice's qubit first.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NormalizationError, NotHermitian

ALG_TOL = 1e-12
DECOMP_TOL = 1e-10

I2 = np.eye(2, dtype=complex)
SX = np.array([[0, 1], [1, 0]], dtype=complex)
SY = np.array([[0, -1j], [1j, 0]], dtype=complex)
SZ = np.array([[1, 0], [0, -1]], dtype=complex)


def as_mat2(m) -> np.ndarray:
    a = np.asarray(m, dtype=complex)
    if a.shape != (2, 2):
        raise ValueError(f"expected a 2x2 matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("matrix has non-finite entries")
    return a


def is_hermitian(m, tol: float = ALG_TOL) -> bool:
    m = np.asarray(m)
    return bool(np.max(np.abs(m - m.conj().T)) <= tol)


def is_unitary(m, tol: float = ALG_TOL) -> bool:
    m = np.asarray(m)
    return bool(np.max(np.abs(m.conj().T @ m - np.eye(m.shape[0]))) <= tol)


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=complex)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class PureBipartiteState:
    """Normalized two-qubit pure state."""

    amps: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.amps, dtype=complex).reshape(-1)
        if a.shape != (4,):
            raise ValueError("a two-qubit state has exactly 4 amplitudes")
        if not np.all(np.isfinite(a)):
            raise ValueError("amplitudes must be finite")
        norm2 = float(np.vdot(a, a).real)
        if abs(norm2 - 1.0) > ALG_TOL:
            raise NormalizationError(f"state norm^2 = {norm2!r}, expected 1")
        object.__setattr__(self, "amps", _frozen(a))

    @classmethod
    def from_vector(cls, vec, normalize: bool = True) -> "PureBipartiteState":
        v = np.asarray(vec, dtype=complex).reshape(-1)
        if normalize:
            n = np.linalg.norm(v)
            if n == 0:
                raise NormalizationError("cannot normalize the zero vector")
            v = v / n
        return cls(v)

    @property
    def coeffs(self) -> np.ndarray:
        """2x2 coefficient matrix ``C[i, j]`` of ``|i>|j>``."""
        return self.amps.reshape(2, 2)

    @property
    def density(self) -> np.ndarray:
        return np.outer(self.amps, self.amps.conj())


@dataclass(frozen=True, eq=False)
class SchmidtForm:
    """``(u_alice (x) v_bob)(cos theta |00> + sin theta |11>)``."""

    theta: float
    u_alice: np.ndarray
    v_bob: np.ndarray

    def state_vector(self) -> np.ndarray:
        base = np.array([np.cos(self.theta), 0, 0, np.sin(self.theta)], dtype=complex)
        return np.kron(self.u_alice, self.v_bob) @ base


def tensor_product(a, b) -> np.ndarray:
    return np.kron(np.asarray(a, dtype=complex), np.asarray(b, dtype=complex))


def bob_marginal(s: PureBipartiteState) -> np.ndarray:
    """Reduced density matrix of Bob's qubit (partial trace over Alice)."""
    c = s.coeffs
    rho = c.T @ c.conj()
    return 0.5 * (rho + rho.conj().T)


def alice_marginal(s: PureBipartiteState) -> np.ndarray:
    c = s.coeffs
    rho = c @ c.conj().T
    return 0.5 * (rho + rho.conj().T)


def expectation(s: PureBipartiteState, a, b) -> float:
    """``<s| a (x) b |s>`` for Hermitian ``a`` (Alice) and ``b`` (Bob)."""
    a = as_mat2(a)
    b = as_mat2(b)
    if not is_hermitian(a) or not is_hermitian(b):
        raise NotHermitian("expectation requires Hermitian observables")
    c = s.coeffs
    # <psi|a(x)b|psi> = tr(C^dag a C b^T)
    val = np.trace(c.conj().T @ a @ c @ b.T)
    return float(val.real)


def apply_bob_operator(s: PureBipartiteState, m) -> tuple[np.ndarray, float]:
    """Apply ``I (x) m`` and return the unnormalized vector with its squared norm."""
    m = as_mat2(m)
    out = (s.coeffs @ m.T).reshape(4)
    return out, float(np.vdot(out, out).real)


def apply_alice_operator(s: PureBipartiteState, m) -> tuple[np.ndarray, float]:
    m = as_mat2(m)
    out = (m @ s.coeffs).reshape(4)
    return out, float(np.vdot(out, out).real)


def _fix_phase(vec: np.ndarray) -> complex:
    """Phase that makes the first largest-modulus component real and >= 0."""
    mags = np.abs(vec)
    k = int(np.argmax(mags >= mags.max() - 1e-15))
    if mags[k] == 0:
        return 1.0
    return np.conj(vec[k]) / mags[k]


def schmidt_canonicalize(s: PureBipartiteState, degenerate_tol: float = 1e-11) -> SchmidtForm:
    """Schmidt decomposition with a deterministic phase convention.

    Singular values are taken in descending order so ``theta`` lies in
    ``[0, pi/4]``.  Each of Alice's basis vectors is rephased so its first
    largest-modulus component is real and nonnegative; Bob's vectors absorb
    the compensating phase.  When the two Schmidt coefficients coincide the
    Alice basis is pinned to the identity.
    """
    c = s.coeffs
    u, sv, vh = np.linalg.svd(c)
    if sv[0] - sv[1] <= degenerate_tol:
        # any Alice basis works; take I so that C = (1/sqrt2) W with W unitary
        w = u @ vh
        return SchmidtForm(theta=float(np.pi / 4), u_alice=_frozen(I2), v_bob=_frozen(w.T))
    theta = float(np.arctan2(sv[1], sv[0]))
    v = vh.T  # C = U diag(sv) V^T in the bilinear sense: sum_k sv_k u_k (x) v_k
    u = u.copy()
    v = v.copy()
    for k in range(2):
        ph = _fix_phase(u[:, k])
        u[:, k] *= ph
        v[:, k] *= np.conj(ph)
    return SchmidtForm(theta=theta, u_alice=_frozen(u), v_bob=_frozen(v))
