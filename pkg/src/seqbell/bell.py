"""Bell functionals, their bounds, and the analytic randomness bound.

The functional family is
``I = beta<B0> + alpha(<A0B0> + <A1B0>) + <A0B1> - <A1B1>`` with
``alpha >= 1``, ``beta >= 0`` and ``alpha*beta < 2``; ``alpha = 1`` with
``beta = beta_of_theta(theta)`` is the state-tailored family and
``(1, 0)`` is CHSH.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DomainError, NormalizationError

log = logging.getLogger(__name__)

BOUNDARY_TOL = 1e-9


@dataclass(frozen=True)
class BellParams:
    alpha: float = 1.0
    beta: float = 0.0

    def __post_init__(self):
        if self.alpha < 1.0 or self.beta < 0.0:
            raise DomainError("need alpha >= 1 and beta >= 0")
        if self.alpha * self.beta >= 2.0:
            raise DomainError("need alpha * beta < 2")

    @classmethod
    def for_theta(cls, theta: float) -> "BellParams":
        return cls(1.0, beta_of_theta(theta))

    @property
    def gap(self) -> float:
        """``2 - alpha*beta``."""
        return 2.0 - self.alpha * self.beta


CHSH = BellParams(1.0, 0.0)


@dataclass(frozen=True)
class CorrelatorSet:
    b0: float
    b1: float
    e00: float
    e01: float
    e10: float
    e11: float

    def __post_init__(self):
        for name in ("b0", "b1", "e00", "e01", "e10", "e11"):
            v = getattr(self, name)
            if not (-1.0 - 1e-12 <= v <= 1.0 + 1e-12):
                raise DomainError(f"correlator {name} = {v!r} outside [-1, 1]")


@dataclass(frozen=True)
class CertifiedBits:
    g_upper: float
    bits: float

    @classmethod
    def from_guess(cls, g: float) -> "CertifiedBits":
        g = min(1.0, max(0.5, float(g)))
        return cls(g, min_entropy(g))


def min_entropy(g: float) -> float:
    return 0.0 if g >= 1.0 else -math.log2(g)


def beta_of_theta(theta: float) -> float:
    if not (0.0 < theta < math.pi / 2):
        raise DomainError(f"theta must lie in (0, pi/2), got {theta!r}")
    s = math.sin(2 * theta)
    return 2.0 * math.cos(2 * theta) / math.sqrt(1.0 + s * s)


def two_minus_beta(theta: float) -> float:
    """``2 - beta_of_theta(theta)`` without cancellation for small theta."""
    if not (0.0 < theta < math.pi / 2):
        raise DomainError(f"theta must lie in (0, pi/2), got {theta!r}")
    s = math.sin(2 * theta)
    c = math.cos(2 * theta)
    r = math.sqrt(1.0 + s * s)
    # sqrt(1+s^2) - c = (1 + s^2 - c^2)/(sqrt(1+s^2) + c) = 2 s^2/(r + c)
    if c > 0:
        return 2.0 * (2.0 * s * s / (r + c)) / r
    return 2.0 * (r - c) / r


def mu_of_theta(theta: float) -> float:
    return math.atan(math.sin(2 * theta))


def eval_inequality(c: CorrelatorSet, p: BellParams) -> float:
    return p.beta * c.b0 + p.alpha * (c.e00 + c.e10) + c.e01 - c.e11


def classical_bound(p: BellParams) -> float:
    return p.beta + 2.0 * p.alpha


def quantum_max(p: BellParams) -> float:
    return math.sqrt((1.0 + p.alpha**2) * (4.0 + p.beta**2))


def _deficit(i_value: float, p: BellParams) -> float:
    i_max = quantum_max(p)
    if i_value > i_max + BOUNDARY_TOL:
        raise DomainError(f"Bell value {i_value!r} exceeds the quantum maximum {i_max!r}")
    c = classical_bound(p)
    if i_value <= 0.5 * (c + i_max):
        # I_max^2 = c^2 + gap^2: exact at the classical bound
        return max(0.0, p.gap**2 + (c - i_value) * (c + i_value))
    return max(0.0, (i_max - i_value) * (i_max + i_value))


def b1_bound(i_value: float, p: BellParams) -> float:
    """Upper bound on ``|<B1>|`` implied by a Bell value."""
    return min(1.0, math.sqrt(_deficit(i_value, p)) / p.gap)


def guessing_bound_f(i_value: float, p: BellParams) -> CertifiedBits:
    """Analytic upper bound on the guessing probability of Bob's input-1 outcome."""
    g = 0.5 + math.sqrt(_deficit(i_value, p)) / (2.0 * p.gap)
    return CertifiedBits.from_guess(min(1.0, g))


def _f_for_theta(i_value: float, theta: float) -> float:
    p = BellParams.for_theta(theta)
    gap = two_minus_beta(theta)
    return min(1.0, 0.5 + math.sqrt(_deficit(i_value, p)) / (2.0 * gap))


def guessing_bound_for_theta(i_value: float, theta: float) -> CertifiedBits:
    """``guessing_bound_f`` with ``beta = beta(theta)``, stable for small angles."""
    return CertifiedBits.from_guess(_f_for_theta(i_value, theta))


def tailored_shortfall(theta: float, xi: float) -> float:
    """``I_max - I`` for the tailored measurements on ``psi(theta)`` with
    Bob's second observable weakened by ``xi``, free of cancellation."""
    s = math.sin(2 * theta)
    return 4.0 * math.sin(xi) ** 2 * s * s / math.sqrt(1.0 + s * s)


def tailored_bound(theta: float, xi: float) -> CertifiedBits:
    """Analytic bound at the tailored point ``(theta, xi)``.

    Same value as ``guessing_bound_for_theta(I, theta)`` but accurate for
    angles where ``I_max^2 - I^2`` falls below double precision.
    """
    i_max = quantum_max(BellParams.for_theta(theta))
    d = tailored_shortfall(theta, xi)
    g = 0.5 + math.sqrt(d * (2.0 * i_max - d)) / (2.0 * two_minus_beta(theta))
    return CertifiedBits.from_guess(min(1.0, g))


def sequence_certificate(step_values: Sequence[tuple[float, float]]) -> float:
    """ASYMPTOTIC certificate ``-sum_i log2 f(I_i)`` for a measurement sequence.

    Each entry is ``(bell value, canonical angle)`` of one step, evaluated
    with the functional tailored to that angle.  The product of per-step
    bounds is the guessing probability of the whole sequence only in the
    limit where every step reaches its maximal violation; at finite
    violation it is an estimate, not a bound.
    """
    total = 0.0
    for i_value, theta in step_values:
        if two_minus_beta(theta) < 1e-5:
            log.warning("theta = %.3g: the Bell deficit is below double precision; "
                        "use tailored_bound for tailored points", theta)
        total += min_entropy(_f_for_theta(i_value, theta))
    return total


def correlators_from_distribution(dist, tol: float = 1e-9) -> CorrelatorSet:
    """Correlators of a table ``P[x, y, a, b]`` (index 0 = outcome +1)."""
    p = np.asarray(dist, dtype=float)
    if p.shape != (2, 2, 2, 2):
        raise ValueError("expected a (2, 2, 2, 2) table")
    if np.any(p < -tol) or np.any(np.abs(p.sum(axis=(2, 3)) - 1.0) > tol):
        raise NormalizationError("distribution is not normalized")
    sign = np.array([1.0, -1.0])
    e = np.einsum("xyab,a,b->xy", p, sign, sign)
    b = np.einsum("xyab,b->xy", p, sign)[0]
    clip = lambda v: float(min(1.0, max(-1.0, v)))
    return CorrelatorSet(
        b0=clip(b[0]), b1=clip(b[1]),
        e00=clip(e[0, 0]), e01=clip(e[0, 1]), e10=clip(e[1, 0]), e11=clip(e[1, 1]),
    )


def deterministic_correlators(a0: int, a1: int, b0: int, b1: int) -> CorrelatorSet:
    return CorrelatorSet(float(b0), float(b1), float(a0 * b0), float(a0 * b1), float(a1 * b0), float(a1 * b1))


def ideal_correlators(theta: float, xi: float = 0.0) -> CorrelatorSet:
    """Closed-form correlators of the tailored measurements on ``psi(theta)``
    with Bob's second observable weakened to ``cos(2 xi) sigma_x``."""
    mu = mu_of_theta(theta)
    s2 = math.sin(2 * theta)
    w = math.cos(2 * xi)
    return CorrelatorSet(
        b0=math.cos(2 * theta), b1=0.0,
        e00=math.cos(mu), e10=math.cos(mu),
        e01=w * math.sin(mu) * s2, e11=-w * math.sin(mu) * s2,
    )
