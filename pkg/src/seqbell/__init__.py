"""Sequential weak-measurement Bell tests and device-independent randomness.

Modules: ``qcore`` (two-qubit algebra), ``protocol`` (exact simulation of
the measurement sequence), ``bell`` (Bell functionals and analytic
bounds), ``npa`` (moment relaxations), ``sdp`` (interior-point solver),
``lab`` (experiment drivers) and ``cli``.
"""

from .bell import CHSH, BellParams, CertifiedBits
from .errors import (
    CapacityError,
    ConditioningError,
    ConsistencyError,
    DomainError,
    NormalizationError,
    NotFound,
    NotHermitian,
    SeqBellError,
    SolverError,
)

__version__ = "0.1.0"

__all__ = [
    "BellParams",
    "CHSH",
    "CertifiedBits",
    "CapacityError",
    "ConditioningError",
    "ConsistencyError",
    "DomainError",
    "NormalizationError",
    "NotFound",
    "NotHermitian",
    "SeqBellError",
    "SolverError",
]
