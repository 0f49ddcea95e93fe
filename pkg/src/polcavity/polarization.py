"""Pure and mixed polarization states on the {H, V} basis.

Conventions used throughout the package:

* Stokes components are ``s_hv = |a|^2 - |b|^2``, ``s_da = 2 Re(conj(a) b)``
  and ``s_rl = 2 Im(conj(a) b)`` for a normalized Jones vector ``(a, b)``, so
  ``(1, i)/sqrt(2)`` is the right-circular state with ``s_rl = +1``.
* "Purity" means the degree of polarization, i.e. the Euclidean norm of the
  Poincaré vector.  ``trace_purity`` converts it to ``Tr(rho^2)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    DegenerateMeasurementError,
    InvalidMixtureError,
    InvalidStateError,
    UnphysicalStateError,
)

# validity tolerances: constructed objects vs. objects derived from measured data
ATOL = 1e-12
DATA_ATOL = 1e-9

SIGMA_HV = np.array([[1, 0], [0, -1]], dtype=complex)
SIGMA_DA = np.array([[0, 1], [1, 0]], dtype=complex)
SIGMA_RL = np.array([[0, -1j], [1j, 0]], dtype=complex)
PAULI = (SIGMA_HV, SIGMA_DA, SIGMA_RL)


@dataclass(frozen=True)
class JonesVector:
    """Complex field amplitudes on the horizontal and vertical axes."""

    alpha: complex
    beta: complex

    def __post_init__(self):
        object.__setattr__(self, "alpha", complex(self.alpha))
        object.__setattr__(self, "beta", complex(self.beta))

    @property
    def norm2(self) -> float:
        return abs(self.alpha) ** 2 + abs(self.beta) ** 2

    def is_normalized(self, atol: float = ATOL) -> bool:
        return abs(self.norm2 - 1.0) <= atol

    def normalized(self) -> "JonesVector":
        n2 = self.norm2
        if n2 <= 0.0:
            raise InvalidStateError("cannot normalize a zero Jones vector")
        n = np.sqrt(n2)
        return JonesVector(self.alpha / n, self.beta / n)

    def as_array(self) -> np.ndarray:
        return np.array([self.alpha, self.beta], dtype=complex)

    def projector(self) -> np.ndarray:
        v = self.normalized().as_array()
        return np.outer(v, v.conj())

    @classmethod
    def from_angles(cls, theta: float, phi: float) -> "JonesVector":
        """Pure state at polar angle ``theta`` (from the H pole) and azimuth
        ``phi`` (from D towards R) on the Poincaré sphere."""
        return cls(np.cos(theta / 2), np.exp(1j * phi) * np.sin(theta / 2))

    def angles(self) -> tuple[float, float]:
        """Inverse of :meth:`from_angles`; ``phi`` is 0 at the poles."""
        s = stokes_from_jones(self)
        theta = float(np.arccos(np.clip(s.s_hv, -1.0, 1.0)))
        phi = float(np.arctan2(s.s_rl, s.s_da)) if np.hypot(s.s_da, s.s_rl) > ATOL else 0.0
        return theta, phi


_S2 = 1 / np.sqrt(2)
H = JonesVector(1, 0)
V = JonesVector(0, 1)
D = JonesVector(_S2, _S2)
A = JonesVector(_S2, -_S2)
R = JonesVector(_S2, 1j * _S2)
L = JonesVector(_S2, -1j * _S2)
BASIS_STATES = {"H": H, "V": V, "D": D, "A": A, "R": R, "L": L}


@dataclass(frozen=True)
class StokesVector:
    """Normalized Poincaré coordinates plus the total intensity.

    Vectors built from noisy data may poke slightly outside the unit ball;
    no norm check is made here.  Use :meth:`is_physical` when it matters.
    """

    s_hv: float
    s_da: float
    s_rl: float
    intensity: float = 1.0

    def as_array(self) -> np.ndarray:
        return np.array([self.s_hv, self.s_da, self.s_rl], dtype=float)

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.as_array()))

    def is_physical(self, atol: float = DATA_ATOL) -> bool:
        return self.norm**2 <= 1.0 + atol and self.intensity >= 0

    def direction(self) -> np.ndarray:
        """Unit vector along the Poincaré vector."""
        v = self.as_array()
        n = np.linalg.norm(v)
        if n == 0:
            raise InvalidStateError("fully unpolarized state has no direction")
        return v / n

    @classmethod
    def from_array(cls, v: Sequence[float], intensity: float = 1.0) -> "StokesVector":
        return cls(float(v[0]), float(v[1]), float(v[2]), float(intensity))


class PolarizationDensity:
    """Hermitian, unit-trace, positive 2x2 density matrix.

    The matrix is copied and made read-only on construction.
    """

    __slots__ = ("_m",)

    def __init__(self, matrix, atol: float = ATOL):
        m = np.array(matrix, dtype=complex)
        if m.shape != (2, 2):
            raise InvalidStateError(f"density matrix must be 2x2, got shape {m.shape}")
        if not np.allclose(m, m.conj().T, rtol=0, atol=atol):
            raise InvalidStateError("density matrix is not Hermitian")
        if abs(np.trace(m) - 1.0) > atol:
            raise InvalidStateError(f"density matrix trace is {np.trace(m).real:.3g}, not 1")
        if np.linalg.eigvalsh(m).min() < -atol:
            raise InvalidStateError("density matrix has a negative eigenvalue")
        m.setflags(write=False)
        self._m = m

    @property
    def matrix(self) -> np.ndarray:
        return self._m

    def expectation(self, state: JonesVector) -> float:
        """Probability <b|rho|b> of projecting onto ``state``."""
        v = state.normalized().as_array()
        return float(np.real(v.conj() @ self._m @ v))

    def trace_purity(self) -> float:
        return float(np.real(np.trace(self._m @ self._m)))

    def __eq__(self, other):
        if not isinstance(other, PolarizationDensity):
            return NotImplemented
        return np.array_equal(self._m, other._m)

    __hash__ = None

    def __repr__(self):
        return f"PolarizationDensity({self._m.tolist()!r})"


@dataclass(frozen=True)
class IntensitySextet:
    """Six projected intensities, one orthogonal pair per analysis basis."""

    i_h: float
    i_v: float
    i_d: float
    i_a: float
    i_r: float
    i_l: float

    def __post_init__(self):
        for name in ("i_h", "i_v", "i_d", "i_a", "i_r", "i_l"):
            value = float(getattr(self, name))
            if not value >= 0:
                raise InvalidStateError(f"{name} must be >= 0, got {value}")
            object.__setattr__(self, name, value)

    def as_tuple(self) -> tuple[float, ...]:
        return (self.i_h, self.i_v, self.i_d, self.i_a, self.i_r, self.i_l)

    def basis_sums(self) -> tuple[float, float, float]:
        return (self.i_h + self.i_v, self.i_d + self.i_a, self.i_r + self.i_l)

    def basis_disagreement(self) -> float:
        """Largest relative spread among the three basis-pair sums."""
        sums = np.array(self.basis_sums())
        mean = sums.mean()
        if mean <= 0:
            return 0.0
        return float((sums.max() - sums.min()) / mean)


def stokes_from_jones(j: JonesVector) -> StokesVector:
    n = j.norm2
    if n <= 0.0:
        raise InvalidStateError("zero-norm Jones vector")
    c = j.alpha.conjugate() * j.beta
    return StokesVector(
        (abs(j.alpha) ** 2 - abs(j.beta) ** 2) / n,
        2 * c.real / n,
        2 * c.imag / n,
        n,
    )


def density_from_stokes(s: StokesVector, atol: float = ATOL) -> PolarizationDensity:
    """Map a Poincaré vector into the Bloch-ball density matrix."""
    if s.norm**2 > 1.0 + atol:
        raise UnphysicalStateError(f"Poincaré norm {s.norm:.6g} exceeds 1")
    m = 0.5 * (np.eye(2) + s.s_hv * SIGMA_HV + s.s_da * SIGMA_DA + s.s_rl * SIGMA_RL)
    return PolarizationDensity(m, atol=max(atol, ATOL))


def stokes_from_density(rho: PolarizationDensity) -> StokesVector:
    if not isinstance(rho, PolarizationDensity):
        rho = PolarizationDensity(rho)
    m = rho.matrix
    return StokesVector(
        float((m[0, 0] - m[1, 1]).real),
        float(2 * m[0, 1].real),
        float(-2 * m[0, 1].imag),
    )


def degree_of_polarization(s: StokesVector) -> float:
    """Poincaré-vector norm; 1 for a pure state, 0 when unpolarized."""
    return s.norm


def trace_purity(dop: float) -> float:
    """``Tr(rho^2)`` for a state of degree of polarization ``dop``."""
    return 0.5 * (1.0 + dop * dop)


def mix(components: Iterable[tuple[float, JonesVector]]) -> PolarizationDensity:
    """Incoherent, convex mixture of pure states."""
    components = list(components)
    if not components:
        raise InvalidMixtureError("empty mixture")
    weights = np.array([w for w, _ in components], dtype=float)
    if np.any(weights < 0):
        raise InvalidMixtureError("mixture weights must be non-negative")
    if abs(weights.sum() - 1.0) > 1e-9:
        raise InvalidMixtureError(f"mixture weights sum to {weights.sum():.12g}, not 1")
    m = np.zeros((2, 2), dtype=complex)
    for w, j in components:
        if not j.is_normalized(DATA_ATOL):
            raise InvalidStateError("mixture components must be normalized Jones vectors")
        v = j.as_array()
        m += w * np.outer(v, v.conj())
    # exact Hermitian symmetry and unit trace despite rounding in the weights
    m = 0.5 * (m + m.conj().T)
    m /= np.trace(m).real
    return PolarizationDensity(m, atol=DATA_ATOL)


def stokes_from_intensities(sextet: IntensitySextet, return_diagnostic: bool = False):
    """Stokes vector from six projected intensities.

    Each component is the normalized imbalance of one orthogonal pair; the
    intensity is the H/V sum.  With ``return_diagnostic`` the relative
    disagreement among the three pair sums is returned as well.
    """
    pairs = ((sextet.i_h, sextet.i_v), (sextet.i_d, sextet.i_a), (sextet.i_r, sextet.i_l))
    comps = []
    for name, (a, b) in zip(("HV", "DA", "RL"), pairs):
        total = a + b
        if not total > 0:
            raise DegenerateMeasurementError(f"{name} basis sum is {total}, must be positive")
        comps.append((a - b) / total)
    s = StokesVector(comps[0], comps[1], comps[2], sextet.i_h + sextet.i_v)
    if return_diagnostic:
        return s, sextet.basis_disagreement()
    return s
