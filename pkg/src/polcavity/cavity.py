"""Reflection off a birefringent two-mode micropillar cavity.

Light that couples into the fundamental mode (fraction ``eta_in``) picks up
the mode-dependent complex reflection coefficients ``r_H`` and ``r_V``; the
remainder is reflected unchanged.  The two beams have orthogonal spatial
profiles, so the reflected polarization is their incoherent mixture.

All energies are detunings in µeV measured from the cavity centre.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Literal, Sequence

import numpy as np

from .errors import InvalidArgumentError
from .polarization import (
    D,
    JonesVector,
    PolarizationDensity,
    StokesVector,
    mix,
    stokes_from_density,
)

Mode = Literal["H", "V"]


@dataclass(frozen=True)
class CavityParams:
    """Cavity resonance parameters.

    ``omega_c`` is the detuning origin (normally 0).  ``omega_c_abs`` keeps
    the absolute centre energy as free-form metadata; it never enters the
    model.
    """

    delta_omega: float
    kappa_h: float
    kappa_v: float
    eta_out: float
    omega_c: float = 0.0
    omega_c_abs: str | None = field(default=None, compare=False)

    def __post_init__(self):
        if not (self.kappa_h > 0 and self.kappa_v > 0):
            raise InvalidArgumentError("linewidths kappa_h and kappa_v must be positive")
        if not 0.0 <= self.eta_out <= 1.0:
            raise InvalidArgumentError(f"eta_out must lie in [0, 1], got {self.eta_out}")
        if not self.delta_omega >= 0:
            raise InvalidArgumentError("delta_omega must be >= 0")

    @property
    def omega_h(self) -> float:
        return self.omega_c + self.delta_omega / 2

    @property
    def omega_v(self) -> float:
        return self.omega_c - self.delta_omega / 2

    def resonance(self, mode: Mode) -> tuple[float, float]:
        """(centre, linewidth) of one polarization mode."""
        if mode == "H":
            return self.omega_h, self.kappa_h
        if mode == "V":
            return self.omega_v, self.kappa_v
        raise InvalidArgumentError(f"mode must be 'H' or 'V', got {mode!r}")

    def replace(self, **changes) -> "CavityParams":
        return replace(self, **changes)


@dataclass(frozen=True)
class CouplingConfig:
    eta_in: float
    input_state: JonesVector = D

    def __post_init__(self):
        if not 0.0 <= self.eta_in <= 1.0:
            raise InvalidArgumentError(f"eta_in must lie in [0, 1], got {self.eta_in}")
        object.__setattr__(self, "input_state", self.input_state.normalized())


# values fitted to the device studied in the reference measurement
REFERENCE_CAVITY = CavityParams(delta_omega=63.0, kappa_h=105.0, kappa_v=86.0, eta_out=0.53)
REFERENCE_ETA_IN = 0.96


@dataclass(frozen=True)
class ReflectionOutcome:
    r_h: complex
    r_v: complex
    r_mode: float
    r_total: float
    coupled_fraction: float
    psi_m: JonesVector
    rho: PolarizationDensity
    stokes: StokesVector
    degenerate: bool = False

    @property
    def purity(self) -> float:
        return self.stokes.norm


def reflection_coefficient(params: CavityParams, mode: Mode, omega):
    """Complex amplitude reflection coefficient of one polarization mode.

    Works elementwise on arrays of detunings.
    """
    w_i, k_i = params.resonance(mode)
    return 1.0 - 2.0 * params.eta_out / (1.0 - 2j * (np.asarray(omega) - w_i) / k_i)


def reflect(params: CavityParams, coupling: CouplingConfig, omega: float) -> ReflectionOutcome:
    psi_in = coupling.input_state
    eta = coupling.eta_in
    r_h = complex(reflection_coefficient(params, "H", omega))
    r_v = complex(reflection_coefficient(params, "V", omega))
    a = r_h * psi_in.alpha
    b = r_v * psi_in.beta
    r_mode = abs(a) ** 2 + abs(b) ** 2
    r_total = (1.0 - eta) + eta * r_mode

    if r_mode == 0.0 or r_total == 0.0:
        # no coupled intensity: the rotated state carries zero weight
        rho = mix([(1.0, psi_in)])
        return ReflectionOutcome(
            r_h, r_v, r_mode, r_total, 0.0, psi_in, rho,
            _with_intensity(stokes_from_density(rho), r_total), degenerate=True,
        )

    p = eta * r_mode / r_total
    n = np.sqrt(r_mode)
    psi_m = JonesVector(a / n, b / n)
    rho = mix([(p, psi_m), (1.0 - p, psi_in)])
    return ReflectionOutcome(
        r_h, r_v, r_mode, r_total, p, psi_m, rho,
        _with_intensity(stokes_from_density(rho), r_total),
    )


def _with_intensity(s: StokesVector, intensity: float) -> StokesVector:
    return StokesVector(s.s_hv, s.s_da, s.s_rl, intensity)


def _check_grid(omega_grid) -> np.ndarray:
    grid = np.asarray(omega_grid, dtype=float)
    if grid.ndim != 1 or grid.size == 0:
        raise InvalidArgumentError("omega grid must be a non-empty 1-D sequence")
    if np.any(np.diff(grid) <= 0):
        raise InvalidArgumentError("omega grid must be strictly increasing")
    return grid


def scan_curves(params: CavityParams, coupling: CouplingConfig, omega_grid) -> list[tuple[float, ReflectionOutcome]]:
    grid = _check_grid(omega_grid)
    return [(float(w), reflect(params, coupling, w)) for w in grid]


def forward_arrays(params: CavityParams, eta_in: float, input_state: JonesVector, omega) -> dict[str, np.ndarray]:
    """Vectorized forward model.

    Returns ``r_total``, ``r_mode``, ``p`` and the normalized Stokes array
    ``s`` of shape ``(3, n)``, built from the unnormalized reflected density
    ``eta_in * |a,b><a,b| + (1 - eta_in) * |in><in|``.
    """
    omega = np.asarray(omega, dtype=float)
    psi = input_state.normalized()
    a = reflection_coefficient(params, "H", omega) * psi.alpha
    b = reflection_coefficient(params, "V", omega) * psi.beta
    aa, bb = np.abs(a) ** 2, np.abs(b) ** 2
    ab = np.conj(a) * b
    r_mode = aa + bb
    al2, be2 = abs(psi.alpha) ** 2, abs(psi.beta) ** 2
    ab_in = psi.alpha.conjugate() * psi.beta
    u = 1.0 - eta_in
    r_total = u + eta_in * r_mode
    s_un = np.array([
        eta_in * (aa - bb) + u * (al2 - be2),
        2 * (eta_in * ab.real + u * ab_in.real),
        2 * (eta_in * ab.imag + u * ab_in.imag),
    ])
    with np.errstate(invalid="ignore", divide="ignore"):
        s = s_un / r_total
        p = eta_in * r_mode / r_total
    return {"r_total": r_total, "r_mode": r_mode, "p": p, "s": s}


def purity_arrays(params: CavityParams, eta_in, input_state: JonesVector, omega) -> np.ndarray:
    """Degree of polarization of the reflected light.

    Uses ``|s|^2 = 1 - 4 p (1 - p) (1 - |<psi_m|psi_in>|^2)``, which is
    exactly 1 whenever ``p`` is 0 or 1.  ``eta_in`` broadcasts against
    ``omega``.
    """
    psi = input_state.normalized()
    omega = np.asarray(omega, dtype=float)
    a = reflection_coefficient(params, "H", omega) * psi.alpha
    b = reflection_coefficient(params, "V", omega) * psi.beta
    r_mode = np.abs(a) ** 2 + np.abs(b) ** 2
    overlap = np.abs(np.conj(psi.alpha) * a + np.conj(psi.beta) * b) ** 2
    with np.errstate(invalid="ignore", divide="ignore"):
        fidelity = np.where(r_mode > 0, overlap / r_mode, 1.0)
        eta_in = np.asarray(eta_in, dtype=float)
        r_total = (1.0 - eta_in) + eta_in * r_mode
        p = np.where(r_total > 0, eta_in * r_mode / r_total, 0.0)
    det4 = 4.0 * p * (1.0 - p) * np.clip(1.0 - fidelity, 0.0, None)
    return np.sqrt(np.clip(1.0 - det4, 0.0, 1.0))


def default_omega_grid(params: CavityParams, n: int = 1201, span: float = 4.0) -> np.ndarray:
    """Grid reaching ``span`` linewidths beyond both resonances."""
    k = max(params.kappa_h, params.kappa_v)
    half = params.delta_omega / 2 + span * k
    return np.linspace(params.omega_c - half, params.omega_c + half, n)


def min_purity_vs_coupling(
    params: CavityParams,
    input_state: JonesVector,
    eta_grid: Sequence[float],
    omega_grid=None,
) -> list[tuple[float, float]]:
    """Minimum degree of polarization over detuning for each input coupling."""
    if omega_grid is None:
        omega_grid = default_omega_grid(params)
    grid = _check_grid(omega_grid)
    k = max(params.kappa_h, params.kappa_v)
    if grid[0] > params.omega_c - 3 * k or grid[-1] < params.omega_c + 3 * k:
        raise InvalidArgumentError(
            f"omega grid must span at least omega_c +/- 3*kappa = +/-{3 * k:g} µeV"
        )
    etas = np.asarray(eta_grid, dtype=float)
    if etas.ndim != 1 or etas.size == 0:
        raise InvalidArgumentError("eta grid must be a non-empty 1-D sequence")
    if np.any((etas < 0) | (etas > 1)):
        raise InvalidArgumentError("eta grid values must lie in [0, 1]")
    purity = purity_arrays(params, etas[:, None], input_state, grid[None, :])
    return [(float(e), float(m)) for e, m in zip(etas, purity.min(axis=1))]


def min_purity(params: CavityParams, input_state: JonesVector, eta_in: float, omega_grid) -> float:
    return float(purity_arrays(params, eta_in, input_state, np.asarray(omega_grid, dtype=float)).min())
