"""Parameter estimation from tomography scans.

Fits minimize weighted residuals of total reflectivity and the three Stokes
components.  Bounded parameters are optimized in unconstrained coordinates
(logit for couplings, log for linewidths and splitting) and uncertainties
are mapped back with the Jacobian in natural units.
"""

from __future__ import annotations

import configparser
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import optimize as sopt

from .cavity import (
    CavityParams,
    CouplingConfig,
    default_omega_grid,
    forward_arrays,
    min_purity,
)
from .errors import (
    InsufficientDataError,
    InvalidArgumentError,
    NoSolutionError,
    TrivialSolutionError,
)
from .optimize import levenberg_marquardt
from .polarization import H, V, JonesVector
from .tomography import (
    NoiseModel,
    Reconstruction,
    ScanConfig,
    ScanDataset,
    reconstruct_dataset,
    simulate_scan,
)

log = logging.getLogger(__name__)

PARAM_NAMES = ("omega_c", "delta_omega", "kappa_h", "kappa_v", "eta_out", "eta_in", "theta", "phi")
CAVITY_NAMES = ("omega_c", "delta_omega", "kappa_h", "kappa_v", "eta_out")
RESIDUAL_NAMES = ("r_total", "s_hv", "s_da", "s_rl")

_LOGISTIC = ("eta_out", "eta_in")
_LOG = ("delta_omega", "kappa_h", "kappa_v")
_EPS = 1e-12

DEFAULT_INITIAL = {
    "omega_c": 0.0,
    "delta_omega": 50.0,
    "kappa_h": 100.0,
    "kappa_v": 100.0,
    "eta_out": 0.6,
    "eta_in": 0.9,
    "theta": np.pi / 2,
    "phi": 0.0,
}


@dataclass
class FitConfig:
    free: tuple[str, ...] = ("omega_c", "delta_omega", "kappa_h", "kappa_v", "eta_out", "eta_in")
    initial: dict[str, float] = field(default_factory=dict)
    weights: dict[str, float] = field(
        default_factory=lambda: {"r_total": 1.0, "s_hv": 1.0, "s_da": 1.0, "s_rl": 1.0}
    )
    max_iter: int = 200
    gtol: float = 1e-12
    xtol: float = 1e-13
    # extra starting values for eta_out, tried in addition to the initial value
    eta_out_starts: tuple[float, ...] = ()

    def __post_init__(self):
        self.free = tuple(self.free)
        unknown = set(self.free) - set(PARAM_NAMES)
        if unknown:
            raise InvalidArgumentError(f"unknown free parameters: {sorted(unknown)}")
        if not self.free:
            raise InvalidArgumentError("at least one parameter must be free")
        unknown = set(self.initial) - set(PARAM_NAMES)
        if unknown:
            raise InvalidArgumentError(f"unknown initial values: {sorted(unknown)}")
        bad = set(self.weights) - set(RESIDUAL_NAMES)
        if bad:
            raise InvalidArgumentError(f"unknown residual weights: {sorted(bad)}")
        w = [self.weights.get(k, 0.0) for k in RESIDUAL_NAMES]
        if min(w) < 0 or max(w) == 0:
            raise InvalidArgumentError("residual weights must be >= 0 and not all zero")

    def start(self) -> dict[str, float]:
        values = dict(DEFAULT_INITIAL)
        values.update({k: float(v) for k, v in self.initial.items()})
        return values

    def with_initial(self, values: dict[str, float], free: Sequence[str] | None = None) -> "FitConfig":
        initial = dict(self.initial)
        initial.update(values)
        return replace(self, initial=initial, free=tuple(free) if free is not None else self.free)


@dataclass
class FitResult:
    names: tuple[str, ...]
    values: dict[str, float]
    stderr: dict[str, float]
    covariance: np.ndarray
    residual_norm: float
    converged: bool
    n_iter: int
    n_data: int
    message: str = ""
    unresolved: list[list[str]] = field(default_factory=list)

    @property
    def rank_deficient(self) -> bool:
        return bool(self.unresolved)

    @property
    def cavity(self) -> CavityParams:
        return cavity_from(self.values)

    @property
    def eta_in(self) -> float:
        return self.values["eta_in"]

    @property
    def input_state(self) -> JonesVector:
        return JonesVector.from_angles(self.values["theta"], self.values["phi"])

    def __getitem__(self, name):
        return self.values[name]


def cavity_from(values: dict[str, float]) -> CavityParams:
    return CavityParams(
        delta_omega=values["delta_omega"],
        kappa_h=values["kappa_h"],
        kappa_v=values["kappa_v"],
        eta_out=min(max(values["eta_out"], 0.0), 1.0),
        omega_c=values["omega_c"],
    )


# -- model and analytic Jacobian --------------------------------------------


def model_with_jacobian(values: dict[str, float], omega, input_state: JonesVector | None = None):
    """Forward model and its derivatives in natural units.

    Returns ``(f, J)`` where ``f`` has shape ``(4, n)`` holding r_total and
    the three Stokes components, and ``J`` has shape ``(4, n, 8)`` with one
    slice per entry of ``PARAM_NAMES``.  With ``input_state=None`` the input
    polarization comes from the ``theta``/``phi`` entries; otherwise it is
    held fixed and those derivatives are zero.
    """
    omega = np.asarray(omega, dtype=float)
    n = omega.size
    wc, dw = values["omega_c"], values["delta_omega"]
    kh, kv = values["kappa_h"], values["kappa_v"]
    eo, ei = values["eta_out"], values["eta_in"]

    if input_state is None:
        th, ph = values["theta"], values["phi"]
        al = np.cos(th / 2)
        be = np.exp(1j * ph) * np.sin(th / 2)
        dal = {"theta": -0.5 * np.sin(th / 2)}
        dbe = {"theta": 0.5 * np.exp(1j * ph) * np.cos(th / 2), "phi": 1j * be}
    else:
        psi = input_state.normalized()
        al, be = psi.alpha, psi.beta
        dal, dbe = {}, {}

    zh = 1 - 2j * (omega - (wc + dw / 2)) / kh
    zv = 1 - 2j * (omega - (wc - dw / 2)) / kv
    rh = 1 - 2 * eo / zh
    rv = 1 - 2 * eo / zv
    # d r / d omega_i and d r / d kappa_i
    drh_dw = 2 * eo / zh**2 * (2j / kh)
    drv_dw = 2 * eo / zv**2 * (2j / kv)
    drh_dk = 2 * eo / zh**2 * (2j * (omega - (wc + dw / 2)) / kh**2)
    drv_dk = 2 * eo / zv**2 * (2j * (omega - (wc - dw / 2)) / kv**2)

    zero = np.zeros(n, dtype=complex)
    drh = {
        "omega_c": drh_dw,
        "delta_omega": 0.5 * drh_dw,
        "kappa_h": drh_dk,
        "kappa_v": zero,
        "eta_out": -2 / zh,
    }
    drv = {
        "omega_c": drv_dw,
        "delta_omega": -0.5 * drv_dw,
        "kappa_h": zero,
        "kappa_v": drv_dk,
        "eta_out": -2 / zv,
    }

    a, b = rh * al, rv * be
    A_un = np.array([np.abs(a) ** 2 - np.abs(b) ** 2, 2 * (np.conj(a) * b).real, 2 * (np.conj(a) * b).imag])
    ab_in = np.conj(al) * be
    In_un = np.array([abs(al) ** 2 - abs(be) ** 2, 2 * ab_in.real, 2 * ab_in.imag])
    r_mode = np.abs(a) ** 2 + np.abs(b) ** 2
    in_norm = abs(al) ** 2 + abs(be) ** 2
    T = (1 - ei) * in_norm + ei * r_mode
    S = ei * A_un + (1 - ei) * In_un[:, None]
    s = S / T

    f = np.vstack([T, s])
    J = np.zeros((4, n, len(PARAM_NAMES)))

    for k, name in enumerate(PARAM_NAMES):
        if name == "eta_in":
            dT = r_mode - in_norm
            dS = A_un - In_un[:, None]
        else:
            d_al = dal.get(name, 0.0)
            d_be = dbe.get(name, 0.0)
            da = drh.get(name, zero) * al + rh * d_al
            db = drv.get(name, zero) * be + rv * d_be
            if name in drh or name in dal or name in dbe:
                daa = 2 * (np.conj(a) * da).real
                dbb = 2 * (np.conj(b) * db).real
                dab = np.conj(da) * b + np.conj(a) * db
                dA = np.array([daa - dbb, 2 * dab.real, 2 * dab.imag])
                d_in_ab = np.conj(d_al) * be + np.conj(al) * d_be
                d_al2 = 2 * (np.conj(al) * d_al).real
                d_be2 = 2 * (np.conj(be) * d_be).real
                dIn = np.array([d_al2 - d_be2, 2 * d_in_ab.real, 2 * d_in_ab.imag])
                dT = ei * (daa + dbb) + (1 - ei) * (d_al2 + d_be2)
                dS = ei * dA + (1 - ei) * dIn[:, None]
            else:
                continue
        J[0, :, k] = dT
        J[1:, :, k] = (dS - s * dT) / T
    return f, J


def _to_internal(name: str, value: float) -> float:
    if name in _LOGISTIC:
        v = min(max(value, _EPS), 1 - _EPS)
        return float(np.log(v / (1 - v)))
    if name in _LOG:
        return float(np.log(max(value, _EPS)))
    return float(value)


def _to_natural(name: str, u: float) -> tuple[float, float]:
    """Natural value and its derivative with respect to the internal one."""
    if name in _LOGISTIC:
        v = 1.0 / (1.0 + np.exp(-u))
        return float(v), float(v * (1 - v))
    if name in _LOG:
        v = np.exp(u)
        return float(v), float(v)
    return float(u), 1.0


# -- residual problem --------------------------------------------------------


@dataclass
class _Block:
    omega: np.ndarray
    data: np.ndarray  # (4, n): r_total, s_hv, s_da, s_rl
    weights: np.ndarray  # (4,)
    input_state: JonesVector | None  # None -> fitted angles


class _Problem:
    def __init__(self, blocks: list[_Block], config: FitConfig):
        self.blocks = blocks
        self.config = config
        self.free = config.free
        self.idx = [PARAM_NAMES.index(p) for p in self.free]
        self.base = config.start()

    def values(self, u) -> dict[str, float]:
        vals = dict(self.base)
        for name, ui in zip(self.free, u):
            vals[name] = _to_natural(name, ui)[0]
        return vals

    def chain(self, u) -> np.ndarray:
        return np.array([_to_natural(name, ui)[1] for name, ui in zip(self.free, u)])

    def residuals_natural(self, vals) -> tuple[np.ndarray, np.ndarray]:
        res, jac = [], []
        for blk in self.blocks:
            f, J = model_with_jacobian(vals, blk.omega, blk.input_state)
            keep = blk.weights > 0
            w = blk.weights[keep][:, None]
            res.append(((f - blk.data)[keep] * w).ravel())
            jac.append((J[keep][:, :, self.idx] * w[:, :, None]).reshape(-1, len(self.idx)))
        return np.concatenate(res), np.vstack(jac)

    def fun(self, u):
        return self.residuals_natural(self.values(u))[0]

    def jac(self, u):
        return self.residuals_natural(self.values(u))[1] * self.chain(u)[None, :]

    def solve(self, start: dict[str, float]) -> tuple:
        u0 = np.array([_to_internal(n, start[n]) for n in self.free])
        cfg = self.config
        return levenberg_marquardt(self.fun, self.jac, u0, max_iter=cfg.max_iter, gtol=cfg.gtol, xtol=cfg.xtol)


def _unresolved_directions(
    J: np.ndarray, names: Sequence[str], rtol: float = 1e-8, atol: float = 1e-6
) -> list[list[str]]:
    """Parameter groups the data cannot pin down.

    ``J`` is the Jacobian in internal coordinates, so each column is the
    residual change per e-fold (log), logit unit or natural unit.  A column
    moving the residuals by less than ``atol`` per point is unresolved on its
    own; the rest are checked for near-collinear combinations.
    """
    m = J.shape[0]
    norms = np.linalg.norm(J, axis=0)
    weak = norms < atol * np.sqrt(max(m, 1))
    out = [[n] for n, w in zip(names, weak) if w]
    live = [i for i, w in enumerate(weak) if not w]
    if len(live) < 2:
        return out
    _, sv, vt = np.linalg.svd(J[:, live] / norms[live], full_matrices=False)
    for k in np.nonzero(sv < rtol * sv[0])[0]:
        group = [names[i] for i, c in zip(live, vt[k]) if abs(c) > 0.1]
        if group and group not in out:
            out.append(group)
    return out


def _run(blocks: list[_Block], config: FitConfig) -> FitResult:
    problem = _Problem(blocks, config)
    start = config.start()
    starts = [start]
    if "eta_out" in config.free:
        starts += [dict(start, eta_out=e) for e in config.eta_out_starts]
    best = None
    for st in starts:
        sol = problem.solve(st)
        if best is None or sol.cost < best.cost:
            best = sol

    vals = problem.values(best.x)
    r, J = problem.residuals_natural(vals)
    m, k = J.shape
    dof = max(m - k, 1)
    sigma2 = float(r @ r) / dof
    unresolved = _unresolved_directions(J * problem.chain(best.x)[None, :], problem.free)
    cov = sigma2 * np.linalg.pinv(J.T @ J, rcond=1e-12, hermitian=True)
    cov = 0.5 * (cov + cov.T)
    stderr = {n: float(np.sqrt(max(cov[i, i], 0.0))) for i, n in enumerate(problem.free)}
    if unresolved:
        log.warning("fit leaves unresolved parameter combinations: %s", unresolved)
    if not best.converged:
        log.warning("fit did not converge after %d iterations", best.n_iter)
    return FitResult(
        names=problem.free,
        values=vals,
        stderr=stderr,
        covariance=cov,
        residual_norm=float(np.linalg.norm(r)),
        converged=best.converged,
        n_iter=best.n_iter,
        n_data=m,
        message=best.message,
        unresolved=unresolved,
    )


def _weights(config: FitConfig, stokes: bool = True) -> np.ndarray:
    w = np.array([config.weights.get(k, 0.0) for k in RESIDUAL_NAMES], dtype=float)
    if not stokes:
        w[1:] = 0.0
    return w


def _block(rec: Reconstruction, weights, input_state) -> _Block:
    data = np.vstack([rec.r_total_raw, rec.stokes])
    return _Block(rec.omega, data, np.asarray(weights, dtype=float), input_state)


# -- stage 1: eigenpolarization scans -----------------------------------------


@dataclass(frozen=True)
class DegeneracyProfile:
    """(eta_in, eta_out) pairs that give the same reflectivity-dip floor.

    Along the curve ``(1 - eta_in) + eta_in * (1 - 2 eta_out)^2 = r_min``.
    """

    r_min: float

    def __post_init__(self):
        if not 0.0 <= self.r_min < 1.0:
            raise InvalidArgumentError(f"dip floor must lie in [0, 1), got {self.r_min}")

    @property
    def eta_out_range(self) -> tuple[float, float]:
        root = float(np.sqrt(self.r_min))
        return (0.5 * (1 - root), 0.5 * (1 + root))

    @property
    def eta_in_range(self) -> tuple[float, float]:
        return (1.0 - self.r_min, 1.0)

    def eta_in_at(self, eta_out):
        eta_out = np.asarray(eta_out, dtype=float)
        lo, hi = self.eta_out_range
        with np.errstate(divide="ignore", invalid="ignore"):
            val = (1.0 - self.r_min) / (1.0 - (1.0 - 2.0 * eta_out) ** 2)
        return np.where((eta_out >= lo) & (eta_out <= hi), np.minimum(val, 1.0), np.nan)

    def eta_out_at(self, eta_in: float) -> tuple[float, float]:
        """The two eta_out values (under- and over-coupled) for a given eta_in."""
        if not self.eta_in_range[0] <= eta_in <= 1.0:
            raise NoSolutionError(f"eta_in {eta_in} lies outside {self.eta_in_range}")
        root = float(np.sqrt(max(1.0 - (1.0 - self.r_min) / eta_in, 0.0)))
        return (0.5 * (1 - root), 0.5 * (1 + root))

    def sample(self, n: int = 201) -> np.ndarray:
        """Array of shape (n, 2) with columns eta_in, eta_out."""
        eo = np.linspace(*self.eta_out_range, n)
        return np.column_stack([self.eta_in_at(eo), eo])

    def contains(self, eta_in: float, eta_out: float, tol: float = 1e-3) -> bool:
        lo, hi = self.eta_out_range
        if not lo - tol <= eta_out <= hi + tol:
            return False
        e = float(self.eta_in_at(min(max(eta_out, lo), hi)))
        return abs(e - eta_in) <= tol


@dataclass
class EigenmodeFit:
    result: FitResult
    profile: DegeneracyProfile


def fit_eigenmode(dataset_h: ScanDataset, dataset_v: ScanDataset, config: FitConfig | None = None) -> EigenmodeFit:
    """Linewidths and splitting from H- and V-polarized reflectivity scans.

    Only reflectivity residuals are used, so the couplings are fixed to one
    combination: the returned profile lists every (eta_in, eta_out) pair
    consistent with the fitted dip floor.
    """
    if config is None:
        config = FitConfig(
            free=CAVITY_NAMES, initial={"eta_in": 1.0}
        )
    blocks = []
    for ds, state in ((dataset_h, H), (dataset_v, V)):
        rec = reconstruct_dataset(ds)
        if rec.r_total_raw.min() > 0.9:
            raise InsufficientDataError(
                f"{'H' if state is H else 'V'} scan does not cover the resonance dip "
                f"(minimum reflectivity {rec.r_total_raw.min():.3f})"
            )
        blocks.append(_block(rec, _weights(config, stokes=False), state))
    start = config.start()
    start.update(_eigenmode_guess(blocks, start))
    cfg = config.with_initial({k: v for k, v in start.items() if k not in config.initial})
    result = _run(blocks, cfg)
    v = result.values
    floor = (1 - v["eta_in"]) + v["eta_in"] * (1 - 2 * v["eta_out"]) ** 2
    return EigenmodeFit(result, DegeneracyProfile(float(np.clip(floor, 0.0, 1.0 - 1e-15))))


def _eigenmode_guess(blocks: list[_Block], start: dict[str, float]) -> dict[str, float]:
    """Dip positions and widths read off the data as starting values."""
    out = {}
    centres, widths = [], []
    for blk in blocks:
        w, r = blk.omega, blk.data[0]
        k = int(np.argmin(r))
        half = 0.5 * (1.0 + r[k])
        below = w[r <= half]
        centres.append(w[k])
        widths.append(max(below.max() - below.min(), np.min(np.diff(w)) if w.size > 1 else 1.0))
    out["omega_c"] = 0.5 * (centres[0] + centres[1])
    out["delta_omega"] = max(centres[0] - centres[1], 1e-3)
    out["kappa_h"], out["kappa_v"] = widths
    return out


# -- stage 2 / joint: fits including tomography ------------------------------


def _off_resonance_mask(omega: np.ndarray, omega_c: float, fraction: float = 0.1) -> np.ndarray:
    d = np.abs(omega - omega_c)
    n = max(1, int(round(fraction * omega.size)))
    mask = np.zeros(omega.size, dtype=bool)
    mask[np.argsort(d)[-n:]] = True
    return mask


def input_direction(rec: Reconstruction, omega_c: float = 0.0) -> np.ndarray:
    """Mean Poincaré direction at the scan points farthest from resonance."""
    mask = _off_resonance_mask(rec.omega, omega_c)
    v = rec.stokes[:, mask].mean(axis=1)
    n = np.linalg.norm(v)
    if n == 0:
        raise InsufficientDataError("off-resonance light is unpolarized")
    return v / n


def fit_full(dataset: ScanDataset, config: FitConfig | None = None) -> FitResult:
    """Weighted fit of reflectivity and Stokes components of a scan taken
    with an input far from the cavity eigenpolarizations."""
    if config is None:
        config = FitConfig()
    rec = reconstruct_dataset(dataset)
    ref = input_direction(rec, config.start()["omega_c"])
    pole_angle = float(np.arccos(min(abs(ref[0]), 1.0)))
    if pole_angle <= 0.2:
        raise InsufficientDataError(
            f"input polarization is {pole_angle:.3f} rad from an eigenpolarization; need > 0.2 rad"
        )
    fitted_state = "theta" in config.free or "phi" in config.free
    state = None if fitted_state else JonesVector.from_angles(config.start()["theta"], config.start()["phi"])
    return _run([_block(rec, _weights(config), state)], config)


def _is_eigen(state: JonesVector | None) -> bool:
    if state is None:
        return False
    return abs(abs(state.alpha) ** 2 - abs(state.beta) ** 2) > 1 - 1e-9


def fit_joint(datasets: Sequence[ScanDataset], config: FitConfig | None = None) -> FitResult:
    """Simultaneous fit of several scans sharing cavity and coupling parameters.

    Scans whose recorded input is H or V use that state; all others share
    the fitted (or configured) input angles.
    """
    if config is None:
        config = FitConfig()
    fitted_state = "theta" in config.free or "phi" in config.free
    shared = None if fitted_state else JonesVector.from_angles(config.start()["theta"], config.start()["phi"])
    blocks = []
    for ds in datasets:
        rec = reconstruct_dataset(ds)
        state = ds.input_state
        blocks.append(_block(rec, _weights(config), state if _is_eigen(state) else shared))
    if not blocks:
        raise InvalidArgumentError("no datasets given")
    return _run(blocks, config)


def fit_staged(dataset_h: ScanDataset, dataset_v: ScanDataset, dataset: ScanDataset, config: FitConfig | None = None):
    """Eigenmode fit for the resonances, then couplings from the tomography scan."""
    config = config or FitConfig()
    stage1 = fit_eigenmode(dataset_h, dataset_v)
    fixed = {k: stage1.result.values[k] for k in ("omega_c", "delta_omega", "kappa_h", "kappa_v")}
    free = tuple(p for p in config.free if p not in fixed) or ("eta_in", "eta_out")
    stage2 = fit_full(dataset, config.with_initial(fixed, free=free))
    return stage1, stage2


# -- two-branch ambiguity ----------------------------------------------------


def _purity_grid(params: CavityParams, omega_grid):
    if omega_grid is None:
        return default_omega_grid(params)
    return np.asarray(omega_grid, dtype=float)


def coupling_of_min_purity(params: CavityParams, input_state: JonesVector, omega_grid=None) -> tuple[float, float]:
    """(eta_in, purity) at the interior minimum of the minimum-purity curve."""
    grid = _purity_grid(params, omega_grid)
    f = lambda e: min_purity(params, input_state, e, grid)
    coarse = np.linspace(0.0, 1.0, 201)
    vals = np.array([f(e) for e in coarse])
    k = int(np.argmin(vals))
    lo, hi = coarse[max(k - 1, 0)], coarse[min(k + 1, coarse.size - 1)]
    res = sopt.minimize_scalar(f, bounds=(lo, hi), method="bounded", options={"xatol": 1e-12})
    if res.fun <= vals[k]:
        return float(res.x), float(res.fun)
    return float(coarse[k]), float(vals[k])


def branch_candidates(
    params: CavityParams,
    input_state: JonesVector,
    measured_min_purity: float,
    omega_grid=None,
    xtol: float = 1e-10,
) -> tuple[float, float]:
    """Both input couplings whose minimum purity equals the measured one."""
    if measured_min_purity >= 1.0:
        raise TrivialSolutionError("a minimum purity of 1 is explained by eta_in = 0 or 1")
    grid = _purity_grid(params, omega_grid)
    e_star, p_star = coupling_of_min_purity(params, input_state, grid)
    if measured_min_purity < p_star - 1e-12:
        raise NoSolutionError(
            f"measured minimum purity {measured_min_purity:.6g} is below the model floor {p_star:.6g}"
        )
    if measured_min_purity <= p_star + 1e-12:
        return e_star, e_star
    g = lambda e: min_purity(params, input_state, e, grid) - measured_min_purity
    low = sopt.bisect(g, 0.0, e_star, xtol=xtol)
    high = sopt.bisect(g, e_star, 1.0, xtol=xtol)
    return float(low), float(high)


@dataclass(frozen=True)
class BranchDiagnostics:
    candidate_low: float
    candidate_high: float
    rotation_metric_measured: float
    rotation_metric_low: float
    rotation_metric_high: float
    chosen: str | None  # "low", "high", or None when ambiguous
    noise_tolerance: float = 0.0

    @property
    def ambiguous(self) -> bool:
        return self.chosen is None

    @property
    def eta_in(self) -> float | None:
        if self.chosen == "low":
            return self.candidate_low
        if self.chosen == "high":
            return self.candidate_high
        return None


def rotation_metric(stokes: np.ndarray, reference: np.ndarray) -> float:
    """Largest angle (rad) between the Poincaré direction and ``reference``."""
    norms = np.linalg.norm(stokes, axis=0)
    ok = norms > 0
    dirs = stokes[:, ok] / norms[ok]
    cosang = np.clip(reference @ dirs, -1.0, 1.0)
    return float(np.arccos(cosang).max()) if cosang.size else 0.0


def stokes_noise(rec: Reconstruction) -> float:
    """Robust per-component noise estimate of the reconstructed Stokes values.

    Second differences along the scan remove the smooth physical variation;
    the median absolute value is insensitive to the resonance region.
    """
    if rec.omega.size < 3:
        return 0.0
    d2 = np.diff(rec.stokes, n=2, axis=1)
    return float(1.4826 * np.median(np.abs(d2)) / np.sqrt(6.0))


def resolve_branch(
    dataset: ScanDataset,
    params: CavityParams,
    input_state: JonesVector,
    candidates: tuple[float, float],
    noise_tolerance: float | None = None,
) -> BranchDiagnostics:
    """Pick the candidate coupling whose predicted polarization rotation
    best matches the measured one."""
    low, high = sorted(candidates)
    rec = reconstruct_dataset(dataset)
    ref = input_direction(rec, params.omega_c)
    measured = rotation_metric(rec.stokes, ref)

    predicted = []
    for eta in (low, high):
        fw = forward_arrays(params, eta, input_state, rec.omega)
        pred_rec = replace(rec, stokes=fw["s"])
        predicted.append(rotation_metric(fw["s"], input_direction(pred_rec, params.omega_c)))
    m_low, m_high = predicted

    if noise_tolerance is None:
        noise_tolerance = max(3.0 * stokes_noise(rec), 1e-9)

    d_low, d_high = abs(measured - m_low), abs(measured - m_high)
    if abs(m_low - m_high) <= noise_tolerance or abs(d_low - d_high) <= 1e-12:
        chosen = None
    else:
        chosen = "low" if d_low < d_high else "high"
    return BranchDiagnostics(low, high, measured, m_low, m_high, chosen, noise_tolerance)


# -- bootstrap ---------------------------------------------------------------


@dataclass
class BootstrapResult:
    names: tuple[str, ...]
    samples: np.ndarray  # (n_replicas, n_free)
    confidence: float
    intervals: dict[str, tuple[float, float]]
    std: dict[str, float]


def _bootstrap_replica(args):
    values, grid, i_in, noise, seed, config = args
    params = cavity_from(values)
    state = JonesVector.from_angles(values["theta"], values["phi"])
    eta = min(max(values["eta_in"], 0.0), 1.0)
    ds = simulate_scan(params, CouplingConfig(eta, state), ScanConfig(grid, i_in, noise, seed))
    fit = fit_full(ds, config)
    return [fit.values[n] for n in config.free]


def parametric_bootstrap(
    dataset: ScanDataset,
    result: FitResult,
    noise: NoiseModel,
    config: FitConfig | None = None,
    n_replicas: int = 200,
    seed: int = 0,
    confidence: float = 0.6827,
    n_jobs: int = 1,
) -> BootstrapResult:
    """Resimulate the fitted model with ``noise``, refit, and take percentile
    intervals.  Replica ``k`` always uses the ``k``-th child seed, so the
    outcome does not depend on ``n_jobs``."""
    config = config or FitConfig(free=result.names)
    config = config.with_initial(dict(result.values))
    seeds = np.random.SeedSequence(seed).generate_state(n_replicas)
    jobs = [
        (result.values, dataset.omega, float(dataset.input_intensity.mean()), noise, int(s), config)
        for s in seeds
    ]
    if n_jobs > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            rows = list(pool.map(_bootstrap_replica, jobs))
    else:
        rows = [_bootstrap_replica(j) for j in jobs]
    samples = np.array(rows)
    tail = 50.0 * (1.0 - confidence)
    intervals = {
        n: (float(np.percentile(samples[:, i], tail)), float(np.percentile(samples[:, i], 100 - tail)))
        for i, n in enumerate(config.free)
    }
    std = {n: float(samples[:, i].std(ddof=1)) for i, n in enumerate(config.free)}
    return BootstrapResult(config.free, samples, confidence, intervals, std)


# -- serialization -----------------------------------------------------------


def write_fit_result(result: FitResult, path, extra: dict[str, dict[str, str]] | None = None,
                     manifest: dict[str, str] | None = None) -> Path:
    cp = configparser.ConfigParser(interpolation=None)
    cp["fit"] = {
        "converged": str(result.converged).lower(),
        "message": result.message,
        "iterations": str(result.n_iter),
        "n_data": str(result.n_data),
        "residual_norm": repr(result.residual_norm),
        "free": ",".join(result.names),
        "unresolved": ";".join(",".join(g) for g in result.unresolved),
    }
    cp["parameters"] = {k: repr(float(v)) for k, v in result.values.items()}
    cp["stderr"] = {k: repr(v) for k, v in result.stderr.items()}
    cp["covariance"] = {
        f"row{i}": ",".join(repr(float(x)) for x in row) for i, row in enumerate(result.covariance)
    }
    for name, section in (extra or {}).items():
        cp[name] = {k: str(v) for k, v in section.items()}
    if manifest is not None:
        cp["manifest"] = {k: str(v) for k, v in manifest.items()}
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        cp.write(fh)
    return path


def read_fit_result(path) -> FitResult:
    cp = configparser.ConfigParser(interpolation=None)
    cp.read(path, encoding="utf-8")
    fit = cp["fit"]
    names = tuple(n for n in fit["free"].split(",") if n)
    rows = [cp["covariance"][f"row{i}"] for i in range(len(names))]
    cov = np.array([[float(x) for x in r.split(",")] for r in rows]).reshape(len(names), len(names))
    unresolved = [g.split(",") for g in fit.get("unresolved", "").split(";") if g]
    return FitResult(
        names=names,
        values={k: float(v) for k, v in cp["parameters"].items()},
        stderr={k: float(v) for k, v in cp["stderr"].items()},
        covariance=cov,
        residual_norm=float(fit["residual_norm"]),
        converged=fit["converged"] == "true",
        n_iter=int(fit["iterations"]),
        n_data=int(fit["n_data"]),
        message=fit.get("message", ""),
        unresolved=unresolved,
    )
