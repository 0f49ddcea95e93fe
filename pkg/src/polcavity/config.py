"""INI run configuration.

Sections and keys (all optional; defaults shown by ``polcavity config``)::

    [cavity]    omega_c_ueV, delta_omega_ueV, kappa_h_ueV, kappa_v_ueV,
                eta_out, omega_c_abs
    [coupling]  eta_in, input_state (H|V|D|A|R|L) or input_theta_rad and
                input_phi_rad
    [scan]      omega_min_ueV, omega_max_ueV, points, input_intensity, seed,
                device
    [noise]     kind (none|gaussian-relative|poisson), level
    [fit]       stage (eigenmode|full|joint|staged), free, init_<param>,
                weight_<residual>, max_iterations, gradient_tolerance,
                step_tolerance, eta_out_starts, bootstrap, bootstrap_seed

Energies carry their unit in the key name.  ``POLCAVITY_SEED`` and
``POLCAVITY_OUTPUT_DIR`` override the scan seed and the output directory.
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cavity import CavityParams, CouplingConfig
from .errors import ConfigError, PolCavityError
from .estimation import PARAM_NAMES, RESIDUAL_NAMES, FitConfig
from .polarization import BASIS_STATES, JonesVector
from .tomography import NoiseModel, ScanConfig

ENV_SEED = "POLCAVITY_SEED"
ENV_OUTPUT_DIR = "POLCAVITY_OUTPUT_DIR"

# natural-unit key suffixes used for initial values
_INIT_KEYS = {
    "omega_c": "init_omega_c_ueV",
    "delta_omega": "init_delta_omega_ueV",
    "kappa_h": "init_kappa_h_ueV",
    "kappa_v": "init_kappa_v_ueV",
    "eta_out": "init_eta_out",
    "eta_in": "init_eta_in",
    "theta": "init_theta_rad",
    "phi": "init_phi_rad",
}

DEFAULTS = {
    "cavity": {
        "omega_c_ueV": "0",
        "delta_omega_ueV": "63",
        "kappa_h_ueV": "105",
        "kappa_v_ueV": "86",
        "eta_out": "0.53",
        "omega_c_abs": "",
    },
    "coupling": {"eta_in": "0.96", "input_state": "D", "input_theta_rad": "", "input_phi_rad": ""},
    "scan": {
        "omega_min_ueV": "-300",
        "omega_max_ueV": "300",
        "points": "200",
        "input_intensity": "1",
        "seed": "0",
        "device": "",
    },
    "noise": {"kind": "none", "level": "0"},
    "fit": {
        "stage": "full",
        "free": "omega_c,delta_omega,kappa_h,kappa_v,eta_out,eta_in",
        **{v: "" for v in _INIT_KEYS.values()},
        **{f"weight_{r}": "1" for r in RESIDUAL_NAMES},
        "max_iterations": "200",
        "gradient_tolerance": "1e-12",
        "step_tolerance": "1e-13",
        "eta_out_starts": "",
        "bootstrap": "0",
        "bootstrap_seed": "0",
    },
}

STAGES = ("eigenmode", "full", "joint", "staged")


@dataclass
class RunConfig:
    cavity: CavityParams
    coupling: CouplingConfig
    scan: ScanConfig
    fit: FitConfig
    stage: str = "full"
    device: str = ""
    bootstrap: int = 0
    bootstrap_seed: int = 0
    source: str = ""
    output_dir: Path = field(default_factory=Path)
    # parameters whose starting value was set explicitly under [fit]
    explicit_initial: frozenset = frozenset()


def _float(section, key) -> float:
    raw = section[key]
    try:
        value = float(raw)
    except ValueError:
        raise ConfigError(f"expected a number, got {raw!r}", key=f"{section.name}.{key}") from None
    if not np.isfinite(value):
        raise ConfigError("value must be finite", key=f"{section.name}.{key}")
    return value


def _int(section, key) -> int:
    raw = section[key]
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"expected an integer, got {raw!r}", key=f"{section.name}.{key}") from None


def _guard(key, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except ConfigError:
        raise
    except PolCavityError as exc:
        raise ConfigError(str(exc), key=key) from None


def _parser() -> configparser.ConfigParser:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str  # keys are case-sensitive ("_ueV")
    return cp


def load_config(path=None, text: str | None = None, environ=None) -> RunConfig:
    environ = os.environ if environ is None else environ
    cp = _parser()
    cp.read_dict(DEFAULTS)
    user = _parser()
    try:
        if text is not None:
            user.read_string(text)
        elif path is not None:
            with open(path, encoding="utf-8") as fh:
                user.read_file(fh)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None

    for name in user.sections():
        if name not in DEFAULTS:
            raise ConfigError("unknown section", key=name)
        for key, value in user[name].items():
            if key not in DEFAULTS[name]:
                raise ConfigError("unknown key", key=f"{name}.{key}")
            cp[name][key] = value

    cav = cp["cavity"]
    cavity = _guard(
        "cavity",
        CavityParams,
        delta_omega=_float(cav, "delta_omega_ueV"),
        kappa_h=_float(cav, "kappa_h_ueV"),
        kappa_v=_float(cav, "kappa_v_ueV"),
        eta_out=_float(cav, "eta_out"),
        omega_c=_float(cav, "omega_c_ueV"),
        omega_c_abs=cav["omega_c_abs"] or None,
    )

    cpl = cp["coupling"]
    if cpl["input_theta_rad"]:
        state = JonesVector.from_angles(
            _float(cpl, "input_theta_rad"), _float(cpl, "input_phi_rad") if cpl["input_phi_rad"] else 0.0
        )
    else:
        label = cpl["input_state"].strip().upper()
        if label not in BASIS_STATES:
            raise ConfigError(f"must be one of {', '.join(BASIS_STATES)}", key="coupling.input_state")
        state = BASIS_STATES[label]
    coupling = _guard("coupling.eta_in", CouplingConfig, _float(cpl, "eta_in"), state)

    sc = cp["scan"]
    points = _int(sc, "points")
    if points < 1:
        raise ConfigError("need at least one point", key="scan.points")
    lo, hi = _float(sc, "omega_min_ueV"), _float(sc, "omega_max_ueV")
    if points > 1 and not hi > lo:
        raise ConfigError("omega_max_ueV must exceed omega_min_ueV", key="scan.omega_max_ueV")
    grid = np.array([lo]) if points == 1 else np.linspace(lo, hi, points)
    seed = _int(sc, "seed")
    if environ.get(ENV_SEED):
        try:
            seed = int(environ[ENV_SEED])
        except ValueError:
            raise ConfigError("expected an integer", key=ENV_SEED) from None

    nz = cp["noise"]
    noise = _guard("noise", NoiseModel, nz["kind"].strip(), _float(nz, "level"))
    scan = _guard("scan", ScanConfig, grid, _float(sc, "input_intensity"), noise, seed)

    ft = cp["fit"]
    stage = ft["stage"].strip()
    if stage not in STAGES:
        raise ConfigError(f"must be one of {', '.join(STAGES)}", key="fit.stage")
    free = tuple(p.strip() for p in ft["free"].split(",") if p.strip())
    for p in free:
        if p not in PARAM_NAMES:
            raise ConfigError(f"unknown parameter {p!r}", key="fit.free")
    initial = {p: _float(ft, k) for p, k in _INIT_KEYS.items() if ft[k]}
    explicit = frozenset(initial)
    # unspecified starting values default to the configured model values
    model = {
        "omega_c": cavity.omega_c,
        "delta_omega": cavity.delta_omega,
        "kappa_h": cavity.kappa_h,
        "kappa_v": cavity.kappa_v,
        "eta_out": cavity.eta_out,
        "eta_in": coupling.eta_in,
    }
    theta, phi = state.angles()
    model.update(theta=theta, phi=phi)
    for p, v in model.items():
        initial.setdefault(p, v)
    weights = {r: _float(ft, f"weight_{r}") for r in RESIDUAL_NAMES}
    starts = tuple(float(x) for x in ft["eta_out_starts"].split(",") if x.strip())
    fit = _guard(
        "fit",
        FitConfig,
        free=free,
        initial=initial,
        weights=weights,
        max_iter=_int(ft, "max_iterations"),
        gtol=_float(ft, "gradient_tolerance"),
        xtol=_float(ft, "step_tolerance"),
        eta_out_starts=starts,
    )

    out_dir = Path(environ.get(ENV_OUTPUT_DIR, "") or ".")
    return RunConfig(
        cavity=cavity,
        coupling=coupling,
        scan=scan,
        fit=fit,
        stage=stage,
        device=sc["device"],
        bootstrap=_int(ft, "bootstrap"),
        bootstrap_seed=_int(ft, "bootstrap_seed"),
        source=str(path) if path is not None else "",
        output_dir=out_dir,
        explicit_initial=explicit,
    )


def default_config_text() -> str:
    lines = []
    for section, values in DEFAULTS.items():
        lines.append(f"[{section}]")
        lines += [f"{k} = {v}" for k, v in values.items()]
        lines.append("")
    return "\n".join(lines)
