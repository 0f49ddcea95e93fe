"""Command-line interface.

Exit codes: 0 success, 2 config error, 3 data error, 4 non-convergence,
5 ambiguous coupling branch.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import datetime as _dt
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .cavity import default_omega_grid, forward_arrays, min_purity_vs_coupling
from .config import RunConfig, default_config_text, load_config
from .errors import ConfigError, InvalidArgumentError, PolCavityError
from .polarization import BASIS_STATES
from .estimation import (
    CAVITY_NAMES,
    BranchDiagnostics,
    FitConfig,
    FitResult,
    branch_candidates,
    fit_eigenmode,
    fit_full,
    fit_joint,
    fit_staged,
    parametric_bootstrap,
    resolve_branch,
    write_fit_result,
)
from .tomography import (
    read_dataset,
    reconstruct_dataset,
    simulate_scan,
    write_dataset,
    write_sidecar,
)

log = logging.getLogger("polcavity")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NONCONVERGED, EXIT_AMBIGUOUS = 0, 2, 3, 4, 5

CURVE_HEADER = ("omega_ueV", "R_tot", "s_HV", "s_DA", "s_RL", "purity")
TRAJECTORY_HEADER = ("omega_ueV", "x", "y", "z", "purity")
PURITY_MAP_HEADER = ("eta_in", "min_purity")
PROFILE_HEADER = ("eta_in", "eta_out")


class DataError(PolCavityError):
    pass


def _timestamp() -> str:
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    if epoch:
        t = _dt.datetime.fromtimestamp(int(epoch), tz=_dt.timezone.utc)
    else:
        t = _dt.datetime.now(tz=_dt.timezone.utc)
    return t.isoformat(timespec="seconds")


def manifest(command: str, args: argparse.Namespace, inputs, outputs, seed=None, config="") -> dict[str, str]:
    return {
        "command": command,
        "argv": getattr(args, "argv_text", ""),
        "config": str(config),
        "seed": "" if seed is None else str(seed),
        "inputs": ";".join(str(p) for p in inputs),
        "outputs": ";".join(str(p) for p in outputs),
        "version": __version__,
        "timestamp": _timestamp(),
    }


def _fmt(x) -> str:
    return repr(float(x))


def write_table(path, header, rows, manifest_: dict[str, str] | None = None) -> Path:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])
    if manifest_ is not None:
        write_sidecar(path, {}, manifest_)
    return path


def _resolve_out(path: str | None, default: str, cfg: RunConfig | None = None) -> Path:
    if path:
        return Path(path)
    base = cfg.output_dir if cfg is not None else Path(os.environ.get("POLCAVITY_OUTPUT_DIR", "") or ".")
    return base / default


def _prepare(path: Path) -> Path:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {path.parent}: {exc}") from None
    return path


# -- commands ----------------------------------------------------------------


def cmd_simulate(args) -> int:
    cfg = load_config(args.config)
    out = _prepare(_resolve_out(args.output, "scan.csv", cfg))
    ds = simulate_scan(cfg.cavity, cfg.coupling, cfg.scan, label=cfg.device)
    ds.metadata["eta_in"] = repr(cfg.coupling.eta_in)
    write_dataset(ds, out, manifest("simulate", args, [args.config], [out], cfg.scan.seed, args.config))
    print(f"wrote {len(ds)} rows to {out}")
    return EXIT_OK


def curve_rows(omega, r_total, stokes, purity):
    return [(w, r, s[0], s[1], s[2], p) for w, r, s, p in zip(omega, r_total, stokes.T, purity)]


def cmd_reconstruct(args) -> int:
    ds = read_dataset(args.dataset)
    rec = reconstruct_dataset(ds, noise_level=args.noise_level)
    stem = Path(args.dataset).stem
    curves = _prepare(_resolve_out(args.output, f"{stem}_curves.csv"))
    traj = _prepare(Path(args.trajectory) if args.trajectory else curves.with_name(f"{stem}_poincare.csv"))
    man = manifest("reconstruct", args, [args.dataset], [curves, traj])
    write_table(curves, CURVE_HEADER, curve_rows(rec.omega, rec.r_total, rec.stokes, rec.purity), man)
    dirs = rec.stokes  # Poincaré coordinates; radius is the purity
    write_table(
        traj, TRAJECTORY_HEADER,
        [(w, x, y, z, p) for w, (x, y, z), p in zip(rec.omega, dirs.T, rec.purity)], man,
    )
    if rec.out_of_range.any():
        log.warning("%d points had reflectivity above 1 and were clamped", int(rec.out_of_range.sum()))
    print(f"wrote {curves} and {traj}")
    return EXIT_OK


def _branch_for(ds, result: FitResult) -> tuple[dict[str, str], BranchDiagnostics | None]:
    rec = reconstruct_dataset(ds)
    measured = float(rec.purity.min())
    section = {"measured_min_purity": repr(measured)}
    try:
        cands = branch_candidates(result.cavity, result.input_state, min(measured, 1.0), rec.omega)
    except PolCavityError as exc:
        section["status"] = f"not applicable: {exc}"
        return section, None
    diag = resolve_branch(ds, result.cavity, result.input_state, cands)
    section.update(
        status="ambiguous" if diag.ambiguous else "resolved",
        candidate_low=repr(diag.candidate_low),
        candidate_high=repr(diag.candidate_high),
        rotation_metric_measured=repr(diag.rotation_metric_measured),
        rotation_metric_low=repr(diag.rotation_metric_low),
        rotation_metric_high=repr(diag.rotation_metric_high),
        noise_tolerance=repr(diag.noise_tolerance),
        chosen=diag.chosen or "",
    )
    return section, diag


def cmd_fit(args) -> int:
    cfg = load_config(args.config)
    stage = args.stage or cfg.stage
    datasets = [read_dataset(p) for p in args.datasets]
    need = {"eigenmode": 2, "full": 1, "staged": 3}
    if stage in need and len(datasets) != need[stage]:
        raise ConfigError(f"stage {stage!r} takes {need[stage]} dataset(s), got {len(datasets)}", key="fit.stage")
    out = _prepare(_resolve_out(args.output, "fit.ini", cfg))
    stem = out.with_suffix("")
    outputs = [out]
    extra: dict[str, dict[str, str]] = {}
    diag = None
    profile = None

    if stage == "eigenmode":
        eig = fit_eigenmode(datasets[0], datasets[1], _eigen_config(cfg))
        result, profile = eig.result, eig.profile
        lo, hi = profile.eta_in_range
        olo, ohi = profile.eta_out_range
        extra["degeneracy"] = {
            "r_min": repr(profile.r_min),
            "eta_in_min": repr(lo),
            "eta_in_max": repr(hi),
            "eta_out_min": repr(olo),
            "eta_out_max": repr(ohi),
        }
        curve_sets = [(datasets[0], "H"), (datasets[1], "V")]
    else:
        target = {"full": datasets[0], "staged": datasets[-1]}.get(stage)
        if target is None:
            target = next((d for d in datasets if not _eigen(d)), datasets[-1])
        fit_cfg = _state_from_dataset(cfg, target)
        if stage == "full":
            result = fit_full(target, fit_cfg)
        elif stage == "staged":
            _, result = fit_staged(datasets[0], datasets[1], target, fit_cfg)
        else:
            result = fit_joint(datasets, fit_cfg)
        branch, diag = _branch_for(target, result)
        extra["branch"] = branch
        curve_sets = [(target, None)]
        if cfg.bootstrap > 0 and stage == "full":
            boot = parametric_bootstrap(
                target, result, cfg.scan.noise, fit_cfg, cfg.bootstrap, cfg.bootstrap_seed
            )
            extra["bootstrap"] = {"replicas": str(cfg.bootstrap), "confidence": repr(boot.confidence)}
            for n in boot.names:
                lo, hi = boot.intervals[n]
                extra["bootstrap"][f"{n}_low"] = repr(lo)
                extra["bootstrap"][f"{n}_high"] = repr(hi)
                extra["bootstrap"][f"{n}_std"] = repr(boot.std[n])

    tables = []
    for ds, mode in curve_sets:
        suffix = f"_{mode}" if mode else ""
        path = _prepare(Path(f"{stem}_curves{suffix}.csv"))
        state = BASIS_STATES[mode] if mode else result.input_state
        fw = forward_arrays(result.cavity, result.values["eta_in"], state, ds.omega)
        purity = np.linalg.norm(fw["s"], axis=0)
        tables.append((path, CURVE_HEADER, curve_rows(ds.omega, fw["r_total"], fw["s"], purity)))
    if profile is not None:
        ppath = _prepare(Path(f"{stem}_degeneracy.csv"))
        tables.append((ppath, PROFILE_HEADER, [tuple(r) for r in profile.sample(201)]))
    outputs += [t[0] for t in tables]
    if diag is not None:
        bpath = _prepare(Path(f"{stem}_branch.ini"))
        outputs.append(bpath)

    man = manifest("fit", args, args.datasets, outputs, config=args.config)
    write_fit_result(result, out, extra=extra, manifest=man)
    for path, header, rows in tables:
        write_table(path, header, rows, man)
    if diag is not None:
        write_sidecar_ini(bpath, {"branch": extra["branch"]}, man)

    _report(result, extra)
    if not result.converged:
        return EXIT_NONCONVERGED
    if diag is not None and diag.ambiguous:
        return EXIT_AMBIGUOUS
    return EXIT_OK


def write_sidecar_ini(path, sections, man):
    cp = configparser.ConfigParser(interpolation=None)
    for name, values in sections.items():
        cp[name] = values
    cp["manifest"] = man
    with open(path, "w", encoding="utf-8") as fh:
        cp.write(fh)


def _eigen(ds) -> bool:
    s = ds.input_state
    return s is not None and abs(abs(s.alpha) ** 2 - abs(s.beta) ** 2) > 1 - 1e-9


def _state_from_dataset(cfg: RunConfig, dataset) -> FitConfig:
    """Input angles recorded with the dataset, unless set explicitly under [fit]."""
    state = dataset.input_state
    if state is None:
        return cfg.fit
    theta, phi = state.angles()
    angles = {k: v for k, v in (("theta", theta), ("phi", phi)) if k not in cfg.explicit_initial}
    return cfg.fit.with_initial(angles)


def _eigen_config(cfg: RunConfig) -> FitConfig:
    """Reflectivity-only fit of the resonances; eta_in is pinned at 1 and the
    coupling trade-off is reported through the degeneracy profile."""
    free = tuple(p for p in cfg.fit.free if p in CAVITY_NAMES) or CAVITY_NAMES
    initial = {k: v for k, v in cfg.fit.initial.items() if k in CAVITY_NAMES}
    initial["eta_in"] = 1.0
    return FitConfig(free=free, initial=initial, weights={"r_total": 1.0}, max_iter=cfg.fit.max_iter,
                     gtol=cfg.fit.gtol, xtol=cfg.fit.xtol)


def _report(result: FitResult, extra):
    status = "converged" if result.converged else "NOT converged"
    print(f"fit {status} after {result.n_iter} iterations ({result.message}); residual norm {result.residual_norm:.4g}")
    for n in result.names:
        print(f"  {n:12s} = {result.values[n]:.8g} +/- {result.stderr[n]:.2g}")
    if result.unresolved:
        print("  unresolved combinations: " + "; ".join(",".join(g) for g in result.unresolved))
    if "degeneracy" in extra:
        d = extra["degeneracy"]
        print(f"  eta_in in [{float(d['eta_in_min']):.4f}, {float(d['eta_in_max']):.4f}], "
              f"eta_out in [{float(d['eta_out_min']):.4f}, {float(d['eta_out_max']):.4f}]")
    if "branch" in extra:
        print(f"  branch: {extra['branch'].get('status')} {extra['branch'].get('chosen', '')}")


def cmd_purity_map(args) -> int:
    cfg = load_config(args.config)
    if not 0.0 <= args.eta_min <= args.eta_max <= 1.0:
        raise ConfigError("eta range must satisfy 0 <= eta-min <= eta-max <= 1", key="--eta-min/--eta-max")
    if args.eta_points < 1:
        raise ConfigError("need at least one point", key="--eta-points")
    out = _prepare(_resolve_out(args.output, "purity_map.csv", cfg))
    etas = np.linspace(args.eta_min, args.eta_max, args.eta_points)
    rows = min_purity_vs_coupling(cfg.cavity, cfg.coupling.input_state, etas, default_omega_grid(cfg.cavity))
    write_table(out, PURITY_MAP_HEADER, rows, manifest("purity-map", args, [args.config], [out], config=args.config))
    print(f"wrote {len(rows)} rows to {out}")
    return EXIT_OK


def cmd_config(args) -> int:
    sys.stdout.write(default_config_text())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="polcavity", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="simulate a tomography scan")
    p.add_argument("config")
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("reconstruct", help="reflectivity, Stokes and purity per detuning")
    p.add_argument("dataset")
    p.add_argument("-o", "--output")
    p.add_argument("--trajectory", help="Poincaré trajectory table path")
    p.add_argument("--noise-level", type=float, default=0.0, help="relative noise for the clamp diagnostic")
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("fit", help="fit cavity and coupling parameters")
    p.add_argument("config")
    p.add_argument("datasets", nargs="+")
    p.add_argument("--stage", choices=("eigenmode", "full", "joint", "staged"))
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("purity-map", help="minimum purity versus input coupling")
    p.add_argument("config")
    p.add_argument("--eta-min", type=float, default=0.0)
    p.add_argument("--eta-max", type=float, default=1.0)
    p.add_argument("--eta-points", type=int, default=101)
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_purity_map)

    p = sub.add_parser("config", help="print the default configuration")
    p.set_defaults(func=cmd_config)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    args = parser.parse_args(argv)
    args.argv_text = " ".join(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (PolCavityError, InvalidArgumentError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
