"""Synthetic polarization-tomography scans and their reconstruction.

A scan records, for each laser detuning, the incident intensity and the six
intensities transmitted by H/V, D/A and R/L analyzers.  The dataset file is
a CSV with header ``omega_ueV,I_in,I_H,I_V,I_D,I_A,I_R,I_L`` plus an INI
sidecar (``<csv>.meta``) holding the input state, device label, seed and
noise specification.
"""

from __future__ import annotations

import configparser
import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Literal

import numpy as np

from .cavity import CavityParams, CouplingConfig, reflect
from .errors import DatasetFormatError, InvalidArgumentError
from .polarization import (
    BASIS_STATES,
    IntensitySextet,
    JonesVector,
    PolarizationDensity,
    StokesVector,
    degree_of_polarization,
    stokes_from_intensities,
)

log = logging.getLogger(__name__)

CSV_HEADER = ("omega_ueV", "I_in", "I_H", "I_V", "I_D", "I_A", "I_R", "I_L")
ANALYZER_ORDER = ("H", "V", "D", "A", "R", "L")

NoiseKind = Literal["none", "gaussian-relative", "poisson"]


@dataclass(frozen=True)
class NoiseModel:
    """Detector noise applied independently to every intensity channel.

    ``level`` is the relative standard deviation for ``gaussian-relative``
    and the number of counts per unit intensity for ``poisson``.
    """

    kind: NoiseKind = "gaussian-relative"
    level: float = 0.01

    def __post_init__(self):
        if self.kind not in ("none", "gaussian-relative", "poisson"):
            raise InvalidArgumentError(f"unknown noise kind {self.kind!r}")
        if not self.level >= 0:
            raise InvalidArgumentError("noise level must be >= 0")
        if self.kind == "poisson" and self.level == 0:
            raise InvalidArgumentError("poisson noise needs a positive counts-per-unit level")

    @property
    def relative_sigma(self) -> float:
        """Approximate relative standard deviation of a unit-intensity channel."""
        if self.kind == "none":
            return 0.0
        if self.kind == "gaussian-relative":
            return self.level
        return 1.0 / np.sqrt(self.level)

    def apply(self, values: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        values = np.asarray(values, dtype=float)
        if self.kind == "none" or (self.kind == "gaussian-relative" and self.level == 0):
            return values.copy()
        if self.kind == "gaussian-relative":
            noisy = values * (1.0 + self.level * rng.standard_normal(values.shape))
            return np.clip(noisy, 0.0, None)
        return rng.poisson(values * self.level) / self.level

    def describe(self) -> str:
        return f"{self.kind}:{self.level:.17g}"

    @classmethod
    def parse(cls, text: str) -> "NoiseModel":
        kind, _, level = text.partition(":")
        return cls(kind.strip(), float(level) if level else 0.0)


NOISELESS = NoiseModel("none", 0.0)


@dataclass(frozen=True)
class ScanConfig:
    omega_grid: np.ndarray
    input_intensity: float = 1.0
    noise: NoiseModel = NOISELESS
    seed: int = 0

    def __post_init__(self):
        grid = np.asarray(self.omega_grid, dtype=float)
        if grid.ndim != 1 or grid.size == 0:
            raise InvalidArgumentError("omega grid must be a non-empty 1-D sequence")
        if np.any(np.diff(grid) <= 0):
            raise InvalidArgumentError("omega grid must be strictly increasing")
        if not self.input_intensity > 0:
            raise InvalidArgumentError("input intensity must be positive")
        object.__setattr__(self, "omega_grid", grid)


@dataclass(eq=False)
class ScanDataset:
    """Projected intensities versus detuning.

    ``intensities`` has shape ``(n, 6)`` in analyzer order H, V, D, A, R, L.
    """

    omega: np.ndarray
    input_intensity: np.ndarray
    intensities: np.ndarray
    metadata: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        self.omega = np.asarray(self.omega, dtype=float)
        self.input_intensity = np.broadcast_to(
            np.asarray(self.input_intensity, dtype=float), self.omega.shape
        ).copy()
        self.intensities = np.asarray(self.intensities, dtype=float).reshape(-1, 6)
        if self.intensities.shape[0] != self.omega.size:
            raise InvalidArgumentError("one intensity sextet is needed per detuning")
        if np.any(self.intensities < 0) or np.any(self.input_intensity <= 0):
            raise InvalidArgumentError("intensities must be >= 0 and input intensity > 0")
        if np.unique(self.omega).size != self.omega.size:
            raise InvalidArgumentError("detunings must be unique")

    def __len__(self):
        return self.omega.size

    def records(self) -> Iterator[tuple[float, float, IntensitySextet]]:
        for w, i_in, row in zip(self.omega, self.input_intensity, self.intensities):
            yield float(w), float(i_in), IntensitySextet(*row)

    @property
    def input_state(self) -> JonesVector | None:
        """Nominal input polarization recorded in the metadata, if any."""
        if "input_theta" not in self.metadata:
            return None
        return JonesVector.from_angles(
            float(self.metadata["input_theta"]), float(self.metadata.get("input_phi", 0.0))
        )

    def subset(self, mask) -> "ScanDataset":
        return ScanDataset(
            self.omega[mask], self.input_intensity[mask], self.intensities[mask], dict(self.metadata)
        )


def project_intensities(rho: PolarizationDensity, r_total: float, input_intensity: float) -> IntensitySextet:
    """Intensities behind the six analyzers for reflected state ``rho``."""
    total = input_intensity * r_total
    vals = [total * rho.expectation(BASIS_STATES[b]) for b in ANALYZER_ORDER]
    # pairs of projectors sum to the identity; enforce it despite rounding
    out = []
    for k in range(0, 6, 2):
        first = min(max(vals[k], 0.0), total)
        out += [first, total - first]
    return IntensitySextet(*out)


def point_rng(seed: int, index: int) -> np.random.Generator:
    """Independent stream for grid point ``index``; order of generation is irrelevant."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(index,)))


def simulate_scan(params: CavityParams, coupling: CouplingConfig, config: ScanConfig, label: str = "") -> ScanDataset:
    rows = np.empty((config.omega_grid.size, 6))
    for k, w in enumerate(config.omega_grid):
        out = reflect(params, coupling, w)
        clean = project_intensities(out.rho, out.r_total, config.input_intensity).as_tuple()
        rows[k] = config.noise.apply(np.array(clean), point_rng(config.seed, k))
    theta, phi = coupling.input_state.angles()
    metadata = {
        "input_theta": f"{theta:.17g}",
        "input_phi": f"{phi:.17g}",
        "device": label,
        "seed": str(config.seed),
        "noise": config.noise.describe(),
    }
    return ScanDataset(config.omega_grid.copy(), config.input_intensity, rows, metadata)


@dataclass(frozen=True)
class ReconstructedPoint:
    stokes: StokesVector
    purity: float
    r_total: float
    r_total_raw: float
    out_of_range: bool = False
    basis_disagreement: float = 0.0

    def __iter__(self):
        return iter((self.stokes, self.purity, self.r_total))


def reconstruct_point(sextet: IntensitySextet, input_intensity: float, noise_level: float = 0.0) -> ReconstructedPoint:
    """Stokes vector, degree of polarization and total reflectivity of one point.

    ``r_total`` is clamped to [0, 1]; ``out_of_range`` is set when the raw
    value exceeds ``1 + 3 * noise_level``.
    """
    if not input_intensity > 0:
        raise InvalidArgumentError("input intensity must be positive")
    s, disagreement = stokes_from_intensities(sextet, return_diagnostic=True)
    raw = (sextet.i_h + sextet.i_v) / input_intensity
    out_of_range = raw > 1.0 + 3.0 * noise_level
    if out_of_range:
        log.warning("reflectivity %.6g exceeds 1 beyond the noise allowance; clamped", raw)
    return ReconstructedPoint(
        stokes=s,
        purity=degree_of_polarization(s),
        r_total=min(max(raw, 0.0), 1.0),
        r_total_raw=raw,
        out_of_range=out_of_range,
        basis_disagreement=disagreement,
    )


@dataclass(eq=False)
class Reconstruction:
    """Per-detuning reconstruction of a whole dataset (column arrays)."""

    omega: np.ndarray
    r_total: np.ndarray
    r_total_raw: np.ndarray
    stokes: np.ndarray  # shape (3, n)
    purity: np.ndarray
    basis_disagreement: np.ndarray
    out_of_range: np.ndarray

    def directions(self) -> np.ndarray:
        return self.stokes / np.where(self.purity > 0, self.purity, 1.0)


def reconstruct_dataset(dataset: ScanDataset, noise_level: float = 0.0) -> Reconstruction:
    points = [reconstruct_point(sx, i_in, noise_level) for _, i_in, sx in dataset.records()]
    return Reconstruction(
        omega=dataset.omega.copy(),
        r_total=np.array([p.r_total for p in points]),
        r_total_raw=np.array([p.r_total_raw for p in points]),
        stokes=np.array([p.stokes.as_array() for p in points]).T.reshape(3, -1),
        purity=np.array([p.purity for p in points]),
        basis_disagreement=np.array([p.basis_disagreement for p in points]),
        out_of_range=np.array([p.out_of_range for p in points], dtype=bool),
    )


def basis_sum_flags(dataset: ScanDataset, noise_level: float) -> np.ndarray:
    """Points whose three basis-pair sums disagree by more than 5x the noise."""
    sums = dataset.intensities.reshape(-1, 3, 2).sum(axis=2)
    mean = sums.mean(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        spread = np.where(mean > 0, (sums.max(axis=1) - sums.min(axis=1)) / mean, 0.0)
    return spread > 5.0 * noise_level


# -- file I/O ---------------------------------------------------------------


def _fmt(x: float) -> str:
    return repr(float(x))


def write_dataset(dataset: ScanDataset, path, manifest: dict[str, str] | None = None) -> Path:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for w, i_in, row in zip(dataset.omega, dataset.input_intensity, dataset.intensities):
            writer.writerow([_fmt(w), _fmt(i_in), *(_fmt(v) for v in row)])
    write_sidecar(path, {"dataset": dataset.metadata}, manifest)
    return path


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".meta")


def write_sidecar(path, sections: dict[str, dict[str, str]], manifest: dict[str, str] | None = None) -> Path:
    cp = configparser.ConfigParser(interpolation=None)
    for name, values in sections.items():
        cp[name] = {k: str(v) for k, v in values.items()}
    if manifest is not None:
        cp["manifest"] = {k: str(v) for k, v in manifest.items()}
    out = sidecar_path(path)
    with open(out, "w", encoding="utf-8") as fh:
        cp.write(fh)
    return out


def read_dataset(path) -> ScanDataset:
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != CSV_HEADER:
            raise DatasetFormatError(f"header must be {','.join(CSV_HEADER)}", row=1)
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(CSV_HEADER):
                raise DatasetFormatError(f"expected {len(CSV_HEADER)} columns, got {len(row)}", row=lineno)
            try:
                values = [float(c) for c in row]
            except ValueError as exc:
                raise DatasetFormatError(str(exc), row=lineno) from None
            if not np.all(np.isfinite(values)):
                raise DatasetFormatError("non-finite value", row=lineno)
            if values[1] <= 0 or min(values[2:]) < 0:
                raise DatasetFormatError("intensities must be >= 0 and I_in > 0", row=lineno)
            rows.append(values)
    if not rows:
        raise DatasetFormatError("dataset has no data rows")
    data = np.array(rows)
    metadata = {}
    side = sidecar_path(path)
    if side.exists():
        cp = configparser.ConfigParser(interpolation=None)
        cp.read(side, encoding="utf-8")
        if cp.has_section("dataset"):
            metadata = dict(cp["dataset"])
    try:
        return ScanDataset(data[:, 0], data[:, 1], data[:, 2:], metadata)
    except InvalidArgumentError as exc:
        raise DatasetFormatError(str(exc)) from None
