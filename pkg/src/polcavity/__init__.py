"""Polarization tomography of light reflected by a birefringent micropillar
cavity: forward model, synthetic scans, and coupling-efficiency estimation."""

__version__ = "0.1.0"

from .cavity import (
    REFERENCE_CAVITY,
    REFERENCE_ETA_IN,
    CavityParams,
    CouplingConfig,
    ReflectionOutcome,
    min_purity_vs_coupling,
    reflect,
    reflection_coefficient,
    scan_curves,
)
from .estimation import (
    BranchDiagnostics,
    DegeneracyProfile,
    FitConfig,
    FitResult,
    branch_candidates,
    fit_eigenmode,
    fit_full,
    fit_joint,
    fit_staged,
    parametric_bootstrap,
    resolve_branch,
)
from .polarization import (
    IntensitySextet,
    JonesVector,
    PolarizationDensity,
    StokesVector,
    degree_of_polarization,
    density_from_stokes,
    mix,
    stokes_from_density,
    stokes_from_intensities,
    stokes_from_jones,
)
from .tomography import (
    NoiseModel,
    ScanConfig,
    ScanDataset,
    project_intensities,
    read_dataset,
    reconstruct_point,
    simulate_scan,
    write_dataset,
)

__all__ = [
    "__version__",
    "REFERENCE_CAVITY",
    "REFERENCE_ETA_IN",
    "CavityParams",
    "CouplingConfig",
    "ReflectionOutcome",
    "min_purity_vs_coupling",
    "reflect",
    "reflection_coefficient",
    "scan_curves",
    "BranchDiagnostics",
    "DegeneracyProfile",
    "FitConfig",
    "FitResult",
    "branch_candidates",
    "fit_eigenmode",
    "fit_full",
    "fit_joint",
    "fit_staged",
    "parametric_bootstrap",
    "resolve_branch",
    "IntensitySextet",
    "JonesVector",
    "PolarizationDensity",
    "StokesVector",
    "degree_of_polarization",
    "density_from_stokes",
    "mix",
    "stokes_from_density",
    "stokes_from_intensities",
    "stokes_from_jones",
    "NoiseModel",
    "ScanConfig",
    "ScanDataset",
    "project_intensities",
    "read_dataset",
    "reconstruct_point",
    "simulate_scan",
    "write_dataset",
]
