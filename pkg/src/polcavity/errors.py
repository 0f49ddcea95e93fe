"""Exception hierarchy shared by all polcavity modules."""


class PolCavityError(Exception):
    """Base class for all errors raised by polcavity."""


class InvalidStateError(PolCavityError, ValueError):
    """A polarization state is malformed (zero norm, non-Hermitian, bad trace)."""


class UnphysicalStateError(InvalidStateError):
    """A Stokes vector lies outside the Poincaré ball."""


class InvalidMixtureError(PolCavityError, ValueError):
    """Mixture weights are negative or do not sum to one."""


class DegenerateMeasurementError(PolCavityError, ValueError):
    """A pair of orthogonal projections has non-positive total intensity."""


class InvalidArgumentError(PolCavityError, ValueError):
    pass


class InsufficientDataError(PolCavityError, ValueError):
    """The dataset does not constrain the requested fit."""


class NoSolutionError(PolCavityError, ValueError):
    """The model cannot reproduce the measured value."""


class TrivialSolutionError(PolCavityError, ValueError):
    pass


class DatasetFormatError(PolCavityError, ValueError):
    def __init__(self, message, row=None):
        self.row = row
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)


class ConfigError(PolCavityError, ValueError):
    def __init__(self, message, key=None):
        self.key = key
        if key is not None:
            message = f"{key}: {message}"
        super().__init__(message)
