"""Exception taxonomy shared across the package (maps onto CLI exit codes)."""


class MxCausalError(Exception):
    """Base class for all package errors."""


class ConfigError(MxCausalError):
    """Malformed or inconsistent run configuration."""


class DataValidationError(MxCausalError):
    """Dataset failed structural validation."""


class FitError(MxCausalError):
    """A nuisance fit could not be carried out (degenerate training data)."""


class DegenerateFoldError(FitError):
    """A cross-fitting training fold lacks a treatment level or response class."""


class WeakInstrumentError(MxCausalError):
    """First-stage contrast too close to zero for the ratio estimator."""


class NoCompliersError(MxCausalError):
    """Instrument has no effect on treatment in the enumerated law."""
