"""Exception hierarchy shared by all driftcomp modules.

Exit-code mapping used by the CLI: 2 for configuration problems, 3 for
data/format problems, 4 for numerical failures.
"""


class DriftCompError(Exception):
    """Base class for all driftcomp errors."""

    exit_code = 1


class ConfigError(DriftCompError):
    """Invalid configuration, unknown method, mismatched run setups."""

    exit_code = 2


class DataError(DriftCompError):
    """Problems with input data: bad files, bad shapes, bad labels."""

    exit_code = 3


class FormatError(DataError):
    """A binary file does not carry the expected magic/version."""


class CorruptionError(DataError):
    """A binary file is structurally recognized but its payload is damaged."""


class ShapeError(DataError):
    """Array dimensions do not line up."""


class EmptyClassError(DataError):
    """A Gaussian was requested for a class with zero samples."""


class EmptyFitError(DataError):
    """An operator fit was requested with zero feature pairs."""


class CoverageError(DataError):
    """The Gaussian bank does not cover every classifier class."""


class ConflictError(DataError):
    """Duplicate class ids during classifier expansion."""


class NumericalError(DriftCompError):
    """A numerical routine failed (indefinite covariance, diverging loss)."""

    exit_code = 4
