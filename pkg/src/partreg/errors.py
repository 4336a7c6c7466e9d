"""Exception and warning types raised across the package."""


class PartregError(Exception):
    """Base class for all package errors."""


class DegenerateParameters(PartregError, ValueError):
    pass


class InvalidCount(PartregError, ValueError):
    pass


class DegenerateInput(PartregError, ValueError):
    pass


class EmptyInput(PartregError, ValueError):
    pass


class EmptyScan(PartregError, ValueError):
    pass


class AllCandidatesFailed(PartregError, RuntimeError):
    pass


class ParseError(PartregError, ValueError):
    """Malformed point cloud file. ``location`` is a line number or byte offset."""

    def __init__(self, message, location=None):
        if location is not None:
            message = f"{message} (at {location})"
        super().__init__(message)
        self.location = location


class UnsupportedFormat(PartregError, ValueError):
    pass


class ConfigError(PartregError, ValueError):
    pass


class IoError(PartregError, OSError):
    """A result file could not be written."""


class PartregWarning(UserWarning):
    """Base class for recoverable conditions that are recorded, not raised."""


class DegenerateNeighborhood(PartregWarning):
    pass


class InsufficientNeighborhood(PartregWarning):
    pass


class EmptyPartition(PartregWarning):
    pass


class DegenerateCovariance(PartregWarning):
    pass


class FacesIgnored(PartregWarning):
    pass
