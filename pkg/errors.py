# errors.py


class OpenFockError(Exception):
    """Base class for every error raised by openfock."""


class DimensionMismatch(OpenFockError):
    pass


class GridError(OpenFockError):
    pass


class StateSpaceTooLarge(OpenFockError):
    pass


class TransportError(OpenFockError):
    pass


class TemplateMismatch(OpenFockError):
    pass


class StabilityError(OpenFockError):
    pass


class SolverError(OpenFockError):
    pass


class NonUniqueStationaryState(OpenFockError):
    pass


class SamplerError(OpenFockError):
    pass


class ConfigError(OpenFockError):
    """Config problem pinned to a section and key."""

    def __init__(self, section, key, reason):
        self.section = section
        self.key = key
        self.reason = reason
        super().__init__(f"[{section}] {key}: {reason}")
