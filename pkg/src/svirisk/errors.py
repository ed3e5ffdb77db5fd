"""Exception hierarchy shared by the pipeline stages."""


class SviRiskError(Exception):
    """Base class for all package errors."""


class ValidationError(SviRiskError, ValueError):
    pass


class DomainError(ValidationError):
    """A coordinate lies outside the supported reference-system domain."""


class ConfigurationError(SviRiskError, ValueError):
    pass


class PlanningError(SviRiskError):
    """The acquisition plan cannot be satisfied by the available neighborhoods.

    ``shortfall`` maps class index to the number of neighborhoods missing and
    ``partial`` holds whatever could still be selected.
    """

    def __init__(self, message, shortfall=None, partial=None):
        super().__init__(message)
        self.shortfall = dict(shortfall or {})
        self.partial = partial


class SamplingError(SviRiskError):
    pass


class TransportError(SviRiskError):
    """Retriable provider failure (network error, HTTP error status)."""

    def __init__(self, message, status=None):
        super().__init__(message)
        self.status = status


class IntegrityError(SviRiskError):
    """Downloaded payload does not match what was requested."""


class NonFiniteLossError(SviRiskError, FloatingPointError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})


class MissingArtifactError(SviRiskError):
    """A downstream stage ran before the stage producing its input."""

    def __init__(self, message, required_command=None):
        super().__init__(message)
        self.required_command = required_command
