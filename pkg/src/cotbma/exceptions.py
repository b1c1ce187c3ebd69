"""Exception types shared across the package."""


class CotBmaError(Exception):
    """Base class for all package errors."""


class ValidationError(CotBmaError, ValueError):
    """Malformed input: bad probability tables, configs or indices."""


class CapacityError(CotBmaError):
    """An exact enumeration would exceed its configured state cap."""


class ImpossiblePromptError(CotBmaError, ValueError):
    """Every task assigns probability zero to the observed prompt."""


class ProbeError(CotBmaError):
    """Fatal failure while talking to a chat endpoint."""


class AuthError(ProbeError):
    """The endpoint rejected the credentials. Never retried."""
