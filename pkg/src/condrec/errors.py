"""Exception types shared across the package."""


class CondrecError(Exception):
    """Base class for all package errors."""


class InvalidFieldError(CondrecError):
    """A field carries non-finite entries or has the wrong shape."""


class InvalidMeshError(CondrecError):
    """Mesh is degenerate or inconsistent with the operation."""


class FormulationMismatchError(CondrecError):
    """State components do not match the active formulation."""


class CoercivityError(CondrecError):
    """Conductivity violates the positivity required for assembly."""


class InvalidExcitationError(CondrecError):
    """Excitation currents are not conservative or badly shaped."""


class AssemblyError(CondrecError):
    """Linear system could not be assembled or factorized."""


class UnsupportedOperationError(CondrecError):
    """Requested feature is not available for this object."""


class BracketFailureError(CondrecError):
    """Regularization-parameter search could not bracket the target band.

    Carries the sampled (alpha, sigma) pairs for diagnosis.
    """

    def __init__(self, message, samples=None):
        super().__init__(message)
        self.samples = list(samples or [])


class NonconvergenceError(CondrecError):
    """Inner solver exhausted its budget above tolerance."""


class ConfigError(CondrecError):
    """Configuration file is missing, malformed, or inconsistent."""


class ExperimentError(CondrecError):
    """A pipeline stage failed; `stage` names it."""

    def __init__(self, stage, message):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage
