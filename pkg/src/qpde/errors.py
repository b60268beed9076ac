"""Exception types shared across the package."""


class QpdeError(Exception):
    """Base class for all package errors."""


class DimensionError(QpdeError):
    """Tensor shapes are incompatible for the requested operation."""


class ConfigurationError(QpdeError):
    """A build-time or config-time precondition is violated."""


class UsageError(QpdeError):
    """An API is called in a way its contract forbids."""


class ContractError(QpdeError):
    """A runtime value violates a documented data contract."""


class SolverError(QpdeError):
    """A numerical solver failed or detected instability."""


class CFLError(SolverError):
    """An explicit time step violates the stability bound."""


class FormatError(QpdeError):
    """A serialized file is malformed. Carries the byte offset of the fault."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class CostAccountingError(QpdeError):
    """An instrumented forward pass disagrees with the static cost plan."""


class TrainingDivergenceError(QpdeError):
    """Training produced a non-finite loss."""
