"""Exception taxonomy shared across the package."""


class ValidationError(ValueError):
    """Bad arguments or a malformed input document."""


class InfeasibleContentionError(ValidationError):
    """Co-running interference leaves no processor capacity."""


class OomError(RuntimeError):
    """Model weights plus KV cache do not fit device memory."""


class EmptyDatasetError(RuntimeError):
    """No memory-feasible ratio-score pair could be collected."""


class NoFeasibleConfigError(RuntimeError):
    """Every candidate pruning configuration violates the memory budget."""


class DivergenceError(RuntimeError):
    """Training loss became non-finite."""

    def __init__(self, message: str, batch_index: int | None = None):
        super().__init__(message)
        self.batch_index = batch_index


class NumericalError(RuntimeError):
    """Non-finite gradient or intermediate value."""
