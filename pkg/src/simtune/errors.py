"""Exception types shared across the package."""


class SimtuneError(Exception):
    """Base class for all package errors."""


class NumericalFailure(SimtuneError):
    """A numerical operation produced a non-finite value."""

    def __init__(self, op_name: str, message: str | None = None):
        self.op_name = op_name
        super().__init__(message or f"non-finite value produced by operation '{op_name}'")


class TrainingDiverged(SimtuneError):
    """The inner training loss blew up."""

    def __init__(self, epoch: int, message: str | None = None):
        self.epoch = epoch
        super().__init__(message or f"training diverged at epoch {epoch}")


class OracleUnreliable(SimtuneError):
    """The brute-force oracle could not solve the inner problem to convergence."""


class ConfigError(SimtuneError):
    """An experiment configuration failed to parse or validate."""
