"""Exception types shared across the package."""


class CardioemuError(Exception):
    """Base class for all package errors."""


class ConfigurationError(CardioemuError):
    """A caller-supplied setting or graph op is invalid."""


class NotPositiveDefiniteError(CardioemuError):
    """Cholesky factorization hit a non-positive pivot."""

    def __init__(self, pivot_index, pivot_value):
        self.pivot_index = int(pivot_index)
        self.pivot_value = float(pivot_value)
        super().__init__(
            f"matrix is not positive definite: pivot {self.pivot_index} "
            f"has value {self.pivot_value:.6g}"
        )


class SimulationDivergedError(CardioemuError):
    """ODE state became non-finite."""

    def __init__(self, time):
        self.time = float(time)
        super().__init__(f"simulation state became non-finite at t={self.time:.6g} s")


class NotConvergedError(CardioemuError):
    """Simulation failed to reach a periodic steady state."""

    def __init__(self, periodicity_error, n_cycles):
        self.periodicity_error = float(periodicity_error)
        self.n_cycles = int(n_cycles)
        super().__init__(
            f"no periodic steady state after {self.n_cycles} cycles "
            f"(volume mismatch {self.periodicity_error:.3g} mL)"
        )


class SchemaError(CardioemuError):
    """A CSV or checkpoint file does not match the declared schema."""


class ValidationError(CardioemuError):
    """Domain object violates one of its invariants."""


class TrainingDivergedError(CardioemuError):
    """Optimization produced a non-finite objective.

    Carries the last finite parameter snapshot so callers can recover it.
    """

    def __init__(self, message, checkpoint=None):
        self.checkpoint = checkpoint
        super().__init__(message)
