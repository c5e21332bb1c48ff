"""Semantic exception hierarchy shared by all modules."""


class CmjError(Exception):
    """Base class for all package errors."""


class ConfigError(CmjError, ValueError):
    """Invalid model/numerics/run configuration or precondition violation."""

    def __init__(self, message: str, field: str | None = None):
        self.field = field
        super().__init__(f"{field}: {message}" if field else message)


class ContractError(CmjError, RuntimeError):
    """A declared invariant was violated at run time.

    Examples: an interaction rule returning a value outside [0, 1], an
    intensity density exceeding its stated sup bound, an initial-age
    sampler returning a negative age.
    """


class PicardDivergenceError(CmjError, RuntimeError):
    """The within-step fixed-point sweep of the boundary solver failed."""

    def __init__(self, step: int, time: float, iterations: int, last_delta: float):
        self.step = step
        self.time = time
        self.iterations = iterations
        self.last_delta = last_delta
        super().__init__(
            f"fixed-point sweep did not converge at step {step} (t={time:.6g}) "
            f"after {iterations} iterations; last update {last_delta:.3e}"
        )


class EventCapError(CmjError, RuntimeError):
    """A simulation exceeded its configured event budget."""


class AbsorbingStateError(CmjError, RuntimeError):
    """Backward-chain kernel requested at a time with zero birth density."""
