"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """A configuration is structurally invalid or physically inconsistent."""


class InvalidInputError(ValueError):
    """An operation received inputs violating its preconditions."""


class SingularWavefunctionError(FloatingPointError):
    """The orbital matrix determinant underflowed; the sample must be rejected."""


class EmptyAccumulatorError(RuntimeError):
    """A statistics accumulator was read before receiving any samples."""


class PopulationExtinctionError(RuntimeError):
    """All walkers died during propagation; the run cannot continue."""


class NumericalAbortError(RuntimeError):
    """A run hit persistent non-finite numerics and stopped early."""
