class ContractViolation(ValueError):
    """A shape, dimension or precondition of an operator does not hold."""


class CheckpointLookupError(LookupError):
    pass


class NumericalError(FloatingPointError):
    """Non-finite values showed up in a loss, gradient or finite-difference result."""


class ConfigError(ValueError):
    pass


class GradcheckFailure(AssertionError):
    pass
