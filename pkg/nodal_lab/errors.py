class NodalLabError(Exception):
    """
    Base error for the laboratory. Carries the module and operation that
    raised it so the command line can emit a machine-readable error record.
    """

    exit_code = 4

    def __init__(self, message: str, module: str = "", operation: str = ""):
        super().__init__(message)
        self.message = message
        self.module = module
        self.operation = operation

    def to_record(self) -> dict:
        return {
            "error": type(self).__name__,
            "module": self.module,
            "operation": self.operation,
            "message": self.message,
            "exit_code": self.exit_code,
        }


class NumericalFailure(NodalLabError):
    exit_code = 3


class ConfigurationFailure(NodalLabError):
    exit_code = 2


class RegularityViolation(NumericalFailure):
    """0 is numerically not a regular value of the field."""


class IntegrandFailure(NumericalFailure):
    pass


class NotMinimal(NumericalFailure):
    pass


class DegenerateConditioning(NumericalFailure):
    """The observed block of a Gaussian vector is numerically singular."""


class NonDegeneracySweepFailure(NumericalFailure):
    pass


class NewtonStall(NumericalFailure):
    pass


class MorseFloorViolation(NumericalFailure):
    """A Hessian eigenvalue fell below the Morse floor."""


class InsufficientSamples(NumericalFailure):
    pass


class ConfigError(ConfigurationFailure):
    pass


class ModelError(ConfigurationFailure):
    pass


class DomainError(ConfigurationFailure):
    pass
