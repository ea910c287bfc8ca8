"""
Exception hierarchy shared by every module.

Each class carries the process exit code the CLI uses when the error escapes
a run: 2 for configuration or usage problems, 3 for numerical failures and
4 for tolerance failures.
"""


class BdsdeError(Exception):
    exit_code = 3


class InvalidArgumentError(BdsdeError, ValueError):
    exit_code = 2


class ConfigError(InvalidArgumentError):

    def __init__(self, message, offending_keys=()):
        self.offending_keys = list(offending_keys)
        if self.offending_keys:
            message = f"{message}: {', '.join(self.offending_keys)}"
        super().__init__(message)


class MissingPointError(BdsdeError, LookupError):

    def __init__(self, step, point):
        self.step = step
        self.point = point
        super().__init__(f"Point {point} was not declared for step {step}")


class NumericalDegeneracyError(BdsdeError):

    def __init__(self, message, step=None, condition=None):
        self.step = step
        self.condition = condition
        if step is not None:
            message = f"{message} (step {step}, condition estimate {condition:.3g})"
        super().__init__(message)


class DivergenceError(BdsdeError):

    def __init__(self, message, step=None, path=None):
        self.step = step
        self.path = path
        if step is not None:
            message = f"{message} (step {step}, path {path})"
        super().__init__(message)


class BasisDegeneracyError(BdsdeError):

    def __init__(self, message, step=None):
        self.step = step
        if step is not None:
            message = f"{message} (step {step})"
        super().__init__(message)


class ConditioningError(BdsdeError):
    pass


class ContractViolationError(BdsdeError):
    exit_code = 2


class PreconditionError(BdsdeError):
    exit_code = 2


class ToleranceError(BdsdeError):
    exit_code = 4

    def __init__(self, failed):
        self.failed = list(failed)
        super().__init__(f"Tolerance check(s) failed: {', '.join(self.failed)}")
