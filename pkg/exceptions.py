"""Exception hierarchy shared by every module.

The CLI maps these onto exit codes: ConfigError is a usage error (1),
everything else is a runtime/data error (2).
"""


class IBAError(Exception):
    """Base class for all errors raised by this project."""


class ShapeError(IBAError, ValueError):
    def __init__(self, message, *shapes):
        if shapes:
            message = f"{message}: " + " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(message)
        self.shapes = tuple(tuple(s) for s in shapes)


class NonFiniteError(IBAError, FloatingPointError):
    pass


class TapeError(IBAError, RuntimeError):
    pass


class ConfigError(IBAError, ValueError):
    pass


class DataError(IBAError):
    pass


class LabelError(DataError, ValueError):
    pass


class FormatError(DataError):
    pass


class ScheduleError(IBAError, ValueError):
    pass


class TrainingError(IBAError, RuntimeError):
    def __init__(self, message, step=None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step
