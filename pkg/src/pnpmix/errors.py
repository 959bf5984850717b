"""Exception types raised by pnpmix.

Every error derives from the builtin a caller would naturally catch (``ValueError`` for
bad inputs, ``RuntimeError`` for failures while running), plus :class:`PnpMixError` so
all library errors can be caught at once.
"""


class PnpMixError(Exception):
    """Root of all pnpmix errors."""


class DimensionError(PnpMixError, ValueError):
    """Shapes of two operands do not agree."""

    def __init__(self, what: str, shape_a: tuple[int, ...], shape_b: tuple[int, ...]):
        self.shape_a = tuple(shape_a)
        self.shape_b = tuple(shape_b)
        super().__init__(f"{what}: shape {self.shape_a} does not match {self.shape_b}")


class ParameterError(PnpMixError, ValueError):
    """An argument is outside its allowed range."""


class FormatError(PnpMixError, ValueError):
    """A file or byte payload does not follow its format."""


class ValidationError(PnpMixError, ValueError):
    """Inputs are individually well-formed but inconsistent with each other."""


class ScheduleError(PnpMixError, ValueError):
    """The noise schedule cannot support the requested operation."""


class NumericError(PnpMixError, ArithmeticError):
    """A computation produced non-finite values."""

    def __init__(self, message: str, timestep: int | None = None):
        self.timestep = timestep
        if timestep is not None:
            message = f"{message} (t={timestep})"
        super().__init__(message)


class TrainingError(PnpMixError, RuntimeError):
    """Toy denoiser training could not proceed."""

    def __init__(self, message: str, step: int | None = None):
        self.step = step
        if step is not None:
            message = f"{message} at step {step}"
        super().__init__(message)


class IntegrationError(PnpMixError, RuntimeError):
    """An external cooperating process did not answer."""


class StageError(PnpMixError, RuntimeError):
    """A pipeline stage failed; wraps the original error with its location."""

    def __init__(self, stage: str, timestep: int | None, cause: BaseException):
        self.stage = stage
        self.timestep = timestep
        self.cause = cause
        where = f"stage {stage}" if timestep is None else f"stage {stage} at t={timestep}"
        super().__init__(f"{where}: {cause}")
