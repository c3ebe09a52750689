"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand dimensions are inconsistent."""


class DegenerateInputError(ValueError):
    """Input is mathematically degenerate (e.g. a zero-norm vector)."""


class TableFormatError(ValueError):
    """Embedding table file is malformed."""

    def __init__(self, message: str, line_no: int | None = None):
        if line_no is not None:
            message = f"line {line_no}: {message}"
        super().__init__(message)
        self.line_no = line_no


class EmptySelectionError(ValueError):
    """A layer or token selection matched nothing."""


class ConfigError(ValueError):
    """Invalid run or module configuration."""


class LifecycleError(RuntimeError):
    """Mask lifecycle invoked out of order or without required inputs."""


class CacheMissError(RuntimeError):
    """Cached values requested before any full update populated them."""


class ScheduleError(RuntimeError):
    """Step index falls outside the planned schedule or cache window."""
