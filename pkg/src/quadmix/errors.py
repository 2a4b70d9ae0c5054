"""Exception types shared across the package."""


class QuadMixError(Exception):
    """Base class for all package errors."""


class FormatError(QuadMixError):
    """A byte stream does not follow the expected container format."""


class TruncationError(FormatError):
    def __init__(self, expected: int, actual: int, what: str = "payload"):
        super().__init__(f"truncated {what}: expected {expected} bytes, got {actual}")
        self.expected = expected
        self.actual = actual


class TensorIOError(QuadMixError, OSError):
    def __init__(self, offset: int, cause: BaseException):
        super().__init__(f"write failed at byte offset {offset}: {cause}")
        self.offset = offset


class ShapeError(QuadMixError, ValueError):
    pass


class CategoryError(QuadMixError, ValueError):
    pass


class PolicyError(QuadMixError, ValueError):
    pass


class ConfigError(QuadMixError, ValueError):
    pass


class TrainingError(QuadMixError, RuntimeError):
    def __init__(self, iteration: int, message: str = "loss is not finite"):
        super().__init__(f"iteration {iteration}: {message}")
        self.iteration = iteration
