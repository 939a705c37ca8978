"""Exception types shared across the package."""


class SSegError(Exception):
    """Base class for all errors raised by sseg."""


class ConfigError(SSegError, ValueError):
    pass


class InputError(SSegError, ValueError):
    pass


class ParseError(SSegError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class RecordError(SSegError):
    """A manifest record points at an image that is missing or unreadable."""

    def __init__(self, record_id, message):
        self.record_id = record_id
        super().__init__(f"record {record_id!r}: {message}")


class NonFiniteLossError(SSegError, FloatingPointError):
    def __init__(self, step, lr, components):
        self.step = step
        self.lr = lr
        self.components = components
        parts = ", ".join(f"{k}={v}" for k, v in components.items())
        super().__init__(f"non-finite loss at step {step} (lr={lr}): {parts}")
