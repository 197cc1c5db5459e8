"""Exception types shared across the package."""


class FDRLError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(FDRLError, ValueError):
    pass


class ValidationError(FDRLError, ValueError):
    pass


class HeaderError(ValidationError):
    """Feature/checkpoint file has a bad magic, version or is truncated."""


class LabelRangeError(ValidationError):
    pass


class ConfigError(FDRLError, ValueError):
    pass


class NumericalError(FDRLError, RuntimeError):
    """A loss term became non-finite during training."""

    def __init__(self, term, value, step=None):
        self.term = term
        self.value = value
        self.step = step
        where = f" at step {step}" if step is not None else ""
        super().__init__(f"non-finite loss term {term}={value!r}{where}")
