"""Exception hierarchy shared across the package."""


class StackSegError(Exception):
    """Base class for every error raised by stackseg."""


class DimensionError(StackSegError, ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ContractError(StackSegError, RuntimeError):
    """A caller violated a documented precondition."""


class ConfigError(StackSegError):
    """Invalid or unknown configuration values, or a missing checkpoint."""


class DataError(StackSegError):
    """Input volume is malformed or missing required parts."""


class GapError(DataError):
    """Slice indices in a stack directory are not contiguous."""

    def __init__(self, missing):
        self.missing = sorted(missing)
        super().__init__(f"missing slice indices: {self.missing}")


class FormatError(DataError):
    """Stack files disagree on resolution, dtype, or layout."""
