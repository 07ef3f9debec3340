class LabError(Exception):
    """Base class for every error raised by this package."""


class ContractViolation(LabError, ValueError):
    """An operation was called with arguments that break its pre-conditions."""


class ShapeError(ContractViolation):
    """Tensor shapes do not conform for the requested operation."""

    def __init__(self, op: str, *shapes: tuple[int, ...]):
        self.op = op
        self.shapes = shapes
        listed = ", ".join(str(s) for s in shapes)
        super().__init__(f"{op}: shapes do not conform: {listed}")


class TapeError(LabError, RuntimeError):
    """The differentiation tape was misused."""


class ConfigError(LabError, ValueError):
    """A configuration value or file is invalid."""


class TrainingError(LabError, RuntimeError):
    """Training could not continue."""
