"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible for an operation."""


class ConfigError(ValueError):
    """A configuration object violates its invariants.

    ``violations`` holds one human-readable line per failed check.
    """

    def __init__(self, violations):
        if isinstance(violations, str):
            violations = [violations]
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class DataFormatError(ValueError):
    """An input data file could not be parsed."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class TrainingDiverged(RuntimeError):
    """A training loss became non-finite."""

    def __init__(self, step, losses):
        self.step = step
        self.losses = list(losses)
        super().__init__(f"loss diverged at step {step}: {self.losses}")
