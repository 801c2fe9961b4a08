"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Array shapes do not line up."""


class StateError(RuntimeError):
    """A layer was used out of order (e.g. backward before forward)."""


class NumericError(ArithmeticError):
    """A loss or gradient became non-finite."""


class DivergenceError(NumericError):
    def __init__(self, epoch, batch, value):
        super().__init__(f"non-finite loss {value!r} at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch


class ParseError(ValueError):
    def __init__(self, message, line=None, field=None):
        where = ""
        if line is not None:
            where = f"line {line}"
            if field is not None:
                where += f", field {field}"
            where += ": "
        super().__init__(where + message)
        self.line = line
        self.field = field


class ValidationError(ValueError):
    """A record parsed fine but breaks a data-model invariant."""


class ConfigError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


class CoverageError(KeyError):
    """Annotated documents have no score."""

    def __init__(self, missing):
        self.missing = list(missing)
        super().__init__(f"missing scores for {len(self.missing)} annotated docs, e.g. {self.missing[:5]}")

    def __str__(self):
        return self.args[0]


class CompatibilityError(ValueError):
    """Checkpoints disagree on their header fields."""
