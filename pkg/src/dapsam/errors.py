"""Exception types shared across the package."""


class DapsamError(Exception):
    pass


class InvalidInputError(DapsamError, ValueError):
    """Shapes, ranges or sizes that violate an operation's preconditions."""


class NumericFailureError(DapsamError, FloatingPointError):
    """A non-finite value appeared in an activation or loss."""


class InventoryError(DapsamError, KeyError):
    """Unknown parameter, domain or component name, or an empty collection."""

    def __str__(self):
        # KeyError repr-quotes its message; keep it readable.
        return str(self.args[0]) if self.args else ""


class DegenerateSimilarityError(DapsamError, ZeroDivisionError):
    """Cosine similarity requested for a zero-norm vector on the strict path."""


class CorruptCheckpointError(DapsamError, ValueError):
    pass


class DatasetLoadError(DapsamError, OSError):
    def __init__(self, path, reason):
        super().__init__(f"{path}: {reason}")
        self.path = path
        self.reason = reason


class ConfigError(DapsamError, ValueError):
    pass
