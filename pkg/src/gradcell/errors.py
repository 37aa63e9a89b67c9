"""Exception hierarchy shared across gradcell."""


class GradcellError(Exception):
    """Base class for all gradcell errors."""


class NumericalError(GradcellError, ArithmeticError):
    """A non-finite value appeared; the message names the offending op."""

    def __init__(self, op, detail=""):
        self.op = op
        msg = f"non-finite value produced by op '{op}'"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)


class UsageError(GradcellError, ValueError):
    pass


class ConfigError(GradcellError, ValueError):
    pass


class EmptyCellError(GradcellError, ValueError):
    pass


class ParseError(GradcellError, ValueError):
    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}:{line}: " if line is not None else f"{path}: "
        elif line is not None:
            where = f"line {line}: "
        super().__init__(where + message)


class SchemaError(GradcellError, ValueError):
    pass


class ReplayError(GradcellError, RuntimeError):
    """Step-2 recomputation disagreed with the Step-1 embedding cache."""


class InfeasibleError(GradcellError, ValueError):
    pass


class DegenerateInputError(GradcellError, ValueError):
    pass


class DegenerateAugmentationWarning(UserWarning):
    """Dropout is disabled, so both views of a cell are identical."""
