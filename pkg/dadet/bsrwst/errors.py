class DadetError(Exception):
    exit_code = 1
    kind = "runtime"


class InvalidInputError(DadetError, ValueError):
    kind = "invalid_input"


class InvalidBoxError(InvalidInputError):
    kind = "invalid_box"


class ConfigError(DadetError, ValueError):
    exit_code = 2
    kind = "config"


class DatasetError(DadetError, OSError):
    kind = "dataset"


class MissingColumnError(DadetError, KeyError):
    kind = "missing_column"

    def __init__(self, column, path=None):
        self.column = column
        self.path = path
        where = "" if path is None else f" in {path}"
        super().__init__(f"Missing metric column '{column}'{where}")

    def __str__(self):
        return self.args[0]


class DivergenceError(DadetError, ArithmeticError):
    """Raised when a training loss becomes NaN or Inf."""

    exit_code = 3
    kind = "diverged"

    def __init__(self, iteration, components):
        self.iteration = iteration
        self.components = dict(components)
        bad = ", ".join(f"{k}={v}" for k, v in sorted(self.components.items()))
        super().__init__(f"Non-finite loss at iteration {iteration}: {bad}")
