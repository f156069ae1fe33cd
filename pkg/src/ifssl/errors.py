"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Invalid configuration, shapes or parameter combinations."""

    def __init__(self, message, key=None):
        super().__init__(message if key is None else f"{key}: {message}")
        self.key = key


class InputError(ValueError):
    """Invalid data passed to an operation (labels, probabilities, batches)."""


class ParseError(InputError):
    """Malformed row in a dataset file."""

    def __init__(self, message, line):
        super().__init__(f"line {line}: {message}")
        self.line = line


class FormatError(ParseError):
    """Row whose feature count disagrees with the header."""


class UndefinedAccuracyError(InputError):
    """Accuracy requested on a dataset without any reference labels."""


class DivergenceError(RuntimeError):
    """Training produced non-finite values.

    ``records`` carries whatever epoch records were completed before the
    failure so callers can keep partial output.
    """

    def __init__(self, message, records=None):
        super().__init__(message)
        self.records = list(records or [])
