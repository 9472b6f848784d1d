"""Exception types shared across the package."""


class SMTError(Exception):
    """Base class for all errors raised by this package."""


class FormatError(SMTError, ValueError):
    """A file or blob does not follow the expected binary layout."""


class TruncatedFileError(SMTError, OSError):
    """A file ended before the number of records its header promises."""


class SingularityError(SMTError, ArithmeticError):
    pass


class RankError(SMTError, ArithmeticError):
    pass


class NumericError(SMTError, ArithmeticError):
    pass


class ModeError(SMTError, ValueError):
    """An accumulation call does not match the statistics' mode."""


class StateError(SMTError, RuntimeError):
    """A pipeline component was used before being fitted."""


class DependencyError(SMTError, RuntimeError):
    """A stage artifact required by another stage is missing."""

    def __init__(self, stage, detail=""):
        self.stage = stage
        msg = f"missing artifact from stage '{stage}'"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)


class HashMismatchError(SMTError, RuntimeError):
    """An artifact was produced under a different config than the consumer expects."""
