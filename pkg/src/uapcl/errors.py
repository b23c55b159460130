class ValidationError(ValueError):
    """Bad argument or malformed input; the CLI maps it to exit code 2."""


class ShapeError(ValidationError):
    pass


class EmptyInputError(ValidationError):
    pass


class FormatError(ValidationError):
    """Base class for on-disk format problems."""


class MagicError(FormatError):
    pass


class TruncatedError(FormatError):
    pass


class CountMismatchError(FormatError):
    pass


class VersionError(FormatError):
    pass


class IncompleteRunError(RuntimeError):
    def __init__(self, missing):
        self.missing = list(missing)
        super().__init__("incomplete run, missing: " + ", ".join(self.missing))
