"""Exception hierarchy shared by every xpose module."""


class XposeError(Exception):
    """Base class for all package errors."""


class ShapeError(XposeError, ValueError):
    """An array does not fit the layer or model it is fed to."""


class UnknownTapError(XposeError, KeyError):
    def __init__(self, name, valid):
        self.name = name
        self.valid = list(valid)
        super().__init__(f"unknown layer {name!r}; valid names: {', '.join(self.valid)}")

    def __str__(self):
        return self.args[0]


class NumericError(XposeError, ArithmeticError):
    """A loss or gradient became non-finite."""


class CheckpointError(XposeError):
    pass


class BadMagicError(CheckpointError):
    pass


class TruncatedBlobError(CheckpointError):
    pass


class ArchitectureMismatchError(CheckpointError):
    pass


class DatasetFormatError(XposeError, ValueError):
    pass


class ConfigError(XposeError, ValueError):
    """Run configuration failed validation.

    ``pointer`` is the JSON pointer of the offending element.
    """

    def __init__(self, message, pointer=""):
        self.pointer = pointer
        super().__init__(message)


class MissingPrerequisiteError(XposeError, FileNotFoundError):
    def __init__(self, path, hint=""):
        self.path = str(path)
        msg = f"missing prerequisite: {self.path}"
        if hint:
            msg += f" ({hint})"
        super().__init__(msg)

    def __str__(self):
        return self.args[0]
