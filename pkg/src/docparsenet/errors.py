"""Exception hierarchy shared by every module.

Each error class carries the process exit code the CLI maps it to.
"""


class DocParseError(Exception):
    exit_code = 1


class ShapeError(DocParseError, ValueError):
    """Tensor shapes are incompatible with an operation."""


class ContractError(DocParseError, ValueError):
    """A precondition that is not about shapes was violated."""


class ConfigError(DocParseError, ValueError):
    exit_code = 2


class DataError(DocParseError):
    exit_code = 3


class DtfFormatError(DataError):
    """Malformed DTF container. ``offset`` is the byte position of the fault."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class GenerationError(DataError):
    pass


class NumericalAbort(DocParseError):
    exit_code = 4
