"""Error taxonomy shared by every engine module.

Each public operation maps any failure to exactly one kind; the CLI turns
kinds into exit codes (config errors 2, I/O errors 3, numeric divergence 4).
"""


class EngineError(Exception):
    """Base class for engine failures. `kind` names the failure class."""

    kind = "EngineError"


class ShapeMismatchError(EngineError):
    kind = "ShapeMismatch"


class IndexOutOfRangeError(EngineError):
    kind = "IndexOutOfRange"


class NonFiniteError(EngineError):
    kind = "NonFinite"


class EmptyInputError(EngineError):
    kind = "EmptyInput"


class ConfigInvalidError(EngineError):
    kind = "ConfigInvalid"


class IoFailureError(EngineError):
    kind = "IoFailure"
