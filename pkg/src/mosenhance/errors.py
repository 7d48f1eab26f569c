"""Exception hierarchy shared by every module.

Each class carries a short machine-readable ``kind`` that the CLI prints in
its one-line error record.
"""


class MosEnhanceError(Exception):
    kind = "error"

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field


class ShapeError(MosEnhanceError, ValueError):
    kind = "shape-error"


class LengthError(MosEnhanceError, ValueError):
    kind = "length-error"


class FormatError(MosEnhanceError, ValueError):
    kind = "format-error"


class DataError(MosEnhanceError, ValueError):
    kind = "data-error"


class ConfigError(MosEnhanceError, ValueError):
    kind = "config-error"


class ContractError(MosEnhanceError, ValueError):
    kind = "contract-violation"


class NonFiniteError(MosEnhanceError, FloatingPointError):
    kind = "non-finite"
