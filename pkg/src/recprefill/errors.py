"""Exception hierarchy shared by every module."""


class RecPrefillError(Exception):
    """Base class; the CLI turns these into machine-readable error records."""

    code = "error"


class ParseError(RecPrefillError):
    code = "parse_error"

    def __init__(self, line, message):
        self.line = line
        super().__init__(f"line {line}: {message}")


class DuplicateItem(RecPrefillError):
    code = "duplicate_item"

    def __init__(self, item_id):
        self.item_id = item_id
        super().__init__(f"duplicate item_id {item_id!r}")


class UnknownItem(RecPrefillError):
    code = "unknown_item"

    def __init__(self, item_id):
        self.item_id = item_id
        super().__init__(f"item_id {item_id!r} not in catalog")


class InvalidConfig(RecPrefillError, ValueError):
    code = "invalid_config"


class Infeasible(RecPrefillError):
    code = "infeasible"


class UnknownToken(RecPrefillError, KeyError):
    code = "unknown_token"


class EmptyLibrary(RecPrefillError):
    code = "empty_library"


class DimensionMismatch(RecPrefillError, ValueError):
    code = "dimension_mismatch"


class OddDimension(RecPrefillError, ValueError):
    code = "odd_dimension"


class EmptyRun(RecPrefillError):
    code = "empty_run"


class TraceMismatch(RecPrefillError):
    code = "trace_mismatch"
