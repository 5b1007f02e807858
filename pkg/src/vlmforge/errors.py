"""Exception hierarchy shared across vlmforge modules.

Exit-code mapping used by the CLI: usage errors -> 1, data errors -> 2,
numeric failures -> 3.
"""


class VlmforgeError(Exception):
    """Base class for all vlmforge errors."""


class CorpusFormatError(VlmforgeError):
    """A corpus file violates the jsonl schema.

    Carries the 1-based line number when the error is attributable to a line.
    """

    def __init__(self, message, line_no=None, path=None):
        self.line_no = line_no
        self.path = path
        prefix = ""
        if path is not None:
            prefix += f"{path}:"
        if line_no is not None:
            prefix += f"line {line_no}: "
        super().__init__(prefix + message)


class ShardFormatError(VlmforgeError):
    """A binary shard is corrupt or was written for a different vocab/config."""


class ConfigMismatchError(VlmforgeError):
    """Inputs are incompatible with the active model/packing configuration."""


class NumericError(VlmforgeError):
    """Training or scoring produced NaN/Inf."""
