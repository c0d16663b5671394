"""Exception hierarchy shared across the package.

Exit-code mapping used by the CLI: ContractError/ConfigError -> 1,
NumericalAbort -> 2.
"""


class SliceRecError(Exception):
    pass


class ContractError(SliceRecError):
    """A precondition or invariant of an operation was violated."""


class ConfigError(SliceRecError):
    """Bad configuration: unknown key, unknown variant, out-of-range value."""


class ParseError(ContractError):
    """Malformed input data; carries the offending line number."""

    def __init__(self, message, line_no=None):
        if line_no is not None:
            message = f"line {line_no}: {message}"
        super().__init__(message)
        self.line_no = line_no


class NumericalAbort(SliceRecError):
    """Training hit NaN/Inf; carries a diagnostic dump."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
