"""Shared error types mapped to CLI exit codes."""


class ConfigError(ValueError):
    """Bad configuration: parse failure, unknown key, out-of-range value."""

    exit_code = 2


class DataError(ValueError):
    """Bad or missing data: file format, split insufficiency, shape mismatch."""

    exit_code = 3


class NumericAbort(RuntimeError):
    """Training hit a non-finite loss; carries a diagnostic snapshot."""

    exit_code = 4

    def __init__(self, step: int, diagnostics: dict):
        super().__init__(f"non-finite loss at step {step}")
        self.step = step
        self.diagnostics = diagnostics
