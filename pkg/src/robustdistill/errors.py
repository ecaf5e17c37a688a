"""Exception types shared across the package.

Exit-code mapping for the CLI: ConfigurationError / IngestionError exit 2,
NumericError exit 3.
"""


class ConfigurationError(ValueError):
    """A config value or builder argument violates its contract."""


class ContractError(ValueError):
    """A caller violated an operation precondition (shape mismatch, empty input...)."""


class IngestionError(ValueError):
    """An on-disk artifact failed validation during loading."""


class NumericError(RuntimeError):
    """A non-finite value was produced; carries the diagnostic dump path if any."""

    def __init__(self, message: str, dump_path: str | None = None):
        super().__init__(message)
        self.dump_path = dump_path
