"""Exception types shared across the package."""


class RelaugError(Exception):
    """Base class for all relaug errors."""


class DatasetError(RelaugError):
    """Malformed dataset file or record."""


class ConfigError(RelaugError):
    """Invalid or inconsistent configuration."""


class CheckpointError(RelaugError):
    """Unreadable checkpoint or hash mismatch."""


class BankError(RelaugError):
    """Unreadable or inconsistent memory-bank file."""


class NonFiniteLossError(RelaugError):
    """Training produced a non-finite loss; carries a diagnostic dump path."""

    def __init__(self, message: str, dump_path=None):
        super().__init__(message)
        self.dump_path = dump_path
