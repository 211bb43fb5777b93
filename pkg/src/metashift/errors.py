"""Shared exception types; the CLI maps these onto exit codes."""


class ValidationError(ValueError):
    """Bad arguments or malformed inputs (exit code 2)."""


class MissingArtifactError(FileNotFoundError):
    """A required upstream artifact does not exist (exit code 3)."""


class ArchiveFormatError(ValidationError):
    """Corrupt or incompatible on-disk archive/checkpoint (exit code 2)."""
