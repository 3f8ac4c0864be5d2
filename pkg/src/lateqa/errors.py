"""Exception hierarchy shared by every lateqa module."""

from __future__ import annotations


class LateQAError(Exception):
    """Base class for domain errors. The CLI maps these to exit code 1."""


class InvalidInputError(LateQAError, ValueError):
    pass


class ConflictError(LateQAError):
    pass


class NotFoundError(LateQAError, FileNotFoundError):
    pass


class IndexFormatError(LateQAError):
    """Raised when an index file is corrupt, truncated or of an unknown version."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class IngestError(LateQAError):
    def __init__(self, message: str, stderr: str = "", bad_files: list[str] | None = None):
        super().__init__(message)
        self.stderr = stderr
        self.bad_files = bad_files or []


class RasterizerNotFoundError(IngestError):
    """The external PDF rasterizer command is not installed or not on PATH."""


class EmbeddingFailedError(LateQAError):
    def __init__(self, message: str, failed_pages: list[tuple[str, int]]):
        super().__init__(message)
        self.failed_pages = failed_pages


class BackendError(LateQAError):
    pass


class BackendUnavailableError(BackendError):
    pass


class RequestError(BackendError):
    def __init__(self, message: str, status_code: int | None = None, body: str = ""):
        super().__init__(message)
        self.status_code = status_code
        self.body = body


class FixtureMissingError(BackendError):
    """A mock backend was asked something its scenario does not script."""


class DecompositionFailedError(LateQAError):
    def __init__(self, message: str, raw_text: str = ""):
        super().__init__(message)
        self.raw_text = raw_text


class LocalizationFailedError(LateQAError):
    pass


class DatasetError(LateQAError):
    def __init__(self, message: str, line_no: int | None = None):
        if line_no is not None:
            message = f"line {line_no}: {message}"
        super().__init__(message)
        self.line_no = line_no


class ConfigError(LateQAError):
    pass
