"""Exception types shared across the package.

The CLI maps these onto stable exit codes, so new failure modes should
reuse an existing class or extend the hierarchy rather than raising
bare exceptions.
"""
from __future__ import annotations

__all__ = [
    "PrivRecError",
    "ConfigError",
    "IngestError",
    "DegenerateClassError",
    "TemplateError",
    "ParseError",
    "BackendError",
    "SimilarityError",
    "MetricError",
    "RunFailure",
]


class PrivRecError(Exception):
    """Base class for everything raised deliberately by this package."""


class ConfigError(PrivRecError, ValueError):
    """Invalid configuration: bad scheme, bad threshold, window >= min_items, ..."""


class IngestError(PrivRecError):
    """Catalog or interaction input that cannot produce any usable records."""


class DegenerateClassError(PrivRecError, ValueError):
    """A class count of zero where class weights or a split are required."""


class TemplateError(PrivRecError, ValueError):
    """Prompt template missing a placeholder or leaving one unfilled."""


class ParseError(PrivRecError):
    """Model output that does not match the expected grammar."""

    def __init__(self, message: str, raw: str = ""):
        super().__init__(message)
        self.raw = raw


class BackendError(PrivRecError):
    """Failed call to a recommendation / scoring / embedding backend.

    category is one of "transport", "protocol", "empty".  Transport
    errors are retry-safe because the request never produced a usable
    response; protocol and empty errors are not, the server did answer.
    """

    def __init__(self, category: str, message: str, *, retry_safe: bool | None = None):
        super().__init__(message)
        if category not in ("transport", "protocol", "empty"):
            raise ValueError(f"unknown backend error category: {category}")
        self.category = category
        self.retry_safe = category == "transport" if retry_safe is None else retry_safe


class SimilarityError(PrivRecError, ValueError):
    """Cosine similarity requested against a zero-magnitude vector."""


class MetricError(PrivRecError, ValueError):
    """Metric precondition violated: universe mismatch, empty group, zero denominator."""


class RunFailure(PrivRecError):
    """Experiment aborted because the per-user failure ratio exceeded the cap."""
