"""Offline multi-level hidden-state extraction for the trial-outcome model."""

from .extract import ExtractionError, ExtractionJob, ExtractionSummary, extract
from .store import write_store, validate_store

__all__ = [
    "ExtractionError",
    "ExtractionJob",
    "ExtractionSummary",
    "extract",
    "validate_store",
    "write_store",
]

__version__ = "0.1.0"
