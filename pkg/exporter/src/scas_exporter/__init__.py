"""Checkpoint-to-trace exporter for the candidate-selection engine."""

from .export import (
    TEMPLATES,
    Candidate,
    ExportError,
    ExportJob,
    UsageError,
    export_manifest,
    export_traces,
    read_candidates,
    tokenizer_fingerprint,
)

__version__ = "0.1.0"
