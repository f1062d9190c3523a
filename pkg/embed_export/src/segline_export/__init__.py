"""Offline exporter: pretrained sentence embeddings -> SEGEMB1 files.

This package is the only part of the toolchain that touches ML
frameworks; it communicates with the segmentation pipeline exclusively
through the SEGEMB1 binary format and its JSONL manifest.
"""

from .export import ExportError, export_corpus

__all__ = ["ExportError", "export_corpus"]

__version__ = "0.1.0"
