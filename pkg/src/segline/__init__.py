"""segline: sentence-level topic segmentation on frozen sentence embeddings.

The pipeline: convert raw section-annotated documents to a canonical JSONL
corpus, embed sentences (deterministic feature hashing or a precomputed
embedding file), train a three-head pair classifier (same-topic,
next-sentence, per-sentence topic) with SGD, segment documents by the
same-topic head's decisions on adjacent pairs, and score against gold
boundaries with Pk and WindowDiff.
"""

from .errors import ConfigError, SeglineError

__version__ = "0.1.0"

__all__ = ["ConfigError", "SeglineError", "__version__"]
