"""Turn a trained pair classifier into document segmentations.

Two inference modes:

* ``segment_stp`` — slide a width-1 window over adjacent sentence pairs and
  place a boundary wherever the same-topic head predicts "different"
  (class 0).  This is the primary mode; the next-sentence and topic heads
  are training-time auxiliaries and are not consulted here.
* ``segment_tc_only`` — classify every sentence's topic with the shared
  topic head and place a boundary wherever the argmax topic changes between
  neighbors.  Exists for ablation comparisons and for models trained with
  the same-topic head disabled.

Both are pure functions of (params, embedding rows) and are safe to run on
many documents in parallel.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Iterable

import numpy as np

from .corpus import Document, Segmentation
from .embedder import EmbeddingLookupError, EmbeddingMatrix
from .errors import SeglineError
from .model import HeadParams, batch_pair_features

__all__ = [
    "SegmentFileError",
    "segment_stp",
    "segment_tc_only",
    "segment_record",
    "write_segments",
    "read_segments",
]


class SegmentFileError(SeglineError):
    """Malformed segmentation JSONL file."""


def _doc_rows(doc: Document, embeddings: EmbeddingMatrix) -> np.ndarray:
    try:
        return embeddings.rows(doc.first_sid, len(doc)).astype(np.float64)
    except EmbeddingLookupError as err:
        raise EmbeddingLookupError(f"document {doc.doc_id!r}: {err}") from err


def segment_stp(
    params: HeadParams, doc: Document, embeddings: EmbeddingMatrix
) -> Segmentation:
    """Boundary at i iff the same-topic head says sentences i and i+1 differ."""
    n = len(doc)
    if n == 1:
        return Segmentation(n=1, boundaries=set())
    rows = _doc_rows(doc, embeddings)
    features = batch_pair_features(rows[:-1], rows[1:])
    logits = features @ params.w_stp.T + params.b_stp
    classes = np.argmax(logits, axis=1)  # ties resolve to the lower index
    return Segmentation(n=n, boundaries=set(np.flatnonzero(classes == 0).tolist()))


def segment_tc_only(
    params: HeadParams, doc: Document, embeddings: EmbeddingMatrix
) -> Segmentation:
    """Boundary at i iff the predicted topic changes between i and i+1."""
    n = len(doc)
    if n == 1:
        return Segmentation(n=1, boundaries=set())
    rows = _doc_rows(doc, embeddings)
    logits = rows @ params.w_tc.T + params.b_tc
    topics = np.argmax(logits, axis=1)
    changed = np.flatnonzero(topics[:-1] != topics[1:])
    return Segmentation(n=n, boundaries=set(changed.tolist()))


def segment_record(doc_id: str, segmentation: Segmentation) -> dict:
    """One JSONL record: boundaries plus the equivalent [start, end) segments."""
    return {
        "doc_id": doc_id,
        "boundaries": sorted(segmentation.boundaries),
        "segments": [[start, end] for start, end in segmentation.segments()],
    }


def write_segments(
    items: Iterable[tuple[str, Segmentation]], path: str | Path
) -> None:
    """Write (doc_id, segmentation) pairs as segmentation JSONL."""
    with open(path, "w", encoding="utf-8") as fh:
        for doc_id, segmentation in items:
            fh.write(json.dumps(segment_record(doc_id, segmentation)) + "\n")


def read_segments(path: str | Path) -> dict[str, Segmentation]:
    """Read a segmentation JSONL file back into {doc_id: Segmentation}.

    Validates that each record's segment list is exactly the one its
    boundary set implies (the two encodings are bijective given n).
    """
    out: dict[str, Segmentation] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as err:
                raise SegmentFileError(f"{path}:{lineno}: invalid JSON: {err}") from err
            doc_id = record.get("doc_id")
            boundaries = record.get("boundaries")
            segments = record.get("segments")
            if (
                not isinstance(doc_id, str)
                or not isinstance(boundaries, list)
                or not isinstance(segments, list)
                or not segments
            ):
                raise SegmentFileError(
                    f"{path}:{lineno}: record needs doc_id, boundaries, segments"
                )
            if doc_id in out:
                raise SegmentFileError(f"{path}:{lineno}: duplicate doc_id {doc_id!r}")
            n = segments[-1][1] if isinstance(segments[-1], list) and len(segments[-1]) == 2 else None
            if not isinstance(n, int) or n < 1:
                raise SegmentFileError(f"{path}:{lineno}: malformed segments")
            try:
                segmentation = Segmentation(n=n, boundaries=set(boundaries))
            except SeglineError as err:
                raise SegmentFileError(f"{path}:{lineno}: {err}") from err
            expected = [[start, end] for start, end in segmentation.segments()]
            if segments != expected:
                raise SegmentFileError(
                    f"{path}:{lineno}: segments {segments} do not match boundaries "
                    f"{sorted(segmentation.boundaries)} (expected {expected})"
                )
            out[doc_id] = segmentation
    if not out:
        raise SegmentFileError(f"{path}: no segmentation records")
    return out
