"""Run a sentence-embedding model over a JSONL corpus; write SEGEMB1 output.

File format (SEGEMB1): a 20-byte little-endian header — 8-byte magic
``SEGEMB1\\0``, u32 row count, u32 dimension, u8 flags (bit0 = rows are
L2-normalized), 3 reserved zero bytes — followed by the n*d float32
row-major payload.  Row r holds the vector of global sentence id r, where
sids are assigned in corpus file order.  The manifest JSONL carries one
record per row: ``{"sid": r, "doc_id": ..., "index_in_doc": ...}``.

The corpus input is JSONL with one document per line:
``{"doc_id": ..., "sentences": [{"text": ..., "topic": ...}, ...]}``
(only ``text`` is used here).
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

__all__ = ["ExportError", "CorpusSentence", "read_corpus", "l2_normalize", "export_corpus"]

MAGIC = b"SEGEMB1\x00"
_HEADER = struct.Struct("<8sIIB3s")
FLAG_NORMALIZED = 0x01


class ExportError(Exception):
    """Corpus parsing or model failure during export."""


@dataclass(frozen=True)
class CorpusSentence:
    sid: int
    doc_id: str
    index_in_doc: int
    text: str


def read_corpus(path: str | Path) -> list[CorpusSentence]:
    """Parse the corpus JSONL, assigning global sids in file order."""
    path = Path(path)
    sentences: list[CorpusSentence] = []
    seen_ids: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as err:
                raise ExportError(f"{path}:{lineno}: invalid JSON: {err}") from err
            if not isinstance(record, dict):
                raise ExportError(f"{path}:{lineno}: expected an object")
            doc_id = record.get("doc_id")
            raw = record.get("sentences")
            if not isinstance(doc_id, str) or not doc_id:
                raise ExportError(f"{path}:{lineno}: missing doc_id")
            if doc_id in seen_ids:
                raise ExportError(f"{path}:{lineno}: duplicate doc_id {doc_id!r}")
            seen_ids.add(doc_id)
            if not isinstance(raw, list) or not raw:
                raise ExportError(f"{path}:{lineno}: missing or empty sentences")
            for index, item in enumerate(raw):
                text = item.get("text") if isinstance(item, dict) else None
                if not isinstance(text, str) or not text:
                    raise ExportError(
                        f"{path}:{lineno}: sentence {index} of {doc_id!r} has no text"
                    )
                sentences.append(
                    CorpusSentence(
                        sid=len(sentences), doc_id=doc_id, index_in_doc=index, text=text
                    )
                )
    if not sentences:
        raise ExportError(f"{path}: corpus contains no sentences")
    return sentences


def l2_normalize(matrix: np.ndarray) -> np.ndarray:
    """Scale each row to unit L2 norm (float64 arithmetic, float32 result)."""
    norms = np.linalg.norm(matrix.astype(np.float64), axis=1)
    if np.any(norms == 0.0):
        row = int(np.flatnonzero(norms == 0.0)[0])
        raise ExportError(f"cannot normalize: embedding row {row} is all zeros")
    return (matrix.astype(np.float64) / norms[:, None]).astype(np.float32)


def _load_model(model_name: str):
    from sentence_transformers import SentenceTransformer

    try:
        return SentenceTransformer(model_name)
    except Exception as err:  # the loader raises framework-specific types
        raise ExportError(f"cannot load model {model_name!r}: {err}") from err


def _write_segemb(matrix: np.ndarray, path: str | Path, normalized: bool) -> None:
    n, d = matrix.shape
    flags = FLAG_NORMALIZED if normalized else 0
    header = _HEADER.pack(MAGIC, n, d, flags, b"\x00\x00\x00")
    payload = np.ascontiguousarray(matrix, dtype="<f4").tobytes()
    Path(path).write_bytes(header + payload)


def _write_manifest(sentences: list[CorpusSentence], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in sentences:
            record = {"sid": s.sid, "doc_id": s.doc_id, "index_in_doc": s.index_in_doc}
            fh.write(json.dumps(record, ensure_ascii=False) + "\n")


def export_corpus(
    corpus_path: str | Path,
    model_name: str,
    out_path: str | Path,
    manifest_path: str | Path | None = None,
    normalize: bool = False,
    batch_size: int = 32,
) -> tuple[int, int]:
    """Embed every corpus sentence in sid order; returns (rows, dimension).

    The manifest defaults to ``<out_path>.manifest.jsonl``.  With
    ``normalize`` the rows are L2-normalized and header flag bit0 is set.
    """
    if batch_size < 1:
        raise ExportError(f"batch_size must be >= 1, got {batch_size}")
    sentences = read_corpus(corpus_path)
    model = _load_model(model_name)
    logger.info("encoding %d sentences with %r", len(sentences), model_name)
    vectors = model.encode(
        [s.text for s in sentences],
        batch_size=batch_size,
        convert_to_numpy=True,
        show_progress_bar=False,
    )
    vectors = np.asarray(vectors, dtype=np.float32)
    if vectors.ndim != 2 or vectors.shape[0] != len(sentences):
        raise ExportError(
            f"model returned shape {vectors.shape}, expected ({len(sentences)}, d)"
        )
    if not np.all(np.isfinite(vectors)):
        raise ExportError("model returned non-finite embedding values")
    if normalize:
        vectors = l2_normalize(vectors)
    _write_segemb(vectors, out_path, normalized=normalize)
    if manifest_path is None:
        manifest_path = Path(str(out_path) + ".manifest.jsonl")
    _write_manifest(sentences, manifest_path)
    return vectors.shape[0], vectors.shape[1]
