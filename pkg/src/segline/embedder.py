"""Sentence vectors: deterministic feature hashing and embedding-file I/O.

Two sources of vectors hide behind one interface:

* ``kind="hash"`` — a seeded signed feature-hash embedder.  It is a pure
  function of (text, d, seed), cheap enough to embed corpora on a laptop,
  and deterministic across platforms (keyed blake2b, little-endian).
* ``kind="file"`` — a precomputed embedding file (e.g. exported from a real
  sentence-transformer), in the SEGEMB1 binary format below.

SEGEMB1 format (little-endian): magic ``SEGEMB1\\0`` (8 bytes), u32 row
count n, u32 dimension d, u8 flags (bit 0 = rows are L2-normalized),
3 reserved zero bytes, then n*d IEEE-754 float32 values row-major.  Row r
holds the vector for the sentence with global sid r.  The optional manifest
is JSONL; line r is ``{"sid": r, "doc_id": str, "index_in_doc": int}``.
"""

from __future__ import annotations

import hashlib
import json
import math
import re
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .corpus import CorpusSplit, Document
from .errors import ConfigError, SeglineError

__all__ = [
    "MAGIC",
    "EmbeddingFileError",
    "MagicError",
    "TruncatedPayloadError",
    "PayloadSizeError",
    "ManifestAlignmentError",
    "NormValidationError",
    "EmbeddingLookupError",
    "EmbeddingMatrix",
    "EmbedderConfig",
    "hash_embed",
    "embed_corpus",
    "write_embeddings",
    "load_embeddings",
    "build_manifest",
    "load_manifest",
]

MAGIC = b"SEGEMB1\x00"
_HEADER = struct.Struct("<8sII B3s")
HEADER_SIZE = _HEADER.size  # 20 bytes
FLAG_NORMALIZED = 0x01
_NORM_TOL = 1e-4


class EmbeddingFileError(SeglineError):
    """Base class for embedding file problems."""


class MagicError(EmbeddingFileError):
    """File does not start with the SEGEMB1 magic."""


class TruncatedPayloadError(EmbeddingFileError):
    """Payload is shorter than the header promises."""


class PayloadSizeError(EmbeddingFileError):
    """Payload size disagrees with header n*d (too long, or header invalid)."""


class ManifestAlignmentError(EmbeddingFileError):
    """Manifest rows do not line up with embedding rows."""


class NormValidationError(EmbeddingFileError):
    """Header claims L2-normalized rows but the data violates it."""


class EmbeddingLookupError(SeglineError):
    """A sentence sid has no row in the embedding matrix."""


@dataclass
class EmbeddingMatrix:
    """n x d float32 matrix; row r belongs to the sentence with sid r."""

    n: int
    d: int
    data: np.ndarray
    normalized: bool = False

    def __post_init__(self) -> None:
        if self.n < 1 or self.d < 1:
            raise ValueError(f"matrix needs n,d >= 1, got n={self.n}, d={self.d}")
        if self.data.shape != (self.n, self.d):
            raise ValueError(
                f"data shape {self.data.shape} does not match (n={self.n}, d={self.d})"
            )
        if self.data.dtype != np.float32:
            raise ValueError(f"data must be float32, got {self.data.dtype}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("embedding matrix contains non-finite values")
        if self.normalized:
            norms = np.linalg.norm(self.data.astype(np.float64), axis=1)
            bad = np.flatnonzero((norms > 0) & (np.abs(norms - 1.0) > _NORM_TOL))
            if bad.size:
                raise ValueError(
                    f"row {bad[0]} has L2 norm {norms[bad[0]]:.6f}, "
                    f"outside 1 +/- {_NORM_TOL} despite normalized flag"
                )

    def rows(self, first_sid: int, count: int) -> np.ndarray:
        """Contiguous block of rows [first_sid, first_sid+count)."""
        if first_sid < 0 or count < 1 or first_sid + count > self.n:
            raise EmbeddingLookupError(
                f"rows [{first_sid}, {first_sid + count}) out of range for n={self.n}"
            )
        return self.data[first_sid : first_sid + count]

    def row(self, sid: int) -> np.ndarray:
        return self.rows(sid, 1)[0]


@dataclass
class EmbedderConfig:
    """How to obtain sentence vectors."""

    kind: str = "hash"
    d: int = 64
    seed: int = 0
    normalize: bool = True
    path: str | None = None

    def __post_init__(self) -> None:
        if self.kind not in ("hash", "file"):
            raise ConfigError(f"embedder kind must be 'hash' or 'file', got {self.kind!r}")
        if self.d < 1:
            raise ConfigError(f"embedding dimension must be >= 1, got {self.d}")
        if self.kind == "file" and not self.path:
            raise ConfigError("embedder kind 'file' requires a path")

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "d": self.d,
            "seed": self.seed,
            "normalize": self.normalize,
            "path": self.path,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "EmbedderConfig":
        unknown = set(payload) - {"kind", "d", "seed", "normalize", "path"}
        if unknown:
            raise ConfigError(f"unknown embedder config keys: {sorted(unknown)}")
        return cls(**payload)


# Feature hashing ------------------------------------------------------------

_TOKEN_RE = re.compile(r"[a-z0-9]+")


def _token_bucket_sign(token: str, d: int, seed: int) -> tuple[int, int]:
    """Bucket in [0, d) and sign in {-1, +1} for one token.

    Keyed blake2b digest of the token; bytes 0..7 (little-endian) choose the
    bucket, bit 0 of byte 8 chooses the sign.  Frozen: tests and external
    reimplementations rely on this exact construction.
    """
    key = (seed & 0xFFFFFFFFFFFFFFFF).to_bytes(8, "little")
    digest = hashlib.blake2b(token.encode("utf-8"), key=key, digest_size=16).digest()
    bucket = int.from_bytes(digest[:8], "little") % d
    sign = 1 if digest[8] & 1 else -1
    return bucket, sign


def hash_embed(text: str, d: int, seed: int) -> np.ndarray:
    """Signed feature-hash embedding of ``text``: float32 vector of length d.

    Tokens are maximal [a-z0-9]+ runs of the lowercased text.  Each token
    adds +/-1 to its hash bucket; the accumulated vector is L2-normalized
    unless it is all zero (token-free text gives the zero vector).
    """
    if d < 1:
        raise ConfigError(f"embedding dimension must be >= 1, got {d}")
    acc = np.zeros(d, dtype=np.float64)
    for token in _TOKEN_RE.findall(text.lower()):
        bucket, sign = _token_bucket_sign(token, d, seed)
        acc[bucket] += sign
    norm = math.sqrt(float(np.dot(acc, acc)))
    if norm > 0.0:
        acc /= norm
    return acc.astype(np.float32)


def _documents_of(source: CorpusSplit | Sequence[Document]) -> list[Document]:
    if isinstance(source, CorpusSplit):
        return source.all_documents
    return list(source)


def embed_corpus(
    source: CorpusSplit | Sequence[Document], config: EmbedderConfig
) -> EmbeddingMatrix:
    """Embed every sentence of the given documents, one row per sid.

    The union of the documents' sids must be exactly 0..n-1 (always true for
    a freshly loaded corpus or a split of one); rows are placed by sid, so
    document order does not matter.  ``kind="file"`` loads ``config.path``
    instead and checks that the row count and dimension match.
    """
    docs = _documents_of(source)
    sentences = [s for doc in docs for s in doc.sentences]
    if not sentences:
        raise ConfigError("cannot embed an empty corpus")
    n = len(sentences)
    sids = sorted(s.sid for s in sentences)
    if sids[0] != 0 or sids[-1] != n - 1 or len(set(sids)) != n:
        raise ConfigError(
            f"documents' sids must cover 0..{n - 1} exactly; "
            f"got range [{sids[0]}, {sids[-1]}] over {n} sentences"
        )

    if config.kind == "file":
        matrix = load_embeddings(config.path)
        if matrix.n != n:
            raise PayloadSizeError(
                f"embedding file has {matrix.n} rows but the corpus has {n} sentences"
            )
        if matrix.d != config.d:
            raise ConfigError(
                f"config d={config.d} does not match file dimension {matrix.d}"
            )
        return matrix

    data = np.zeros((n, config.d), dtype=np.float32)
    for sentence in sentences:
        data[sentence.sid] = hash_embed(sentence.text, config.d, config.seed)
    return EmbeddingMatrix(n=n, d=config.d, data=data, normalized=config.normalize)


# SEGEMB1 file I/O ------------------------------------------------------------


def build_manifest(source: CorpusSplit | Sequence[Document]) -> list[dict]:
    """Manifest records (sid order) for the documents' sentences."""
    records = [
        {"sid": s.sid, "doc_id": doc.doc_id, "index_in_doc": idx}
        for doc in _documents_of(source)
        for idx, s in enumerate(doc.sentences)
    ]
    records.sort(key=lambda r: r["sid"])
    for row, record in enumerate(records):
        if record["sid"] != row:
            raise ConfigError(f"sids are not contiguous: expected {row}, got {record['sid']}")
    return records


def write_embeddings(
    matrix: EmbeddingMatrix,
    path: str | Path,
    manifest_records: Iterable[dict] | None = None,
    manifest_path: str | Path | None = None,
) -> None:
    """Write a SEGEMB1 file (and optionally its manifest JSONL)."""
    flags = FLAG_NORMALIZED if matrix.normalized else 0
    header = _HEADER.pack(MAGIC, matrix.n, matrix.d, flags, b"\x00\x00\x00")
    payload = np.ascontiguousarray(matrix.data, dtype="<f4").tobytes()
    Path(path).write_bytes(header + payload)
    if manifest_records is not None:
        if manifest_path is None:
            manifest_path = Path(str(path) + ".manifest.jsonl")
        with open(manifest_path, "w", encoding="utf-8") as fh:
            for record in manifest_records:
                fh.write(json.dumps(record, ensure_ascii=False) + "\n")


def load_manifest(path: str | Path) -> list[dict]:
    """Read a manifest JSONL and validate its row alignment (sid == line index)."""
    records: list[dict] = []
    with open(path, encoding="utf-8") as fh:
        for row, line in enumerate(fh):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as err:
                raise ManifestAlignmentError(f"{path}:{row + 1}: invalid JSON: {err}") from err
            if (
                not isinstance(record, dict)
                or record.get("sid") != row
                or not isinstance(record.get("doc_id"), str)
                or not isinstance(record.get("index_in_doc"), int)
            ):
                raise ManifestAlignmentError(
                    f"{path}:{row + 1}: expected sid {row} with doc_id and index_in_doc"
                )
            records.append(record)
    return records


def load_embeddings(
    path: str | Path, manifest_path: str | Path | None = None
) -> EmbeddingMatrix:
    """Load a SEGEMB1 file, optionally checking a manifest against it.

    Distinct failures raise distinct errors: :class:`MagicError`,
    :class:`TruncatedPayloadError`, :class:`PayloadSizeError`,
    :class:`ManifestAlignmentError`, :class:`NormValidationError`.
    """
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < len(MAGIC) or blob[: len(MAGIC)] != MAGIC:
        raise MagicError(f"{path}: not a SEGEMB1 embedding file")
    if len(blob) < HEADER_SIZE:
        raise TruncatedPayloadError(f"{path}: header truncated ({len(blob)} bytes)")
    _, n, d, flags, reserved = _HEADER.unpack_from(blob)
    if reserved != b"\x00\x00\x00" or flags & ~FLAG_NORMALIZED:
        raise EmbeddingFileError(f"{path}: reserved header bytes/flags are set")
    if n < 1 or d < 1:
        raise PayloadSizeError(f"{path}: header declares empty matrix (n={n}, d={d})")
    expected = n * d * 4
    payload = blob[HEADER_SIZE:]
    if len(payload) < expected:
        raise TruncatedPayloadError(
            f"{path}: payload has {len(payload)} bytes, header promises {expected}"
        )
    if len(payload) > expected:
        raise PayloadSizeError(
            f"{path}: payload has {len(payload)} bytes, header promises {expected}"
        )
    data = np.frombuffer(payload, dtype="<f4").reshape(n, d).copy()
    normalized = bool(flags & FLAG_NORMALIZED)
    try:
        matrix = EmbeddingMatrix(n=n, d=d, data=data, normalized=normalized)
    except ValueError as err:
        if normalized and "norm" in str(err):
            raise NormValidationError(f"{path}: {err}") from err
        raise EmbeddingFileError(f"{path}: {err}") from err
    if manifest_path is not None:
        records = load_manifest(manifest_path)
        if len(records) != n:
            raise ManifestAlignmentError(
                f"{manifest_path}: {len(records)} manifest rows for {n} embedding rows"
            )
    return matrix
