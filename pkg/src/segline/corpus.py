"""Corpus ingestion, canonical JSONL storage, gold segmentations, and splits.

Raw section-annotated documents (WikiSection-style JSON: a ``text`` field
plus ``annotations`` with character spans and section labels) are converted
into a canonical JSONL corpus, one document per line:

    {"doc_id": str, "sentences": [{"text": str, "topic": str}, ...]}

Everything downstream (embedding, sampling, training, evaluation) consumes
only the canonical form.  Sentences carry a global integer id (``sid``)
assigned in file order when a corpus is loaded; sids are contiguous within
each document and index rows of the embedding matrix.
"""

from __future__ import annotations

import json
import logging
import random
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable

from .errors import ConfigError, SeglineError

logger = logging.getLogger(__name__)

__all__ = [
    "CorpusError",
    "DocumentRejected",
    "TopicVocab",
    "Sentence",
    "Document",
    "Segmentation",
    "CorpusSplit",
    "ConversionStats",
    "split_sentences",
    "convert_wikisection",
    "convert_wikisection_file",
    "derive_gold",
    "split_corpus",
    "load_corpus_jsonl",
    "write_corpus_jsonl",
]


class CorpusError(SeglineError):
    """Malformed corpus input (raw or canonical)."""


class DocumentRejected(CorpusError):
    """A single raw document cannot be converted and should be skipped."""


class TopicVocab:
    """Bidirectional mapping between topic labels and dense integer ids.

    Ids are assigned in first-seen order and never reused, so a vocabulary
    built while converting a corpus stays stable across save/load.
    """

    def __init__(self, labels: Iterable[str] = ()) -> None:
        self.labels: list[str] = []
        self._index: dict[str, int] = {}
        for name in labels:
            self.add(name)

    def add(self, name: str) -> int:
        """Return the id for ``name``, assigning the next id if unseen."""
        if not isinstance(name, str) or not name:
            raise CorpusError(f"topic label must be a non-empty string, got {name!r}")
        tid = self._index.get(name)
        if tid is None:
            tid = len(self.labels)
            self._index[name] = tid
            self.labels.append(name)
        return tid

    def id_of(self, name: str) -> int:
        try:
            return self._index[name]
        except KeyError:
            raise CorpusError(f"unknown topic label {name!r}") from None

    def label_of(self, tid: int) -> str:
        if not 0 <= tid < len(self.labels):
            raise CorpusError(f"topic id {tid} out of range (vocab size {len(self.labels)})")
        return self.labels[tid]

    def __len__(self) -> int:
        return len(self.labels)

    def __contains__(self, name: object) -> bool:
        return name in self._index

    def __eq__(self, other: object) -> bool:
        return isinstance(other, TopicVocab) and self.labels == other.labels

    def save(self, path: str | Path) -> None:
        Path(path).write_text(
            json.dumps({"labels": self.labels}, ensure_ascii=False, indent=2) + "\n",
            encoding="utf-8",
        )

    @classmethod
    def load(cls, path: str | Path) -> "TopicVocab":
        try:
            payload = json.loads(Path(path).read_text(encoding="utf-8"))
            labels = payload["labels"]
        except (json.JSONDecodeError, KeyError, TypeError) as err:
            raise CorpusError(f"invalid topic vocabulary file {path}: {err}") from err
        if not isinstance(labels, list) or not all(isinstance(x, str) for x in labels):
            raise CorpusError(f"invalid topic vocabulary file {path}: labels must be strings")
        if len(set(labels)) != len(labels):
            raise CorpusError(f"invalid topic vocabulary file {path}: duplicate labels")
        return cls(labels)


@dataclass(frozen=True)
class Sentence:
    """One sentence: global id, text, and its topic id."""

    sid: int
    text: str
    topic_id: int

    def __post_init__(self) -> None:
        if self.sid < 0:
            raise CorpusError(f"sid must be >= 0, got {self.sid}")
        if not isinstance(self.text, str) or not self.text.strip():
            raise CorpusError(f"sentence text must be non-empty, got {self.text!r}")
        if self.topic_id < 0:
            raise CorpusError(f"topic_id must be >= 0, got {self.topic_id}")


@dataclass
class Document:
    """A document: non-empty list of sentences with contiguous sids."""

    doc_id: str
    sentences: list[Sentence]

    def __post_init__(self) -> None:
        if not isinstance(self.doc_id, str) or not self.doc_id:
            raise CorpusError(f"doc_id must be a non-empty string, got {self.doc_id!r}")
        if not self.sentences:
            raise CorpusError(f"document {self.doc_id!r} has no sentences")
        first = self.sentences[0].sid
        for offset, sent in enumerate(self.sentences):
            if sent.sid != first + offset:
                raise CorpusError(
                    f"document {self.doc_id!r}: sids must be contiguous "
                    f"(expected {first + offset}, got {sent.sid})"
                )

    def __len__(self) -> int:
        return len(self.sentences)

    @property
    def first_sid(self) -> int:
        return self.sentences[0].sid

    @property
    def topic_ids(self) -> list[int]:
        return [s.topic_id for s in self.sentences]


@dataclass
class Segmentation:
    """Boundary set for a document of ``n`` sentences.

    A boundary at position ``i`` means a segment break between sentence
    ``i`` and sentence ``i+1``; valid positions are ``0 .. n-2``.
    """

    n: int
    boundaries: set[int]

    def __post_init__(self) -> None:
        if self.n < 1:
            raise CorpusError(f"segmentation needs n >= 1, got {self.n}")
        self.boundaries = set(self.boundaries)
        for b in self.boundaries:
            if not 0 <= b <= self.n - 2:
                raise CorpusError(
                    f"boundary {b} out of range for document of {self.n} sentences"
                )

    def segments(self) -> list[tuple[int, int]]:
        """Contiguous [start, end) sentence ranges implied by the boundaries."""
        starts = [0] + [b + 1 for b in sorted(self.boundaries)]
        ends = starts[1:] + [self.n]
        return list(zip(starts, ends))


@dataclass
class CorpusSplit:
    """Disjoint train/valid/test partitions of a corpus."""

    train: list[Document]
    valid: list[Document]
    test: list[Document]

    @property
    def all_documents(self) -> list[Document]:
        return self.train + self.valid + self.test


@dataclass
class ConversionStats:
    """Counters reported by :func:`convert_wikisection_file`."""

    total: int = 0
    converted: int = 0
    rejected: int = 0
    sentences: int = 0
    dropped_sentences: int = 0


# Sentence splitting -------------------------------------------------------

# Abbreviations whose trailing period must not end a sentence.  Compared
# case-insensitively against the whitespace-delimited token that precedes
# the candidate split point.
ABBREVIATIONS = frozenset({"e.g.", "i.e.", "dr.", "st.", "vs.", "etc."})

# A split candidate: terminator punctuation, whitespace, then an upper-case
# letter or digit starting the next sentence.
_SPLIT_RE = re.compile(r"([.!?])\s+(?=[A-Z0-9])")
_LEADING_QUOTES = "\"'([{“‘"


def split_sentences(text: str) -> list[str]:
    """Split ``text`` into sentences on ``. ! ?`` followed by whitespace and
    an upper-case letter or digit, keeping known abbreviations intact.

    Returns stripped, non-empty sentences; concatenating them reproduces the
    input up to whitespace.
    """
    if not isinstance(text, str):
        raise CorpusError(f"text must be a string, got {type(text).__name__}")
    cuts: list[int] = []
    for m in _SPLIT_RE.finditer(text):
        if m.group(1) == ".":
            head = text[: m.end(1)]
            token = head.rsplit(None, 1)[-1].lstrip(_LEADING_QUOTES)
            if token.lower() in ABBREVIATIONS:
                continue
        cuts.append(m.end(1))
    parts: list[str] = []
    prev = 0
    for cut in cuts + [len(text)]:
        piece = text[prev:cut].strip()
        if piece:
            parts.append(piece)
        prev = cut
    return parts


# WikiSection conversion ----------------------------------------------------


def _annotation_spans(raw: dict, doc_label: str) -> list[tuple[int, int, str]]:
    annotations = raw.get("annotations")
    if not isinstance(annotations, list) or not annotations:
        raise DocumentRejected(f"{doc_label}: missing or empty annotations")
    spans: list[tuple[int, int, str]] = []
    for ann in annotations:
        if not isinstance(ann, dict):
            raise DocumentRejected(f"{doc_label}: annotation is not an object")
        label = ann.get("sectionLabel", ann.get("label"))
        begin = ann.get("begin")
        length = ann.get("length")
        if not isinstance(label, str) or not label:
            raise DocumentRejected(f"{doc_label}: annotation without a section label")
        if not isinstance(begin, int) or not isinstance(length, int) or begin < 0 or length <= 0:
            raise DocumentRejected(f"{doc_label}: annotation with invalid span")
        spans.append((begin, begin + length, label))
    return spans


def _convert_one(
    raw: dict,
    vocab: TopicVocab,
    splitter: Callable[[str], list[str]],
    fallback_doc_id: str | None,
) -> tuple[Document, int]:
    """Convert one raw document; return (document, dropped sentence count)."""
    if not isinstance(raw, dict):
        raise DocumentRejected("raw document is not an object")
    doc_id = raw.get("id", raw.get("title", fallback_doc_id))
    if doc_id is None:
        raise DocumentRejected("raw document has no id or title")
    doc_id = str(doc_id)
    text = raw.get("text")
    if not isinstance(text, str) or not text.strip():
        raise DocumentRejected(f"{doc_id}: missing or empty text")
    spans = _annotation_spans(raw, doc_id)

    sentences: list[Sentence] = []
    dropped = 0
    cursor = 0
    for piece in splitter(text):
        start = text.find(piece, cursor)
        if start < 0:
            # Splitter returned something that is not a substring; treat the
            # sentence as uncovered rather than failing the whole document.
            dropped += 1
            continue
        end = start + len(piece)
        cursor = end
        mid = (start + end) // 2
        label = next((lab for b, e, lab in spans if b <= mid < e), None)
        if label is None:
            dropped += 1
            continue
        sentences.append(Sentence(sid=len(sentences), text=piece, topic_id=vocab.add(label)))
    if not sentences:
        raise DocumentRejected(f"{doc_id}: no sentences covered by annotations")
    return Document(doc_id=doc_id, sentences=sentences), dropped


def convert_wikisection(
    raw: dict,
    vocab: TopicVocab,
    splitter: Callable[[str], list[str]] | None = None,
    fallback_doc_id: str | None = None,
) -> Document:
    """Convert one raw WikiSection-style document into a :class:`Document`.

    Each sentence produced by ``splitter`` (default :func:`split_sentences`)
    is assigned the topic of the annotation span containing the sentence's
    midpoint character offset; sentences covered by no span are dropped.
    New topic labels are appended to ``vocab``.  Sids are local (0-based);
    they are renumbered globally when the corpus is written and reloaded.

    Raises :class:`DocumentRejected` for documents that cannot yield at
    least one sentence.
    """
    doc, _ = _convert_one(raw, vocab, splitter or split_sentences, fallback_doc_id)
    return doc


def _iter_raw_documents(path: Path) -> Iterable[dict]:
    blob = path.read_text(encoding="utf-8")
    stripped = blob.lstrip()
    if not stripped:
        raise CorpusError(f"{path}: empty input file")
    if stripped.startswith("["):
        try:
            data = json.loads(blob)
        except json.JSONDecodeError as err:
            raise CorpusError(f"{path}: invalid JSON: {err}") from err
        if not isinstance(data, list):
            raise CorpusError(f"{path}: expected a JSON array of documents")
        yield from data
    else:
        for lineno, line in enumerate(blob.splitlines(), start=1):
            if not line.strip():
                continue
            try:
                yield json.loads(line)
            except json.JSONDecodeError as err:
                raise CorpusError(f"{path}:{lineno}: invalid JSON line: {err}") from err


def convert_wikisection_file(
    path: str | Path,
    vocab: TopicVocab,
    splitter: Callable[[str], list[str]] | None = None,
) -> tuple[list[Document], ConversionStats]:
    """Convert every document in a raw JSON/JSONL file.

    Documents that fail conversion are logged and skipped; the stats record
    how many were rejected.  File-level problems (unreadable, invalid JSON)
    raise instead.
    """
    path = Path(path)
    stats = ConversionStats()
    docs: list[Document] = []
    for raw in _iter_raw_documents(path):
        stats.total += 1
        try:
            doc, dropped = _convert_one(
                raw, vocab, splitter or split_sentences, f"doc{stats.total - 1}"
            )
        except DocumentRejected as err:
            stats.rejected += 1
            logger.warning("skipping document: %s", err)
            continue
        stats.converted += 1
        stats.sentences += len(doc)
        stats.dropped_sentences += dropped
        docs.append(doc)
    return docs, stats


# Gold segmentation ---------------------------------------------------------


def derive_gold(doc: Document) -> Segmentation:
    """Gold boundaries: positions where adjacent sentences change topic."""
    topics = doc.topic_ids
    boundaries = {i for i in range(len(topics) - 1) if topics[i] != topics[i + 1]}
    return Segmentation(n=len(topics), boundaries=boundaries)


# Corpus splitting ----------------------------------------------------------


def split_corpus(
    docs: list[Document],
    ratios: tuple[float, float, float] = (0.7, 0.1, 0.2),
    seed: int = 0,
) -> CorpusSplit:
    """Shuffle documents deterministically by ``seed`` and partition them.

    Split sizes are ``floor(ratio * N)`` each, with the remainder assigned
    to train; partition order is train, valid, test over the shuffled list.
    """
    if not docs:
        raise ConfigError("cannot split an empty corpus")
    if len(ratios) != 3 or any(r < 0 for r in ratios):
        raise ConfigError(f"ratios must be three non-negative numbers, got {ratios!r}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"ratios must sum to 1, got {ratios!r} (sum {sum(ratios)})")
    shuffled = list(docs)
    random.Random(seed).shuffle(shuffled)
    n = len(shuffled)
    # The 1e-9 nudge keeps ratio*n products that are integers up to float
    # representation error (e.g. 0.7*90 = 62.99999999999999) from flooring low.
    n_train = int(ratios[0] * n + 1e-9)
    n_valid = int(ratios[1] * n + 1e-9)
    n_test = int(ratios[2] * n + 1e-9)
    n_train += n - (n_train + n_valid + n_test)
    return CorpusSplit(
        train=shuffled[:n_train],
        valid=shuffled[n_train : n_train + n_valid],
        test=shuffled[n_train + n_valid :],
    )


# Canonical JSONL I/O --------------------------------------------------------


def write_corpus_jsonl(docs: list[Document], vocab: TopicVocab, path: str | Path) -> None:
    """Write documents in the canonical JSONL corpus format."""
    with open(path, "w", encoding="utf-8") as fh:
        for doc in docs:
            record = {
                "doc_id": doc.doc_id,
                "sentences": [
                    {"text": s.text, "topic": vocab.label_of(s.topic_id)}
                    for s in doc.sentences
                ],
            }
            fh.write(json.dumps(record, ensure_ascii=False) + "\n")


def load_corpus_jsonl(
    path: str | Path, vocab: TopicVocab | None = None
) -> tuple[list[Document], TopicVocab]:
    """Load a canonical JSONL corpus, assigning global sids in file order.

    Unknown topic labels are appended to ``vocab`` (a fresh vocabulary is
    created when none is passed).  Malformed lines raise :class:`CorpusError`
    with the offending line number.
    """
    path = Path(path)
    if vocab is None:
        vocab = TopicVocab()
    docs: list[Document] = []
    seen_ids: set[str] = set()
    sid = 0
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as err:
                raise CorpusError(f"{path}:{lineno}: invalid JSON: {err}") from err
            if not isinstance(record, dict):
                raise CorpusError(f"{path}:{lineno}: expected an object")
            doc_id = record.get("doc_id")
            raw_sentences = record.get("sentences")
            if not isinstance(doc_id, str) or not doc_id:
                raise CorpusError(f"{path}:{lineno}: missing doc_id")
            if doc_id in seen_ids:
                raise CorpusError(f"{path}:{lineno}: duplicate doc_id {doc_id!r}")
            if not isinstance(raw_sentences, list) or not raw_sentences:
                raise CorpusError(f"{path}:{lineno}: missing or empty sentences")
            sentences: list[Sentence] = []
            for item in raw_sentences:
                if (
                    not isinstance(item, dict)
                    or not isinstance(item.get("text"), str)
                    or not isinstance(item.get("topic"), str)
                ):
                    raise CorpusError(
                        f"{path}:{lineno}: each sentence needs string text and topic"
                    )
                try:
                    sentences.append(
                        Sentence(sid=sid, text=item["text"], topic_id=vocab.add(item["topic"]))
                    )
                except CorpusError as err:
                    raise CorpusError(f"{path}:{lineno}: {err}") from err
                sid += 1
            seen_ids.add(doc_id)
            docs.append(Document(doc_id=doc_id, sentences=sentences))
    if not docs:
        raise CorpusError(f"{path}: corpus file contains no documents")
    return docs, vocab
