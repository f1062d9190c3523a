"""Training-pair construction: natural consecutive pairs plus per-anchor
consecutive sampling.

For every document, two passes feed the training set:

* ``natural_pairs``: every adjacent pair (i, i+1) with labels derived from
  the topic sequence (nsp=1 always; stp=1 iff the topics match).
* ``consecutive_sample``: for each anchor sentence i, up to three pairs —
  a POSITIVE (i, i+1) when the next sentence shares the topic, one
  same-topic non-neighbor negative (stp=1, nsp=0), and one different-topic
  negative (stp=0, nsp=0).  Different-topic candidates exclude j = i+1 so
  that nsp labels stay purely positional (the boundary-adjacent pair enters
  via natural_pairs with nsp=1 instead).

Pairs never cross documents.  The union is deduplicated on (doc_id, i, j)
and shuffled; everything is deterministic given the seed, with independent
per-document random streams so document order cannot change the draws.
"""

from __future__ import annotations

import hashlib
import json
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from .corpus import Document
from .errors import SeglineError

__all__ = [
    "PairExample",
    "natural_pairs",
    "consecutive_sample",
    "build_training_set",
    "write_pairs_jsonl",
    "load_pairs_jsonl",
]


class PairError(SeglineError):
    """A pair example violates its labeling invariants."""


@dataclass(frozen=True)
class PairExample:
    """One labeled sentence pair within a document.

    ``stp`` is 1 when both sentences share a topic, ``nsp`` is 1 when j
    immediately follows i; both are implied by (topic_i, topic_j, i, j) and
    validated at construction.
    """

    doc_id: str
    i: int
    j: int
    stp: int
    nsp: int
    topic_i: int
    topic_j: int

    def __post_init__(self) -> None:
        if self.i == self.j or self.i < 0 or self.j < 0:
            raise PairError(f"invalid pair indices ({self.i}, {self.j})")
        if self.stp != int(self.topic_i == self.topic_j):
            raise PairError(
                f"stp={self.stp} inconsistent with topics ({self.topic_i}, {self.topic_j})"
            )
        if self.nsp != int(self.j == self.i + 1):
            raise PairError(f"nsp={self.nsp} inconsistent with indices ({self.i}, {self.j})")

    def to_record(self) -> dict:
        return {
            "doc_id": self.doc_id,
            "i": self.i,
            "j": self.j,
            "stp": self.stp,
            "nsp": self.nsp,
            "ti": self.topic_i,
            "tj": self.topic_j,
        }

    @classmethod
    def from_record(cls, record: dict) -> "PairExample":
        try:
            return cls(
                doc_id=record["doc_id"],
                i=record["i"],
                j=record["j"],
                stp=record["stp"],
                nsp=record["nsp"],
                topic_i=record["ti"],
                topic_j=record["tj"],
            )
        except KeyError as err:
            raise PairError(f"pair record missing key {err}") from err


def _pair(doc: Document, i: int, j: int) -> PairExample:
    topics = doc.topic_ids
    return PairExample(
        doc_id=doc.doc_id,
        i=i,
        j=j,
        stp=int(topics[i] == topics[j]),
        nsp=int(j == i + 1),
        topic_i=topics[i],
        topic_j=topics[j],
    )


def natural_pairs(doc: Document) -> list[PairExample]:
    """All adjacent pairs (i, i+1); empty for single-sentence documents."""
    return [_pair(doc, i, i + 1) for i in range(len(doc) - 1)]


def consecutive_sample(doc: Document, i: int, rng: random.Random) -> list[PairExample]:
    """Up to three pairs anchored at sentence ``i`` (see module docstring).

    Categories with no candidates are silently skipped; the negatives are
    drawn uniformly from their candidate sets using ``rng``.
    """
    n = len(doc)
    if not 0 <= i < n:
        raise PairError(f"anchor {i} out of range for document of {n} sentences")
    topics = doc.topic_ids
    out: list[PairExample] = []
    if i + 1 < n and topics[i + 1] == topics[i]:
        out.append(_pair(doc, i, i + 1))
    same_topic = [k for k in range(n) if topics[k] == topics[i] and k not in (i - 1, i, i + 1)]
    if same_topic:
        out.append(_pair(doc, i, rng.choice(same_topic)))
    different_topic = [l for l in range(n) if topics[l] != topics[i] and l != i + 1]
    if different_topic:
        out.append(_pair(doc, i, rng.choice(different_topic)))
    return out


def _doc_rng(seed: int, doc_id: str) -> random.Random:
    digest = hashlib.blake2b(
        f"{seed}\x1f{doc_id}".encode("utf-8"), digest_size=8
    ).digest()
    return random.Random(int.from_bytes(digest, "big"))


def build_training_set(docs: Sequence[Document], seed: int = 0) -> list[PairExample]:
    """Natural pairs plus consecutive samples over all documents.

    Deduplicated on (doc_id, i, j) keeping the first occurrence, then
    shuffled.  Each document draws from its own random stream derived from
    (seed, doc_id), so adding or reordering documents does not disturb the
    draws of the others.
    """
    examples: list[PairExample] = []
    seen: set[tuple[str, int, int]] = set()

    def emit(pair: PairExample) -> None:
        key = (pair.doc_id, pair.i, pair.j)
        if key not in seen:
            seen.add(key)
            examples.append(pair)

    for doc in docs:
        rng = _doc_rng(seed, doc.doc_id)
        for pair in natural_pairs(doc):
            emit(pair)
        for i in range(len(doc)):
            for pair in consecutive_sample(doc, i, rng):
                emit(pair)
    random.Random(seed).shuffle(examples)
    return examples


def write_pairs_jsonl(pairs: Iterable[PairExample], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for pair in pairs:
            fh.write(json.dumps(pair.to_record(), ensure_ascii=False) + "\n")


def load_pairs_jsonl(path: str | Path) -> list[PairExample]:
    pairs: list[PairExample] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as err:
                raise PairError(f"{path}:{lineno}: invalid JSON: {err}") from err
            try:
                pairs.append(PairExample.from_record(record))
            except PairError as err:
                raise PairError(f"{path}:{lineno}: {err}") from err
    return pairs
