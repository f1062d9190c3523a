"""Segmentation metrics: Pk, WindowDiff, window-size selection, micro-F1.

Pk and WindowDiff slide a window of width ``k`` over each document.  For a
window anchored at sentence ``i``:

* Pk asks whether sentences ``i`` and ``i+k`` fall in the same segment and
  counts reference/hypothesis disagreements.
* WindowDiff counts boundary positions inside ``[i, i+k)`` on each side and
  flags the window when the counts differ.

Both return raw ``(mismatches, windows)`` pairs so corpus-level scores can
be micro-aggregated (sum of mismatches over sum of windows) rather than
averaged per document.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .corpus import Segmentation
from .errors import ConfigError

logger = logging.getLogger(__name__)

__all__ = [
    "MetricReport",
    "window_size",
    "pk",
    "windowdiff",
    "micro_f1",
    "aggregate",
    "evaluate_segmentations",
]


@dataclass
class MetricReport:
    """Corpus-level evaluation summary."""

    pk: float
    windowdiff: float
    k_used: int
    windows_counted: int
    f1_stp: float | None = None
    f1_tc: float | None = None
    f1_nsp: float | None = None

    def __post_init__(self) -> None:
        for name in ("pk", "windowdiff", "f1_stp", "f1_tc", "f1_nsp"):
            value = getattr(self, name)
            if value is not None and not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {value}")
        if self.k_used < 1:
            raise ValueError(f"k_used must be >= 1, got {self.k_used}")
        if self.windows_counted < 0:
            raise ValueError(f"windows_counted must be >= 0, got {self.windows_counted}")


def window_size(gold_segmentations: Iterable[Segmentation]) -> int:
    """Window width: half the corpus mean segment length, rounded half away
    from zero, never below 1.
    """
    golds = list(gold_segmentations)
    if not golds:
        raise ConfigError("window_size needs at least one document")
    total_sentences = sum(g.n for g in golds)
    total_segments = sum(len(g.boundaries) + 1 for g in golds)
    mean_len = total_sentences / total_segments
    return max(1, math.floor(mean_len / 2 + 0.5))


def _boundary_prefix(seg: Segmentation) -> np.ndarray:
    """P[t] = number of boundary positions < t, for t in 0..n-1."""
    marks = np.zeros(max(seg.n - 1, 1), dtype=np.int64)
    for b in seg.boundaries:
        marks[b] = 1
    return np.concatenate([np.zeros(1, dtype=np.int64), np.cumsum(marks)])


def _check_pair(ref: Segmentation, hyp: Segmentation, k: int) -> None:
    if ref.n != hyp.n:
        raise ValueError(f"segmentations disagree on length: ref n={ref.n}, hyp n={hyp.n}")
    if k < 1:
        raise ValueError(f"window width must be >= 1, got {k}")


def pk(ref: Segmentation, hyp: Segmentation, k: int) -> tuple[int, int]:
    """Pk raw counts for one document: (mismatched windows, total windows).

    With k' = min(k, n-1), windows are anchored at i = 0..n-1-k'; a window
    mismatches when exactly one of ref/hyp puts sentences i and i+k' in the
    same segment.  Documents with n <= 1 contribute (0, 0).
    """
    _check_pair(ref, hyp, k)
    n = ref.n
    if n <= 1:
        return (0, 0)
    kk = min(k, n - 1)
    pr = _boundary_prefix(ref)
    ph = _boundary_prefix(hyp)
    idx = np.arange(n - kk)
    same_ref = (pr[idx + kk] - pr[idx]) == 0
    same_hyp = (ph[idx + kk] - ph[idx]) == 0
    return int(np.sum(same_ref != same_hyp)), n - kk


def windowdiff(ref: Segmentation, hyp: Segmentation, k: int) -> tuple[int, int]:
    """WindowDiff raw counts: windows where the number of boundaries in
    [i, i+k') differs between ref and hyp.
    """
    _check_pair(ref, hyp, k)
    n = ref.n
    if n <= 1:
        return (0, 0)
    kk = min(k, n - 1)
    pr = _boundary_prefix(ref)
    ph = _boundary_prefix(hyp)
    idx = np.arange(n - kk)
    count_ref = pr[idx + kk] - pr[idx]
    count_hyp = ph[idx + kk] - ph[idx]
    return int(np.sum(count_ref != count_hyp)), n - kk


def micro_f1(pred_labels: Sequence[int], gold_labels: Sequence[int]) -> float:
    """Micro-averaged F1; equals accuracy for single-label classification."""
    if len(pred_labels) != len(gold_labels):
        raise ValueError(
            f"label lists disagree on length: {len(pred_labels)} vs {len(gold_labels)}"
        )
    if not len(gold_labels):
        raise ValueError("micro_f1 needs at least one label")
    correct = sum(1 for p, g in zip(pred_labels, gold_labels) if p == g)
    return correct / len(gold_labels)


def aggregate(per_doc: Iterable[tuple[int, int]]) -> float:
    """Micro aggregation of per-document (mismatches, windows) counts."""
    pairs = list(per_doc)
    if not pairs:
        raise ConfigError("aggregate needs at least one document")
    mismatches = sum(m for m, _ in pairs)
    windows = sum(w for _, w in pairs)
    if windows == 0:
        logger.warning("no sliding windows in any document; reporting 0.0")
        return 0.0
    return mismatches / windows


def evaluate_segmentations(
    golds: Sequence[Segmentation],
    hyps: Sequence[Segmentation],
    k: int | None = None,
) -> MetricReport:
    """Score hypothesis segmentations against gold, micro-aggregated.

    ``k`` defaults to :func:`window_size` over the gold segmentations.  The
    same-topic micro-F1 is derived from the boundary decisions themselves:
    every adjacent sentence pair gets label 0 at a boundary and 1 otherwise,
    and hypothesis labels are scored against gold labels.
    """
    if len(golds) != len(hyps):
        raise ValueError(f"gold/hyp document counts differ: {len(golds)} vs {len(hyps)}")
    if not golds:
        raise ConfigError("evaluate_segmentations needs at least one document")
    if k is None:
        k = window_size(golds)
    pk_counts = []
    wd_counts = []
    pred_stp: list[int] = []
    gold_stp: list[int] = []
    for ref, hyp in zip(golds, hyps):
        pk_counts.append(pk(ref, hyp, k))
        wd_counts.append(windowdiff(ref, hyp, k))
        for i in range(ref.n - 1):
            gold_stp.append(0 if i in ref.boundaries else 1)
            pred_stp.append(0 if i in hyp.boundaries else 1)
    return MetricReport(
        pk=aggregate(pk_counts),
        windowdiff=aggregate(wd_counts),
        k_used=k,
        windows_counted=sum(w for _, w in pk_counts),
        f1_stp=micro_f1(pred_stp, gold_stp) if gold_stp else None,
    )
