"""The pair classifier: three linear heads over frozen sentence embeddings.

Given a sentence pair (u, v), the concatenated feature f = u;v;|u-v| feeds
two binary heads — same-topic (STP: 1 = same topic) and next-sentence
(NSP: 1 = consecutive) — while a topic head (TC) scores u and v separately
with shared weights.  Training minimizes

    L = w_stp * CE(stp) + w_tc * (CE(tc_u) + CE(tc_v)) / 2 + w_nsp * CE(nsp)

with each cross-entropy mean-reduced over the batch, computed with
max-subtracted log-softmax, and differentiated analytically.  A weight of 0
removes that head's term (and its gradient) exactly.

All math runs in float64 on a single thread with a fixed reduction order,
so results are bit-reproducible for a given seed regardless of machine
thread counts.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .corpus import Document
from .embedder import EmbeddingMatrix
from .errors import ConfigError, SeglineError
from .sampler import PairExample

__all__ = [
    "NumericError",
    "LossWeights",
    "HeadParams",
    "PairLogits",
    "PairBatch",
    "pair_feature",
    "batch_pair_features",
    "forward",
    "multitask_loss",
    "predict",
]

PARAM_ORDER = ("w_tc", "b_tc", "w_nsp", "b_nsp", "w_stp", "b_stp")


class NumericError(SeglineError):
    """A non-finite value appeared during loss computation."""


@dataclass
class LossWeights:
    """Per-head loss weights; 0 disables a head entirely."""

    stp: float = 4.0
    tc: float = 1.0
    nsp: float = 4.0

    def __post_init__(self) -> None:
        for name in ("stp", "tc", "nsp"):
            value = getattr(self, name)
            if not isinstance(value, (int, float)) or value < 0 or not np.isfinite(value):
                raise ConfigError(f"loss weight {name} must be a finite nonnegative real")
            setattr(self, name, float(value))
        if self.stp == 0.0 and self.tc == 0.0 and self.nsp == 0.0:
            raise ConfigError("at least one loss weight must be positive")

    def to_dict(self) -> dict:
        return {"stp": self.stp, "tc": self.tc, "nsp": self.nsp}

    @classmethod
    def from_dict(cls, payload: dict) -> "LossWeights":
        unknown = set(payload) - {"stp", "tc", "nsp"}
        if unknown:
            raise ConfigError(f"unknown loss weight keys: {sorted(unknown)}")
        return cls(**payload)


@dataclass
class HeadParams:
    """Weights and biases of the three heads.

    Shapes for embedding dimension d and K topics: w_tc (K, d), b_tc (K,),
    w_nsp (2, 3d), b_nsp (2,), w_stp (2, 3d), b_stp (2,).  Arrays are
    float64 in memory; serialization is float32 little-endian in the order
    ``PARAM_ORDER``.
    """

    w_tc: np.ndarray
    b_tc: np.ndarray
    w_nsp: np.ndarray
    b_nsp: np.ndarray
    w_stp: np.ndarray
    b_stp: np.ndarray

    def __post_init__(self) -> None:
        k, d = self.w_tc.shape
        expected = {
            "w_tc": (k, d),
            "b_tc": (k,),
            "w_nsp": (2, 3 * d),
            "b_nsp": (2,),
            "w_stp": (2, 3 * d),
            "b_stp": (2,),
        }
        for name, shape in expected.items():
            arr = getattr(self, name)
            if arr.shape != shape:
                raise ValueError(f"{name} has shape {arr.shape}, expected {shape}")
            arr = np.asarray(arr, dtype=np.float64)
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite values")
            setattr(self, name, arr)

    @property
    def d(self) -> int:
        return self.w_tc.shape[1]

    @property
    def k_topics(self) -> int:
        return self.w_tc.shape[0]

    def tensors(self) -> list[tuple[str, np.ndarray]]:
        return [(name, getattr(self, name)) for name in PARAM_ORDER]

    def copy(self) -> "HeadParams":
        return HeadParams(**{name: arr.copy() for name, arr in self.tensors()})

    @classmethod
    def zeros(cls, d: int, k_topics: int) -> "HeadParams":
        if d < 1 or k_topics < 1:
            raise ConfigError(f"need d >= 1 and k_topics >= 1, got d={d}, K={k_topics}")
        return cls(
            w_tc=np.zeros((k_topics, d)),
            b_tc=np.zeros(k_topics),
            w_nsp=np.zeros((2, 3 * d)),
            b_nsp=np.zeros(2),
            w_stp=np.zeros((2, 3 * d)),
            b_stp=np.zeros(2),
        )

    @classmethod
    def xavier(cls, d: int, k_topics: int, rng: np.random.Generator) -> "HeadParams":
        """Xavier-uniform weights (a = sqrt(6/(fan_in+fan_out))), zero biases.

        Weight tensors are drawn in the fixed order w_tc, w_nsp, w_stp so a
        seeded generator always produces the same initialization.
        """
        params = cls.zeros(d, k_topics)
        for name in ("w_tc", "w_nsp", "w_stp"):
            arr = getattr(params, name)
            fan_out, fan_in = arr.shape
            a = np.sqrt(6.0 / (fan_in + fan_out))
            setattr(params, name, rng.uniform(-a, a, size=arr.shape))
        return params

    def pack(self) -> bytes:
        """Float32 little-endian bytes of all tensors in PARAM_ORDER."""
        return b"".join(
            np.ascontiguousarray(arr, dtype="<f4").tobytes() for _, arr in self.tensors()
        )

    @classmethod
    def unpack(cls, d: int, k_topics: int, blob: bytes) -> "HeadParams":
        template = cls.zeros(d, k_topics)
        expected = sum(arr.size for _, arr in template.tensors()) * 4
        if len(blob) != expected:
            raise ValueError(
                f"parameter blob has {len(blob)} bytes, expected {expected} "
                f"for d={d}, K={k_topics}"
            )
        out = {}
        offset = 0
        for name, arr in template.tensors():
            count = arr.size
            values = np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
            out[name] = values.astype(np.float64).reshape(arr.shape)
            offset += count * 4
        return cls(**out)

    def roundtrip_f32(self) -> "HeadParams":
        """Parameters as they will read back after float32 serialization."""
        return HeadParams.unpack(self.d, self.k_topics, self.pack())


@dataclass
class PairLogits:
    """Raw head outputs for one pair."""

    tc_u: np.ndarray
    tc_v: np.ndarray
    nsp: np.ndarray
    stp: np.ndarray


def pair_feature(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Concatenated pair feature u;v;|u-v| of length 3d."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.ndim != 1 or u.shape != v.shape:
        raise ValueError(f"u and v must be equal-length vectors, got {u.shape} and {v.shape}")
    return np.concatenate([u, v, np.abs(u - v)])


def batch_pair_features(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Row-wise pair features for (B, d) stacks of u and v: a (B, 3d) array."""
    return np.concatenate([u, v, np.abs(u - v)], axis=1)


def forward(params: HeadParams, u: np.ndarray, v: np.ndarray) -> PairLogits:
    """Logits of all three heads for a single pair."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != (params.d,) or v.shape != (params.d,):
        raise ValueError(
            f"u and v must have shape ({params.d},), got {u.shape} and {v.shape}"
        )
    f = pair_feature(u, v)
    return PairLogits(
        tc_u=params.w_tc @ u + params.b_tc,
        tc_v=params.w_tc @ v + params.b_tc,
        nsp=params.w_nsp @ f + params.b_nsp,
        stp=params.w_stp @ f + params.b_stp,
    )


def predict(params: HeadParams, u: np.ndarray, v: np.ndarray) -> tuple[int, int, int, int]:
    """(stp_class, nsp_class, topic_u, topic_v); argmax ties go to the lower
    class index.  stp_class 1 means same topic; a boundary is stp_class 0.
    """
    logits = forward(params, u, v)
    return (
        int(np.argmax(logits.stp)),
        int(np.argmax(logits.nsp)),
        int(np.argmax(logits.tc_u)),
        int(np.argmax(logits.tc_v)),
    )


@dataclass
class PairBatch:
    """A mini-batch of pairs with gathered embeddings and integer labels."""

    u: np.ndarray  # (B, d) float64
    v: np.ndarray  # (B, d)
    stp: np.ndarray  # (B,) int64 in {0, 1}
    nsp: np.ndarray  # (B,) int64 in {0, 1}
    tc_u: np.ndarray  # (B,) int64 topic ids
    tc_v: np.ndarray  # (B,) int64

    def __post_init__(self) -> None:
        self.u = np.asarray(self.u, dtype=np.float64)
        self.v = np.asarray(self.v, dtype=np.float64)
        if self.u.ndim != 2 or self.u.shape != self.v.shape or self.u.shape[0] < 1:
            raise ValueError(
                f"batch u/v must be matching non-empty (B, d) arrays, "
                f"got {self.u.shape} and {self.v.shape}"
            )
        b = self.u.shape[0]
        for name in ("stp", "nsp", "tc_u", "tc_v"):
            arr = np.asarray(getattr(self, name), dtype=np.int64)
            if arr.shape != (b,):
                raise ValueError(f"label array {name} must have shape ({b},), got {arr.shape}")
            setattr(self, name, arr)
        if not (np.all((self.stp == 0) | (self.stp == 1)) and np.all((self.nsp == 0) | (self.nsp == 1))):
            raise ValueError("stp/nsp labels must be 0 or 1")
        if np.any(self.tc_u < 0) or np.any(self.tc_v < 0):
            raise ValueError("topic labels must be nonnegative")

    def __len__(self) -> int:
        return self.u.shape[0]

    @classmethod
    def from_pairs(
        cls,
        pairs: Sequence[PairExample],
        docs: Sequence[Document],
        embeddings: EmbeddingMatrix,
    ) -> "PairBatch":
        """Gather embedding rows for pair examples.

        Pair indices are document-local; each document's first sid anchors
        them into the global embedding matrix.
        """
        if not pairs:
            raise ValueError("cannot build an empty batch")
        first_sid = {doc.doc_id: doc.first_sid for doc in docs}
        lengths = {doc.doc_id: len(doc) for doc in docs}
        rows_u = np.empty(len(pairs), dtype=np.int64)
        rows_v = np.empty(len(pairs), dtype=np.int64)
        for idx, pair in enumerate(pairs):
            base = first_sid.get(pair.doc_id)
            if base is None:
                raise SeglineError(f"pair references unknown document {pair.doc_id!r}")
            if pair.i >= lengths[pair.doc_id] or pair.j >= lengths[pair.doc_id]:
                raise SeglineError(
                    f"pair ({pair.i}, {pair.j}) out of range for document "
                    f"{pair.doc_id!r} of {lengths[pair.doc_id]} sentences"
                )
            rows_u[idx] = base + pair.i
            rows_v[idx] = base + pair.j
        if rows_u.max() >= embeddings.n or rows_v.max() >= embeddings.n:
            raise SeglineError("pair sids exceed the embedding matrix row count")
        return cls(
            u=embeddings.data[rows_u].astype(np.float64),
            v=embeddings.data[rows_v].astype(np.float64),
            stp=np.array([p.stp for p in pairs], dtype=np.int64),
            nsp=np.array([p.nsp for p in pairs], dtype=np.int64),
            tc_u=np.array([p.topic_i for p in pairs], dtype=np.int64),
            tc_v=np.array([p.topic_j for p in pairs], dtype=np.int64),
        )


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _ce_and_dlogits(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and its gradient w.r.t. the logits."""
    b, c = logits.shape
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"labels must lie in [0, {c}), got [{labels.min()}, {labels.max()}]")
    log_p = _log_softmax(logits)
    rows = np.arange(b)
    loss = float(-log_p[rows, labels].mean())
    dlogits = np.exp(log_p)
    dlogits[rows, labels] -= 1.0
    return loss, dlogits / b


def _first_nonfinite_row(*arrays: np.ndarray) -> int:
    for arr in arrays:
        finite = np.isfinite(arr).all(axis=tuple(range(1, arr.ndim)))
        bad = np.flatnonzero(~finite)
        if bad.size:
            return int(bad[0])
    return -1


def multitask_loss(
    params: HeadParams, batch: PairBatch, weights: LossWeights
) -> tuple[float, HeadParams]:
    """Weighted multi-task loss and analytic gradients.

    Returns (loss, grads) where grads is a HeadParams of the same shapes.
    Heads with weight 0 contribute exactly zero loss and zero gradient.
    Raises :class:`NumericError` (reporting the first offending batch index)
    if any intermediate value is non-finite.
    """
    if batch.u.shape[1] != params.d:
        raise ValueError(
            f"batch dimension {batch.u.shape[1]} does not match params d={params.d}"
        )
    grads = HeadParams.zeros(params.d, params.k_topics)
    loss = 0.0
    # Non-finite inputs are detected afterwards and raised as NumericError;
    # keep numpy from warning about the intermediate inf/nan arithmetic.
    with np.errstate(invalid="ignore", over="ignore"):
        features = None
        if weights.stp > 0 or weights.nsp > 0:
            features = batch_pair_features(batch.u, batch.v)

        if weights.stp > 0:
            logits = features @ params.w_stp.T + params.b_stp
            term, dlogits = _ce_and_dlogits(logits, batch.stp)
            loss += weights.stp * term
            grads.w_stp += weights.stp * (dlogits.T @ features)
            grads.b_stp += weights.stp * dlogits.sum(axis=0)

        if weights.tc > 0:
            if batch.tc_u.max() >= params.k_topics or batch.tc_v.max() >= params.k_topics:
                raise ValueError(
                    f"topic labels exceed K={params.k_topics}; "
                    f"got max {max(batch.tc_u.max(), batch.tc_v.max())}"
                )
            logits_u = batch.u @ params.w_tc.T + params.b_tc
            logits_v = batch.v @ params.w_tc.T + params.b_tc
            term_u, dlogits_u = _ce_and_dlogits(logits_u, batch.tc_u)
            term_v, dlogits_v = _ce_and_dlogits(logits_v, batch.tc_v)
            half = weights.tc / 2.0
            loss += half * (term_u + term_v)
            grads.w_tc += half * (dlogits_u.T @ batch.u + dlogits_v.T @ batch.v)
            grads.b_tc += half * (dlogits_u.sum(axis=0) + dlogits_v.sum(axis=0))

        if weights.nsp > 0:
            logits = features @ params.w_nsp.T + params.b_nsp
            term, dlogits = _ce_and_dlogits(logits, batch.nsp)
            loss += weights.nsp * term
            grads.w_nsp += weights.nsp * (dlogits.T @ features)
            grads.b_nsp += weights.nsp * dlogits.sum(axis=0)

    if not np.isfinite(loss):
        index = _first_nonfinite_row(batch.u, batch.v)
        raise NumericError(
            f"non-finite loss (first suspicious batch index {index if index >= 0 else 'unknown'})"
        )
    return loss, grads
