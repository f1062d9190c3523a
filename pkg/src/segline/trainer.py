"""Mini-batch SGD training with per-epoch validation and checkpointing.

Every epoch shuffles the training pairs with the run's seeded generator,
steps through mini-batches with a linearly decaying learning rate, then
segments the validation documents and scores Pk/WindowDiff.  The checkpoint
returned is the epoch with the lowest validation Pk (ties keep the earlier
epoch).

Validation (and the checkpoint) always uses parameters round-tripped
through float32, the serialization precision — so the Pk recorded in a
checkpoint is exactly what the saved file reproduces when loaded.

Determinism: (seed, config, data) fully determine the result.  All math is
single-threaded float64 with fixed reduction order; training twice with the
same inputs produces byte-identical checkpoints.
"""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .corpus import Document, derive_gold
from .embedder import EmbeddingMatrix
from .errors import ConfigError, SeglineError
from .metrics import aggregate, pk, window_size, windowdiff
from .model import (
    PARAM_ORDER,
    HeadParams,
    LossWeights,
    NumericError,
    PairBatch,
    multitask_loss,
)
from .sampler import PairExample
from .segmenter import segment_stp, segment_tc_only

logger = logging.getLogger(__name__)

__all__ = [
    "TrainingError",
    "CheckpointError",
    "TrainConfig",
    "Checkpoint",
    "lr_at",
    "train",
    "save_checkpoint",
    "load_checkpoint",
]

CHECKPOINT_FORMAT = "segline-checkpoint-v1"
_MOMENTUM = 0.9


class TrainingError(SeglineError):
    """Training aborted (e.g. the loss diverged)."""


class CheckpointError(SeglineError):
    """Malformed checkpoint file."""


@dataclass
class TrainConfig:
    """Hyperparameters of one training run."""

    batch_size: int = 48
    max_epochs: int = 14
    lr0: float = 1e-2
    lr_schedule: str = "linear_decay"
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    optimizer: str = "sgd"

    def __post_init__(self) -> None:
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_epochs < 1:
            raise ConfigError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if not self.lr0 > 0:
            raise ConfigError(f"lr0 must be > 0, got {self.lr0}")
        if self.lr_schedule not in ("constant", "linear_decay"):
            raise ConfigError(
                f"lr_schedule must be 'constant' or 'linear_decay', got {self.lr_schedule!r}"
            )
        if self.optimizer not in ("sgd", "sgd_momentum"):
            raise ConfigError(
                f"optimizer must be 'sgd' or 'sgd_momentum', got {self.optimizer!r}"
            )
        if isinstance(self.weights, dict):
            self.weights = LossWeights.from_dict(self.weights)

    def to_dict(self) -> dict:
        return {
            "batch_size": self.batch_size,
            "max_epochs": self.max_epochs,
            "lr0": self.lr0,
            "lr_schedule": self.lr_schedule,
            "seed": self.seed,
            "weights": self.weights.to_dict(),
            "optimizer": self.optimizer,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "TrainConfig":
        known = {
            "batch_size",
            "max_epochs",
            "lr0",
            "lr_schedule",
            "seed",
            "weights",
            "optimizer",
        }
        unknown = set(payload) - known
        if unknown:
            raise ConfigError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**payload)

    def config_hash(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


@dataclass
class Checkpoint:
    """Best-epoch training result."""

    params: HeadParams
    epoch: int
    validation_pk: float
    config_hash: str

    def __post_init__(self) -> None:
        if not 0.0 <= self.validation_pk <= 1.0:
            raise ValueError(f"validation_pk must be in [0,1], got {self.validation_pk}")
        if self.epoch < 1:
            raise ValueError(f"epoch must be >= 1, got {self.epoch}")


def lr_at(step: int, total_steps: int, config: TrainConfig) -> float:
    """Learning rate at a global step.

    ``constant`` keeps lr0; ``linear_decay`` interpolates from lr0 to
    0.1*lr0 across all steps: lr0 * (1 - 0.9 * step / total_steps).
    """
    if not 0 <= step < total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps})")
    if config.lr_schedule == "constant":
        return config.lr0
    return config.lr0 * (1.0 - 0.9 * step / total_steps)


def _validate_inputs(
    train_pairs: Sequence[PairExample],
    train_docs: Sequence[Document],
    valid_docs: Sequence[Document],
    embeddings: EmbeddingMatrix,
    k_topics: int,
) -> None:
    if not train_pairs:
        raise ConfigError("training needs at least one pair example")
    if not valid_docs:
        raise ConfigError("training needs at least one validation document")
    if k_topics < 1:
        raise ConfigError(f"k_topics must be >= 1, got {k_topics}")
    max_pair_topic = max(max(p.topic_i, p.topic_j) for p in train_pairs)
    max_valid_topic = max(t for doc in valid_docs for t in doc.topic_ids)
    if max(max_pair_topic, max_valid_topic) >= k_topics:
        raise ConfigError(
            f"k_topics={k_topics} too small for topic ids up to "
            f"{max(max_pair_topic, max_valid_topic)}"
        )
    train_ids = {doc.doc_id for doc in train_docs}
    missing = {p.doc_id for p in train_pairs} - train_ids
    if missing:
        raise ConfigError(f"pairs reference documents not in train_docs: {sorted(missing)[:3]}")


def train(
    config: TrainConfig,
    train_pairs: Sequence[PairExample],
    train_docs: Sequence[Document],
    valid_docs: Sequence[Document],
    embeddings: EmbeddingMatrix,
    k_topics: int,
    log_path: str | Path | None = None,
) -> Checkpoint:
    """Run the full training loop and return the best-validation checkpoint.

    ``train_docs`` anchors the pairs' document-local indices to embedding
    rows; ``k_topics`` sizes the topic head.  When ``log_path`` is given,
    one JSONL record per epoch is written:
    ``{"epoch":…, "train_loss":…, "val_pk":…, "val_wd":…, "lr":…}`` with
    ``lr`` the rate used for the epoch's final step.

    Validation segments with the same-topic head when its weight is
    positive, otherwise with the topic head (topic-change boundaries).
    """
    _validate_inputs(train_pairs, train_docs, valid_docs, embeddings, k_topics)
    logger.info(
        "training: %d pairs, %d validation docs, schedule=%s "
        "(linear_decay is a reconstruction: decay to 10%% of lr0 over all steps)",
        len(train_pairs),
        len(valid_docs),
        config.lr_schedule,
    )

    rng = np.random.default_rng(config.seed)
    params = HeadParams.xavier(embeddings.d, k_topics, rng)
    velocity = HeadParams.zeros(embeddings.d, k_topics)

    n = len(train_pairs)
    steps_per_epoch = math.ceil(n / config.batch_size)
    total_steps = steps_per_epoch * config.max_epochs

    golds = [derive_gold(doc) for doc in valid_docs]
    k_window = window_size(golds)
    segment_fn = segment_stp if config.weights.stp > 0 else segment_tc_only

    # Gather all embeddings/labels once; per-step batches slice this pool.
    pool = PairBatch.from_pairs(train_pairs, train_docs, embeddings)

    best: Checkpoint | None = None
    config_hash = config.config_hash()
    log_fh = open(log_path, "w", encoding="utf-8") if log_path is not None else None
    try:
        global_step = 0
        for epoch in range(1, config.max_epochs + 1):
            order = rng.permutation(n)
            loss_sum = 0.0
            lr = config.lr0
            for start in range(0, n, config.batch_size):
                sel = order[start : start + config.batch_size]
                batch = PairBatch(
                    u=pool.u[sel],
                    v=pool.v[sel],
                    stp=pool.stp[sel],
                    nsp=pool.nsp[sel],
                    tc_u=pool.tc_u[sel],
                    tc_v=pool.tc_v[sel],
                )
                try:
                    loss, grads = multitask_loss(params, batch, config.weights)
                except NumericError as err:
                    raise TrainingError(
                        f"diverged at epoch {epoch}, step {global_step}: {err}"
                    ) from err
                lr = lr_at(global_step, total_steps, config)
                for name, grad in grads.tensors():
                    tensor = getattr(params, name)
                    if config.optimizer == "sgd_momentum":
                        vel = getattr(velocity, name)
                        vel *= _MOMENTUM
                        vel += grad
                        tensor -= lr * vel
                    else:
                        tensor -= lr * grad
                loss_sum += loss * len(batch)
                global_step += 1

            try:
                eval_params = params.roundtrip_f32()
            except ValueError as err:
                raise TrainingError(
                    f"diverged at epoch {epoch}, step {global_step - 1}: {err}"
                ) from err
            hyps = [segment_fn(eval_params, doc, embeddings) for doc in valid_docs]
            val_pk = aggregate([pk(g, h, k_window) for g, h in zip(golds, hyps)])
            val_wd = aggregate([windowdiff(g, h, k_window) for g, h in zip(golds, hyps)])
            train_loss = loss_sum / n
            if log_fh is not None:
                log_fh.write(
                    json.dumps(
                        {
                            "epoch": epoch,
                            "train_loss": train_loss,
                            "val_pk": val_pk,
                            "val_wd": val_wd,
                            "lr": lr,
                        }
                    )
                    + "\n"
                )
                log_fh.flush()
            logger.info(
                "epoch %d: train_loss=%.6f val_pk=%.4f val_wd=%.4f", epoch, train_loss, val_pk, val_wd
            )
            if best is None or val_pk < best.validation_pk:
                best = Checkpoint(
                    params=eval_params,
                    epoch=epoch,
                    validation_pk=val_pk,
                    config_hash=config_hash,
                )
    finally:
        if log_fh is not None:
            log_fh.close()
    assert best is not None  # max_epochs >= 1 guarantees at least one epoch
    return best


# Checkpoint file I/O ---------------------------------------------------------


def save_checkpoint(
    checkpoint: Checkpoint,
    config: TrainConfig,
    path: str | Path,
    embedder_config: dict | None = None,
) -> None:
    """Write a checkpoint: JSON header + base64 float32 parameters.

    Parameters are packed little-endian in the order ``PARAM_ORDER``.  The
    header carries enough to reload and re-embed: dimensions, loss weights,
    the config hash, the epoch and validation Pk, the full training config,
    and (optionally) the embedder configuration used to produce inputs.
    """
    header = {
        "format": CHECKPOINT_FORMAT,
        "d": checkpoint.params.d,
        "k_topics": checkpoint.params.k_topics,
        "weights": config.weights.to_dict(),
        "config_hash": checkpoint.config_hash,
        "epoch": checkpoint.epoch,
        "validation_pk": checkpoint.validation_pk,
        "train_config": config.to_dict(),
        "param_order": list(PARAM_ORDER),
        "param_dtype": "float32",
        "param_byte_order": "little",
        "params_b64": base64.b64encode(checkpoint.params.pack()).decode("ascii"),
    }
    if embedder_config is not None:
        header["embedder"] = embedder_config
    Path(path).write_text(json.dumps(header, indent=2) + "\n", encoding="utf-8")


def load_checkpoint(path: str | Path) -> tuple[Checkpoint, dict]:
    """Read a checkpoint file; returns (checkpoint, full header dict)."""
    path = Path(path)
    try:
        header = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as err:
        if isinstance(err, OSError):
            raise
        raise CheckpointError(f"{path}: invalid JSON: {err}") from err
    if not isinstance(header, dict) or header.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    try:
        d = int(header["d"])
        k_topics = int(header["k_topics"])
        blob = base64.b64decode(header["params_b64"], validate=True)
        params = HeadParams.unpack(d, k_topics, blob)
        checkpoint = Checkpoint(
            params=params,
            epoch=int(header["epoch"]),
            validation_pk=float(header["validation_pk"]),
            config_hash=str(header["config_hash"]),
        )
    except (KeyError, ValueError, TypeError) as err:
        raise CheckpointError(f"{path}: {err}") from err
    if header.get("param_order") != list(PARAM_ORDER):
        raise CheckpointError(
            f"{path}: unexpected parameter order {header.get('param_order')}"
        )
    return checkpoint, header
