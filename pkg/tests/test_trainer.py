"""Training loop, learning-rate schedule, and checkpoint file tests."""

import base64
import json

import numpy as np
import pytest

from segline.corpus import Document, Sentence, derive_gold
from segline.embedder import EmbeddingMatrix
from segline.errors import ConfigError
from segline.metrics import aggregate, pk, window_size
from segline.model import PARAM_ORDER, HeadParams, LossWeights
from segline.sampler import build_training_set, natural_pairs
from segline.segmenter import segment_stp, segment_tc_only
from segline.trainer import (
    Checkpoint,
    CheckpointError,
    TrainConfig,
    TrainingError,
    load_checkpoint,
    lr_at,
    save_checkpoint,
    train,
)


def make_docs(layouts, start_sid=0, prefix="doc"):
    """Documents with the given per-doc topic sequences and contiguous sids."""
    docs = []
    sid = start_sid
    for di, topics in enumerate(layouts):
        sentences = []
        for idx, topic in enumerate(topics):
            sentences.append(Sentence(sid=sid, text=f"{prefix}{di} s{idx}", topic_id=topic))
            sid += 1
        docs.append(Document(doc_id=f"{prefix}{di}", sentences=tuple(sentences)))
    return docs, sid


def separable_setup(d=4, noise=0.05, seed=11):
    """Docs whose embeddings are near-orthogonal per topic: easy to segment."""
    train_docs, n1 = make_docs(
        [[0, 0, 0, 0, 1, 1, 1, 1], [1, 1, 1, 0, 0, 0]], prefix="tr"
    )
    valid_docs, n2 = make_docs([[0, 0, 0, 1, 1, 1], [1, 1, 0, 0]], start_sid=n1, prefix="va")
    rng = np.random.default_rng(seed)
    rows = np.zeros((n2, d), dtype=np.float64)
    for doc in train_docs + valid_docs:
        for sent in doc.sentences:
            rows[sent.sid, sent.topic_id] = 1.0
            rows[sent.sid] += noise * rng.standard_normal(d)
    emb = EmbeddingMatrix(n=n2, d=d, data=rows.astype(np.float32), normalized=False)
    pairs = build_training_set(train_docs, seed=3)
    return train_docs, valid_docs, emb, pairs


# Learning-rate schedule ------------------------------------------------------


def test_lr_constant_schedule():
    cfg = TrainConfig(lr0=0.25, lr_schedule="constant")
    for step in (0, 1, 57, 99):
        assert lr_at(step, 100, cfg) == 0.25


def test_lr_linear_decay_frozen_points():
    cfg = TrainConfig(lr0=0.01, lr_schedule="linear_decay")
    assert lr_at(0, 100, cfg) == 0.01
    assert lr_at(50, 100, cfg) == pytest.approx(0.0055)
    assert lr_at(99, 100, cfg) == pytest.approx(0.01 * (1 - 0.9 * 0.99))
    # decays toward (but never reaches) 10% of lr0
    assert lr_at(99, 100, cfg) > 0.001


def test_lr_step_bounds():
    cfg = TrainConfig()
    with pytest.raises(ValueError):
        lr_at(100, 100, cfg)
    with pytest.raises(ValueError):
        lr_at(-1, 100, cfg)


# Config ----------------------------------------------------------------------


def test_train_config_defaults():
    cfg = TrainConfig()
    assert cfg.batch_size == 48
    assert cfg.max_epochs == 14
    assert cfg.lr0 == pytest.approx(1e-2)
    assert cfg.lr_schedule == "linear_decay"
    assert cfg.optimizer == "sgd"
    assert cfg.weights == LossWeights()


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0)
    with pytest.raises(ConfigError):
        TrainConfig(max_epochs=0)
    with pytest.raises(ConfigError):
        TrainConfig(lr0=0.0)
    with pytest.raises(ConfigError):
        TrainConfig(lr_schedule="cosine")
    with pytest.raises(ConfigError):
        TrainConfig(optimizer="adam")


def test_train_config_dict_roundtrip():
    cfg = TrainConfig(batch_size=8, seed=5, weights=LossWeights(stp=1, tc=0, nsp=1))
    again = TrainConfig.from_dict(cfg.to_dict())
    assert again == cfg
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"batch_size": 8, "bogus": 1})


def test_config_hash_stable_and_sensitive():
    a = TrainConfig(seed=1)
    b = TrainConfig(seed=1)
    c = TrainConfig(seed=2)
    assert a.config_hash() == b.config_hash()
    assert a.config_hash() != c.config_hash()
    assert len(a.config_hash()) == 64
    assert set(a.config_hash()) <= set("0123456789abcdef")


# Training behaviour ----------------------------------------------------------


def test_training_loss_decreases_on_separable_data(tmp_path):
    train_docs, valid_docs, emb, pairs = separable_setup()
    cfg = TrainConfig(
        batch_size=64,  # full batch: one deterministic gradient step per epoch
        max_epochs=6,
        lr0=0.5,
        lr_schedule="constant",
        seed=0,
        weights=LossWeights(stp=1, tc=0, nsp=0),
    )
    log = tmp_path / "train.log.jsonl"
    ck = train(cfg, pairs, train_docs, valid_docs, emb, k_topics=2, log_path=log)
    records = [json.loads(line) for line in log.read_text().splitlines()]
    losses = [r["train_loss"] for r in records]
    assert len(losses) == 6
    for earlier, later in zip(losses, losses[1:]):
        assert later < earlier
    assert ck.validation_pk <= records[0]["val_pk"]


def test_train_reaches_zero_pk_on_separable_data():
    train_docs, valid_docs, emb, pairs = separable_setup()
    cfg = TrainConfig(batch_size=16, max_epochs=10, lr0=0.5, seed=0)
    ck = train(cfg, pairs, train_docs, valid_docs, emb, k_topics=2)
    assert ck.validation_pk == 0.0


def test_train_is_deterministic(tmp_path):
    train_docs, valid_docs, emb, pairs = separable_setup()
    cfg = TrainConfig(batch_size=8, max_epochs=4, lr0=0.1, seed=7)
    first = train(cfg, pairs, train_docs, valid_docs, emb, k_topics=2)
    second = train(cfg, pairs, train_docs, valid_docs, emb, k_topics=2)
    assert first.params.pack() == second.params.pack()
    assert first.epoch == second.epoch
    assert first.validation_pk == second.validation_pk
    path_a, path_b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(first, cfg, path_a)
    save_checkpoint(second, cfg, path_b)
    assert path_a.read_bytes() == path_b.read_bytes()


def test_seed_changes_result():
    train_docs, valid_docs, emb, pairs = separable_setup()
    a = train(TrainConfig(max_epochs=2, seed=1), pairs, train_docs, valid_docs, emb, k_topics=2)
    b = train(TrainConfig(max_epochs=2, seed=2), pairs, train_docs, valid_docs, emb, k_topics=2)
    assert a.params.pack() != b.params.pack()


def test_checkpoint_validation_pk_reproducible():
    train_docs, valid_docs, emb, pairs = separable_setup()
    cfg = TrainConfig(batch_size=8, max_epochs=5, lr0=0.2, seed=3)
    ck = train(cfg, pairs, train_docs, valid_docs, emb, k_topics=2)
    golds = [derive_gold(doc) for doc in valid_docs]
    k = window_size(golds)
    hyps = [segment_stp(ck.params, doc, emb) for doc in valid_docs]
    again = aggregate([pk(g, h, k) for g, h in zip(golds, hyps)])
    assert again == ck.validation_pk


def test_tc_only_weights_validate_with_topic_head():
    train_docs, valid_docs, emb, pairs = separable_setup()
    cfg = TrainConfig(
        batch_size=8,
        max_epochs=5,
        lr0=0.5,
        seed=0,
        weights=LossWeights(stp=0, tc=1, nsp=0),
    )
    ck = train(cfg, pairs, train_docs, valid_docs, emb, k_topics=2)
    golds = [derive_gold(doc) for doc in valid_docs]
    k = window_size(golds)
    hyps = [segment_tc_only(ck.params, doc, emb) for doc in valid_docs]
    again = aggregate([pk(g, h, k) for g, h in zip(golds, hyps)])
    assert again == ck.validation_pk


def test_momentum_changes_trajectory():
    train_docs, valid_docs, emb, pairs = separable_setup()
    base = dict(batch_size=8, max_epochs=3, lr0=0.05, seed=4)
    plain = train(TrainConfig(**base), pairs, train_docs, valid_docs, emb, k_topics=2)
    mom = train(
        TrainConfig(optimizer="sgd_momentum", **base),
        pairs,
        train_docs,
        valid_docs,
        emb,
        k_topics=2,
    )
    assert plain.params.pack() != mom.params.pack()


def test_zero_gradient_batch_leaves_params_at_init():
    # Zero embeddings + zero-initialized biases + balanced same-topic labels:
    # every gradient is exactly zero, so training must not move a parameter.
    docs, n = make_docs([[0, 0, 1]])
    emb = EmbeddingMatrix(n=n, d=2, data=np.zeros((n, 2), dtype=np.float32))
    pairs = natural_pairs(docs[0])
    assert sorted(p.stp for p in pairs) == [0, 1]
    for optimizer in ("sgd", "sgd_momentum"):
        cfg = TrainConfig(
            batch_size=2,
            max_epochs=3,
            lr0=0.5,
            seed=9,
            weights=LossWeights(stp=1, tc=0, nsp=0),
            optimizer=optimizer,
        )
        ck = train(cfg, pairs, docs, docs, emb, k_topics=2)
        init = HeadParams.xavier(2, 2, np.random.default_rng(cfg.seed))
        assert ck.params.pack() == init.pack()
        assert ck.epoch == 1  # all epochs tie; earliest wins


def test_divergence_aborts_with_location():
    docs, n = make_docs([[0, 0, 1, 1]])
    rows = np.zeros((n, 2), dtype=np.float32)
    for sent in docs[0].sentences:
        rows[sent.sid, sent.topic_id] = 1e3
    emb = EmbeddingMatrix(n=n, d=2, data=rows)
    pairs = natural_pairs(docs[0])
    cfg = TrainConfig(batch_size=1, max_epochs=4, lr0=1e303, lr_schedule="constant", seed=0)
    with pytest.raises(TrainingError, match=r"diverged at epoch \d+, step \d+"):
        train(cfg, pairs, docs, docs, emb, k_topics=2)


def test_train_input_validation():
    train_docs, valid_docs, emb, pairs = separable_setup()
    cfg = TrainConfig(max_epochs=1)
    with pytest.raises(ConfigError):
        train(cfg, [], train_docs, valid_docs, emb, k_topics=2)
    with pytest.raises(ConfigError):
        train(cfg, pairs, train_docs, [], emb, k_topics=2)
    with pytest.raises(ConfigError):
        train(cfg, pairs, train_docs, valid_docs, emb, k_topics=1)
    with pytest.raises(ConfigError):
        train(cfg, pairs, [], valid_docs, emb, k_topics=2)


def test_training_log_schema(tmp_path):
    train_docs, valid_docs, emb, pairs = separable_setup()
    cfg = TrainConfig(batch_size=8, max_epochs=3, lr0=0.1, seed=2)
    log = tmp_path / "log.jsonl"
    train(cfg, pairs, train_docs, valid_docs, emb, k_topics=2, log_path=log)
    records = [json.loads(line) for line in log.read_text().splitlines()]
    assert [r["epoch"] for r in records] == [1, 2, 3]
    steps_per_epoch = -(-len(pairs) // cfg.batch_size)
    total = steps_per_epoch * cfg.max_epochs
    for r in records:
        assert set(r) == {"epoch", "train_loss", "val_pk", "val_wd", "lr"}
        assert r["train_loss"] > 0.0
        assert 0.0 <= r["val_pk"] <= 1.0
        assert 0.0 <= r["val_wd"] <= 1.0
        assert r["lr"] == lr_at(r["epoch"] * steps_per_epoch - 1, total, cfg)


# Checkpoint files ------------------------------------------------------------


def test_checkpoint_file_roundtrip(tmp_path):
    train_docs, valid_docs, emb, pairs = separable_setup()
    cfg = TrainConfig(batch_size=8, max_epochs=2, seed=6)
    ck = train(cfg, pairs, train_docs, valid_docs, emb, k_topics=2)
    assert ck.config_hash == cfg.config_hash()
    path = tmp_path / "model.ckpt"
    save_checkpoint(ck, cfg, path, embedder_config={"kind": "hash", "d": 4, "seed": 1, "normalize": True})
    loaded, header = load_checkpoint(path)
    assert loaded.params.pack() == ck.params.pack()
    assert loaded.epoch == ck.epoch
    assert loaded.validation_pk == ck.validation_pk
    assert loaded.config_hash == ck.config_hash
    assert header["format"] == "segline-checkpoint-v1"
    assert header["d"] == 4 and header["k_topics"] == 2
    assert header["param_order"] == list(PARAM_ORDER)
    assert header["train_config"] == cfg.to_dict()
    assert header["embedder"]["kind"] == "hash"
    assert header["weights"] == cfg.weights.to_dict()


def test_checkpoint_rejects_bad_files(tmp_path):
    params = HeadParams.zeros(2, 2)
    ck = Checkpoint(params=params, epoch=1, validation_pk=0.5, config_hash="x" * 64)
    good = tmp_path / "good.ckpt"
    save_checkpoint(ck, TrainConfig(), good)
    header = json.loads(good.read_text())

    bad_json = tmp_path / "bad_json.ckpt"
    bad_json.write_text("{not json")
    with pytest.raises(CheckpointError, match="invalid JSON"):
        load_checkpoint(bad_json)

    def write_variant(name, **changes):
        variant = dict(header)
        for key, value in changes.items():
            if value is None:
                variant.pop(key, None)
            else:
                variant[key] = value
        p = tmp_path / name
        p.write_text(json.dumps(variant))
        return p

    with pytest.raises(CheckpointError, match="not a segline-checkpoint"):
        load_checkpoint(write_variant("fmt.ckpt", format="other-v9"))
    with pytest.raises(CheckpointError):
        load_checkpoint(write_variant("b64.ckpt", params_b64="!!!not-base64!!!"))
    truncated = base64.b64encode(b"\x00" * 7).decode()
    with pytest.raises(CheckpointError):
        load_checkpoint(write_variant("short.ckpt", params_b64=truncated))
    with pytest.raises(CheckpointError):
        load_checkpoint(write_variant("pk.ckpt", validation_pk=1.5))
    with pytest.raises(CheckpointError):
        load_checkpoint(write_variant("missing.ckpt", epoch=None))
    with pytest.raises(CheckpointError, match="parameter order"):
        load_checkpoint(write_variant("order.ckpt", param_order=list(reversed(PARAM_ORDER))))


def test_checkpoint_value_validation():
    params = HeadParams.zeros(2, 2)
    with pytest.raises(ValueError):
        Checkpoint(params=params, epoch=1, validation_pk=1.5, config_hash="a")
    with pytest.raises(ValueError):
        Checkpoint(params=params, epoch=0, validation_pk=0.5, config_hash="a")
