"""Release acceptance gate.

One test per release criterion; each prints a single PASS/FAIL line with
the measured numbers (visible with ``pytest -s`` and in failure output).
Thresholds were calibrated against the synthetic-corpus construction in
``synth_data`` before being frozen here.
"""

import json
import random
import statistics
import time

import numpy as np

from segline.cli import main as cli_main
from segline.corpus import Segmentation, derive_gold, split_corpus, write_corpus_jsonl
from segline.embedder import EmbedderConfig, embed_corpus
from segline.metrics import evaluate_segmentations, pk, windowdiff
from segline.model import HeadParams, LossWeights, PairBatch, multitask_loss
from segline.sampler import build_training_set
from segline.segmenter import segment_stp, segment_tc_only
from segline.trainer import TrainConfig, train
from synth_data import make_synthetic_corpus, random_topic_sequence_docs, topic_vocabularies


def verdict(number: int, name: str, ok: bool, detail: str) -> None:
    line = f"ACCEPTANCE #{number} {name}: {'PASS' if ok else 'FAIL'} ({detail})"
    print(line)
    assert ok, line


# Brute-force metric oracles ---------------------------------------------------


def oracle_pk(ref: Segmentation, hyp: Segmentation, k: int) -> tuple[int, int]:
    if ref.n <= 1:
        return 0, 0
    kp = min(k, ref.n - 1)

    def same_segment(seg, a, b):
        return not any(a <= t < b for t in seg.boundaries)

    mismatches = windows = 0
    for i in range(ref.n - kp):
        windows += 1
        if same_segment(ref, i, i + kp) != same_segment(hyp, i, i + kp):
            mismatches += 1
    return mismatches, windows


def oracle_windowdiff(ref: Segmentation, hyp: Segmentation, k: int) -> tuple[int, int]:
    if ref.n <= 1:
        return 0, 0
    kp = min(k, ref.n - 1)

    def count(seg, a, b):
        return sum(1 for t in seg.boundaries if a <= t < b)

    mismatches = windows = 0
    for i in range(ref.n - kp):
        windows += 1
        if count(ref, i, i + kp) != count(hyp, i, i + kp):
            mismatches += 1
    return mismatches, windows


def test_criterion_1_metric_oracle_equivalence():
    rng = random.Random(20260816)
    started = time.monotonic()
    mismatches = 0
    for _ in range(1000):
        n = rng.randint(1, 30)
        ref = Segmentation(n, frozenset(p for p in range(n - 1) if rng.random() < 0.3))
        hyp = Segmentation(n, frozenset(p for p in range(n - 1) if rng.random() < 0.3))
        k = rng.randint(1, n)
        if pk(ref, hyp, k) != oracle_pk(ref, hyp, k):
            mismatches += 1
        if windowdiff(ref, hyp, k) != oracle_windowdiff(ref, hyp, k):
            mismatches += 1
    elapsed = time.monotonic() - started
    verdict(
        1,
        "metric-oracle-equivalence",
        mismatches == 0 and elapsed < 10.0,
        f"1000 instances, {mismatches} mismatches, {elapsed:.1f}s",
    )


# Gradient correctness ----------------------------------------------------------


def fd_gradients(params, batch, weights, h=1e-4):
    numeric = {}
    for name, tensor in params.tensors():
        grad = np.zeros_like(tensor)
        flat, gflat = tensor.ravel(), grad.ravel()
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + h
            hi, _ = multitask_loss(params, batch, weights)
            flat[idx] = orig - h
            lo, _ = multitask_loss(params, batch, weights)
            flat[idx] = orig
            gflat[idx] = (hi - lo) / (2 * h)
        numeric[name] = grad
    return numeric


def test_criterion_2_gradient_correctness():
    settings = [
        LossWeights(stp=4, tc=1, nsp=0),
        LossWeights(stp=1, tc=0, nsp=1),
        LossWeights(stp=4, tc=1, nsp=4),
    ]
    rng = np.random.default_rng(1834)
    started = time.monotonic()
    worst = 0.0
    for weights in settings:
        for _ in range(50):
            d = int(rng.integers(2, 9))
            k_topics = int(rng.integers(2, 6))
            b = int(rng.integers(1, 9))
            params = HeadParams(
                w_tc=0.5 * rng.standard_normal((k_topics, d)),
                b_tc=0.5 * rng.standard_normal(k_topics),
                w_nsp=0.5 * rng.standard_normal((2, 3 * d)),
                b_nsp=0.5 * rng.standard_normal(2),
                w_stp=0.5 * rng.standard_normal((2, 3 * d)),
                b_stp=0.5 * rng.standard_normal(2),
            )
            batch = PairBatch(
                u=rng.standard_normal((b, d)),
                v=rng.standard_normal((b, d)),
                stp=rng.integers(0, 2, b),
                nsp=rng.integers(0, 2, b),
                tc_u=rng.integers(0, k_topics, b),
                tc_v=rng.integers(0, k_topics, b),
            )
            _, analytic = multitask_loss(params, batch, weights)
            numeric = fd_gradients(params, batch, weights)
            for name, num in numeric.items():
                ana = getattr(analytic, name)
                denom = np.maximum(np.abs(ana) + np.abs(num), 1e-4)
                worst = max(worst, float(np.max(np.abs(ana - num) / denom)))
    elapsed = time.monotonic() - started
    verdict(
        2,
        "gradient-correctness",
        worst < 1e-4 and elapsed < 30.0,
        f"150 instances over 3 weight settings, max rel error {worst:.2e}, {elapsed:.1f}s",
    )


# Synthetic end-to-end ----------------------------------------------------------


def train_and_score(docs, matrix, weights, seed, tc_only=False):
    split = split_corpus(docs, (0.7, 0.1, 0.2), seed=seed)
    pairs = build_training_set(split.train, seed=seed)
    config = TrainConfig(batch_size=48, max_epochs=14, lr0=0.3, seed=seed, weights=weights)
    checkpoint = train(config, pairs, split.train, split.valid, matrix, k_topics=6)
    segment_fn = segment_tc_only if tc_only else segment_stp
    golds = [derive_gold(doc) for doc in split.test]
    hyps = [segment_fn(checkpoint.params, doc, matrix) for doc in split.test]
    return evaluate_segmentations(golds, hyps)


def test_criterion_3_synthetic_end_to_end():
    started = time.monotonic()
    docs, _ = make_synthetic_corpus(200, shared_fraction=0.0, seed=20)
    assert len(docs) == 200
    assert all(8 <= len(doc.sentences) <= 20 for doc in docs)
    assert all(2 <= len(derive_gold(doc).boundaries) + 1 <= 4 for doc in docs)
    vocabularies = [set(v) for v in topic_vocabularies(6, 30, 0.0)]
    assert all(len(v) == 30 for v in vocabularies)
    assert all(
        not (a & b) for i, a in enumerate(vocabularies) for b in vocabularies[i + 1 :]
    )

    matrix = embed_corpus(docs, EmbedderConfig(kind="hash", d=64, seed=9))
    report = train_and_score(docs, matrix, LossWeights(stp=4, tc=1, nsp=4), seed=0)
    elapsed = time.monotonic() - started
    verdict(
        3,
        "synthetic-end-to-end",
        report.pk <= 0.10 and report.windowdiff <= 0.12 and elapsed < 120.0,
        f"test-split pk={report.pk:.4f} (<=0.10), wd={report.windowdiff:.4f} (<=0.12), "
        f"{elapsed:.1f}s (<120s)",
    )


# Sampler soundness --------------------------------------------------------------


def test_criterion_4_sampler_soundness():
    rng = random.Random(4242)
    total = violations = 0
    category_counts = {"positive": 0, "same_nonconsec": 0, "boundary": 0, "diff_nonconsec": 0}
    while total < 10_000:
        docs = random_topic_sequence_docs(40, rng)
        by_id = {doc.doc_id: doc for doc in docs}
        pairs = build_training_set(docs, seed=rng.randrange(2**32))
        seen_keys = set()
        for pair in pairs:
            total += 1
            doc = by_id[pair.doc_id]
            topics = doc.topic_ids
            ok = (
                0 <= pair.i < len(topics)
                and 0 <= pair.j < len(topics)
                and pair.i != pair.j
                and pair.topic_i == topics[pair.i]
                and pair.topic_j == topics[pair.j]
                and pair.stp == int(topics[pair.i] == topics[pair.j])
                and pair.nsp == int(pair.j == pair.i + 1)
                # same-topic negatives must not be adjacent on either side
                and not (pair.stp == 1 and pair.j == pair.i - 1)
                and (pair.doc_id, pair.i, pair.j) not in seen_keys
            )
            seen_keys.add((pair.doc_id, pair.i, pair.j))
            if not ok:
                violations += 1
            if pair.stp == 1 and pair.nsp == 1:
                category_counts["positive"] += 1
            elif pair.stp == 1:
                category_counts["same_nonconsec"] += 1
            elif pair.nsp == 1:
                category_counts["boundary"] += 1
            else:
                category_counts["diff_nonconsec"] += 1
    verdict(
        4,
        "sampler-soundness",
        violations == 0 and total >= 10_000,
        f"{total} pairs, {violations} violations, categories={category_counts}",
    )


# Ablation direction -------------------------------------------------------------


def test_criterion_5_ablation_direction():
    docs, _ = make_synthetic_corpus(200, shared_fraction=0.2, seed=21)
    matrix = embed_corpus(docs, EmbedderConfig(kind="hash", d=64, seed=9))
    configurations = {
        "tc_only": (LossWeights(stp=0, tc=1, nsp=0), True),
        "stp_only": (LossWeights(stp=1, tc=0, nsp=0), False),
        "stp_tc": (LossWeights(stp=4, tc=1, nsp=0), False),
        "stp_nsp": (LossWeights(stp=1, tc=0, nsp=1), False),
        "stp_tc_nsp": (LossWeights(stp=4, tc=1, nsp=4), False),
    }
    medians = {}
    for name, (weights, tc_only) in configurations.items():
        scores = [
            train_and_score(docs, matrix, weights, seed, tc_only=tc_only).pk
            for seed in range(5)
        ]
        medians[name] = statistics.median(scores)
    scoreboard = " ".join(f"{name}={value:.4f}" for name, value in medians.items())
    print(f"ablation median pk over 5 seeds: {scoreboard}")
    ordering_full = medians["stp_tc_nsp"] <= medians["stp_only"] + 0.02
    ordering_tc = medians["stp_only"] < medians["tc_only"]
    verdict(
        5,
        "ablation-direction",
        ordering_full and ordering_tc,
        f"{scoreboard}; full<=stp_only+0.02 {ordering_full}, stp_only<tc_only {ordering_tc}",
    )


# Determinism ---------------------------------------------------------------------


def test_criterion_6_cli_determinism(tmp_path):
    docs, vocab = make_synthetic_corpus(30, seed=33, doc_prefix="det")
    corpus = tmp_path / "corpus.jsonl"
    write_corpus_jsonl(docs, vocab, corpus)
    emb = tmp_path / "emb.bin"
    assert cli_main(["embed", "--corpus", str(corpus), "--d", "32", "--seed", "4", "--out", str(emb)]) == 0

    artifacts = {}
    for run in ("one", "two"):
        ckpt = tmp_path / f"ckpt_{run}.json"
        seg = tmp_path / f"seg_{run}.jsonl"
        report = tmp_path / f"report_{run}.json"
        rc = cli_main(
            [
                "train",
                "--corpus", str(corpus),
                "--emb", str(emb),
                "--weights", "4,1,4",
                "--seed", "11",
                "--out", str(ckpt),
            ]
        )
        assert rc == 0
        rc = cli_main(
            [
                "segment",
                "--ckpt", str(ckpt),
                "--corpus", str(corpus),
                "--emb", str(emb),
                "--out", str(seg),
            ]
        )
        assert rc == 0
        rc = cli_main(
            ["eval", "--gold", str(corpus), "--pred", str(seg), "--out", str(report)]
        )
        assert rc == 0
        artifacts[run] = (ckpt.read_bytes(), seg.read_bytes(), report.read_bytes())

    same_ckpt = artifacts["one"][0] == artifacts["two"][0]
    same_seg = artifacts["one"][1] == artifacts["two"][1]
    same_report = artifacts["one"][2] == artifacts["two"][2]
    report_payload = json.loads(artifacts["one"][2])
    verdict(
        6,
        "determinism",
        same_ckpt and same_seg and same_report,
        f"checkpoint identical {same_ckpt}, segmentation identical {same_seg}, "
        f"report identical {same_report} (pk={report_payload['pk']:.4f})",
    )
