"""Command-line pipeline: convert -> embed -> train -> segment -> eval.

Every command is deterministic given its flags and seeds.  Exit codes:
0 success, 1 runtime failure (bad data, diverged training, metric errors),
2 usage or configuration error (bad flags, missing files, invalid config).

``SEGLINE_THREADS`` caps internal parallelism (0 or unset = one worker per
CPU); only per-document segmentation is parallelized, and results do not
depend on the thread count.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from .corpus import (
    Document,
    TopicVocab,
    convert_wikisection_file,
    derive_gold,
    load_corpus_jsonl,
    split_corpus,
    write_corpus_jsonl,
)
from .embedder import (
    EmbedderConfig,
    EmbeddingMatrix,
    build_manifest,
    embed_corpus,
    load_embeddings,
    write_embeddings,
)
from .errors import ConfigError, SeglineError
from .metrics import evaluate_segmentations, window_size
from .model import LossWeights
from .sampler import build_training_set
from .segmenter import read_segments, segment_stp, segment_tc_only, write_segments
from .trainer import TrainConfig, load_checkpoint, save_checkpoint, train

logger = logging.getLogger(__name__)

__all__ = ["main", "build_parser", "thread_count"]


def thread_count() -> int:
    """Worker cap from SEGLINE_THREADS (0 or unset = one per CPU)."""
    raw = os.environ.get("SEGLINE_THREADS", "").strip()
    if raw in ("", "0"):
        return os.cpu_count() or 1
    try:
        value = int(raw)
    except ValueError:
        raise ConfigError(f"SEGLINE_THREADS must be an integer >= 0, got {raw!r}") from None
    if value < 0:
        raise ConfigError(f"SEGLINE_THREADS must be an integer >= 0, got {raw!r}")
    return value


def _parse_triple(text: str, what: str) -> tuple[float, float, float]:
    parts = text.split(",")
    if len(parts) != 3:
        raise ConfigError(f"{what} needs three comma-separated numbers, got {text!r}")
    try:
        a, b, c = (float(p) for p in parts)
    except ValueError:
        raise ConfigError(f"{what} needs three comma-separated numbers, got {text!r}") from None
    return a, b, c


def _load_train_config(args: argparse.Namespace) -> TrainConfig:
    payload: dict = {}
    if args.config is not None:
        try:
            payload = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except json.JSONDecodeError as err:
            raise ConfigError(f"{args.config}: invalid JSON: {err}") from err
        if not isinstance(payload, dict):
            raise ConfigError(f"{args.config}: expected a JSON object")
    if args.weights is not None:
        stp, tc, nsp = _parse_triple(args.weights, "--weights")
        payload["weights"] = {"stp": stp, "tc": tc, "nsp": nsp}
    if args.seed is not None:
        payload["seed"] = args.seed
    return TrainConfig.from_dict(payload)


def _sidecar_path(emb_path: str | Path) -> Path:
    return Path(str(emb_path) + ".config.json")


def _check_matrix_covers(matrix: EmbeddingMatrix, docs: list[Document]) -> None:
    total = sum(len(doc.sentences) for doc in docs)
    if matrix.n != total:
        raise ConfigError(
            f"embedding file has {matrix.n} rows but the corpus has {total} sentences"
        )


# Commands --------------------------------------------------------------------


def cmd_convert(args: argparse.Namespace) -> int:
    vocab = TopicVocab()
    docs, stats = convert_wikisection_file(args.input, vocab)
    logger.info(
        "converted %d/%d documents (%d sentences, %d dropped)",
        stats.converted,
        stats.total,
        stats.sentences,
        stats.dropped_sentences,
    )
    if stats.converted == 0:
        print(f"error: no documents converted from {args.input}", file=sys.stderr)
        return 1
    if stats.rejected / stats.total > 0.5:
        print(
            f"error: {stats.rejected}/{stats.total} documents rejected "
            "(more than half); refusing to write outputs",
            file=sys.stderr,
        )
        return 1
    write_corpus_jsonl(docs, vocab, args.out)
    vocab.save(args.vocab)
    print(
        f"wrote {stats.converted} documents ({stats.sentences} sentences, "
        f"{len(vocab)} topics) to {args.out}"
    )
    return 0


def cmd_embed(args: argparse.Namespace) -> int:
    docs, _ = load_corpus_jsonl(args.corpus)
    if args.mode == "file":
        if args.file is None:
            raise ConfigError("--mode file requires --file")
        d = args.d if args.d is not None else load_embeddings(args.file).d
    else:
        d = args.d if args.d is not None else 64
    config = EmbedderConfig(
        kind=args.mode,
        d=d,
        seed=args.seed,
        normalize=not args.no_normalize,
        path=args.file,
    )
    matrix = embed_corpus(docs, config)
    write_embeddings(
        matrix, args.out, manifest_records=build_manifest(docs), manifest_path=args.manifest
    )
    _sidecar_path(args.out).write_text(
        json.dumps(config.to_dict(), indent=2) + "\n", encoding="utf-8"
    )
    print(f"wrote {matrix.n}x{matrix.d} embeddings to {args.out}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    config = _load_train_config(args)
    vocab = TopicVocab.load(args.vocab) if args.vocab else None
    docs, vocab = load_corpus_jsonl(args.corpus, vocab)
    matrix = load_embeddings(args.emb)
    _check_matrix_covers(matrix, docs)
    ratios = _parse_triple(args.split, "--split")
    split = split_corpus(docs, ratios=ratios, seed=config.seed)
    pairs = build_training_set(split.train, seed=config.seed)

    embedder_config = None
    sidecar = _sidecar_path(args.emb)
    if sidecar.exists():
        embedder_config = json.loads(sidecar.read_text(encoding="utf-8"))

    checkpoint = train(
        config,
        pairs,
        split.train,
        split.valid,
        matrix,
        k_topics=len(vocab),
        log_path=args.log,
    )
    save_checkpoint(checkpoint, config, args.out, embedder_config=embedder_config)
    print(
        f"checkpoint from epoch {checkpoint.epoch} "
        f"(val_pk={checkpoint.validation_pk:.4f}) -> {args.out}"
    )
    return 0


def cmd_segment(args: argparse.Namespace) -> int:
    checkpoint, header = load_checkpoint(args.ckpt)
    docs, _ = load_corpus_jsonl(args.corpus)
    if args.emb is not None:
        matrix = load_embeddings(args.emb)
    else:
        embedder = header.get("embedder")
        if not isinstance(embedder, dict) or embedder.get("kind") != "hash":
            raise ConfigError(
                "no --emb given and the checkpoint does not record a hash embedder"
            )
        matrix = embed_corpus(docs, EmbedderConfig.from_dict(embedder))
    _check_matrix_covers(matrix, docs)
    if matrix.d != checkpoint.params.d:
        raise ConfigError(
            f"embedding dimension {matrix.d} does not match checkpoint d={checkpoint.params.d}"
        )

    segment_fn = segment_stp if args.mode == "stp" else segment_tc_only
    workers = min(thread_count(), len(docs)) or 1
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            segs = list(pool.map(lambda doc: segment_fn(checkpoint.params, doc, matrix), docs))
    else:
        segs = [segment_fn(checkpoint.params, doc, matrix) for doc in docs]
    write_segments(zip((doc.doc_id for doc in docs), segs), args.out)
    boundaries = sum(len(seg.boundaries) for seg in segs)
    print(f"segmented {len(docs)} documents ({boundaries} boundaries) -> {args.out}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    gold_docs, _ = load_corpus_jsonl(args.gold)
    predictions = read_segments(args.pred)
    gold_ids = [doc.doc_id for doc in gold_docs]
    missing = [doc_id for doc_id in gold_ids if doc_id not in predictions]
    if missing:
        raise SeglineError(f"predictions missing for documents: {missing[:5]}")
    extra = sorted(set(predictions) - set(gold_ids))
    if extra:
        raise SeglineError(f"predictions for unknown documents: {extra[:5]}")

    golds = [derive_gold(doc) for doc in gold_docs]
    hyps = [predictions[doc_id] for doc_id in gold_ids]
    report = evaluate_segmentations(golds, hyps, k=args.k)
    payload = {
        "pk": report.pk,
        "windowdiff": report.windowdiff,
        "k_used": report.k_used,
        "windows": report.windows_counted,
        "docs": len(golds),
        "per_head_f1": {"stp": report.f1_stp},
    }
    text = json.dumps(payload, indent=2)
    if args.out is not None:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
        print(
            f"pk={report.pk:.4f} windowdiff={report.windowdiff:.4f} "
            f"(k={report.k_used}, {len(golds)} docs) -> {args.out}"
        )
    else:
        print(text)
    return 0


# Parser ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="segline",
        description="Topic segmentation pipeline: convert, embed, train, segment, eval.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("convert", help="convert a raw sectioned-article file to corpus JSONL")
    p.add_argument("--input", required=True, help="raw JSON/JSONL articles")
    p.add_argument("--out", required=True, help="corpus JSONL to write")
    p.add_argument("--vocab", required=True, help="topic vocabulary JSON to write")
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("embed", help="embed corpus sentences into a SEGEMB1 file")
    p.add_argument("--corpus", required=True, help="corpus JSONL")
    p.add_argument("--mode", choices=("hash", "file"), default="hash", help="embedding source")
    p.add_argument("--d", type=int, default=None, help="dimension (hash default 64)")
    p.add_argument("--seed", type=int, default=0, help="hash seed")
    p.add_argument("--no-normalize", action="store_true", help="skip L2 normalization")
    p.add_argument("--file", default=None, help="existing SEGEMB1 file (mode=file)")
    p.add_argument("--out", required=True, help="SEGEMB1 file to write")
    p.add_argument("--manifest", default=None, help="manifest path (default <out>.manifest.jsonl)")
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("train", help="train pair heads and write the best checkpoint")
    p.add_argument("--corpus", required=True, help="corpus JSONL")
    p.add_argument("--emb", required=True, help="SEGEMB1 embeddings for the corpus")
    p.add_argument("--out", required=True, help="checkpoint file to write")
    p.add_argument("--config", default=None, help="training config JSON")
    p.add_argument("--vocab", default=None, help="topic vocabulary JSON (from convert)")
    p.add_argument("--weights", default=None, help="loss weights stp,tc,nsp (e.g. 4,1,4)")
    p.add_argument("--seed", type=int, default=None, help="override config seed")
    p.add_argument("--split", default="0.7,0.1,0.2", help="train,valid,test ratios")
    p.add_argument("--log", default=None, help="training log JSONL to write")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("segment", help="segment a corpus with a trained checkpoint")
    p.add_argument("--ckpt", required=True, help="checkpoint file")
    p.add_argument("--corpus", required=True, help="corpus JSONL")
    p.add_argument("--emb", default=None, help="SEGEMB1 embeddings (else recomputed from checkpoint's hash config)")
    p.add_argument("--mode", choices=("stp", "tc_only"), default="stp", help="boundary head")
    p.add_argument("--out", required=True, help="segmentation JSONL to write")
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("eval", help="score predicted segmentations against gold topics")
    p.add_argument("--gold", required=True, help="gold corpus JSONL")
    p.add_argument("--pred", required=True, help="predicted segmentation JSONL")
    p.add_argument("--k", type=int, default=None, help="window size (default from gold)")
    p.add_argument("--out", default=None, help="report JSON (default: print)")
    p.set_defaults(func=cmd_eval)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr
    )
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except (SeglineError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
