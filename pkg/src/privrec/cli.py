"""Command line entry points.

One subcommand per pipeline stage; data flows between stages through
files only, so any stage can be rerun in isolation.  Exit codes:
0 success, 1 generic failure, 2 usage error, 3 unreadable or invalid
configuration, 4 backend unreachable.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .catalog import (
    archive_hash,
    build_histories,
    ingest_metadata,
    load_archive,
    load_interactions,
    save_archive,
)
from .errors import BackendError, ConfigError, IngestError, PrivRecError, RunFailure
from .evaluation import write_report
from .oracles import selfcheck_run
from .pipeline import Experiment, ExperimentConfig, load_run, write_run_archive
from .retrieval import HashEmbeddingProvider, RemoteEmbeddingProvider, build_index, load_index, save_index
from .sensitivity import (
    DEFAULT_THRESHOLD,
    FocalLossParams,
    TrainHyper,
    TrainedScorer,
    labeled_corpus,
    load_labels,
    load_model,
    load_scores,
    save_model,
    train_classifier,
)

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_UNREACHABLE = 4


def _read_json(path) -> dict:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc


def _apply_annotations(catalog, labels=None, scores=None):
    """Overlay ground-truth labels and scores onto catalog products."""
    products = dict(catalog.products)
    for pid, flag in (labels or {}).items():
        if pid not in products:
            raise IngestError(f"label refers to unknown product {pid!r}")
        products[pid] = replace(products[pid], ground_truth_sensitive=flag)
    for pid, value in (scores or {}).items():
        if pid not in products:
            raise IngestError(f"score refers to unknown product {pid!r}")
        products[pid] = replace(products[pid], sensitivity_score=value)
    return replace(catalog, products=products)


def _cmd_ingest(args) -> int:
    catalog = ingest_metadata(args.metadata, limit=args.limit)
    labels = load_labels(args.labels) if args.labels else None
    scores = load_scores(args.scores) if args.scores else None
    if labels or scores:
        catalog = _apply_annotations(catalog, labels, scores)
    interactions = load_interactions(args.interactions)
    histories = build_histories(
        interactions, catalog, min_items=args.min_items, window=args.window
    )
    save_archive(args.out, catalog, histories)
    print(
        f"ingested {len(catalog.products)} products "
        f"({catalog.skipped_count} skipped, {catalog.duplicate_count} duplicates), "
        f"{len(histories)} eligible users -> {args.out}"
    )
    return EXIT_OK


def _cmd_train_classifier(args) -> int:
    catalog, _ = load_archive(args.catalog)
    labels = load_labels(args.labels)
    corpus = labeled_corpus(catalog, labels)
    classifier = train_classifier(
        corpus,
        params=FocalLossParams(gamma=args.gamma),
        hyper=TrainHyper(
            learning_rate=args.learning_rate,
            weight_decay=args.weight_decay,
            batch_size=args.batch_size,
            epochs=args.epochs,
        ),
        threshold=args.threshold,
        seed=args.seed,
    )
    save_model(args.out, classifier)
    meta = classifier.training_metadata
    test_part = (
        f", test F1 {meta['test_f1']:.4f}" if "test_f1" in meta else ""
    )
    print(
        f"trained on {meta['split_sizes'][0]} examples, "
        f"val F1 {meta['best_val_f1']:.4f} (epoch {meta['best_epoch']})"
        f"{test_part} -> {args.out}"
    )
    return EXIT_OK


def _cmd_classify(args) -> int:
    classifier = load_model(args.model)
    catalog, _ = load_archive(args.catalog)
    scorer = TrainedScorer(classifier, threshold=args.threshold)
    products = [catalog.products[pid] for pid in sorted(catalog.products)]
    verdicts = scorer.score_batch(products)
    lines = [
        json.dumps(
            {
                "product_id": v.product_id,
                "probability": v.probability,
                "is_sensitive": v.is_sensitive,
            },
            sort_keys=True,
        )
        for v in verdicts
    ]
    if args.out:
        Path(args.out).write_text("\n".join(lines) + "\n", encoding="utf-8")
    else:
        for line in lines:
            print(line)
    flagged = sum(1 for v in verdicts if v.is_sensitive)
    print(
        f"classified {len(verdicts)} products at threshold {scorer.threshold}: "
        f"{flagged} sensitive",
        file=sys.stderr,
    )
    return EXIT_OK


def _cmd_build_index(args) -> int:
    catalog, _ = load_archive(args.catalog)
    if args.embedding == "hash":
        provider = HashEmbeddingProvider(dimension=args.dimension)
    else:
        if not args.endpoint:
            raise ConfigError("--embedding remote requires --endpoint")
        provider = RemoteEmbeddingProvider(args.endpoint, dimension=args.dimension)
    index = build_index(catalog, provider)
    save_index(args.out, index)
    print(f"indexed {len(index)} products at dimension {index.dimension} -> {args.out}")
    return EXIT_OK


def _cmd_run(args) -> int:
    config_path = args.config or args.global_config
    if not config_path:
        raise ConfigError("run requires --config")
    data = _read_json(config_path)
    if args.parallelism is not None:
        data["parallelism"] = args.parallelism
    seed = args.seed if args.seed is not None else args.global_seed
    if seed is not None:
        data["seed"] = seed
    config = ExperimentConfig.from_dict(data)

    catalog, histories = load_archive(args.catalog)
    if not histories:
        raise ConfigError(f"archive {args.catalog} holds no purchase histories")
    index = load_index(args.index)
    experiment = Experiment(config, catalog, index)
    try:
        result = experiment.run(
            histories,
            catalog_hash=archive_hash(args.catalog),
            index_hash=archive_hash(args.index),
        )
    except RunFailure as exc:
        if exc.result is not None:
            out = write_run_archive(args.out, exc.result)
            print(f"partial archive -> {out}", file=sys.stderr)
        raise
    out = write_run_archive(args.out, result)
    summary = result.summary
    print(
        f"run {result.manifest['run_id']}: {summary['n_ok']} ok, "
        f"{summary['n_failed']} failed -> {out}"
    )
    return EXIT_OK


def _resolve_run_dirs(paths) -> list[Path]:
    dirs: list[Path] = []
    for raw in paths:
        path = Path(raw)
        if (path / "manifest.json").is_file():
            dirs.append(path)
            continue
        children = sorted(
            child for child in path.iterdir()
            if (child / "manifest.json").is_file()
        ) if path.is_dir() else []
        if not children:
            raise ConfigError(f"{raw} is not a run directory and contains none")
        dirs.extend(children)
    return dirs


def _cmd_report(args) -> int:
    runs = [load_run(path) for path in _resolve_run_dirs(args.runs)]
    sensitive = None
    if args.sensitive_categories:
        sensitive = [c.strip() for c in args.sensitive_categories.split(",") if c.strip()]
    json_path, text_path = write_report(
        runs, args.baseline, args.out, sensitive_categories=sensitive
    )
    print(f"report over {len(runs)} runs -> {json_path} and {text_path}")
    return EXIT_OK


def _cmd_selfcheck(args) -> int:
    seed = args.seed if args.seed is not None else (args.global_seed or 0)
    failures = 0
    for name, ok, detail in selfcheck_run(seed=seed):
        suffix = f"  [{detail}]" if detail else ""
        if ok:
            print(f"ok    {name}{suffix}")
        else:
            failures += 1
            print(f"FAIL  {name}{suffix}")
    if failures:
        print(f"selfcheck failed: {failures} check(s) disagree")
        return EXIT_FAILURE
    print("selfcheck passed")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="privrec",
        description="Privacy-preserving recommendation pipeline",
    )
    parser.add_argument("--config", dest="global_config", metavar="FILE", default=None,
                        help="default run config, used when a subcommand takes one")
    parser.add_argument("--seed", dest="global_seed", type=int, default=None,
                        help="default seed for subcommands that accept one")
    parser.add_argument("--log-level", default="warning",
                        choices=("debug", "info", "warning", "error"))
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    p = sub.add_parser("ingest", help="build a catalog archive from raw metadata")
    p.add_argument("--metadata", required=True, help="product metadata JSONL")
    p.add_argument("--interactions", required=True, help="user interaction JSONL")
    p.add_argument("--out", required=True, help="archive path (.json or .json.gz)")
    p.add_argument("--min-items", type=int, default=30)
    p.add_argument("--window", type=int, default=20)
    p.add_argument("--limit", type=int, default=None, help="cap on parsed products")
    p.add_argument("--labels", default=None, help="ground-truth sensitivity labels JSONL")
    p.add_argument("--scores", default=None, help="sensitivity scores JSONL")
    p.set_defaults(func=_cmd_ingest)

    p = sub.add_parser("train-classifier", help="fit the local sensitivity classifier")
    p.add_argument("--labels", required=True)
    p.add_argument("--catalog", required=True)
    p.add_argument("--out", required=True, help="model file path")
    p.add_argument("--gamma", type=float, default=2.0)
    p.add_argument("--threshold", type=float, default=DEFAULT_THRESHOLD)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--learning-rate", type=float, default=TrainHyper.learning_rate)
    p.add_argument("--weight-decay", type=float, default=TrainHyper.weight_decay)
    p.add_argument("--batch-size", type=int, default=TrainHyper.batch_size)
    p.add_argument("--epochs", type=int, default=TrainHyper.epochs)
    p.set_defaults(func=_cmd_train_classifier)

    p = sub.add_parser("classify", help="score every catalog product with a trained model")
    p.add_argument("--model", required=True)
    p.add_argument("--catalog", required=True)
    p.add_argument("--threshold", type=float, default=None,
                   help="override the threshold stored in the model")
    p.add_argument("--out", default=None, help="verdict JSONL (default stdout)")
    p.set_defaults(func=_cmd_classify)

    p = sub.add_parser("build-index", help="embed the catalog into a vector index")
    p.add_argument("--catalog", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--dimension", type=int, default=384)
    p.add_argument("--embedding", choices=("hash", "remote"), default="hash")
    p.add_argument("--endpoint", default=None, help="embedding service URL")
    p.set_defaults(func=_cmd_build_index)

    p = sub.add_parser("run", help="run one configured scheme over all users")
    p.add_argument("--config", default=None, help="experiment config JSON")
    p.add_argument("--catalog", required=True)
    p.add_argument("--index", required=True)
    p.add_argument("--out", required=True, help="run archive directory")
    p.add_argument("--parallelism", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("report", help="compare run archives against a baseline")
    p.add_argument("--runs", nargs="+", required=True,
                   help="run directories, or directories of run directories")
    p.add_argument("--baseline", required=True, help="baseline run id or scheme name")
    p.add_argument("--out", required=True)
    p.add_argument("--sensitive-categories", default=None,
                   help="comma-separated category names")
    p.set_defaults(func=_cmd_report)

    p = sub.add_parser("selfcheck", help="compare metrics against brute-force oracles")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=_cmd_selfcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, args.log_level.upper()),
        stream=sys.stderr,
        format="%(levelname)s %(name)s: %(message)s",
    )
    if not getattr(args, "func", None):
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except BackendError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_UNREACHABLE if exc.category == "transport" else EXIT_FAILURE
    except PrivRecError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
