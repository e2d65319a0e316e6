"""Command line entry points.

Two subcommands: finetune turns a labeled corpus into a checkpoint
directory, serve exposes a checkpoint over HTTP.  Exit codes: 0 success,
2 usage error, 3 unreadable or invalid configuration or corpus.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

import uvicorn

from .classifier import DEFAULT_THRESHOLD
from .embedding import DEFAULT_MODEL_ID
from .errors import ConfigError, DegenerateClassError
from .service import DEFAULT_BIND, DEFAULT_MAX_BATCH, ServiceConfig, create_app
from .tokenizer import MAX_LENGTH
from .training import DEFAULT_GAMMA, TrainSettings, finetune, load_corpus

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CONFIG = 3


def _cmd_finetune(args) -> int:
    labeled = load_corpus(Path(args.corpus))
    metrics = finetune(
        labeled,
        out_dir=Path(args.out),
        settings=TrainSettings(
            learning_rate=args.learning_rate,
            weight_decay=args.weight_decay,
            batch_size=args.batch_size,
            epochs=args.epochs,
        ),
        gamma=args.gamma,
        threshold=args.threshold,
        max_length=args.max_length,
        seed=args.seed,
    )
    test_part = f", test F1 {metrics['test_f1']:.4f}" if "test_f1" in metrics else ""
    print(
        f"trained on {metrics['split_sizes'][0]} examples, "
        f"val F1 {metrics['best_val_f1']:.4f} (epoch {metrics['best_epoch']})"
        f"{test_part} -> {args.out}"
    )
    return EXIT_OK


def _cmd_serve(args) -> int:
    config = ServiceConfig(
        classifier_checkpoint=Path(args.checkpoint),
        embedding_model_id=args.embedding,
        bind_address=args.bind,
        max_batch=args.max_batch,
    )
    app = create_app(config)
    host, port = config.host_port()
    print(f"serving {args.checkpoint} on http://{host}:{port}", file=sys.stderr)
    uvicorn.run(app, host=host, port=port, log_level="warning")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="model-service",
        description="fine-tune and serve the sensitivity classifier and sentence encoder",
    )
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("finetune", help="train a classifier checkpoint from a labeled corpus")
    p.add_argument("--corpus", required=True, help="JSONL with text and label per line")
    p.add_argument("--out", required=True, help="checkpoint directory to create")
    p.add_argument("--learning-rate", type=float, default=TrainSettings.learning_rate)
    p.add_argument("--weight-decay", type=float, default=TrainSettings.weight_decay)
    p.add_argument("--batch-size", type=int, default=TrainSettings.batch_size)
    p.add_argument("--epochs", type=int, default=TrainSettings.epochs)
    p.add_argument("--gamma", type=float, default=DEFAULT_GAMMA)
    p.add_argument("--threshold", type=float, default=DEFAULT_THRESHOLD)
    p.add_argument("--max-length", type=int, default=MAX_LENGTH)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_finetune)

    p = sub.add_parser("serve", help="serve a checkpoint over HTTP")
    p.add_argument("--checkpoint", required=True, help="checkpoint directory")
    p.add_argument("--embedding", default=DEFAULT_MODEL_ID,
                   help="hash-<dimension> or a sentence-transformers model directory")
    p.add_argument("--bind", default=DEFAULT_BIND, help="host:port to listen on")
    p.add_argument("--max-batch", type=int, default=DEFAULT_MAX_BATCH,
                   help="largest accepted texts batch")
    p.set_defaults(func=_cmd_serve)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if not getattr(args, "func", None):
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except (ConfigError, DegenerateClassError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
