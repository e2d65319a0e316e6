"""Fine-tuning: stratified split, focal loss with class weights, F1 checkpointing.

The protocol mirrors the pipeline's desk-scale trainer so checkpoints
are comparable: 70/20/10 stratified split, inverse-frequency class
weights computed on the training split only, checkpoint selection by
best validation F1 at the serving threshold.
"""
from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .classifier import (
    DEFAULT_THRESHOLD,
    SensitivityModel,
    build_model,
    collate,
    confusion_metrics,
    focal_loss,
)
from .errors import ConfigError, DegenerateClassError
from .tokenizer import MAX_LENGTH, Vocabulary

DEFAULT_GAMMA = 2.0

METRICS_FILE = "metrics.json"

_SPLIT_FRACTIONS = (0.7, 0.2, 0.1)


@dataclass(frozen=True)
class TrainSettings:
    learning_rate: float = 2e-5
    weight_decay: float = 0.01
    batch_size: int = 16
    epochs: int = 5

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size < 1 or self.epochs < 1:
            raise ConfigError(f"invalid training settings: {self}")


def stratified_split(
    labeled: Sequence[tuple[str, bool]], seed: int = 0
) -> tuple[list[tuple[str, bool]], list[tuple[str, bool]], list[tuple[str, bool]]]:
    """Shuffle and cut 70/20/10 per class."""
    rng = np.random.default_rng(seed)
    groups = [
        [i for i, (_, y) in enumerate(labeled) if not y],
        [i for i, (_, y) in enumerate(labeled) if y],
    ]
    if any(not g for g in groups):
        raise DegenerateClassError("stratified split needs both classes present")

    parts: tuple[list[int], list[int], list[int]] = ([], [], [])
    train_f, val_f, _ = _SPLIT_FRACTIONS
    for group in groups:
        order = rng.permutation(len(group))
        shuffled = [group[i] for i in order]
        c1 = int(round(train_f * len(group)))
        c2 = int(round((train_f + val_f) * len(group)))
        parts[0].extend(shuffled[:c1])
        parts[1].extend(shuffled[c1:c2])
        parts[2].extend(shuffled[c2:])

    out = []
    for indices in parts:
        order = rng.permutation(len(indices))
        out.append([labeled[indices[i]] for i in order])
    return out[0], out[1], out[2]


def class_weights(n_total: int, class_counts: Sequence[int]) -> tuple[float, ...]:
    """Inverse-frequency weights w_c = n_total / (2 * count_c)."""
    if any(c == 0 for c in class_counts):
        raise DegenerateClassError(f"zero class count in {tuple(class_counts)}")
    return tuple(n_total / (2.0 * c) for c in class_counts)


def load_corpus(path: Path) -> list[tuple[str, bool]]:
    """Labeled corpus: one {text, label} object per line."""
    labeled = []
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read corpus {path}: {exc}") from exc
    for number, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
            text = record["text"]
            label = record["label"]
        except (ValueError, KeyError, TypeError) as exc:
            raise ConfigError(f"{path}:{number}: bad corpus line: {exc}") from exc
        if not isinstance(text, str) or label not in ("sensitive", "nonsensitive"):
            raise ConfigError(f"{path}:{number}: expected text plus sensitive/nonsensitive label")
        labeled.append((text, label == "sensitive"))
    if not labeled:
        raise ConfigError(f"{path} contains no labeled examples")
    return labeled


def finetune(
    labeled: Sequence[tuple[str, bool]],
    out_dir: Path,
    settings: TrainSettings = TrainSettings(),
    gamma: float = DEFAULT_GAMMA,
    threshold: float = DEFAULT_THRESHOLD,
    max_length: int = MAX_LENGTH,
    seed: int = 0,
) -> dict:
    """Train, select by validation F1, write checkpoint + metrics file.

    Returns the metrics dict that was written.  Deterministic for a
    fixed corpus, settings, and seed.
    """
    if not (0.0 < threshold < 1.0):
        raise ConfigError(f"threshold must lie inside (0, 1), got {threshold}")
    if gamma < 0:
        raise ConfigError(f"gamma must be nonnegative, got {gamma}")
    if not labeled:
        raise DegenerateClassError("empty training corpus")

    train_set, val_set, test_set = stratified_split(labeled, seed)
    n_pos = sum(1 for _, y in train_set if y)
    n_neg = len(train_set) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DegenerateClassError(
            f"training split has {n_pos} sensitive / {n_neg} nonsensitive examples"
        )
    w_neg, w_pos = class_weights(len(train_set), (n_neg, n_pos))
    weights_t = torch.tensor([w_neg, w_pos], dtype=torch.float64)

    vocabulary = Vocabulary.from_corpus(text for text, _ in train_set)
    encoded = [vocabulary.encode(text, max_length) for text, _ in train_set]
    labels = torch.tensor([1 if y else 0 for _, y in train_set], dtype=torch.long)

    model = build_model(vocabulary.size, max_length, seed)
    snapshot = SensitivityModel(model, vocabulary, threshold, max_length)
    optimizer = torch.optim.AdamW(
        model.parameters(), lr=settings.learning_rate, weight_decay=settings.weight_decay
    )

    def split_f1(split: Sequence[tuple[str, bool]]) -> float:
        if not split:
            return 0.0
        probs = snapshot.probabilities([text for text, _ in split])
        return confusion_metrics(probs, [y for _, y in split], threshold)["f1"]

    rng = np.random.default_rng(seed)
    best_f1 = split_f1(val_set)
    best_state = (copy.deepcopy(model.state_dict()), 0)
    for epoch in range(1, settings.epochs + 1):
        model.train()
        order = rng.permutation(len(train_set))
        for start in range(0, len(order), settings.batch_size):
            batch = order[start : start + settings.batch_size]
            input_ids, mask = collate([encoded[i] for i in batch])
            logits = model(input_ids=input_ids, attention_mask=mask).logits
            loss = focal_loss(logits, labels[batch], weights_t, gamma)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
        f1 = split_f1(val_set)
        if f1 > best_f1:
            best_f1 = f1
            best_state = (copy.deepcopy(model.state_dict()), epoch)

    state, best_epoch = best_state
    model.load_state_dict(state)
    model.eval()

    metrics = {
        "hyperparameters": {
            "learning_rate": settings.learning_rate,
            "weight_decay": settings.weight_decay,
            "batch_size": settings.batch_size,
            "epochs": settings.epochs,
            "gamma": gamma,
            "threshold": threshold,
            "max_length": max_length,
            "seed": seed,
        },
        "class_weights": [w_neg, w_pos],
        "class_weight_basis": "training_split",
        "split_sizes": [len(train_set), len(val_set), len(test_set)],
        "vocabulary_size": vocabulary.size,
        "best_epoch": best_epoch,
        "best_val_f1": best_f1,
    }
    if test_set:
        probs = snapshot.probabilities([text for text, _ in test_set])
        test = confusion_metrics(probs, [y for _, y in test_set], threshold)
        metrics["test_f1"] = test["f1"]
        metrics["test_accuracy"] = test["accuracy"]

    out_dir = Path(out_dir)
    snapshot.save(out_dir)
    (out_dir / METRICS_FILE).write_text(
        json.dumps(metrics, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    return metrics
