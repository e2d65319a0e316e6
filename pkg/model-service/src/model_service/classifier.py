"""Transformer sensitivity classifier: build, score, checkpoint.

The encoder is a small bidirectional transformer built from a local
config, never fetched from a hub.  Everything runs in float64 so a
text's probability does not depend on which batch it arrived in; the
models are small enough that the extra cost disappears next to the
HTTP hop.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import torch
from transformers import BertConfig, BertForSequenceClassification
from transformers.utils import logging as hf_logging

from .errors import ConfigError
from .tokenizer import MAX_LENGTH, PAD_ID, Vocabulary

hf_logging.set_verbosity_error()
hf_logging.disable_progress_bar()

DEFAULT_THRESHOLD = 0.3

# Sized for corpora of a few thousand labeled items; a larger encoder
# drops in by changing these before finetune, the checkpoint carries
# the config either way.
ENCODER_SHAPE = {
    "hidden_size": 64,
    "num_hidden_layers": 2,
    "num_attention_heads": 4,
    "intermediate_size": 128,
}

_HEAD_FILE = "head.json"
_VOCAB_FILE = "vocab.json"
_SCORE_BATCH = 32


def build_model(vocab_size: int, max_length: int, seed: int) -> BertForSequenceClassification:
    config = BertConfig(
        vocab_size=vocab_size,
        max_position_embeddings=max_length,
        num_labels=2,
        pad_token_id=PAD_ID,
        **ENCODER_SHAPE,
    )
    torch.manual_seed(seed)
    return BertForSequenceClassification(config).double()


def collate(encoded: Sequence[Sequence[int]]) -> tuple[torch.Tensor, torch.Tensor]:
    """Pad a batch of id sequences; mask marks the real positions."""
    width = max(len(ids) for ids in encoded)
    input_ids = torch.full((len(encoded), width), PAD_ID, dtype=torch.long)
    mask = torch.zeros((len(encoded), width), dtype=torch.long)
    for row, ids in enumerate(encoded):
        input_ids[row, : len(ids)] = torch.tensor(ids, dtype=torch.long)
        mask[row, : len(ids)] = 1
    return input_ids, mask


def focal_loss(
    logits: torch.Tensor,
    labels: torch.Tensor,
    class_weights: torch.Tensor,
    gamma: float,
) -> torch.Tensor:
    """Mean of -w_y * (1 - p_y)^gamma * log p_y over the batch.

    gamma 0 reduces to weighted cross-entropy.  log p comes from
    log_softmax so confident wrong answers stay finite.
    """
    log_probs = torch.log_softmax(logits, dim=-1)
    true_log_p = log_probs.gather(1, labels.unsqueeze(1)).squeeze(1)
    true_p = true_log_p.exp()
    weight = class_weights[labels]
    return (-weight * (1.0 - true_p) ** gamma * true_log_p).mean()


@dataclass
class SensitivityModel:
    model: BertForSequenceClassification
    vocabulary: Vocabulary
    threshold: float = DEFAULT_THRESHOLD
    max_length: int = MAX_LENGTH

    def probabilities(self, texts: Sequence[str]) -> list[float]:
        """P(sensitive) per text, in order, batch-composition independent."""
        self.model.eval()
        out: list[float] = []
        with torch.no_grad():
            for start in range(0, len(texts), _SCORE_BATCH):
                chunk = texts[start : start + _SCORE_BATCH]
                encoded = [self.vocabulary.encode(t, self.max_length) for t in chunk]
                input_ids, mask = collate(encoded)
                logits = self.model(input_ids=input_ids, attention_mask=mask).logits
                out.extend(torch.softmax(logits, dim=-1)[:, 1].tolist())
        return out

    def save(self, out_dir: Path) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        self.model.save_pretrained(out_dir)
        self.vocabulary.save(out_dir / _VOCAB_FILE)
        head = {
            "threshold": self.threshold,
            "max_length": self.max_length,
            "positive_label": "sensitive",
        }
        (out_dir / _HEAD_FILE).write_text(
            json.dumps(head, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )

    @classmethod
    def load(cls, checkpoint: Path) -> "SensitivityModel":
        checkpoint = Path(checkpoint)
        head_path = checkpoint / _HEAD_FILE
        if not head_path.is_file():
            raise ConfigError(f"{checkpoint} is not a classifier checkpoint (no {_HEAD_FILE})")
        try:
            head = json.loads(head_path.read_text(encoding="utf-8"))
            threshold = float(head["threshold"])
            max_length = int(head["max_length"])
        except (ValueError, KeyError) as exc:
            raise ConfigError(f"malformed {head_path}: {exc}") from exc
        vocabulary = Vocabulary.load(checkpoint / _VOCAB_FILE)
        try:
            model = BertForSequenceClassification.from_pretrained(checkpoint).double()
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot load model weights from {checkpoint}: {exc}") from exc
        model.eval()
        return cls(model=model, vocabulary=vocabulary, threshold=threshold, max_length=max_length)


def confusion_metrics(
    probs: Sequence[float], labels: Sequence[bool], threshold: float
) -> dict[str, float]:
    """Accuracy/precision/recall/F1 at the threshold, sensitive = positive.

    Degenerate denominators yield 0.0 rather than an error.
    """
    tp = fp = fn = tn = 0
    for p, y in zip(probs, labels):
        predicted = p > threshold
        if predicted and y:
            tp += 1
        elif predicted and not y:
            fp += 1
        elif not predicted and y:
            fn += 1
        else:
            tn += 1
    total = tp + fp + fn + tn
    accuracy = (tp + tn) / total if total else 0.0
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return {"accuracy": accuracy, "precision": precision, "recall": recall, "f1": f1}
