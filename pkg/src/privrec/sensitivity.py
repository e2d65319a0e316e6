"""Sensitivity scoring: focal-loss classifier, categorical and remote scorers.

The trained scorer is a deliberately small model: logistic regression
over bag-of-token counts, optimized with the same focal loss and class
weighting used by the full-scale service.  It exists so the pipeline,
its tests and the privacy gate run anywhere in seconds; the remote
scorer speaks the /score contract when a real model is available.
"""
from __future__ import annotations

import json
import logging
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import requests

from .catalog import Catalog, Product, PurchaseHistory, canonical_text
from .errors import BackendError, ConfigError, DegenerateClassError, MetricError

__all__ = [
    "SensitivityVerdict",
    "FocalLossParams",
    "TrainHyper",
    "SplitFractions",
    "ClassifierMetrics",
    "TrainedClassifier",
    "class_weights",
    "focal_loss",
    "loss_and_gradient",
    "stratified_split",
    "train_classifier",
    "evaluate_classifier",
    "CategoricalScorer",
    "TrainedScorer",
    "RemoteScorer",
    "build_scorer",
    "split_history",
    "save_model",
    "load_model",
    "load_labels",
    "load_scores",
    "labeled_corpus",
]

log = logging.getLogger(__name__)

_TOKEN_RE = re.compile(r"[a-z0-9]+")
MAX_DOC_TOKENS = 256
_PROB_EPS = 1e-12

DEFAULT_THRESHOLD = 0.5
RECALL_PRIORITY_THRESHOLD = 0.3


@dataclass(frozen=True)
class SensitivityVerdict:
    product_id: str
    probability: float
    is_sensitive: bool


@dataclass(frozen=True)
class FocalLossParams:
    gamma: float = 2.0
    # (nonsensitive, sensitive); None derives both from the training split.
    class_weights: tuple[float, float] | None = None

    def __post_init__(self):
        if self.gamma < 0:
            raise ConfigError(f"gamma must be nonnegative, got {self.gamma}")


@dataclass(frozen=True)
class TrainHyper:
    learning_rate: float = 2e-5
    weight_decay: float = 0.01
    batch_size: int = 16
    epochs: int = 5

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size < 1 or self.epochs < 1:
            raise ConfigError(f"invalid training hyperparameters: {self}")


@dataclass(frozen=True)
class SplitFractions:
    train: float = 0.7
    val: float = 0.2
    test: float = 0.1
    stratified: bool = True

    def __post_init__(self):
        if min(self.train, self.val, self.test) < 0 or abs(self.train + self.val + self.test - 1.0) > 1e-9:
            raise ConfigError(f"split fractions must be nonnegative and sum to 1: {self}")
        if self.train <= 0:
            raise ConfigError("training fraction must be positive")


@dataclass(frozen=True)
class ClassifierMetrics:
    accuracy: float
    precision: float
    recall: float
    f1: float
    loss: float


def class_weights(n_total: int, class_counts: Sequence[int]) -> tuple[float, ...]:
    """Inverse-frequency weights w_c = n_total / (2 * count_c)."""
    if n_total < 1:
        raise ConfigError(f"n_total must be positive, got {n_total}")
    if sum(class_counts) != n_total:
        raise ConfigError(
            f"class counts {tuple(class_counts)} do not sum to n_total {n_total}"
        )
    if any(c == 0 for c in class_counts):
        raise DegenerateClassError(f"zero class count in {tuple(class_counts)}")
    return tuple(n_total / (2.0 * c) for c in class_counts)


def focal_loss(probs: Sequence[float], weights: Sequence[float], gamma: float = 2.0) -> float:
    """Sum of -w * (1 - p)^gamma * log(p) over true-class probabilities.

    gamma 0 reduces to weighted cross-entropy.  Probabilities are
    clamped away from 0 and 1 before the log.
    """
    p = np.asarray(probs, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    if p.shape != w.shape:
        raise MetricError(f"probs shape {p.shape} does not match weights shape {w.shape}")
    if gamma < 0:
        raise ConfigError(f"gamma must be nonnegative, got {gamma}")
    if p.size and (p.min() < 0.0 or p.max() > 1.0):
        raise MetricError("probabilities outside [0, 1]")
    p = np.clip(p, _PROB_EPS, 1.0 - _PROB_EPS)
    return float(-np.sum(w * np.power(1.0 - p, gamma) * np.log(p)))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-z))


def loss_and_gradient(
    weights: np.ndarray,
    bias: float,
    features: np.ndarray,
    labels: np.ndarray,
    sample_weights: np.ndarray,
    gamma: float,
) -> tuple[float, np.ndarray, float]:
    """Focal loss of the logistic model and its analytic gradient.

    features is (n, vocab), labels in {0, 1}, sample_weights the
    per-example true-class weight.  Returns (loss, d/dweights, d/dbias)
    for the summed (not averaged) loss, matching focal_loss exactly.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    sw = np.asarray(sample_weights, dtype=np.float64)
    z = features @ weights + bias
    sig = _sigmoid(z)
    p_true = np.where(labels == 1.0, sig, 1.0 - sig)
    p = np.clip(p_true, _PROB_EPS, 1.0 - _PROB_EPS)

    one_minus = 1.0 - p
    loss = float(-np.sum(sw * np.power(one_minus, gamma) * np.log(p)))

    # dL/dp of each term; the gamma factor vanishes when gamma == 0.
    dldp = -sw * (np.power(one_minus, gamma) / p)
    if gamma != 0.0:
        dldp += sw * gamma * np.power(one_minus, gamma - 1.0) * np.log(p)
    # dp/dz = +sig(1-sig) for the positive class, negated for the other.
    dpdz = np.where(labels == 1.0, 1.0, -1.0) * sig * (1.0 - sig)
    dz = dldp * dpdz
    return loss, features.T @ dz, float(np.sum(dz))


def tokenize(text: str, max_tokens: int = MAX_DOC_TOKENS) -> list[str]:
    return _TOKEN_RE.findall(text.lower())[:max_tokens]


def _count_vector(text: str, vocabulary: dict[str, int]) -> np.ndarray:
    row = np.zeros(len(vocabulary), dtype=np.float64)
    for token in tokenize(text):
        index = vocabulary.get(token)
        if index is not None:
            row[index] += 1.0
    return row


@dataclass
class TrainedClassifier:
    vocabulary: dict[str, int]
    weights: np.ndarray
    bias: float
    threshold: float
    training_metadata: dict = field(default_factory=dict)

    def probability(self, text: str) -> float:
        z = float(_count_vector(text, self.vocabulary) @ self.weights + self.bias)
        p = float(_sigmoid(np.asarray(z)))
        return min(max(p, _PROB_EPS), 1.0 - _PROB_EPS)

    def verdict(self, product_id: str, text: str, threshold: float | None = None) -> SensitivityVerdict:
        cut = self.threshold if threshold is None else threshold
        p = self.probability(text)
        return SensitivityVerdict(product_id=product_id, probability=p, is_sensitive=p > cut)


def stratified_split(
    labeled: Sequence[tuple[str, bool]],
    fractions: SplitFractions = SplitFractions(),
    seed: int = 0,
) -> tuple[list[tuple[str, bool]], list[tuple[str, bool]], list[tuple[str, bool]]]:
    """Shuffle and cut into train/val/test, per class when stratified."""
    rng = np.random.default_rng(seed)
    groups: list[list[int]]
    if fractions.stratified:
        groups = [
            [i for i, (_, y) in enumerate(labeled) if not y],
            [i for i, (_, y) in enumerate(labeled) if y],
        ]
        if any(not g for g in groups):
            raise DegenerateClassError("stratified split needs both classes present")
    else:
        groups = [list(range(len(labeled)))]

    parts: tuple[list[int], list[int], list[int]] = ([], [], [])
    for group in groups:
        order = rng.permutation(len(group))
        shuffled = [group[i] for i in order]
        c1 = int(round(fractions.train * len(group)))
        c2 = int(round((fractions.train + fractions.val) * len(group)))
        parts[0].extend(shuffled[:c1])
        parts[1].extend(shuffled[c1:c2])
        parts[2].extend(shuffled[c2:])

    out = []
    for indices in parts:
        order = rng.permutation(len(indices))
        out.append([labeled[indices[i]] for i in order])
    return out[0], out[1], out[2]


def _confusion(probs: Sequence[float], labels: Sequence[bool], threshold: float):
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
    return tp, fp, fn, tn


def _prf(tp: int, fp: int, fn: int, tn: int) -> tuple[float, float, float, float]:
    total = tp + fp + fn + tn
    accuracy = (tp + tn) / total if total else 0.0
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return accuracy, precision, recall, f1


def evaluate_classifier(
    classifier: TrainedClassifier,
    labeled: Sequence[tuple[str, bool]],
    threshold: float | None = None,
    gamma: float = 2.0,
) -> ClassifierMetrics:
    """Confusion metrics at the given threshold, sensitive = positive.

    Degenerate denominators (no predicted positives, no true positives)
    yield 0.0 rather than an error.  loss is the mean focal term at
    unit weights, comparable across models of any calibration.
    """
    cut = classifier.threshold if threshold is None else threshold
    probs = [classifier.probability(text) for text, _ in labeled]
    labels = [y for _, y in labeled]
    accuracy, precision, recall, f1 = _prf(*_confusion(probs, labels, cut))
    p_true = [p if y else 1.0 - p for p, y in zip(probs, labels)]
    loss = focal_loss(p_true, np.ones(len(p_true)), gamma) / len(p_true) if p_true else 0.0
    return ClassifierMetrics(accuracy=accuracy, precision=precision, recall=recall, f1=f1, loss=loss)


def train_classifier(
    labeled: Sequence[tuple[str, bool]],
    params: FocalLossParams = FocalLossParams(),
    hyper: TrainHyper = TrainHyper(),
    split: SplitFractions = SplitFractions(),
    threshold: float = DEFAULT_THRESHOLD,
    seed: int = 0,
) -> TrainedClassifier:
    """Fit the bag-of-tokens model by mini-batch gradient descent.

    Checkpoint selection keeps the weights of whichever epoch scored
    the best validation F1 at the configured threshold.  Everything
    downstream of the seed is deterministic: same corpus, same seed,
    same classifier bit for bit.
    """
    if not (0.0 < threshold < 1.0):
        raise ConfigError(f"threshold must lie inside (0, 1), got {threshold}")
    if not labeled:
        raise DegenerateClassError("empty training corpus")

    train_set, val_set, test_set = stratified_split(labeled, split, seed)
    n_pos = sum(1 for _, y in train_set if y)
    n_neg = len(train_set) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DegenerateClassError(
            f"training split has {n_pos} sensitive / {n_neg} nonsensitive examples"
        )
    if params.class_weights is None:
        w_neg, w_pos = class_weights(len(train_set), (n_neg, n_pos))
    else:
        w_neg, w_pos = params.class_weights

    vocabulary = {
        token: i
        for i, token in enumerate(sorted({t for text, _ in train_set for t in tokenize(text)}))
    }
    features = np.stack([_count_vector(text, vocabulary) for text, _ in train_set])
    labels = np.asarray([1.0 if y else 0.0 for _, y in train_set])
    sample_w = np.where(labels == 1.0, w_pos, w_neg)

    rng = np.random.default_rng(seed)
    weights = np.zeros(len(vocabulary), dtype=np.float64)
    bias = 0.0

    def val_f1(w: np.ndarray, b: float) -> float:
        snapshot = TrainedClassifier(vocabulary, w, b, threshold)
        if not val_set:
            return 0.0
        return evaluate_classifier(snapshot, val_set, threshold, params.gamma).f1

    best_f1 = val_f1(weights, bias)
    best_state = (weights.copy(), bias, 0)
    for epoch in range(1, hyper.epochs + 1):
        order = rng.permutation(len(train_set))
        for start in range(0, len(order), hyper.batch_size):
            batch = order[start : start + hyper.batch_size]
            _, grad_w, grad_b = loss_and_gradient(
                weights, bias, features[batch], labels[batch], sample_w[batch], params.gamma
            )
            scale = 1.0 / len(batch)
            weights -= hyper.learning_rate * (grad_w * scale + hyper.weight_decay * weights)
            bias -= hyper.learning_rate * grad_b * scale
        f1 = val_f1(weights, bias)
        if f1 > best_f1:
            best_f1 = f1
            best_state = (weights.copy(), bias, epoch)

    weights, bias, best_epoch = best_state
    classifier = TrainedClassifier(
        vocabulary=vocabulary,
        weights=weights,
        bias=bias,
        threshold=threshold,
        training_metadata={
            "seed": seed,
            "epochs": hyper.epochs,
            "learning_rate": hyper.learning_rate,
            "weight_decay": hyper.weight_decay,
            "batch_size": hyper.batch_size,
            "gamma": params.gamma,
            "class_weights": [w_neg, w_pos],
            "class_weight_basis": "training_split",
            "split_sizes": [len(train_set), len(val_set), len(test_set)],
            "best_epoch": best_epoch,
            "best_val_f1": best_f1,
        },
    )
    if test_set:
        test_metrics = evaluate_classifier(classifier, test_set, threshold, params.gamma)
        classifier.training_metadata["test_f1"] = test_metrics.f1
        classifier.training_metadata["test_accuracy"] = test_metrics.accuracy
    return classifier


# --- scorers -----------------------------------------------------------------


class _ScorerBase:
    """Verdict plumbing shared by every scorer kind."""

    threshold: float = DEFAULT_THRESHOLD

    def identity(self) -> dict:
        raise NotImplementedError

    def probabilities(self, products: Sequence[Product]) -> list[float]:
        raise NotImplementedError

    def score(self, product: Product) -> SensitivityVerdict:
        return self.score_batch([product])[0]

    def score_batch(self, products: Sequence[Product]) -> list[SensitivityVerdict]:
        return [
            SensitivityVerdict(product_id=p.id, probability=prob, is_sensitive=prob > self.threshold)
            for p, prob in zip(products, self.probabilities(products))
        ]


class CategoricalScorer(_ScorerBase):
    """Membership of main_category in the configured sensitive set."""

    kind = "categorical"

    def __init__(self, sensitive_categories: Iterable[str], threshold: float = DEFAULT_THRESHOLD):
        self.sensitive_categories = frozenset(sensitive_categories)
        if not self.sensitive_categories:
            raise ConfigError("categorical scorer needs at least one sensitive category")
        if not (0.0 < threshold < 1.0):
            raise ConfigError(f"threshold must lie inside (0, 1), got {threshold}")
        self.threshold = threshold

    def identity(self) -> dict:
        return {
            "kind": self.kind,
            "threshold": self.threshold,
            "sensitive_categories": sorted(self.sensitive_categories),
        }

    def probabilities(self, products: Sequence[Product]) -> list[float]:
        return [1.0 if p.main_category in self.sensitive_categories else 0.0 for p in products]


class TrainedScorer(_ScorerBase):
    """Local classifier over canonical product text."""

    kind = "trained"

    def __init__(self, classifier: TrainedClassifier, threshold: float | None = None):
        self.classifier = classifier
        cut = classifier.threshold if threshold is None else threshold
        if not (0.0 < cut < 1.0):
            raise ConfigError(f"threshold must lie inside (0, 1), got {cut}")
        self.threshold = cut

    def identity(self) -> dict:
        return {
            "kind": self.kind,
            "threshold": self.threshold,
            "vocabulary_size": len(self.classifier.vocabulary),
        }

    def probabilities(self, products: Sequence[Product]) -> list[float]:
        return [self.classifier.probability(canonical_text(p)) for p in products]


class RemoteScorer(_ScorerBase):
    """Client for the POST /score contract.

    Transport failures propagate as BackendError and must fail the
    affected user: a scorer that cannot answer never defaults to
    nonsensitive, that would route unvetted items to the server.
    """

    kind = "remote"

    def __init__(self, endpoint: str, threshold: float = DEFAULT_THRESHOLD,
                 timeout: float = 30.0, batch_size: int = 64):
        if not endpoint:
            raise ConfigError("remote scorer requires an endpoint")
        if not (0.0 < threshold < 1.0):
            raise ConfigError(f"threshold must lie inside (0, 1), got {threshold}")
        self.endpoint = endpoint.rstrip("/")
        self.threshold = threshold
        self.timeout = timeout
        self.batch_size = max(1, batch_size)

    def identity(self) -> dict:
        return {"kind": self.kind, "threshold": self.threshold, "endpoint": self.endpoint}

    def _post_batch(self, texts: list[str]) -> list[float]:
        try:
            response = requests.post(
                f"{self.endpoint}/score", json={"texts": texts}, timeout=self.timeout
            )
        except (requests.ConnectionError, requests.Timeout) as exc:
            raise BackendError("transport", f"scoring service unreachable: {exc}")
        if response.status_code != 200:
            raise BackendError("protocol", f"scoring service returned HTTP {response.status_code}")
        try:
            probs = response.json()["probabilities"]
        except (ValueError, KeyError) as exc:
            raise BackendError("protocol", f"malformed scoring response: {exc}")
        if not isinstance(probs, list) or len(probs) != len(texts):
            raise BackendError("protocol", "scoring response length does not match request")
        values = [float(p) for p in probs]
        if any(not (0.0 <= v <= 1.0) for v in values):
            raise BackendError("protocol", "scoring response contains values outside [0, 1]")
        return values

    def probabilities(self, products: Sequence[Product]) -> list[float]:
        texts = [canonical_text(p) for p in products]
        out: list[float] = []
        for start in range(0, len(texts), self.batch_size):
            out.extend(self._post_batch(texts[start : start + self.batch_size]))
        return out


def build_scorer(config: dict) -> _ScorerBase:
    """Instantiate a scorer from its run-config mapping."""
    kind = config.get("kind")
    threshold = config.get("threshold")
    if kind == "categorical":
        return CategoricalScorer(
            sensitive_categories=config.get("sensitive_categories", ()),
            threshold=DEFAULT_THRESHOLD if threshold is None else float(threshold),
        )
    if kind == "trained":
        model_path = config.get("model_path")
        if not model_path:
            raise ConfigError("trained scorer requires model_path")
        classifier = load_model(model_path)
        return TrainedScorer(classifier, None if threshold is None else float(threshold))
    if kind == "remote":
        return RemoteScorer(
            endpoint=config.get("endpoint", ""),
            threshold=DEFAULT_THRESHOLD if threshold is None else float(threshold),
            timeout=float(config.get("timeout", 30.0)),
        )
    raise ConfigError(f"unknown scorer kind: {kind!r}")


def split_history(
    history: PurchaseHistory, scorer: _ScorerBase
) -> tuple[list[Product], list[Product], list[SensitivityVerdict]]:
    """Partition items into (sensitive, nonsensitive) preserving order."""
    verdicts = scorer.score_batch(history.items)
    sensitive = [p for p, v in zip(history.items, verdicts) if v.is_sensitive]
    nonsensitive = [p for p, v in zip(history.items, verdicts) if not v.is_sensitive]
    return sensitive, nonsensitive, verdicts


# --- model and annotation files ----------------------------------------------

_MODEL_MAGIC = b"PRSM"
_MODEL_VERSION = 1


def save_model(path, classifier: TrainedClassifier) -> None:
    """Flat binary layout: magic, version, threshold, vocab entries
    (token, weight) ordered by index, then the bias."""
    tokens = sorted(classifier.vocabulary, key=classifier.vocabulary.__getitem__)
    with open(path, "wb") as handle:
        handle.write(_MODEL_MAGIC)
        handle.write(struct.pack("<I", _MODEL_VERSION))
        handle.write(struct.pack("<d", classifier.threshold))
        handle.write(struct.pack("<I", len(tokens)))
        for token in tokens:
            raw = token.encode("utf-8")
            handle.write(struct.pack("<I", len(raw)))
            handle.write(raw)
            handle.write(struct.pack("<d", float(classifier.weights[classifier.vocabulary[token]])))
        handle.write(struct.pack("<d", classifier.bias))


def load_model(path) -> TrainedClassifier:
    data = Path(path).read_bytes()
    if data[:4] != _MODEL_MAGIC:
        raise ConfigError(f"{path} is not a sensitivity model file")
    try:
        (version,) = struct.unpack_from("<I", data, 4)
        if version != _MODEL_VERSION:
            raise ConfigError(f"unsupported model version: {version}")
        (threshold,) = struct.unpack_from("<d", data, 8)
        (vocab_size,) = struct.unpack_from("<I", data, 16)
        offset = 20
        vocabulary: dict[str, int] = {}
        weights = np.zeros(vocab_size, dtype=np.float64)
        for index in range(vocab_size):
            (length,) = struct.unpack_from("<I", data, offset)
            offset += 4
            token = data[offset : offset + length].decode("utf-8")
            offset += length
            (weight,) = struct.unpack_from("<d", data, offset)
            offset += 8
            vocabulary[token] = index
            weights[index] = weight
        (bias,) = struct.unpack_from("<d", data, offset)
    except (struct.error, UnicodeDecodeError) as exc:
        raise ConfigError(f"truncated or corrupt model file {path}: {exc}")
    return TrainedClassifier(vocabulary=vocabulary, weights=weights, bias=bias, threshold=threshold)


def load_labels(path) -> dict[str, bool]:
    """Label file: one {product_id, label} object per line."""
    labels: dict[str, bool] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        try:
            record = json.loads(line)
            product_id = str(record["product_id"])
            label = str(record["label"]).strip().lower()
        except (ValueError, KeyError) as exc:
            raise ConfigError(f"{path}:{lineno}: malformed label line: {exc}")
        if label not in ("sensitive", "nonsensitive"):
            raise ConfigError(f"{path}:{lineno}: unknown label {label!r}")
        labels[product_id] = label == "sensitive"
    if not labels:
        raise ConfigError(f"{path} contains no labels")
    return labels


def load_scores(path) -> dict[str, float]:
    """Score file: one {product_id, score} object per line, score in [0, 1]."""
    scores: dict[str, float] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        try:
            record = json.loads(line)
            product_id = str(record["product_id"])
            score = float(record["score"])
        except (ValueError, KeyError) as exc:
            raise ConfigError(f"{path}:{lineno}: malformed score line: {exc}")
        if not (0.0 <= score <= 1.0):
            raise ConfigError(f"{path}:{lineno}: score outside [0, 1]: {score}")
        scores[product_id] = score
    return scores


def labeled_corpus(catalog: Catalog, labels: dict[str, bool]) -> list[tuple[str, bool]]:
    """Pair canonical texts with labels; ids missing from the catalog fail loudly."""
    missing = sorted(set(labels) - set(catalog.products))
    if missing:
        raise ConfigError(f"labels reference unknown products: {missing[:5]}")
    return [
        (canonical_text(catalog.products[pid]), labels[pid]) for pid in sorted(labels)
    ]
