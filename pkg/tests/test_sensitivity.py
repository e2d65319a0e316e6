from __future__ import annotations

import math

import numpy as np
import pytest

from conftest import SENSITIVE_CATEGORY, make_catalog, make_history, make_product
from privrec.catalog import canonical_text
from privrec.errors import BackendError, ConfigError, DegenerateClassError
from privrec.sensitivity import (
    CategoricalScorer,
    FocalLossParams,
    RemoteScorer,
    SplitFractions,
    TrainHyper,
    TrainedClassifier,
    TrainedScorer,
    build_scorer,
    class_weights,
    evaluate_classifier,
    focal_loss,
    labeled_corpus,
    load_labels,
    load_model,
    load_scores,
    loss_and_gradient,
    save_model,
    split_history,
    stratified_split,
    tokenize,
    train_classifier,
)
from stubs import StubServer, score_stub

EASY_HYPER = TrainHyper(learning_rate=0.5, weight_decay=0.0, batch_size=16, epochs=20)


def separable_corpus(n: int, seed: int = 0) -> list[tuple[str, bool]]:
    """Linearly separable texts: one marker token decides the class."""
    rng = np.random.default_rng(seed)
    filler = ["daily", "household", "classic", "compact", "value", "pack"]
    corpus = []
    for i in range(n):
        words = [filler[int(k)] for k in rng.integers(0, len(filler), size=4)]
        if i % 4 == 0:
            corpus.append((f"insulin syringe {' '.join(words)}", True))
        else:
            corpus.append((f"kitchen spatula {' '.join(words)}", False))
    return corpus


class TestClassWeights:
    def test_inverse_frequency_halved(self):
        assert class_weights(100, (75, 25)) == (100 / 150, 2.0)
        assert class_weights(10, (5, 5)) == (1.0, 1.0)

    def test_zero_count_rejected(self):
        with pytest.raises(DegenerateClassError):
            class_weights(10, (10, 0))


class TestFocalLoss:
    def test_hand_computed_values(self):
        # -w (1-p)^2 log(p), summed over examples
        expected = -(1.5 * 0.25 * math.log(0.5)) - (0.5 * 0.04 * math.log(0.8))
        assert abs(focal_loss([0.5, 0.8], [1.5, 0.5], 2.0) - expected) < 1e-15

    def test_gamma_zero_is_weighted_cross_entropy(self):
        rng = np.random.default_rng(11)
        for _ in range(30):
            probs = rng.uniform(0.01, 0.99, size=8)
            weights = rng.uniform(0.2, 3.0, size=8)
            ce = -float(np.sum(weights * np.log(probs)))
            assert abs(focal_loss(probs, weights, 0.0) - ce) < 1e-9

    def test_confident_correct_examples_vanish(self):
        assert focal_loss([1.0], [1.0], 2.0) < 1e-20

    def test_probability_clamp_keeps_loss_finite(self):
        assert math.isfinite(focal_loss([0.0], [1.0], 2.0))


class TestGradient:
    def total_loss(self, weights, bias, features, labels, sample_w, gamma):
        loss, _, _ = loss_and_gradient(weights, bias, features, labels, sample_w, gamma)
        return loss

    @pytest.mark.parametrize("gamma", [0.0, 2.0])
    def test_matches_central_differences(self, gamma):
        rng = np.random.default_rng(5)
        for _ in range(20):
            n, d = 8, 5
            features = rng.integers(0, 3, size=(n, d)).astype(np.float64)
            labels = rng.integers(0, 2, size=n).astype(np.float64)
            sample_w = rng.uniform(0.5, 2.0, size=n)
            weights = rng.normal(scale=0.3, size=d)
            bias = float(rng.normal(scale=0.1))
            _, grad_w, grad_b = loss_and_gradient(
                weights, bias, features, labels, sample_w, gamma
            )
            step = 1e-5
            for j in range(d):
                bumped = weights.copy()
                bumped[j] += step
                up = self.total_loss(bumped, bias, features, labels, sample_w, gamma)
                bumped[j] -= 2 * step
                down = self.total_loss(bumped, bias, features, labels, sample_w, gamma)
                numeric = (up - down) / (2 * step)
                denom = max(abs(numeric), abs(grad_w[j]), 1e-8)
                assert abs(numeric - grad_w[j]) / denom < 1e-4
            up = self.total_loss(weights, bias + step, features, labels, sample_w, gamma)
            down = self.total_loss(weights, bias - step, features, labels, sample_w, gamma)
            numeric = (up - down) / (2 * step)
            denom = max(abs(numeric), abs(grad_b), 1e-8)
            assert abs(numeric - grad_b) / denom < 1e-4


class TestTokenize:
    def test_lowercases_and_strips_punctuation(self):
        assert tokenize("Blood-Glucose METER, 50ct!") == ["blood", "glucose", "meter", "50ct"]

    def test_truncates_to_max_tokens(self):
        text = " ".join(f"w{i}" for i in range(500))
        assert len(tokenize(text)) == 256


class TestSplit:
    def test_sizes_follow_fractions_per_class(self):
        corpus = separable_corpus(200)
        train, val, test = stratified_split(corpus, SplitFractions(), seed=1)
        assert (len(train), len(val), len(test)) == (140, 40, 20)
        for part, frac in ((train, 0.7), (val, 0.2), (test, 0.1)):
            positives = sum(1 for _, y in part if y)
            assert positives == round(50 * frac)

    def test_deterministic_for_fixed_seed(self):
        corpus = separable_corpus(80)
        assert stratified_split(corpus, seed=7) == stratified_split(corpus, seed=7)
        assert stratified_split(corpus, seed=7) != stratified_split(corpus, seed=8)

    def test_partition_is_exact(self):
        corpus = separable_corpus(97)
        train, val, test = stratified_split(corpus, seed=3)
        assert sorted(train + val + test) == sorted(corpus)

    def test_single_class_rejected_when_stratified(self):
        with pytest.raises(DegenerateClassError):
            stratified_split([("a", True), ("b", True)], SplitFractions(), seed=0)


class TestTrainer:
    def test_learns_the_separable_fixture(self):
        classifier = train_classifier(separable_corpus(200), hyper=EASY_HYPER, seed=0)
        metrics = evaluate_classifier(classifier, separable_corpus(200))
        assert metrics.f1 == 1.0
        assert classifier.training_metadata["best_val_f1"] == 1.0

    def test_same_seed_reproduces_weights_bit_for_bit(self):
        a = train_classifier(separable_corpus(120), hyper=EASY_HYPER, seed=9)
        b = train_classifier(separable_corpus(120), hyper=EASY_HYPER, seed=9)
        assert a.vocabulary == b.vocabulary
        assert np.array_equal(a.weights, b.weights)
        assert a.bias == b.bias

    def test_vocabulary_comes_from_training_split_only(self):
        corpus = separable_corpus(60)
        classifier = train_classifier(corpus, hyper=EASY_HYPER, seed=2)
        train, _, _ = stratified_split(corpus, SplitFractions(), seed=2)
        expected = sorted({t for text, _ in train for t in tokenize(text)})
        assert sorted(classifier.vocabulary) == expected

    def test_default_hyperparameters(self):
        hyper = TrainHyper()
        assert hyper.learning_rate == 2e-5
        assert hyper.weight_decay == 0.01
        assert hyper.batch_size == 16
        assert hyper.epochs == 5
        assert FocalLossParams().gamma == 2.0

    def test_metadata_records_the_recipe(self):
        classifier = train_classifier(separable_corpus(100), hyper=EASY_HYPER, seed=4)
        meta = classifier.training_metadata
        assert meta["class_weight_basis"] == "training_split"
        assert meta["split_sizes"] == [70, 20, 10]
        assert meta["gamma"] == 2.0
        assert meta["seed"] == 4
        # three quarters nonsensitive: weights land at N/(2*Nc)
        assert meta["class_weights"][1] > meta["class_weights"][0]

    def test_threshold_bounds_enforced(self):
        with pytest.raises(ConfigError):
            train_classifier(separable_corpus(40), threshold=1.0)

    def test_single_class_corpus_rejected(self):
        with pytest.raises(DegenerateClassError):
            train_classifier([("only one kind", False)] * 30)


class TestEvaluate:
    def make_known_classifier(self) -> TrainedClassifier:
        return TrainedClassifier(
            vocabulary={"marker": 0},
            weights=np.array([10.0]),
            bias=-5.0,
            threshold=0.5,
        )

    def test_confusion_metrics_on_known_inputs(self):
        classifier = self.make_known_classifier()
        labeled = [
            ("marker", True),   # tp
            ("marker", False),  # fp
            ("plain", True),    # fn
            ("plain", False),   # tn
        ]
        metrics = evaluate_classifier(classifier, labeled)
        assert metrics.accuracy == 0.5
        assert metrics.precision == 0.5
        assert metrics.recall == 0.5
        assert metrics.f1 == 0.5

    def test_loss_is_mean_focal_at_unit_weights(self):
        classifier = self.make_known_classifier()
        labeled = [("marker", True), ("plain", False)]
        p1 = classifier.probability("marker")
        p2 = 1.0 - classifier.probability("plain")
        expected = focal_loss([p1, p2], [1.0, 1.0], 2.0) / 2
        assert abs(evaluate_classifier(classifier, labeled).loss - expected) < 1e-15

    def test_degenerate_denominators_yield_zero(self):
        classifier = self.make_known_classifier()
        metrics = evaluate_classifier(classifier, [("plain", True)])
        assert metrics.precision == 0.0
        assert metrics.f1 == 0.0


class TestScorers:
    def test_categorical_scorer_is_binary(self):
        scorer = CategoricalScorer({SENSITIVE_CATEGORY})
        sensitive = make_product("s1", SENSITIVE_CATEGORY)
        plain = make_product("p1", "Home & Kitchen")
        verdicts = scorer.score_batch([sensitive, plain])
        assert [v.is_sensitive for v in verdicts] == [True, False]
        assert [v.probability for v in verdicts] == [1.0, 0.0]
        assert verdicts[0].product_id == "s1"

    def test_trained_scorer_threshold_override(self):
        classifier = train_classifier(separable_corpus(120), hyper=EASY_HYPER, seed=0)
        # classifiers see the whole canonical text, so keep the other
        # fields free of corpus tokens
        product = make_product(
            "x", "Misc", title="insulin syringe daily pack", description=("value",)
        )
        assert TrainedScorer(classifier).score(product).is_sensitive
        strict = TrainedScorer(classifier, threshold=0.999999999)
        lax = TrainedScorer(classifier, threshold=1e-9)
        plain = make_product(
            "y", "Misc", title="kitchen spatula classic", description=("value",)
        )
        assert not strict.score(plain).is_sensitive
        assert lax.score(plain).is_sensitive

    def test_split_history_partitions_in_order(self, mixed_catalog, mixed_history):
        scorer = CategoricalScorer({SENSITIVE_CATEGORY})
        sensitive, nonsensitive, verdicts = split_history(mixed_history, scorer)
        assert [p.id for p in sensitive] == ["h00", "h01", "h02", "h03"]
        assert all(p.main_category != SENSITIVE_CATEGORY for p in nonsensitive)
        assert len(verdicts) == len(mixed_history.items)
        merged = [p.id for p in mixed_history.items if p in sensitive or p in nonsensitive]
        assert merged == [p.id for p in mixed_history.items]

    def test_remote_scorer_round_trip_and_batching(self):
        with score_stub(lambda text: 0.9 if "glucose" in text else 0.2) as server:
            scorer = RemoteScorer(server.url, threshold=0.5, batch_size=2)
            products = [
                make_product("a", title="glucose strips"),
                make_product("b", title="desk lamp"),
                make_product("c", title="glucose meter"),
            ]
            verdicts = scorer.score_batch(products)
            assert [v.is_sensitive for v in verdicts] == [True, False, True]
            assert [len(r["body"]["texts"]) for r in server.requests] == [2, 1]

    def test_remote_scorer_rejects_bad_payloads(self):
        cases = [
            lambda body: {"probabilities": [0.5, 0.5]},        # wrong length
            lambda body: {"probabilities": [1.5]},             # out of range
            lambda body: (500, {"error": "x"}),                # http error
            lambda body: {"something": "else"},                # missing key
        ]
        for handler in cases:
            with StubServer({"/score": handler}) as server:
                scorer = RemoteScorer(server.url)
                with pytest.raises(BackendError) as info:
                    scorer.score(make_product("a"))
                assert info.value.category == "protocol"

    def test_remote_scorer_unreachable_is_transport(self):
        scorer = RemoteScorer("http://127.0.0.1:9", timeout=0.5)
        with pytest.raises(BackendError) as info:
            scorer.score(make_product("a"))
        assert info.value.category == "transport"

    def test_build_scorer_dispatch(self, tmp_path):
        assert build_scorer(
            {"kind": "categorical", "sensitive_categories": ["X"]}
        ).kind == "categorical"
        assert build_scorer({"kind": "remote", "endpoint": "http://h"}).kind == "remote"
        classifier = train_classifier(separable_corpus(60), hyper=EASY_HYPER)
        model_path = tmp_path / "m.bin"
        save_model(model_path, classifier)
        scorer = build_scorer({"kind": "trained", "model_path": str(model_path)})
        assert scorer.kind == "trained"
        with pytest.raises(ConfigError):
            build_scorer({"kind": "trained"})
        with pytest.raises(ConfigError):
            build_scorer({"kind": "transformer"})


class TestModelFile:
    def test_roundtrip_preserves_probabilities_exactly(self, tmp_path):
        classifier = train_classifier(separable_corpus(120), hyper=EASY_HYPER, seed=1)
        path = tmp_path / "model.bin"
        save_model(path, classifier)
        loaded = load_model(path)
        assert loaded.threshold == classifier.threshold
        assert loaded.vocabulary == classifier.vocabulary
        for text, _ in separable_corpus(20, seed=5):
            assert loaded.probability(text) == classifier.probability(text)

    def test_file_bytes_are_deterministic(self, tmp_path):
        classifier = train_classifier(separable_corpus(60), hyper=EASY_HYPER, seed=1)
        a, b = tmp_path / "a.bin", tmp_path / "b.bin"
        save_model(a, classifier)
        save_model(b, classifier)
        assert a.read_bytes() == b.read_bytes()

    def test_foreign_and_truncated_files_rejected(self, tmp_path):
        path = tmp_path / "bad.bin"
        path.write_bytes(b"ELF\x7fnope")
        with pytest.raises(ConfigError):
            load_model(path)
        classifier = train_classifier(separable_corpus(60), hyper=EASY_HYPER)
        good = tmp_path / "good.bin"
        save_model(good, classifier)
        path.write_bytes(good.read_bytes()[:30])
        with pytest.raises(ConfigError):
            load_model(path)


class TestAnnotationFiles:
    def test_load_labels_strict(self, tmp_path):
        path = tmp_path / "labels.jsonl"
        path.write_text(
            '{"product_id": "a", "label": "sensitive"}\n'
            '{"product_id": "b", "label": "nonsensitive"}\n'
        )
        assert load_labels(path) == {"a": True, "b": False}
        path.write_text('{"product_id": "a", "label": "maybe"}\n')
        with pytest.raises(ConfigError):
            load_labels(path)
        path.write_text("")
        with pytest.raises(ConfigError):
            load_labels(path)

    def test_load_scores_range_checked(self, tmp_path):
        path = tmp_path / "scores.jsonl"
        path.write_text('{"product_id": "a", "score": 0.25}\n')
        assert load_scores(path) == {"a": 0.25}
        path.write_text('{"product_id": "a", "score": 1.25}\n')
        with pytest.raises(ConfigError):
            load_scores(path)

    def test_labeled_corpus_requires_known_products(self):
        catalog = make_catalog([make_product("a"), make_product("b")])
        corpus = labeled_corpus(catalog, {"b": True, "a": False})
        assert corpus == [
            (canonical_text(catalog.products["a"]), False),
            (canonical_text(catalog.products["b"]), True),
        ]
        with pytest.raises(ConfigError):
            labeled_corpus(catalog, {"ghost": True})
