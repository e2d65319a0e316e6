"""Shared fixtures: a separable labeled corpus and a trained checkpoint.

The corpus composes titles from disjoint sensitive and nonsensitive
word banks, so token presence alone separates the classes and a small
encoder can reach high F1.  Training happens once per session; every
service test runs against that checkpoint.
"""
from __future__ import annotations

import numpy as np
import pytest

from model_service.training import TrainSettings, finetune

SENSITIVE_PROBE = "prescription eczema cream"

_CONDITIONS = (
    "eczema", "psoriasis", "acne", "migraine", "arthritis",
    "diabetes", "insomnia", "anxiety", "reflux", "allergy",
)
_FORMS = (
    "cream", "ointment", "gel", "tablets", "capsules",
    "spray", "patches", "drops", "syrup", "lotion",
)
_TREATMENT_WORDS = (
    "prescription", "medicated", "clinical", "therapeutic", "antifungal",
    "hypoallergenic", "pediatric", "topical", "soothing", "dermatologist",
)

_MATERIALS = (
    "bamboo", "steel", "ceramic", "walnut", "granite",
    "silicone", "canvas", "leather", "copper", "oak",
)
_ITEMS = (
    "skillet", "spatula", "backpack", "lantern", "notebook",
    "organizer", "speaker", "mug", "tripod", "hammock",
)
_HOUSEHOLD_WORDS = (
    "folding", "insulated", "nonstick", "waterproof", "portable",
    "stackable", "rechargeable", "ergonomic", "compact", "reusable",
)

# Training from random init needs a larger step than the serving
# defaults, which assume a pretrained backbone at full scale.
FIXTURE_SETTINGS = TrainSettings(learning_rate=1e-3, weight_decay=0.01,
                                 batch_size=16, epochs=8)


def labeled_fixture(n: int = 1000, seed: int = 13) -> list[tuple[str, bool]]:
    """n labeled titles, half sensitive, shuffled deterministically."""
    rng = np.random.default_rng(seed)
    half = n // 2
    labeled = [(SENSITIVE_PROBE, True)] * 3
    while len(labeled) < half:
        text = " ".join(
            (rng.choice(_TREATMENT_WORDS), rng.choice(_CONDITIONS), rng.choice(_FORMS))
        )
        labeled.append((text, True))
    while len(labeled) < n:
        text = " ".join(
            (rng.choice(_HOUSEHOLD_WORDS), rng.choice(_MATERIALS), rng.choice(_ITEMS))
        )
        labeled.append((text, False))
    order = rng.permutation(len(labeled))
    return [labeled[i] for i in order]


@pytest.fixture(scope="session")
def corpus_1k() -> list[tuple[str, bool]]:
    return labeled_fixture(1000, seed=13)


@pytest.fixture(scope="session")
def checkpoint(tmp_path_factory, corpus_1k):
    """Trained checkpoint directory plus the metrics dict it wrote."""
    out_dir = tmp_path_factory.mktemp("checkpoint")
    metrics = finetune(corpus_1k, out_dir=out_dir, settings=FIXTURE_SETTINGS, seed=0)
    return out_dir, metrics
