"""HTTP contract: shapes, ordering, limits, and error statuses."""
from __future__ import annotations

import math

import numpy as np
import pytest
from fastapi.testclient import TestClient

from conftest import SENSITIVE_PROBE
from model_service.embedding import HashedNgramEncoder, resolve_encoder
from model_service.errors import ConfigError
from model_service.service import ServiceConfig, create_app

EMBED_DIMENSION = 384

TEXTS = [
    "medicated eczema ointment",
    "insulated copper mug",
    "prescription migraine tablets",
    "portable bamboo lantern",
]


@pytest.fixture(scope="module")
def client(checkpoint):
    out_dir, _ = checkpoint
    config = ServiceConfig(classifier_checkpoint=out_dir, max_batch=16)
    with TestClient(create_app(config)) as c:
        yield c


class TestConfig:
    def test_bind_address_parses(self):
        config = ServiceConfig(classifier_checkpoint=".", bind_address="0.0.0.0:9100")
        assert config.host_port() == ("0.0.0.0", 9100)

    def test_bad_bind_address_is_rejected(self):
        with pytest.raises(ConfigError):
            ServiceConfig(classifier_checkpoint=".", bind_address="9100")
        with pytest.raises(ConfigError):
            ServiceConfig(classifier_checkpoint=".", bind_address="host:port")

    def test_nonpositive_max_batch_is_rejected(self):
        with pytest.raises(ConfigError):
            ServiceConfig(classifier_checkpoint=".", max_batch=0)

    def test_missing_checkpoint_is_rejected(self, tmp_path):
        config = ServiceConfig(classifier_checkpoint=tmp_path / "absent")
        with pytest.raises(ConfigError):
            create_app(config)


class TestScore:
    def test_one_probability_per_text_in_order(self, client):
        response = client.post("/score", json={"texts": TEXTS})
        assert response.status_code == 200
        probs = response.json()["probabilities"]
        assert len(probs) == len(TEXTS)
        assert all(0.0 <= p <= 1.0 for p in probs)
        one_by_one = [
            client.post("/score", json={"texts": [t]}).json()["probabilities"][0]
            for t in TEXTS
        ]
        assert all(
            math.isclose(a, b, abs_tol=1e-9) for a, b in zip(probs, one_by_one)
        )

    def test_trained_checkpoint_flags_the_probe(self, client):
        response = client.post("/score", json={"texts": [SENSITIVE_PROBE]})
        assert response.json()["probabilities"][0] > 0.5

    def test_repeated_calls_are_deterministic(self, client):
        first = client.post("/score", json={"texts": TEXTS}).json()
        second = client.post("/score", json={"texts": TEXTS}).json()
        assert first == second

    def test_empty_batch_is_allowed(self, client):
        response = client.post("/score", json={"texts": []})
        assert response.status_code == 200
        assert response.json()["probabilities"] == []


class TestEmbed:
    def test_one_vector_per_text_at_the_advertised_width(self, client):
        response = client.post("/embed", json={"texts": TEXTS[:3]})
        assert response.status_code == 200
        rows = response.json()["embeddings"]
        matrix = np.asarray(rows, dtype=np.float64)
        assert matrix.shape == (3, EMBED_DIMENSION)
        assert np.isfinite(matrix).all()

    def test_matches_local_encoder(self, client):
        rows = client.post("/embed", json={"texts": TEXTS}).json()["embeddings"]
        local = HashedNgramEncoder(EMBED_DIMENSION).embed(TEXTS)
        assert np.allclose(np.asarray(rows), local, rtol=0.0, atol=1e-12)

    def test_different_texts_get_different_vectors(self, client):
        rows = client.post("/embed", json={"texts": TEXTS[:2]}).json()["embeddings"]
        assert not np.allclose(rows[0], rows[1])


class TestErrors:
    def test_overlong_batch_answers_413(self, client):
        response = client.post("/score", json={"texts": ["t"] * 17})
        assert response.status_code == 413
        response = client.post("/embed", json={"texts": ["t"] * 17})
        assert response.status_code == 413

    def test_malformed_bodies_answer_400(self, client):
        for body in ({"texts": "not a list"}, {"texts": [1, 2]}, {"wrong": []}, {}):
            for route in ("/score", "/embed"):
                assert client.post(route, json=body).status_code == 400
        assert client.post("/score", content=b"not json").status_code == 400

    def test_no_other_routes_exist(self, client):
        assert client.get("/").status_code == 404
        assert client.get("/docs").status_code == 404
        assert client.get("/score").status_code == 405


class TestEncoderResolution:
    def test_hash_ids_map_to_dimension(self):
        assert resolve_encoder("hash-384").dimension == 384
        assert resolve_encoder("hash-64").dimension == 64

    def test_unknown_ids_are_rejected(self):
        with pytest.raises(ConfigError):
            resolve_encoder("hash-0")
        with pytest.raises(ConfigError):
            resolve_encoder("no-such-model")

    def test_zero_token_text_embeds_to_zero(self):
        vector = HashedNgramEncoder(32).embed(["!!!"])
        assert np.count_nonzero(vector) == 0

    def test_vectors_are_unit_length(self):
        matrix = HashedNgramEncoder(128).embed(TEXTS)
        assert np.allclose(np.linalg.norm(matrix, axis=1), 1.0, atol=1e-12)
