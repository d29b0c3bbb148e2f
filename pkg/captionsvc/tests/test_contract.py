"""Contract suite for the caption/similarity service (stub backend only)."""

import pytest
from fastapi.testclient import TestClient

from captionsvc.app import create_app
from captionsvc.backends import StubBackend


@pytest.fixture(scope="module")
def client():
    return TestClient(create_app(StubBackend()))


def describe_payload(**overrides):
    payload = {
        "video_id": "v0",
        "frame_index": 3,
        "prompts": [
            "Generate captions for that video frame.",
            "Provide a detailed description of the following frame.",
            "Describe the following frame in detail.",
            "Elaborate on the details of this frame in your own words.",
            "Describe the image concisely.",
        ],
        "frame_payload": [0.1, -0.4, 0.9],
        "temperature": 0.0,
    }
    payload.update(overrides)
    return payload


class TestDescribe:
    def test_count_matches_prompts(self, client):
        resp = client.post("/describe", json=describe_payload())
        assert resp.status_code == 200
        body = resp.json()
        assert len(body["descriptions"]) == 5
        assert body["model_id"]
        assert body["latency_ms"] >= 0.0

    def test_count_with_repeats(self, client):
        resp = client.post("/describe", json=describe_payload(repeats=3))
        assert resp.status_code == 200
        assert len(resp.json()["descriptions"]) == 15

    def test_deterministic_at_temperature_zero(self, client):
        a = client.post("/describe", json=describe_payload()).json()["descriptions"]
        b = client.post("/describe", json=describe_payload()).json()["descriptions"]
        assert a == b

    def test_temperature_adds_entropy(self, client):
        a = client.post("/describe", json=describe_payload(temperature=0.7)).json()["descriptions"]
        b = client.post("/describe", json=describe_payload(temperature=0.7)).json()["descriptions"]
        assert a != b

    def test_distinct_prompts_give_distinct_descriptions(self, client):
        body = client.post("/describe", json=describe_payload()).json()
        assert len(set(body["descriptions"])) > 1

    def test_empty_prompts_is_400(self, client):
        resp = client.post("/describe", json=describe_payload(prompts=[]))
        assert resp.status_code == 400

    def test_undecodable_image_is_422(self, client):
        payload = describe_payload(frame_payload=None, image_b64="@@not-base64@@")
        resp = client.post("/describe", json=payload)
        assert resp.status_code == 422

    def test_malformed_body_is_4xx(self, client):
        resp = client.post("/describe", json={"video_id": "v0"})
        assert 400 <= resp.status_code < 500


class TestSimilarity:
    def test_shape_contract(self, client):
        resp = client.post("/similarity", json={"query": "a dog runs", "candidates": ["x", "y", "z"]})
        assert resp.status_code == 200
        assert len(resp.json()["scores"]) == 3

    def test_identical_candidate_is_argmax(self, client):
        query = "a person opens the door"
        candidates = ["a cat sleeps on a mat", query, "bright empty hallway"]
        scores = client.post("/similarity", json={"query": query, "candidates": candidates}).json()["scores"]
        assert max(range(3), key=lambda i: scores[i]) == 1

    def test_empty_candidates_is_400(self, client):
        resp = client.post("/similarity", json={"query": "q", "candidates": []})
        assert resp.status_code == 400

    def test_scores_finite_for_random_strings(self, client):
        import math
        import random

        rng = random.Random(0)
        words = ["alpha", "beta", "gamma", "delta", "x1", "zz", ""]
        for _ in range(50):
            candidates = [" ".join(rng.choices(words, k=rng.randint(0, 6))) for _ in range(20)]
            resp = client.post("/similarity", json={"query": "alpha beta", "candidates": candidates})
            assert resp.status_code == 200
            assert all(math.isfinite(s) for s in resp.json()["scores"])


class TestHealthAndAvailability:
    def test_healthz(self, client):
        body = client.get("/healthz").json()
        assert body["status"] == "ok"
        assert body["model_id"] == "stub-caption-v1"

    def test_unloaded_backend_returns_503(self):
        class Unloaded(StubBackend):
            def loaded(self):
                return False

        offline = TestClient(create_app(Unloaded()))
        assert offline.get("/healthz").json()["status"] == "loading"
        resp = offline.post("/describe", json=describe_payload())
        assert resp.status_code == 503
        resp = offline.post("/similarity", json={"query": "q", "candidates": ["c"]})
        assert resp.status_code == 503
