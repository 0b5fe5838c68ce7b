import io

import numpy as np
import pytest
from fastapi.testclient import TestClient

from bombus.server import ModelService, create_app

from conftest import make_shape_image


def png_bytes(cls=0, seed=0):
    buf = io.BytesIO()
    make_shape_image(cls, np.random.default_rng(seed)).save(buf, format="PNG")
    return buf.getvalue()


@pytest.fixture(scope="module")
def service(toy_artifact):
    svc = ModelService([toy_artifact])
    svc.load()
    return svc


@pytest.fixture(scope="module")
def client(service):
    return TestClient(create_app(service))


class TestHealth:
    def test_healthz(self, client):
        resp = client.get("/healthz")
        assert resp.status_code == 200
        assert resp.json() == {"status": "ok", "model_loaded": True}

    def test_healthz_before_load(self, toy_artifact):
        unloaded = TestClient(create_app(ModelService([toy_artifact])))
        assert unloaded.get("/healthz").json()["model_loaded"] is False


class TestPredict:
    def test_unloaded_returns_503(self, toy_artifact):
        unloaded = TestClient(create_app(ModelService([toy_artifact])))
        resp = unloaded.post("/predict", content=png_bytes())
        assert resp.status_code == 503

    def test_returns_three_ranked_predictions(self, client):
        resp = client.post("/predict", content=png_bytes(cls=1, seed=3))
        assert resp.status_code == 200
        doc = resp.json()
        assert len(doc["predictions"]) == 3
        labels = [p["label"] for p in doc["predictions"]]
        assert len(set(labels)) == 3
        scores = [p["score"] for p in doc["predictions"]]
        assert scores == sorted(scores, reverse=True)
        assert sum(scores) == pytest.approx(1.0, abs=1e-5)
        assert doc["model_id"] == "vgg16"
        assert doc["latency_ms"] >= 0.0

    def test_empty_body_400(self, client):
        resp = client.post("/predict", content=b"")
        assert resp.status_code == 400
        assert "empty" in resp.json()["error"]

    def test_undecodable_body_400(self, client):
        resp = client.post("/predict", content=b"\x00\x01 not an image")
        assert resp.status_code == 400
        assert "undecodable" in resp.json()["error"]

    def test_oversize_body_413(self, toy_artifact):
        svc = ModelService([toy_artifact], max_body_bytes=1024)
        svc.load()
        small = TestClient(create_app(svc))
        resp = small.post("/predict", content=b"x" * 2048)
        assert resp.status_code == 413

    def test_deterministic_scores(self, client):
        body = png_bytes(cls=2, seed=9)
        a = client.post("/predict", content=body).json()["predictions"]
        b = client.post("/predict", content=body).json()["predictions"]
        assert a == b

    def test_state_not_mutated_by_requests(self, client, service):
        before = service.model_id
        client.post("/predict", content=png_bytes())
        client.post("/predict", content=b"junk")
        assert service.model_id == before and service.loaded
