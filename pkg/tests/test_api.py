"""
Tests for the HTTP API.
"""

import pytest
from fastapi.testclient import TestClient

from app.core.config import settings
from app.kernels.tensor import make_generator
from app.main import app
from app.models.detector import LffnDetector
from app.services.checkpoint import Checkpoint, save_checkpoint
from tests.helpers import detection, ground_truth


def _payload(models):
    return [m.model_dump(mode="json") for m in models]


@pytest.fixture
def client(monkeypatch):
    monkeypatch.setattr(settings, "checkpoint_path", None)
    with TestClient(app) as test_client:
        yield test_client


@pytest.fixture
def served_client(monkeypatch, tiny_config, tmp_path):
    detector = LffnDetector.initialize(tiny_config, make_generator(tiny_config.seed))
    path = save_checkpoint(Checkpoint.from_state(detector, 3), tmp_path / "served.ckpt")
    monkeypatch.setattr(settings, "checkpoint_path", path)
    with TestClient(app) as test_client:
        yield test_client


class TestHealth:
    def test_root(self, client):
        body = client.get("/").json()
        assert body["status"] == "running"
        assert body["detector_loaded"] is False

    def test_health_is_degraded_without_checkpoint(self, client):
        body = client.get("/health").json()
        assert body["status"] == "degraded"
        assert body["mode"] is None

    def test_readiness(self, client):
        response = client.get("/readiness")
        assert response.status_code == 503
        assert response.json() == {"ready": False}

    def test_liveness(self, client):
        assert client.get("/liveness").json() == {"alive": True}


class TestNms:
    def test_suppresses_overlaps(self, client):
        dets = [detection(0, 0, 10, 10, 0.9), detection(1, 1, 11, 11, 0.8), detection(30, 30, 40, 40, 0.7)]
        response = client.post("/nms", json={"detections": _payload(dets), "config": {"threshold": 0.3}})
        assert response.status_code == 200
        body = response.json()
        assert body["removed"] == 1
        assert [d["score"] for d in body["detections"]] == [0.9, 0.7]

    def test_stochastic_requests_are_reproducible(self, client):
        dets = [detection(0, 0, 10, 10, 0.9), detection(2, 0, 12, 10, 0.8), detection(4, 0, 14, 10, 0.7)]
        request = {"detections": _payload(dets), "config": {"mode": "stochastic", "seed": 11}}
        assert client.post("/nms", json=request).json() == client.post("/nms", json=request).json()

    def test_invalid_threshold(self, client):
        response = client.post("/nms", json={"detections": [], "config": {"threshold": 1.5}})
        assert response.status_code == 422


class TestEvaluate:
    def test_perfect_detection(self, client):
        request = {
            "detections": _payload([detection(0, 0, 10, 10, 0.9)]),
            "ground_truths": _payload([ground_truth(0, 0, 10, 10)]),
        }
        response = client.post("/evaluate", json=request)
        assert response.status_code == 200
        assert response.json()["mean_ap"] == pytest.approx(1.0)

    def test_nothing_to_evaluate(self, client):
        response = client.post("/evaluate", json={})
        assert response.status_code == 400
        assert response.json()["error_code"] == "CONFIG_ERROR"


class TestCost:
    def test_builtin_spec(self, client):
        body = client.post("/cost", json={"spec": "resnet50"}).json()
        assert body["total_macs"] == pytest.approx(3.86e9, rel=0.01)
        assert sum(s["macs"] for s in body["stages"]) == body["total_macs"]

    def test_three_dimensional_input_shape(self, client):
        body = client.post("/cost", json={"spec": "toy", "input_shape": [3, 64, 64]}).json()
        assert body["input_shape"] == [1, 3, 64, 64]

    def test_unknown_spec(self, client):
        response = client.post("/cost", json={"spec": "vgg16"})
        assert response.status_code == 400

    def test_bad_input_shape_rank(self, client):
        assert client.post("/cost", json={"spec": "toy", "input_shape": [64, 64]}).status_code == 422


class TestDetect:
    def test_unavailable_without_checkpoint(self, client):
        response = client.post("/detect", json={"image": [[[0.5]], [[0.5]], [[0.5]]]})
        assert response.status_code == 503

    def test_served_detector(self, served_client):
        assert served_client.get("/readiness").status_code == 200
        image = [[[0.5] * 64 for _ in range(64)] for _ in range(3)]
        response = served_client.post("/detect", json={"image": image})
        assert response.status_code == 200
        body = response.json()
        assert body["checkpoint_iteration"] == 3
        assert len(body["detections"]) <= 30

    def test_image_needs_three_channels(self, served_client):
        response = served_client.post("/detect", json={"image": [[[0.5]]]})
        assert response.status_code == 422
