"""Bridge protocol conformance of the /detect and /health routes.

Every test runs against a randomly initialized model: conformance is about
the wire contract, not about detection quality.
"""

import base64
import io
import json
import math

import numpy as np
import pytest
from fastapi.testclient import TestClient
from PIL import Image

from detector_service import ServiceConfig, create_app


def _png_b64(mode: str = "L", size: int = 64) -> str:
    ramp = np.linspace(0, 255, size * size, dtype=np.uint8).reshape(size, size)
    if mode == "RGB":
        array = np.stack([ramp, ramp, ramp], axis=2)
    else:
        array = ramp
    buf = io.BytesIO()
    Image.fromarray(array, mode=mode).save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


@pytest.fixture(scope="module")
def client():
    app = create_app(ServiceConfig(model="faster-rcnn", weights="none", score_floor=0.0))
    with TestClient(app) as c:
        yield c


def test_health(client):
    resp = client.get("/health")
    assert resp.status_code == 200
    assert resp.json() == {"status": "ok", "model": "faster-rcnn"}


def test_detect_schema(client):
    resp = client.post(
        "/detect", json={"image_png_base64": _png_b64(), "score_threshold": 0.0}
    )
    assert resp.status_code == 200
    data = resp.json()
    assert data["model"] == "faster-rcnn"
    assert isinstance(data["detections"], list)
    for det in data["detections"]:
        assert set(det) == {"x1", "y1", "x2", "y2", "score", "label"}
        for key in ("x1", "y1", "x2", "y2", "score"):
            assert isinstance(det[key], float) and math.isfinite(det[key])
        assert 0.0 <= det["score"] <= 1.0
        assert isinstance(det["label"], str)


def test_detect_is_deterministic(client):
    body = {"image_png_base64": _png_b64(), "score_threshold": 0.0}
    first = client.post("/detect", json=body)
    second = client.post("/detect", json=body)
    assert first.status_code == second.status_code == 200
    assert first.content == second.content


def test_grayscale_replication_matches_rgb(client):
    gray = client.post(
        "/detect", json={"image_png_base64": _png_b64("L"), "score_threshold": 0.0}
    )
    rgb = client.post(
        "/detect", json={"image_png_base64": _png_b64("RGB"), "score_threshold": 0.0}
    )
    assert gray.status_code == rgb.status_code == 200
    assert gray.json()["detections"] == rgb.json()["detections"]


def test_score_threshold_filters(client):
    image = _png_b64()
    loose = client.post(
        "/detect", json={"image_png_base64": image, "score_threshold": 0.0}
    ).json()["detections"]
    tight = client.post(
        "/detect", json={"image_png_base64": image, "score_threshold": 0.9}
    ).json()["detections"]
    assert len(tight) <= len(loose)
    assert all(det["score"] >= 0.9 for det in tight)


def test_config_score_floor_applies_below_request_threshold():
    app = create_app(ServiceConfig(model="faster-rcnn", weights="none", score_floor=0.5))
    with TestClient(app) as client:
        resp = client.post(
            "/detect", json={"image_png_base64": _png_b64(), "score_threshold": 0.0}
        )
        assert resp.status_code == 200
        assert all(det["score"] >= 0.5 for det in resp.json()["detections"])


def test_non_json_body_is_400(client):
    resp = client.post("/detect", content=b"\x00\x01 not json")
    assert resp.status_code == 400
    assert "JSON" in resp.json()["error"]


def test_json_array_body_is_400(client):
    resp = client.post("/detect", content=json.dumps([1, 2, 3]))
    assert resp.status_code == 400


def test_missing_image_field_is_400(client):
    resp = client.post("/detect", json={"score_threshold": 0.5})
    assert resp.status_code == 400
    assert "image_png_base64" in resp.json()["error"]


def test_invalid_base64_is_400(client):
    resp = client.post(
        "/detect", json={"image_png_base64": "@@not-base64@@", "score_threshold": 0.0}
    )
    assert resp.status_code == 400


def test_decodable_base64_of_garbage_is_400(client):
    junk = base64.b64encode(b"plain text, not a raster").decode("ascii")
    resp = client.post(
        "/detect", json={"image_png_base64": junk, "score_threshold": 0.0}
    )
    assert resp.status_code == 400
    assert "image" in resp.json()["error"]


@pytest.mark.parametrize("threshold", [True, "0.5", float("nan"), -0.1, 1.5])
def test_bad_threshold_is_400(client, threshold):
    body = json.dumps(
        {"image_png_base64": _png_b64(), "score_threshold": threshold}, allow_nan=True
    )
    resp = client.post("/detect", content=body)
    assert resp.status_code == 400
    assert "score_threshold" in resp.json()["error"]


def test_inference_failure_is_500(client):
    class Raiser:
        def __call__(self, batch):
            raise RuntimeError("deliberate test failure")

    app = client.app
    real = app.state.model
    app.state.model = Raiser()
    try:
        resp = client.post(
            "/detect", json={"image_png_base64": _png_b64(), "score_threshold": 0.0}
        )
        assert resp.status_code == 500
        assert "deliberate test failure" in resp.json()["error"]
    finally:
        app.state.model = real
