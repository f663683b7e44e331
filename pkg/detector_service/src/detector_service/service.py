"""The HTTP service: one detection route and a health probe.

Request and response bodies follow the bridge protocol:

    POST /detect {"image_png_base64": str, "score_threshold": float}
      -> {"detections": [{"x1","y1","x2","y2","score","label"}...],
          "model": str}
    GET /health -> {"status": "ok", "model": str}

The request body is parsed by hand instead of through a schema model so
every malformed input (bad JSON, wrong field types, undecodable image)
comes back as a plain 400, as bridge clients expect. Inference failures
are 500 with the message in the body.
"""

from __future__ import annotations

import base64
import io
import json
import math
from dataclasses import dataclass

import numpy as np
import torch
from fastapi import FastAPI, Request, Response
from fastapi.responses import JSONResponse
from PIL import Image

from .registry import REGISTRY, build_model, label_name


@dataclass(frozen=True)
class ServiceConfig:
    """What to serve and where."""

    model: str = "faster-rcnn"
    weights: str = "none"
    device: str = "cpu"
    score_floor: float = 0.05
    host: str = "127.0.0.1"
    port: int = 8300

    def __post_init__(self):
        if self.model not in REGISTRY:
            raise ValueError(f"unknown model {self.model!r}; registry: {', '.join(REGISTRY)}")
        if not 0.0 <= self.score_floor <= 1.0:
            raise ValueError(f"score_floor must be in [0, 1], got {self.score_floor}")
        if not 0 <= self.port <= 65535:
            raise ValueError(f"port must be in [0, 65535], got {self.port}")


def _bad_request(message: str) -> JSONResponse:
    return JSONResponse({"error": message}, status_code=400)


def _decode_image(b64: str) -> torch.Tensor:
    """Base64 PNG (or any PIL-readable raster) to a float CHW tensor in [0, 1].

    Grayscale input is replicated to the three channels the models expect.
    """
    raw = base64.b64decode(b64, validate=True)
    with Image.open(io.BytesIO(raw)) as img:
        img.load()
        if img.mode not in ("L", "RGB"):
            img = img.convert("RGB")
        arr = np.asarray(img, dtype=np.float32) / 255.0
    if arr.ndim == 2:
        arr = np.stack([arr, arr, arr], axis=0)
    else:
        arr = arr.transpose(2, 0, 1)
    return torch.from_numpy(np.ascontiguousarray(arr))


def create_app(config: ServiceConfig) -> FastAPI:
    """Build the application with its model loaded and ready."""
    app = FastAPI(title="detector-service")
    app.state.config = config
    app.state.model = build_model(config.model, config.weights, config.device)
    device = torch.device(config.device)

    @app.get("/health")
    def health():
        return {"status": "ok", "model": config.model}

    @app.post("/detect")
    async def detect(request: Request) -> Response:
        body = await request.body()
        try:
            payload = json.loads(body)
        except (UnicodeDecodeError, json.JSONDecodeError):
            return _bad_request("body is not valid JSON")
        if not isinstance(payload, dict):
            return _bad_request("body must be a JSON object")
        b64 = payload.get("image_png_base64")
        if not isinstance(b64, str) or not b64:
            return _bad_request("image_png_base64 must be a nonempty string")
        threshold = payload.get("score_threshold", 0.0)
        if (
            isinstance(threshold, bool)
            or not isinstance(threshold, (int, float))
            or not math.isfinite(threshold)
            or not 0.0 <= threshold <= 1.0
        ):
            return _bad_request("score_threshold must be a number in [0, 1]")
        try:
            tensor = _decode_image(b64)
        except Exception:
            return _bad_request("image_png_base64 does not decode to an image")

        try:
            with torch.no_grad():
                output = app.state.model([tensor.to(device)])[0]
        except Exception as e:
            return JSONResponse({"error": f"inference failed: {e}"}, status_code=500)

        floor = max(config.score_floor, float(threshold))
        detections = []
        boxes = output["boxes"].cpu().numpy()
        scores = output["scores"].cpu().numpy()
        labels = output["labels"].cpu().numpy()
        for (x1, y1, x2, y2), score, label in zip(boxes, scores, labels):
            score = min(max(float(score), 0.0), 1.0)
            if score < floor:
                continue
            detections.append(
                {
                    "x1": float(x1),
                    "y1": float(y1),
                    "x2": float(x2),
                    "y2": float(y2),
                    "score": score,
                    "label": label_name(label),
                }
            )
        return JSONResponse({"detections": detections, "model": config.model})

    return app


def serve(config: ServiceConfig) -> None:
    """Run the service until interrupted."""
    import uvicorn

    uvicorn.run(create_app(config), host=config.host, port=config.port, log_level="info")
