"""The HTTP surface: /v1/detect, /v1/segment, /v1/health.

Request bodies are validated by hand so every error response carries the
wire contract's {"error": text} shape (FastAPI's default would be
{"detail": ...}). A mutex serializes backend calls: one inference at a
time per device, but the server itself stays safe under concurrent
clients.
"""

from __future__ import annotations

import base64
import binascii
import io
import threading
from typing import Protocol

import numpy as np
from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse
from PIL import Image, UnidentifiedImageError

from .rle import encode

DILATION_FRACTION = 0.10


class InferenceBackend(Protocol):
    detector_version: str
    segmenter_version: str

    def detect(
        self, image: np.ndarray, prompt: str, box_threshold: float, text_threshold: float
    ) -> list[dict]: ...

    def segment(self, image: np.ndarray, boxes) -> list[np.ndarray]: ...


class RequestError(Exception):
    """Client-side problem; becomes a 400 with {"error": ...}."""


def _error(status: int, message: str) -> JSONResponse:
    return JSONResponse(status_code=status, content={"error": message})


def decode_image(payload: dict) -> np.ndarray:
    raw = payload.get("image")
    if not isinstance(raw, str):
        raise RequestError("'image' must be a base64 string")
    try:
        blob = base64.b64decode(raw, validate=True)
    except (binascii.Error, ValueError) as exc:
        raise RequestError(f"image is not valid base64: {exc}") from exc
    try:
        with Image.open(io.BytesIO(blob)) as img:
            return np.asarray(img.convert("RGB"))
    except (UnidentifiedImageError, OSError) as exc:
        raise RequestError(f"image bytes are not a decodable image: {exc}") from exc


def _require_fraction(payload: dict, key: str) -> float:
    value = payload.get(key)
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise RequestError(f"'{key}' must be a number")
    value = float(value)
    if not 0.0 <= value <= 1.0:
        raise RequestError(f"'{key}' must lie in [0, 1], got {value}")
    return value


def parse_boxes(payload: dict, width: int, height: int) -> list[tuple[float, float, float, float]]:
    raw = payload.get("boxes")
    if not isinstance(raw, list) or not raw:
        raise RequestError("'boxes' must be a non-empty list")
    boxes = []
    for index, entry in enumerate(raw):
        if not isinstance(entry, (list, tuple)) or len(entry) != 4:
            raise RequestError(f"box {index} must be [x1, y1, x2, y2]")
        try:
            x1, y1, x2, y2 = (float(v) for v in entry)
        except (TypeError, ValueError) as exc:
            raise RequestError(f"box {index} has non-numeric coordinates") from exc
        x1, x2 = max(0.0, x1), min(float(width), x2)
        y1, y2 = max(0.0, y1), min(float(height), y2)
        if x2 <= x1 or y2 <= y1:
            raise RequestError(f"box {index} lies outside the image frame after clipping")
        boxes.append((x1, y1, x2, y2))
    return boxes


def dilated_box_raster(box, width: int, height: int) -> np.ndarray:
    """Pixel raster of the box grown by 10% of its size on every side."""
    x1, y1, x2, y2 = box
    dx = (x2 - x1) * DILATION_FRACTION
    dy = (y2 - y1) * DILATION_FRACTION
    gx1, gx2 = max(0.0, x1 - dx), min(float(width), x2 + dx)
    gy1, gy2 = max(0.0, y1 - dy), min(float(height), y2 + dy)
    cols = np.arange(width) + 0.5
    rows = np.arange(height) + 0.5
    in_cols = (cols >= gx1) & (cols < gx2)
    in_rows = (rows >= gy1) & (rows < gy2)
    return np.outer(in_rows, in_cols)


def create_app(backend: InferenceBackend) -> FastAPI:
    app = FastAPI(title="colonyserve", docs_url=None, redoc_url=None)
    inference_lock = threading.Lock()

    async def read_body(request: Request) -> dict:
        try:
            payload = await request.json()
        except Exception as exc:
            raise RequestError(f"body is not valid JSON: {exc}") from exc
        if not isinstance(payload, dict):
            raise RequestError("body must be a JSON object")
        return payload

    @app.exception_handler(RequestError)
    async def _handle_request_error(request: Request, exc: RequestError):
        return _error(400, str(exc))

    @app.exception_handler(Exception)
    async def _handle_model_error(request: Request, exc: Exception):
        return _error(500, f"inference failed: {exc}")

    @app.get("/v1/health")
    async def health():
        return {
            "status": "ok",
            "models": {
                "detector": backend.detector_version,
                "segmenter": backend.segmenter_version,
            },
        }

    @app.post("/v1/detect")
    async def detect(request: Request):
        payload = await read_body(request)
        image = decode_image(payload)
        prompt = payload.get("prompt")
        if not isinstance(prompt, str) or not prompt.strip():
            raise RequestError("'prompt' must be a non-empty string")
        box_threshold = _require_fraction(payload, "box_threshold")
        text_threshold = _require_fraction(payload, "text_threshold")
        with inference_lock:
            detections = backend.detect(image, prompt, box_threshold, text_threshold)
        height, width = image.shape[:2]
        for det in detections:
            x1, y1, x2, y2 = det["box"]
            det["box"] = [
                float(np.clip(x1, 0, width)),
                float(np.clip(y1, 0, height)),
                float(np.clip(x2, 0, width)),
                float(np.clip(y2, 0, height)),
            ]
        return {"model_version": backend.detector_version, "detections": detections}

    @app.post("/v1/segment")
    async def segment(request: Request):
        payload = await read_body(request)
        image = decode_image(payload)
        height, width = image.shape[:2]
        boxes = parse_boxes(payload, width, height)
        with inference_lock:
            masks = backend.segment(image, boxes)
        encoded = []
        for box, mask in zip(boxes, masks):
            mask = np.asarray(mask, dtype=bool)
            if mask.shape != (height, width):
                raise RuntimeError(
                    f"backend returned mask shape {mask.shape} for a "
                    f"{height}x{width} image"
                )
            # sanity envelope: foreground never escapes the dilated prompt box
            mask = mask & dilated_box_raster(box, width, height)
            encoded.append(encode(mask))
        return {"model_version": backend.segmenter_version, "masks": encoded}

    return app
