"""Batch detect -> filter -> segment orchestration over a dataset.

Providers are pluggable: a remote HTTP service or a prediction file
that replays saved outputs. Remote results are cached on disk keyed by
image content and request fingerprint, so an identical re-run makes no
model calls. Images are processed concurrently with per-image fault
isolation; only a provider that stays unreachable through retries
aborts the run.
"""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import math
import os
import threading
import time
from concurrent.futures import FIRST_COMPLETED, ThreadPoolExecutor, wait
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Protocol, Sequence

import requests

from .detection import Detection
from .errors import (
    ColonyEvalError,
    ConfigError,
    ProtocolError,
    ProviderUnreachable,
    RemoteError,
    ValidationError,
)
from .geometry import BoundingBox, GeometryError, ImageDims, InstanceMask
from .ingest import (
    DatasetManifest,
    ImageRecord,
    PredictionSet,
    canonical_json,
    rle_from_payload,
    rle_to_payload,
)

log = logging.getLogger(__name__)

MAX_PARALLELISM = 32
RETRY_ATTEMPTS = 3
RETRY_BASE_DELAY = 0.1  # seconds; doubles per attempt


@dataclass(frozen=True)
class PipelineConfig:
    """Resolved settings for one batch run."""

    prompt_text: str = "bacterial colony"
    confidence_floor: float = 0.0
    iou_threshold: float = 0.2
    box_threshold: float = 0.3
    text_threshold: float = 0.25
    request_parallelism: int = 4
    cache_dir: Optional[Path] = None
    request_masks: bool = True

    def __post_init__(self) -> None:
        if not 0.0 < self.iou_threshold <= 1.0:
            raise ConfigError(f"iou_threshold must lie in (0, 1], got {self.iou_threshold}")
        for name in ("confidence_floor", "box_threshold", "text_threshold"):
            value = getattr(self, name)
            if not (isinstance(value, (int, float)) and math.isfinite(value)) or not 0.0 <= value <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {value}")
        if not 1 <= self.request_parallelism <= MAX_PARALLELISM:
            raise ConfigError(
                f"request_parallelism must lie in [1, {MAX_PARALLELISM}], "
                f"got {self.request_parallelism}"
            )
        if not self.prompt_text:
            raise ConfigError("prompt_text must be nonempty")

    def fingerprint(self, model_version: str) -> str:
        """Digest of every setting that can change a provider answer."""
        payload = {
            "prompt": self.prompt_text,
            "box_threshold": self.box_threshold,
            "text_threshold": self.text_threshold,
            "confidence_floor": self.confidence_floor,
            "request_masks": self.request_masks,
            "model_version": model_version,
        }
        return hashlib.sha256(canonical_json(payload).encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class ProviderResult:
    """One image's provider output."""

    image_id: str
    detections: tuple[Detection, ...]
    masks: Optional[tuple[InstanceMask, ...]]
    provider_latency_ms: float
    model_version: str

    def __post_init__(self) -> None:
        if self.masks is not None and len(self.masks) != len(self.detections):
            raise ValidationError(
                f"{self.image_id!r}: {len(self.masks)} masks for "
                f"{len(self.detections)} detections"
            )


@dataclass(frozen=True)
class ImageFailure:
    image_id: str
    stage: str  # read | detect | segment
    message: str


@dataclass(frozen=True)
class PipelineRun:
    """Outcome of a batch run: predictions plus per-image failures."""

    predictions: PredictionSet
    failures: tuple[ImageFailure, ...]
    completed: tuple[str, ...]
    aborted: bool = False
    abort_reason: Optional[str] = None

    @property
    def ok(self) -> bool:
        return not self.aborted and not self.failures


class PredictionProvider(Protocol):
    def model_version(self) -> str: ...

    def source_label(self, config: PipelineConfig) -> str: ...

    def fetch(
        self, record: ImageRecord, image_bytes: bytes, config: PipelineConfig
    ) -> ProviderResult: ...


class FileProvider:
    """Replays a saved PredictionSet instead of calling a model."""

    def __init__(self, predictions: PredictionSet, label: Optional[str] = None):
        self._predictions = predictions
        # keep the replayed set's own provenance unless overridden
        self._label = label if label is not None else predictions.source

    def model_version(self) -> str:
        return self._predictions.model_version

    def source_label(self, config: PipelineConfig) -> str:
        return self._label

    def fetch(
        self, record: ImageRecord, image_bytes: bytes, config: PipelineConfig
    ) -> ProviderResult:
        dets = self._predictions.detections.get(record.image_id, ())
        masks = self._predictions.masks.get(record.image_id)
        keep = [i for i, d in enumerate(dets) if d.confidence >= config.confidence_floor]
        return ProviderResult(
            image_id=record.image_id,
            detections=tuple(dets[i] for i in keep),
            masks=tuple(masks[i] for i in keep) if masks is not None else None,
            provider_latency_ms=0.0,
            model_version=self._predictions.model_version,
        )


def clip_box_to_frame(
    coords: Sequence[float], dims: ImageDims, image_id: str
) -> Optional[BoundingBox]:
    """Clamp raw provider coordinates to the frame; None if nothing remains."""
    x1, y1, x2, y2 = (float(v) for v in coords)
    cx1, cy1 = max(0.0, x1), max(0.0, y1)
    cx2, cy2 = min(float(dims.width), x2), min(float(dims.height), y2)
    if (cx1, cy1, cx2, cy2) != (x1, y1, x2, y2):
        log.warning(
            "%s: box [%g, %g, %g, %g] leaves the %dx%d frame, clipped",
            image_id, x1, y1, x2, y2, dims.width, dims.height,
        )
    if cx2 <= cx1 or cy2 <= cy1:
        log.warning("%s: box [%g, %g, %g, %g] lies outside the frame, dropped",
                    image_id, x1, y1, x2, y2)
        return None
    return BoundingBox(cx1, cy1, cx2, cy2)


class RemoteProvider:
    """HTTP client for the detect/segment service.

    Transport failures are retried with exponential backoff; any HTTP
    error status or malformed payload is a deterministic per-image
    failure and is never retried.
    """

    def __init__(
        self,
        base_url: str,
        timeout: float = 30.0,
        sleeper=time.sleep,
    ):
        self.base_url = base_url.rstrip("/")
        self.timeout = timeout
        self._sleeper = sleeper
        self._local = threading.local()
        self._model_version: Optional[str] = None
        self._version_lock = threading.Lock()

    def _session(self) -> requests.Session:
        if not hasattr(self._local, "session"):
            self._local.session = requests.Session()
        return self._local.session

    def _request(self, method: str, path: str, payload: Optional[dict] = None) -> dict:
        url = f"{self.base_url}{path}"
        last_exc: Optional[Exception] = None
        for attempt in range(RETRY_ATTEMPTS):
            if attempt:
                self._sleeper(RETRY_BASE_DELAY * 2 ** (attempt - 1))
            try:
                if method == "GET":
                    response = self._session().get(url, timeout=self.timeout)
                else:
                    response = self._session().post(url, json=payload, timeout=self.timeout)
            except (requests.ConnectionError, requests.Timeout) as exc:
                last_exc = exc
                log.warning("transport failure on %s (attempt %d/%d): %s",
                            path, attempt + 1, RETRY_ATTEMPTS, exc)
                continue
            if not 200 <= response.status_code < 300:
                message = ""
                try:
                    message = response.json().get("error", "")
                except ValueError:
                    message = response.text[:200]
                raise RemoteError(response.status_code, f"{path}: {message}")
            try:
                body = response.json()
            except ValueError as exc:
                raise ProtocolError(f"{path}: response is not JSON") from exc
            if not isinstance(body, dict):
                raise ProtocolError(f"{path}: response must be a JSON object")
            return body
        raise ProviderUnreachable(
            f"{url} unreachable after {RETRY_ATTEMPTS} attempts: {last_exc}"
        )

    def health(self) -> dict:
        return self._request("GET", "/v1/health")

    def model_version(self) -> str:
        with self._version_lock:
            if self._model_version is None:
                body = self.health()
                models = body.get("models")
                if not isinstance(models, dict) or not {"detector", "segmenter"} <= set(models):
                    raise ProtocolError("/v1/health: missing model identifiers")
                self._model_version = f"{models['detector']}+{models['segmenter']}"
            return self._model_version

    def source_label(self, config: PipelineConfig) -> str:
        # deliberately excludes the URL so saved outputs do not depend on
        # where the service happened to be listening
        return (
            "remote("
            f"prompt={config.prompt_text!r}, "
            f"box_threshold={config.box_threshold:g}, "
            f"text_threshold={config.text_threshold:g}, "
            f"confidence_floor={config.confidence_floor:g})"
        )

    def detect(
        self, record: ImageRecord, image_bytes: bytes, config: PipelineConfig
    ) -> tuple[list[Detection], str]:
        body = self._request(
            "POST",
            "/v1/detect",
            {
                "image": base64.b64encode(image_bytes).decode("ascii"),
                "prompt": config.prompt_text,
                "box_threshold": config.box_threshold,
                "text_threshold": config.text_threshold,
            },
        )
        raw = body.get("detections")
        if not isinstance(raw, list):
            raise ProtocolError(f"{record.image_id!r}: detections missing or not a list")
        detections: list[Detection] = []
        for entry in raw:
            if not isinstance(entry, dict):
                raise ProtocolError(f"{record.image_id!r}: detection entry not an object")
            try:
                coords = entry["box"]
                score = entry["score"]
            except KeyError as exc:
                raise ProtocolError(f"{record.image_id!r}: detection missing {exc}") from exc
            if not isinstance(coords, (list, tuple)) or len(coords) != 4:
                raise ProtocolError(f"{record.image_id!r}: box must be [x1, y1, x2, y2]")
            if not isinstance(score, (int, float)) or isinstance(score, bool) or not 0 <= score <= 1:
                raise ProtocolError(f"{record.image_id!r}: score {score!r} outside [0, 1]")
            phrase = entry.get("phrase")
            if phrase is not None and not isinstance(phrase, str):
                raise ProtocolError(f"{record.image_id!r}: phrase must be text")
            try:
                box = clip_box_to_frame(coords, record.dims, record.image_id)
            except (TypeError, ValueError, GeometryError) as exc:
                raise ProtocolError(f"{record.image_id!r}: bad box {coords!r}: {exc}") from exc
            if box is not None:
                detections.append(Detection(box=box, confidence=float(score), phrase=phrase))
        return detections, str(body.get("model_version", "unknown"))

    def segment(
        self, record: ImageRecord, image_bytes: bytes, boxes: Sequence[BoundingBox]
    ) -> list[InstanceMask]:
        body = self._request(
            "POST",
            "/v1/segment",
            {
                "image": base64.b64encode(image_bytes).decode("ascii"),
                "boxes": [list(b.as_xyxy()) for b in boxes],
            },
        )
        raw = body.get("masks")
        if not isinstance(raw, list):
            raise ProtocolError(f"{record.image_id!r}: masks missing or not a list")
        if len(raw) != len(boxes):
            raise ProtocolError(
                f"{record.image_id!r}: sent {len(boxes)} boxes, got {len(raw)} masks"
            )
        masks: list[InstanceMask] = []
        for payload in raw:
            try:
                mask = rle_from_payload(payload)
            except ValidationError as exc:
                raise ProtocolError(f"{record.image_id!r}: bad mask: {exc}") from exc
            if mask.dims != record.dims:
                raise ProtocolError(
                    f"{record.image_id!r}: mask dims {mask.dims.width}x{mask.dims.height} "
                    f"do not match the image"
                )
            masks.append(mask)
        return masks

    def fetch(
        self, record: ImageRecord, image_bytes: bytes, config: PipelineConfig
    ) -> ProviderResult:
        start = time.perf_counter()
        detections, model_version = self.detect(record, image_bytes, config)
        detections = [d for d in detections if d.confidence >= config.confidence_floor]
        masks: Optional[tuple[InstanceMask, ...]] = None
        if config.request_masks:
            if detections:
                masks = tuple(
                    self.segment(record, image_bytes, [d.box for d in detections])
                )
            else:
                masks = ()
        latency_ms = (time.perf_counter() - start) * 1000.0
        return ProviderResult(
            image_id=record.image_id,
            detections=tuple(detections),
            masks=masks,
            provider_latency_ms=latency_ms,
            model_version=model_version,
        )


class ResultCache:
    """Content-addressed store of per-image provider results.

    Keys combine the image byte digest with the request fingerprint; a
    corrupt entry reads as a miss. Writes go through a temp file and an
    atomic rename, so concurrent writers of one key cannot interleave.
    """

    def __init__(self, cache_dir: Path):
        self.cache_dir = Path(cache_dir)
        self.cache_dir.mkdir(parents=True, exist_ok=True)

    def _path(self, image_sha: str, fingerprint: str) -> Path:
        key = hashlib.sha256(f"{image_sha}:{fingerprint}".encode("ascii")).hexdigest()
        return self.cache_dir / f"{key}.json"

    def lookup(self, image_sha: str, fingerprint: str) -> Optional[ProviderResult]:
        path = self._path(image_sha, fingerprint)
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
            detections = tuple(
                Detection(
                    box=BoundingBox(*entry["box"]),
                    confidence=entry["score"],
                    phrase=entry.get("phrase"),
                )
                for entry in data["detections"]
            )
            masks = (
                tuple(rle_from_payload(m) for m in data["masks"])
                if data.get("masks") is not None
                else None
            )
            return ProviderResult(
                image_id=data["image_id"],
                detections=detections,
                masks=masks,
                provider_latency_ms=0.0,
                model_version=data["model_version"],
            )
        except FileNotFoundError:
            return None
        except (KeyError, TypeError, ValueError, ValidationError, GeometryError) as exc:
            log.warning("corrupt cache entry %s treated as a miss: %s", path.name, exc)
            return None

    def store(self, image_sha: str, fingerprint: str, result: ProviderResult) -> None:
        path = self._path(image_sha, fingerprint)
        payload = {
            "image_id": result.image_id,
            "model_version": result.model_version,
            "detections": [
                {
                    "box": list(d.box.as_xyxy()),
                    "score": d.confidence,
                    **({"phrase": d.phrase} if d.phrase is not None else {}),
                }
                for d in result.detections
            ],
            "masks": (
                [rle_to_payload(m) for m in result.masks]
                if result.masks is not None
                else None
            ),
        }
        tmp = path.with_suffix(f".tmp-{os.getpid()}-{threading.get_ident()}")
        tmp.write_text(canonical_json(payload), encoding="utf-8")
        os.replace(tmp, path)


def _process_image(
    record: ImageRecord,
    config: PipelineConfig,
    provider: PredictionProvider,
    cache: Optional[ResultCache],
    fingerprint: Optional[str],
) -> ProviderResult:
    image_bytes = Path(record.file_path).read_bytes()
    if cache is not None and fingerprint is not None:
        image_sha = hashlib.sha256(image_bytes).hexdigest()
        hit = cache.lookup(image_sha, fingerprint)
        if hit is not None:
            return hit
    result = provider.fetch(record, image_bytes, config)
    if cache is not None and fingerprint is not None:
        cache.store(image_sha, fingerprint, result)
    return result


def run_pipeline(
    manifest: DatasetManifest,
    config: PipelineConfig,
    provider: PredictionProvider,
) -> PipelineRun:
    """Run detect/segment over every manifest image.

    Per-image errors are recorded and the run continues; an unreachable
    provider stops the run and returns what completed. The returned
    PredictionSet is deterministic for a given provider state.
    """
    cache = ResultCache(config.cache_dir) if config.cache_dir is not None else None
    fingerprint = config.fingerprint(provider.model_version()) if cache is not None else None

    results: dict[str, ProviderResult] = {}
    failures: list[ImageFailure] = []
    aborted = False
    abort_reason: Optional[str] = None

    with ThreadPoolExecutor(max_workers=config.request_parallelism) as pool:
        pending = {
            pool.submit(_process_image, record, config, provider, cache, fingerprint): record
            for record in manifest.images
        }
        while pending:
            done, _ = wait(pending, return_when=FIRST_COMPLETED)
            for future in done:
                record = pending.pop(future)
                try:
                    result = future.result()
                except ProviderUnreachable as exc:
                    aborted = True
                    abort_reason = str(exc)
                except OSError as exc:
                    failures.append(ImageFailure(record.image_id, "read", str(exc)))
                    log.error("%s: cannot read image: %s", record.image_id, exc)
                except RemoteError as exc:
                    failures.append(
                        ImageFailure(record.image_id, "provider", f"HTTP {exc.status}: {exc}")
                    )
                    log.error("%s: provider rejected the request: %s", record.image_id, exc)
                except (ProtocolError, ValidationError) as exc:
                    failures.append(ImageFailure(record.image_id, "provider", str(exc)))
                    log.error("%s: malformed provider response: %s", record.image_id, exc)
                else:
                    results[record.image_id] = result
                    log.info(
                        "%s: %d detections%s",
                        record.image_id,
                        len(result.detections),
                        "" if result.masks is None else f", {len(result.masks)} masks",
                    )
            if aborted:
                for future in pending:
                    future.cancel()
                pool.shutdown(wait=True, cancel_futures=True)
                break

    completed = tuple(
        rec.image_id for rec in manifest.images if rec.image_id in results
    )
    detections = {image_id: results[image_id].detections for image_id in completed}
    masks = {
        image_id: results[image_id].masks
        for image_id in completed
        if results[image_id].masks is not None
    }
    model_versions = {results[image_id].model_version for image_id in completed}
    if len(model_versions) == 1:
        model_version = model_versions.pop()
    else:
        try:
            model_version = provider.model_version()
        except ColonyEvalError:
            # aborted before any answer arrived; nothing to report
            model_version = "unknown"
    predictions = PredictionSet(
        source=provider.source_label(config),
        model_version=model_version,
        detections=detections,
        masks=masks,
    )
    return PipelineRun(
        predictions=predictions,
        failures=tuple(sorted(failures, key=lambda f: f.image_id)),
        completed=completed,
        aborted=aborted,
        abort_reason=abort_reason,
    )
