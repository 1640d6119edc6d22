"""Deterministic synthetic plates for demos and tests.

Three 64x64 images with hand-placed colony boxes, their ground-truth
masks, and a fixed stub prediction set. Every byte of the generated
files is reproducible: no randomness, no timestamps.
"""

from __future__ import annotations

from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image, ImageDraw

from .detection import Detection, GroundTruthBox
from .geometry import BoundingBox, ImageDims, InstanceMask, box_to_mask, mask_union
from .ingest import DatasetManifest, ImageRecord, PredictionSet, save_manifest, save_predictions

FIXTURE_DIMS = ImageDims(64, 64)

# image id -> ((x1, y1, x2, y2, class_id), ...)
FIXTURE_GT = {
    "plate_001": ((10, 10, 20, 20, 1), (30, 30, 40, 40, 1)),
    "plate_002": ((20, 20, 30, 30, 1),),
    "plate_003": ((5, 5, 15, 15, 2),),
}

# image id -> (((x1, y1, x2, y2), confidence), ...); ingestion order matters
STUB_DETECTIONS = {
    "plate_001": (((10, 10, 20, 20), 0.9), ((45, 45, 55, 55), 0.8)),
    "plate_002": (((21, 21, 31, 31), 0.7),),
    "plate_003": (((5, 5, 15, 15), 0.95),),
}

FIXTURE_CATEGORIES = {1: "escherichia coli", 2: "staphylococcus aureus"}

STUB_MODEL_VERSION = "stub-detector-0.1+stub-segmenter-0.1"

_BACKGROUND = 232
_COLONY = 64


def gt_boxes(image_id: str) -> tuple[GroundTruthBox, ...]:
    return tuple(
        GroundTruthBox(BoundingBox(x1, y1, x2, y2), class_id)
        for x1, y1, x2, y2, class_id in FIXTURE_GT[image_id]
    )


def gt_mask(image_id: str) -> InstanceMask:
    boxes = [BoundingBox(*entry[:4]) for entry in FIXTURE_GT[image_id]]
    return mask_union([box_to_mask(b, FIXTURE_DIMS) for b in boxes], dims=FIXTURE_DIMS)


def plate_image(image_id: str) -> Image.Image:
    """Light plate with one dark disk inscribed in each colony box."""
    img = Image.new("RGB", (FIXTURE_DIMS.width, FIXTURE_DIMS.height), (_BACKGROUND,) * 3)
    draw = ImageDraw.Draw(img)
    for x1, y1, x2, y2, _ in FIXTURE_GT[image_id]:
        draw.ellipse((x1, y1, x2 - 1, y2 - 1), fill=(_COLONY,) * 3)
    return img


def mask_image(mask: InstanceMask) -> Image.Image:
    arr = np.where(mask.to_array(), 255, 0).astype(np.uint8)
    return Image.fromarray(arr, mode="L")


def stub_detections(image_id: str) -> tuple[Detection, ...]:
    return tuple(
        Detection(BoundingBox(*coords), confidence)
        for coords, confidence in STUB_DETECTIONS[image_id]
    )


def stub_masks(image_id: str) -> tuple[InstanceMask, ...]:
    # one filled box per detection, mirroring a box-prompted segmenter
    return tuple(
        box_to_mask(det.box, FIXTURE_DIMS) for det in stub_detections(image_id)
    )


def stub_prediction_set(source: str = "stub", with_masks: bool = True) -> PredictionSet:
    detections = {image_id: stub_detections(image_id) for image_id in FIXTURE_GT}
    masks = (
        {image_id: stub_masks(image_id) for image_id in FIXTURE_GT} if with_masks else {}
    )
    return PredictionSet(
        source=source,
        model_version=STUB_MODEL_VERSION,
        detections=detections,
        masks=masks,
    )


def build_demo_dataset(
    root: Path, with_masks: bool = True, predictions_file: Optional[str] = "stub_predictions.json"
) -> Path:
    """Write images, masks, manifest, and a stub prediction file under root.

    Returns the manifest path. Layout: images/, masks/, manifest.json,
    stub_predictions.json.
    """
    root = Path(root)
    image_dir = root / "images"
    mask_dir = root / "masks"
    image_dir.mkdir(parents=True, exist_ok=True)
    if with_masks:
        mask_dir.mkdir(parents=True, exist_ok=True)

    records = []
    manifest_gt_boxes = {}
    manifest_gt_masks = {}
    mask_files = {}
    for image_id in sorted(FIXTURE_GT):
        image_path = image_dir / f"{image_id}.png"
        plate_image(image_id).save(image_path)
        records.append(
            ImageRecord(
                image_id=image_id,
                file_path=str(image_path),
                dims=FIXTURE_DIMS,
                class_focus=FIXTURE_GT[image_id][0][4],
            )
        )
        manifest_gt_boxes[image_id] = gt_boxes(image_id)
        if with_masks:
            mask = gt_mask(image_id)
            mask_path = mask_dir / f"{image_id}.png"
            mask_image(mask).save(mask_path)
            manifest_gt_masks[image_id] = mask
            mask_files[image_id] = str(mask_path)

    manifest = DatasetManifest(
        name="synthetic-plates",
        categories=FIXTURE_CATEGORIES,
        images=tuple(records),
        gt_boxes=manifest_gt_boxes,
        gt_masks=manifest_gt_masks,
        mask_files=mask_files,
    )
    manifest_path = root / "manifest.json"
    save_manifest(manifest, manifest_path)
    if predictions_file is not None:
        save_predictions(stub_prediction_set(), root / predictions_file)
    return manifest_path
