"""Dataset and prediction file I/O.

Canonical on-disk forms:
  - manifest: JSON with categories, image records, corner-form boxes
    stored as COCO [x, y, w, h] plus per-image mask file paths
  - predictions: JSON keyed by image id, boxes in corner form, masks as
    row-major RLE
  - pre-annotation export: COCO annotation JSON, masks as column-major
    uncompressed RLE

All writers emit sorted-key JSON with a trailing newline so identical
content yields identical bytes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np
from PIL import Image

from .detection import Detection, GroundTruthBox
from .errors import ConfigError, GeometryError, ValidationError
from .geometry import BoundingBox, ImageDims, InstanceMask


@dataclass(frozen=True)
class ImageRecord:
    """One plate photo: id, location on disk, dims, optional focal class."""

    image_id: str
    file_path: str
    dims: ImageDims
    class_focus: Optional[int] = None


@dataclass(frozen=True)
class DatasetManifest:
    """Immutable view of a dataset: images plus box and/or mask ground truth."""

    name: str
    categories: Mapping[int, str]
    images: tuple[ImageRecord, ...]
    gt_boxes: Mapping[str, tuple[GroundTruthBox, ...]]
    gt_masks: Mapping[str, InstanceMask]
    mask_files: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        ids = [rec.image_id for rec in self.images]
        if len(ids) != len(set(ids)):
            raise ValidationError("duplicate image ids in manifest")
        known = set(ids)
        for image_id, boxes in self.gt_boxes.items():
            if image_id not in known:
                raise ValidationError(f"gt boxes reference unknown image {image_id!r}")
            for gt in boxes:
                if gt.class_id not in self.categories:
                    raise ValidationError(
                        f"image {image_id!r} uses undeclared category {gt.class_id}"
                    )
        for image_id in self.gt_masks:
            if image_id not in known:
                raise ValidationError(f"gt mask references unknown image {image_id!r}")
        if not self.has_boxes and not self.has_masks:
            raise ValidationError("dataset carries neither box nor mask ground truth")
        for rec in self.images:
            mask = self.gt_masks.get(rec.image_id)
            if mask is not None and mask.dims != rec.dims:
                raise GeometryError(
                    f"mask dims {mask.dims} do not match image {rec.image_id!r} {rec.dims}"
                )

    @property
    def has_boxes(self) -> bool:
        return any(self.gt_boxes.values())

    @property
    def has_masks(self) -> bool:
        return bool(self.gt_masks)

    @property
    def image_ids(self) -> list[str]:
        return [rec.image_id for rec in self.images]

    def record(self, image_id: str) -> ImageRecord:
        for rec in self.images:
            if rec.image_id == image_id:
                return rec
        raise KeyError(image_id)


@dataclass(frozen=True)
class PredictionSet:
    """Provider output for a dataset: detections and optional aligned masks."""

    source: str
    model_version: str
    detections: Mapping[str, tuple[Detection, ...]]
    masks: Mapping[str, tuple[InstanceMask, ...]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        for image_id, mask_list in self.masks.items():
            dets = self.detections.get(image_id, ())
            if len(mask_list) != len(dets):
                raise ValidationError(
                    f"image {image_id!r} has {len(mask_list)} masks for {len(dets)} detections"
                )

    @property
    def has_masks(self) -> bool:
        return bool(self.masks)

    def apply_confidence_floor(self, floor: float) -> "PredictionSet":
        """Drop detections (and their masks) scoring below the floor."""
        if floor <= 0.0:
            return self
        detections: dict[str, tuple[Detection, ...]] = {}
        masks: dict[str, tuple[InstanceMask, ...]] = {}
        for image_id, dets in self.detections.items():
            keep = [i for i, d in enumerate(dets) if d.confidence >= floor]
            detections[image_id] = tuple(dets[i] for i in keep)
            if image_id in self.masks:
                masks[image_id] = tuple(self.masks[image_id][i] for i in keep)
        return replace(self, detections=detections, masks=masks)


@dataclass(frozen=True)
class ImportResult:
    """A built manifest plus the records the importer refused."""

    manifest: DatasetManifest
    rejected: tuple[tuple[str, str], ...]  # (record description, reason)
    source_records: int

    @property
    def imported(self) -> int:
        return self.source_records - len(self.rejected)


def canonical_json(payload: object) -> str:
    return json.dumps(payload, sort_keys=True, indent=2) + "\n"


def write_json(path: Path, payload: object) -> None:
    Path(path).write_text(canonical_json(payload), encoding="utf-8")


def read_json(path: Path) -> object:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except FileNotFoundError:
        raise
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: not valid JSON ({exc})") from exc


# ---------------------------------------------------------------- RLE forms


def rle_to_payload(mask: InstanceMask) -> dict:
    return {
        "size": [mask.height, mask.width],
        "counts": list(mask.runs),
        "order": "row-major",
    }


def rle_from_payload(payload: object) -> InstanceMask:
    if not isinstance(payload, dict):
        raise ValidationError("rle payload must be an object")
    try:
        h, w = payload["size"]
        counts = payload["counts"]
        order = payload.get("order", "row-major")
    except (KeyError, TypeError, ValueError) as exc:
        raise ValidationError(f"malformed rle payload: {exc}") from exc
    if order != "row-major":
        raise ValidationError(f"unsupported rle order {order!r}")
    if not isinstance(counts, list) or not all(isinstance(c, int) for c in counts):
        raise ValidationError("rle counts must be a list of integers")
    try:
        return InstanceMask(width=w, height=h, runs=tuple(counts))
    except GeometryError as exc:
        raise ValidationError(f"invalid rle: {exc}") from exc


def rle_to_coco_counts(mask: InstanceMask) -> list[int]:
    """Re-encode row-major runs as COCO's column-major uncompressed counts."""
    # COCO counts run down columns; transposing the raster reduces this
    # to the row-major encoder
    return list(InstanceMask.from_array(mask.to_array().T).runs)


def coco_counts_to_rle(counts: Sequence[int], height: int, width: int) -> InstanceMask:
    """Decode COCO column-major uncompressed counts to a row-major mask."""
    column_major = InstanceMask(width=height, height=width, runs=tuple(counts))
    return InstanceMask.from_array(column_major.to_array().T)


# ------------------------------------------------------------- COCO import


def _unique_stems(file_names: Sequence[str]) -> bool:
    stems = [Path(f).stem for f in file_names]
    return len(stems) == len(set(stems))


def import_coco_boxes(annotation_file: Path, image_root: Path) -> ImportResult:
    """Build a manifest from a COCO-style box annotation file.

    Zero-area annotations are rejected record by record; an annotation
    naming a missing image aborts the import.
    """
    data = read_json(annotation_file)
    if not isinstance(data, dict):
        raise ValidationError(f"{annotation_file}: expected a JSON object")
    for key in ("images", "annotations", "categories"):
        if key not in data or not isinstance(data[key], list):
            raise ValidationError(f"{annotation_file}: missing or malformed {key!r} list")

    categories: dict[int, str] = {}
    for cat in data["categories"]:
        try:
            categories[int(cat["id"])] = str(cat["name"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"malformed category entry {cat!r}") from exc

    image_root = Path(image_root)
    use_stems = _unique_stems([img.get("file_name", "") for img in data["images"]])
    records: list[ImageRecord] = []
    id_map: dict[object, str] = {}
    for img in data["images"]:
        try:
            numeric_id = img["id"]
            file_name = str(img["file_name"])
            dims = ImageDims(int(img["width"]), int(img["height"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"malformed image entry {img!r}") from exc
        image_id = Path(file_name).stem if use_stems else str(numeric_id)
        id_map[numeric_id] = image_id
        records.append(
            ImageRecord(
                image_id=image_id,
                file_path=str(image_root / file_name),
                dims=dims,
                class_focus=img.get("focus_class"),
            )
        )

    gt_boxes: dict[str, list[GroundTruthBox]] = {rec.image_id: [] for rec in records}
    rejected: list[tuple[str, str]] = []
    for ann in data["annotations"]:
        label = f"annotation {ann.get('id', '?')}"
        try:
            numeric_image = ann["image_id"]
            category_id = int(ann["category_id"])
            x, y, w, h = (float(v) for v in ann["bbox"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"malformed {label}: {exc}") from exc
        if numeric_image not in id_map:
            raise ValidationError(f"{label} references unknown image id {numeric_image!r}")
        if category_id not in categories:
            raise ValidationError(f"{label} references undeclared category {category_id}")
        if w <= 0 or h <= 0:
            rejected.append((label, f"zero-area box [{x}, {y}, {w}, {h}]"))
            continue
        gt_boxes[id_map[numeric_image]].append(
            GroundTruthBox(BoundingBox(x, y, x + w, y + h), category_id)
        )

    manifest = DatasetManifest(
        name=str(data.get("name", Path(annotation_file).stem)),
        categories=categories,
        images=tuple(records),
        gt_boxes={k: tuple(v) for k, v in gt_boxes.items()},
        gt_masks={},
    )
    return ImportResult(
        manifest=manifest,
        rejected=tuple(rejected),
        source_records=len(data["annotations"]),
    )


# ------------------------------------------------------------- mask import


def load_mask_png(path: Path) -> InstanceMask:
    """Read a mask raster; any nonzero pixel is foreground."""
    with Image.open(path) as img:
        arr = np.asarray(img.convert("L"))
    return InstanceMask.from_array(arr > 0)


def image_file_dims(path: Path) -> ImageDims:
    with Image.open(path) as img:
        return ImageDims(img.width, img.height)


_IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}


def import_mask_folder(
    mask_root: Path,
    image_root: Path,
    pairing_pattern: str = "{stem}.png",
    dataset_name: str = "masks",
) -> ImportResult:
    """Pair each image with one mask raster of identical dims.

    pairing_pattern maps an image file stem to its mask file name.
    """
    if "{stem}" not in pairing_pattern:
        raise ConfigError(f"pairing pattern {pairing_pattern!r} lacks a {{stem}} slot")
    image_root = Path(image_root)
    mask_root = Path(mask_root)
    image_files = sorted(
        p for p in image_root.iterdir() if p.suffix.lower() in _IMAGE_SUFFIXES
    )
    if not image_files:
        raise ValidationError(f"no image files under {image_root}")

    records: list[ImageRecord] = []
    gt_masks: dict[str, InstanceMask] = {}
    mask_files: dict[str, str] = {}
    rejected: list[tuple[str, str]] = []
    paired_masks: set[Path] = set()
    for image_file in image_files:
        stem = image_file.stem
        candidates = sorted(mask_root.glob(pairing_pattern.format(stem=stem)))
        if len(candidates) > 1:
            raise ConfigError(
                f"image {image_file.name} pairs with {len(candidates)} masks: "
                + ", ".join(c.name for c in candidates)
            )
        if not candidates:
            rejected.append((image_file.name, "no mask file"))
            continue
        mask_file = candidates[0]
        paired_masks.add(mask_file)
        dims = image_file_dims(image_file)
        mask = load_mask_png(mask_file)
        if mask.dims != dims:
            raise GeometryError(
                f"mask {mask_file.name} is {mask.dims.width}x{mask.dims.height} but "
                f"image {image_file.name} is {dims.width}x{dims.height}"
            )
        records.append(ImageRecord(image_id=stem, file_path=str(image_file), dims=dims))
        gt_masks[stem] = mask
        mask_files[stem] = str(mask_file)

    strays = sorted(set(mask_root.glob(pairing_pattern.format(stem="*"))) - paired_masks)
    for stray in strays:
        rejected.append((stray.name, "mask without an image"))

    manifest = DatasetManifest(
        name=dataset_name,
        categories={},
        images=tuple(records),
        gt_boxes={},
        gt_masks=gt_masks,
        mask_files=mask_files,
    )
    return ImportResult(
        manifest=manifest,
        rejected=tuple(rejected),
        source_records=len(image_files) + len(strays),
    )


# ------------------------------------------------------ manifest round trip


def save_manifest(manifest: DatasetManifest, path: Path) -> None:
    payload = {
        "name": manifest.name,
        "categories": [
            {"id": cid, "name": name} for cid, name in sorted(manifest.categories.items())
        ],
        "images": [
            {
                "id": rec.image_id,
                "file": rec.file_path,
                "width": rec.dims.width,
                "height": rec.dims.height,
                **({"focus_class": rec.class_focus} if rec.class_focus is not None else {}),
            }
            for rec in manifest.images
        ],
        "boxes": {
            image_id: [
                {
                    "bbox": [
                        gt.box.x_min,
                        gt.box.y_min,
                        gt.box.x_max - gt.box.x_min,
                        gt.box.y_max - gt.box.y_min,
                    ],
                    "category_id": gt.class_id,
                }
                for gt in boxes
            ]
            for image_id, boxes in sorted(manifest.gt_boxes.items())
            if boxes
        },
        "masks": dict(sorted(manifest.mask_files.items())),
    }
    write_json(path, payload)


def load_manifest(path: Path) -> DatasetManifest:
    data = read_json(path)
    if not isinstance(data, dict):
        raise ValidationError(f"{path}: expected a JSON object")
    try:
        categories = {int(c["id"]): str(c["name"]) for c in data.get("categories", [])}
        records = tuple(
            ImageRecord(
                image_id=str(img["id"]),
                file_path=str(img["file"]),
                dims=ImageDims(int(img["width"]), int(img["height"])),
                class_focus=img.get("focus_class"),
            )
            for img in data["images"]
        )
        boxes_raw = data.get("boxes", {})
        masks_raw = data.get("masks", {})
    except (KeyError, TypeError, ValueError) as exc:
        raise ValidationError(f"{path}: malformed manifest ({exc})") from exc

    gt_boxes: dict[str, tuple[GroundTruthBox, ...]] = {}
    for image_id, entries in boxes_raw.items():
        parsed = []
        for entry in entries:
            try:
                x, y, w, h = (float(v) for v in entry["bbox"])
                category_id = int(entry["category_id"])
            except (KeyError, TypeError, ValueError) as exc:
                raise ValidationError(f"{path}: malformed box for {image_id!r}") from exc
            if w <= 0 or h <= 0:
                raise ValidationError(f"{path}: zero-area box for {image_id!r}")
            parsed.append(GroundTruthBox(BoundingBox(x, y, x + w, y + h), category_id))
        gt_boxes[image_id] = tuple(parsed)

    gt_masks: dict[str, InstanceMask] = {}
    mask_files: dict[str, str] = {}
    for image_id, mask_path in masks_raw.items():
        resolved = Path(mask_path)
        if not resolved.is_absolute():
            resolved = Path(path).parent / resolved
        gt_masks[image_id] = load_mask_png(resolved)
        mask_files[image_id] = str(mask_path)

    return DatasetManifest(
        name=str(data.get("name", Path(path).stem)),
        categories=categories,
        images=records,
        gt_boxes=gt_boxes,
        gt_masks=gt_masks,
        mask_files=mask_files,
    )


# ---------------------------------------------------- prediction round trip


def save_predictions(preds: PredictionSet, path: Path) -> None:
    images: dict[str, dict] = {}
    for image_id in sorted(preds.detections):
        entry: dict = {
            "detections": [
                {
                    "box": list(det.box.as_xyxy()),
                    "score": det.confidence,
                    **({"phrase": det.phrase} if det.phrase is not None else {}),
                }
                for det in preds.detections[image_id]
            ]
        }
        if image_id in preds.masks:
            entry["masks"] = [rle_to_payload(m) for m in preds.masks[image_id]]
        images[image_id] = entry
    write_json(
        path,
        {"source": preds.source, "model_version": preds.model_version, "images": images},
    )


def load_predictions(path: Path, manifest: DatasetManifest) -> PredictionSet:
    """Read and validate a prediction file against a manifest.

    Out-of-range confidences, boxes leaving the image frame, mask/box
    count or dims mismatches, and unknown image ids are all rejected.
    """
    data = read_json(path)
    if not isinstance(data, dict) or "images" not in data:
        raise ValidationError(f"{path}: expected an object with an 'images' map")
    if not isinstance(data["images"], dict):
        raise ValidationError(f"{path}: 'images' must be an object")

    known = {rec.image_id: rec for rec in manifest.images}
    detections: dict[str, tuple[Detection, ...]] = {}
    masks: dict[str, tuple[InstanceMask, ...]] = {}
    for image_id, entry in data["images"].items():
        if image_id not in known:
            raise ValidationError(f"{path}: predictions for unknown image {image_id!r}")
        record = known[image_id]
        if not isinstance(entry, dict):
            raise ValidationError(f"{path}: image entry {image_id!r} must be an object")
        det_payloads = entry.get("detections", [])
        if not isinstance(det_payloads, list) or not all(
            isinstance(d, dict) for d in det_payloads
        ):
            raise ValidationError(f"{path}: detections of {image_id!r} must be objects")
        dets: list[Detection] = []
        for det_payload in det_payloads:
            try:
                x1, y1, x2, y2 = (float(v) for v in det_payload["box"])
                score = det_payload["score"]
            except (KeyError, TypeError, ValueError) as exc:
                raise ValidationError(
                    f"{path}: malformed detection on {image_id!r} ({exc})"
                ) from exc
            try:
                box = BoundingBox(x1, y1, x2, y2)
            except GeometryError as exc:
                raise ValidationError(f"{path}: bad box on {image_id!r}: {exc}") from exc
            if not record.dims.contains_box(box):
                raise ValidationError(
                    f"{path}: box {box.as_xyxy()} leaves the {record.dims.width}x"
                    f"{record.dims.height} frame of {image_id!r}"
                )
            phrase = det_payload.get("phrase")
            if phrase is not None and not isinstance(phrase, str):
                raise ValidationError(f"{path}: phrase on {image_id!r} must be text")
            if not isinstance(score, (int, float)) or isinstance(score, bool):
                raise ValidationError(f"{path}: score on {image_id!r} must be a number")
            dets.append(Detection(box=box, confidence=score, phrase=phrase))
        detections[image_id] = tuple(dets)
        if "masks" in entry:
            if not isinstance(entry["masks"], list):
                raise ValidationError(f"{path}: masks of {image_id!r} must be a list")
            decoded = tuple(rle_from_payload(m) for m in entry["masks"])
            for mask in decoded:
                if mask.dims != record.dims:
                    raise ValidationError(
                        f"{path}: mask dims {mask.dims} do not match image {image_id!r}"
                    )
            masks[image_id] = decoded

    return PredictionSet(
        source=str(data.get("source", "unknown")),
        model_version=str(data.get("model_version", "unknown")),
        detections=detections,
        masks=masks,
    )


# ------------------------------------------------------- preannotation export


def export_preannotations(
    preds: PredictionSet, manifest: DatasetManifest, out: Path
) -> None:
    """Write detections (and masks) as a COCO annotation file for editors."""
    default_category = min(manifest.categories) if manifest.categories else 1
    categories = manifest.categories or {1: "colony"}
    images_payload = []
    numeric_ids = {rec.image_id: i + 1 for i, rec in enumerate(manifest.images)}
    for rec in manifest.images:
        images_payload.append(
            {
                "id": numeric_ids[rec.image_id],
                "file_name": Path(rec.file_path).name,
                "width": rec.dims.width,
                "height": rec.dims.height,
            }
        )
    annotations = []
    next_id = 1
    for rec in manifest.images:
        dets = preds.detections.get(rec.image_id, ())
        image_masks = preds.masks.get(rec.image_id)
        for det_idx, det in enumerate(dets):
            x1, y1, x2, y2 = det.box.as_xyxy()
            ann: dict = {
                "id": next_id,
                "image_id": numeric_ids[rec.image_id],
                "category_id": (
                    rec.class_focus if rec.class_focus is not None else default_category
                ),
                "bbox": [x1, y1, x2 - x1, y2 - y1],
                "score": det.confidence,
                "iscrowd": 0,
                "area": (x2 - x1) * (y2 - y1),
            }
            if image_masks is not None:
                mask = image_masks[det_idx]
                ann["segmentation"] = {
                    "size": [mask.height, mask.width],
                    "counts": rle_to_coco_counts(mask),
                }
                ann["area"] = mask.area
            annotations.append(ann)
            next_id += 1
    write_json(
        out,
        {
            "images": images_payload,
            "annotations": annotations,
            "categories": [
                {"id": cid, "name": name} for cid, name in sorted(categories.items())
            ],
        },
    )
