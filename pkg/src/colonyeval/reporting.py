"""Overlay rendering and metric report emission.

Overlay color code: matched predictions green, unmatched ground truths
yellow, unmatched predictions red. Box outlines are drawn as rings of
pixels selected by the same pixel-center rule the metrics use, so probe
tests can predict exact coordinates. Reports serialize to JSON (schema
below) and CSV with values rounded to 6 decimal places.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np
from PIL import Image

from .detection import Detection, DetectionSummary, GroundTruthBox, MatchResult
from .errors import ValidationError
from .geometry import BoundingBox, ImageDims, InstanceMask, box_to_mask
from .ingest import read_json, write_json
from .segmentation import DatasetSegSummary, SegmentationEval

MATCHED_COLOR = (0, 200, 0)
UNMATCHED_GT_COLOR = (230, 200, 0)
UNMATCHED_PRED_COLOR = (220, 0, 0)


@dataclass(frozen=True)
class OverlaySpec:
    matched_color: tuple[int, int, int] = MATCHED_COLOR
    unmatched_gt_color: tuple[int, int, int] = UNMATCHED_GT_COLOR
    unmatched_pred_color: tuple[int, int, int] = UNMATCHED_PRED_COLOR
    stroke_width: int = 2
    draw_labels: bool = False
    mask_opacity_percent: int = 40

    def __post_init__(self) -> None:
        if self.stroke_width < 1:
            raise ValidationError("stroke_width must be at least 1")
        colors = (self.matched_color, self.unmatched_gt_color, self.unmatched_pred_color)
        if len(set(colors)) != 3:
            raise ValidationError("overlay colors must be distinct")
        if not 0 <= self.mask_opacity_percent <= 100:
            raise ValidationError("mask opacity must be a percentage")


@dataclass(frozen=True)
class PerImageRow:
    image_id: str
    tp: int
    fp: int
    fn: int
    dice: Optional[float] = None
    dice_at_detection: Optional[float] = None


@dataclass(frozen=True)
class MetricsReport:
    dataset_name: str
    provider_source: str
    model_version: str
    config_fingerprint: str
    timestamp: str
    detection: Optional[DetectionSummary]
    segmentation: Optional[DatasetSegSummary]
    per_image: tuple[PerImageRow, ...]


def _box_ring(box: BoundingBox, dims: ImageDims, stroke: int) -> np.ndarray:
    outer = box_to_mask(box, dims).to_array()
    x1, y1, x2, y2 = box.as_xyxy()
    if x2 - x1 > 2 * stroke and y2 - y1 > 2 * stroke:
        inner_box = BoundingBox(x1 + stroke, y1 + stroke, x2 - stroke, y2 - stroke)
        inner = box_to_mask(inner_box, dims).to_array()
    else:
        inner = np.zeros_like(outer)
    return outer & ~inner


def _blend(base: np.ndarray, region: np.ndarray, color: tuple[int, int, int], opacity: int) -> None:
    # integer blend with round-half-up, stable across platforms
    keep = 100 - opacity
    for channel in range(3):
        view = base[..., channel]
        mixed = (view[region].astype(np.uint16) * keep + color[channel] * opacity + 50) // 100
        view[region] = mixed.astype(np.uint8)


def _paint(base: np.ndarray, region: np.ndarray, color: tuple[int, int, int]) -> None:
    base[region] = np.array(color, dtype=np.uint8)


def render_overlay(
    image: Image.Image,
    match: MatchResult,
    preds: Sequence[Detection],
    gts: Sequence[GroundTruthBox],
    masks: Optional[Sequence[InstanceMask]] = None,
    spec: OverlaySpec = OverlaySpec(),
) -> Image.Image:
    """Draw match-status boxes (and mask fills) over a plate image.

    Draw order: mask fills, then yellow ground-truth boxes, then red
    unmatched predictions, then green matched predictions on top.
    Output bytes are a pure function of the inputs.
    """
    arr = np.array(image.convert("RGB"), dtype=np.uint8)
    dims = ImageDims(arr.shape[1], arr.shape[0])
    matched_preds = {p for p, _, _ in match.pairs}

    if masks is not None:
        if len(masks) != len(preds):
            raise ValidationError(f"{len(masks)} masks for {len(preds)} predictions")
        for idx, mask in enumerate(masks):
            color = spec.matched_color if idx in matched_preds else spec.unmatched_pred_color
            _blend(arr, mask.to_array(), color, spec.mask_opacity_percent)

    for gt_idx in match.false_negatives:
        ring = _box_ring(gts[gt_idx].box, dims, spec.stroke_width)
        _paint(arr, ring, spec.unmatched_gt_color)
    for pred_idx in match.false_positives:
        ring = _box_ring(preds[pred_idx].box, dims, spec.stroke_width)
        _paint(arr, ring, spec.unmatched_pred_color)
    for pred_idx in matched_preds:
        ring = _box_ring(preds[pred_idx].box, dims, spec.stroke_width)
        _paint(arr, ring, spec.matched_color)

    out = Image.fromarray(arr, mode="RGB")
    if spec.draw_labels:
        from PIL import ImageDraw

        draw = ImageDraw.Draw(out)
        for idx, det in enumerate(preds):
            color = spec.matched_color if idx in matched_preds else spec.unmatched_pred_color
            x1, y1, _, _ = det.box.as_xyxy()
            draw.text((x1 + 1, max(0.0, y1 - 10)), f"{det.confidence:.2f}", fill=color)
    return out


def build_report(
    dataset_name: str,
    provider_source: str,
    model_version: str,
    config_fingerprint: str,
    timestamp: str,
    image_ids: Sequence[str],
    detection: Optional[DetectionSummary] = None,
    matches: Optional[Mapping[str, MatchResult]] = None,
    segmentation: Optional[DatasetSegSummary] = None,
    seg_evals: Optional[Mapping[str, SegmentationEval]] = None,
) -> MetricsReport:
    """Assemble per-image rows from match results and Dice evaluations."""
    rows = []
    for image_id in image_ids:
        tp = fp = fn = 0
        if matches is not None and image_id in matches:
            result = matches[image_id]
            tp, fp, fn = (
                len(result.pairs),
                len(result.false_positives),
                len(result.false_negatives),
            )
        ev = seg_evals.get(image_id) if seg_evals is not None else None
        rows.append(
            PerImageRow(
                image_id=image_id,
                tp=tp,
                fp=fp,
                fn=fn,
                dice=ev.dice if ev is not None else None,
                dice_at_detection=ev.dice_at_detection if ev is not None else None,
            )
        )
    return MetricsReport(
        dataset_name=dataset_name,
        provider_source=provider_source,
        model_version=model_version,
        config_fingerprint=config_fingerprint,
        timestamp=timestamp,
        detection=detection,
        segmentation=segmentation,
        per_image=tuple(rows),
    )


def _round6(value: Optional[float]) -> Optional[float]:
    return None if value is None else round(float(value), 6)


def _check_consistency(report: MetricsReport) -> None:
    if report.detection is not None:
        tp_sum = sum(row.tp for row in report.per_image)
        fp_sum = sum(row.fp for row in report.per_image)
        fn_sum = sum(row.fn for row in report.per_image)
        got = (
            report.detection.true_positives,
            report.detection.false_positives,
            report.detection.false_negatives,
        )
        if got != (tp_sum, fp_sum, fn_sum):
            raise ValidationError(
                f"summary counts {got} disagree with per-image sums "
                f"{(tp_sum, fp_sum, fn_sum)}"
            )
        if report.detection.per_class:
            mean = sum(c.ap for c in report.detection.per_class) / len(
                report.detection.per_class
            )
            if abs(mean - report.detection.mean_ap) > 1e-9:
                raise ValidationError(
                    f"mAP {report.detection.mean_ap} is not the mean of per-class APs"
                )


def report_payload(report: MetricsReport) -> dict:
    detection = None
    if report.detection is not None:
        detection = {
            "iou_threshold": _round6(report.detection.iou_threshold),
            "map": _round6(report.detection.mean_ap),
            "per_class": [
                {
                    "class_id": c.class_id,
                    "ap": _round6(c.ap),
                    "num_ground_truths": c.num_ground_truths,
                    "num_predictions": c.num_predictions,
                }
                for c in report.detection.per_class
            ],
            "true_positives": report.detection.true_positives,
            "false_positives": report.detection.false_positives,
            "false_negatives": report.detection.false_negatives,
        }
    segmentation = None
    if report.segmentation is not None:
        segmentation = {
            "micro_dice": _round6(report.segmentation.micro_dice),
            "macro_dice": _round6(report.segmentation.macro_dice),
            "micro_dice_at_detection": _round6(report.segmentation.micro_dice_at_detection),
            "macro_dice_at_detection": _round6(report.segmentation.macro_dice_at_detection),
            "images_evaluated": report.segmentation.images_evaluated,
            "images_skipped": report.segmentation.images_skipped,
        }
    return {
        "dataset": report.dataset_name,
        "source": report.provider_source,
        "model_version": report.model_version,
        "config_fingerprint": report.config_fingerprint,
        "timestamp": report.timestamp,
        "detection": detection,
        "segmentation": segmentation,
        "per_image": [
            {
                "image_id": row.image_id,
                "tp": row.tp,
                "fp": row.fp,
                "fn": row.fn,
                "dice": _round6(row.dice),
                "dice_at_detection": _round6(row.dice_at_detection),
            }
            for row in report.per_image
        ],
    }


def emit_report(
    report: MetricsReport, out_dir: Path, formats: Sequence[str] = ("json", "csv")
) -> list[Path]:
    """Write report.json and/or report.csv; returns the written paths."""
    _check_consistency(report)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    if "json" in formats:
        path = out_dir / "report.json"
        write_json(path, report_payload(report))
        written.append(path)
    if "csv" in formats:
        path = out_dir / "report.csv"
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(["image_id", "tp", "fp", "fn", "dice", "dice_at_detection"])
        for row in report.per_image:
            writer.writerow(
                [
                    row.image_id,
                    row.tp,
                    row.fp,
                    row.fn,
                    "" if row.dice is None else f"{row.dice:.6f}",
                    "" if row.dice_at_detection is None else f"{row.dice_at_detection:.6f}",
                ]
            )
        micro = report.segmentation
        writer.writerow(
            [
                "ALL",
                sum(r.tp for r in report.per_image),
                sum(r.fp for r in report.per_image),
                sum(r.fn for r in report.per_image),
                "" if micro is None else f"{micro.micro_dice:.6f}",
                "" if micro is None else f"{micro.micro_dice_at_detection:.6f}",
            ]
        )
        path.write_text(buffer.getvalue(), encoding="utf-8")
        written.append(path)
    return written


def load_report(path: Path) -> dict:
    data = read_json(path)
    if not isinstance(data, dict) or "per_image" not in data:
        raise ValidationError(f"{path}: not a metrics report")
    return data
