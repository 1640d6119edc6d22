"""Dataset-level Dice and Dice restricted to detected regions.

Instance masks are fused by union before scoring (semantic Dice), since
ground truth is a foreground mask rather than instances. The
detection-restricted variant intersects both sides with the union of
predicted boxes rasterized by the pixel-center rule; images with no
detections have no defined score there and are counted as skipped.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

from .errors import UndefinedMetricError
from .geometry import (
    BoundingBox,
    InstanceMask,
    box_to_mask,
    mask_dice,
    mask_intersect,
    mask_union,
)


@dataclass(frozen=True)
class SegmentationEval:
    """Per-image Dice scores plus the raw pixel tallies behind them.

    The tallies make dataset micro-averaging an exact sum; None marks a
    score with no defined value (no detections on the image).
    """

    image_id: str
    dice: float
    dice_at_detection: Optional[float]
    gt_pixels: int
    pred_pixels: int
    intersection_pixels: int
    detected_region_pixels: int
    gt_in_region_pixels: int
    pred_in_region_pixels: int
    intersection_in_region_pixels: int


@dataclass(frozen=True)
class DatasetSegSummary:
    """Micro (pixel-pooled) and macro (mean per-image) Dice aggregates."""

    micro_dice: float
    macro_dice: float
    micro_dice_at_detection: float
    macro_dice_at_detection: float
    images_evaluated: int
    images_skipped: int


def _dice_from_counts(intersection: int, a_pixels: int, b_pixels: int) -> float:
    # both sides empty counts as perfect agreement
    denom = a_pixels + b_pixels
    if denom == 0:
        return 1.0
    return 2.0 * intersection / denom


def image_dice(pred_masks: Sequence[InstanceMask], gt_mask: InstanceMask) -> float:
    """Dice between the union of predicted masks and the GT foreground."""
    pred_union = mask_union(pred_masks, dims=gt_mask.dims)
    return mask_dice(pred_union, gt_mask)


def image_dice_at_detection(
    pred_masks: Sequence[InstanceMask],
    pred_boxes: Sequence[BoundingBox],
    gt_mask: InstanceMask,
) -> Optional[float]:
    """Dice restricted to the union of predicted boxes; None when no boxes.

    Both the predicted union and the ground truth are intersected with
    the rasterized box region before scoring, so ground truth outside
    every detection cannot affect the value.
    """
    dims = gt_mask.dims
    region = mask_union([box_to_mask(b, dims) for b in pred_boxes], dims=dims)
    if region.is_empty:
        return None
    pred_union = mask_union(pred_masks, dims=dims)
    return mask_dice(mask_intersect(pred_union, region), mask_intersect(gt_mask, region))


def evaluate_image(
    image_id: str,
    pred_masks: Sequence[InstanceMask],
    pred_boxes: Sequence[BoundingBox],
    gt_mask: InstanceMask,
) -> SegmentationEval:
    """Compute both Dice variants and the pixel tallies for one image."""
    dims = gt_mask.dims
    pred_union = mask_union(pred_masks, dims=dims)
    region = mask_union([box_to_mask(b, dims) for b in pred_boxes], dims=dims)
    intersection = mask_intersect(pred_union, gt_mask)

    pred_in_region = mask_intersect(pred_union, region)
    gt_in_region = mask_intersect(gt_mask, region)
    intersection_in_region = mask_intersect(intersection, region)

    dice = _dice_from_counts(intersection.area, pred_union.area, gt_mask.area)
    if region.is_empty:
        dice_at_detection = None
    else:
        dice_at_detection = _dice_from_counts(
            intersection_in_region.area, pred_in_region.area, gt_in_region.area
        )
    return SegmentationEval(
        image_id=image_id,
        dice=dice,
        dice_at_detection=dice_at_detection,
        gt_pixels=gt_mask.area,
        pred_pixels=pred_union.area,
        intersection_pixels=intersection.area,
        detected_region_pixels=region.area,
        gt_in_region_pixels=gt_in_region.area,
        pred_in_region_pixels=pred_in_region.area,
        intersection_in_region_pixels=intersection_in_region.area,
    )


def summarize_segmentation(per_image: Sequence[SegmentationEval]) -> DatasetSegSummary:
    """Fold per-image tallies into micro and macro dataset scores."""
    if not per_image:
        raise UndefinedMetricError("no images to summarize")
    evaluated = [e for e in per_image if e.dice_at_detection is not None]
    skipped = len(per_image) - len(evaluated)
    if not evaluated:
        raise UndefinedMetricError("every image was skipped (no detections anywhere)")

    micro_dice = _dice_from_counts(
        sum(e.intersection_pixels for e in per_image),
        sum(e.pred_pixels for e in per_image),
        sum(e.gt_pixels for e in per_image),
    )
    macro_dice = sum(e.dice for e in per_image) / len(per_image)
    micro_at_det = _dice_from_counts(
        sum(e.intersection_in_region_pixels for e in evaluated),
        sum(e.pred_in_region_pixels for e in evaluated),
        sum(e.gt_in_region_pixels for e in evaluated),
    )
    macro_at_det = sum(e.dice_at_detection for e in evaluated) / len(evaluated)
    return DatasetSegSummary(
        micro_dice=micro_dice,
        macro_dice=macro_dice,
        micro_dice_at_detection=micro_at_det,
        macro_dice_at_detection=macro_at_det,
        images_evaluated=len(evaluated),
        images_skipped=skipped,
    )
