"""Detection matching and average-precision computation.

Matching is greedy in descending confidence order at a fixed IoU
threshold. AP uses all-points interpolation: the precision envelope
integrated over recall. Predictions carry no class label, so per-class
AP pools the images containing that class's ground truths and treats
every prediction on those images as a candidate for the class.
"""

from __future__ import annotations

import math
import operator
from dataclasses import dataclass
from fractions import Fraction
from typing import Mapping, Optional, Sequence

from .errors import ConfigError, UndefinedMetricError, ValidationError
from .geometry import BoundingBox, box_iou


@dataclass(frozen=True)
class Detection:
    """One detector output: a box, a confidence, and an optional phrase."""

    box: BoundingBox
    confidence: float
    phrase: Optional[str] = None

    def __post_init__(self) -> None:
        try:
            conf = float(self.confidence)
        except (TypeError, ValueError) as exc:
            raise ValidationError(f"confidence not a number: {self.confidence!r}") from exc
        object.__setattr__(self, "confidence", conf)
        if not math.isfinite(conf) or not 0.0 <= conf <= 1.0:
            raise ValidationError(f"confidence must lie in [0, 1], got {conf}")


@dataclass(frozen=True)
class GroundTruthBox:
    """An annotated box with its dataset category."""

    box: BoundingBox
    class_id: int

    def __post_init__(self) -> None:
        try:
            object.__setattr__(self, "class_id", operator.index(self.class_id))
        except TypeError as exc:
            raise ValidationError(f"class_id not an integer: {self.class_id!r}") from exc


@dataclass(frozen=True)
class MatchResult:
    """Outcome of matching one image's predictions to its ground truths.

    pairs holds (prediction index, ground-truth index, iou) triples.
    Indices refer to the input sequences; each appears at most once
    across the whole result.
    """

    pairs: tuple[tuple[int, int, float], ...]
    false_positives: tuple[int, ...]
    false_negatives: tuple[int, ...]
    iou_threshold: float

    def __post_init__(self) -> None:
        pred_indices = [p for p, _, _ in self.pairs] + list(self.false_positives)
        gt_indices = [g for _, g, _ in self.pairs] + list(self.false_negatives)
        if len(pred_indices) != len(set(pred_indices)):
            raise ValidationError("a prediction index appears more than once")
        if len(gt_indices) != len(set(gt_indices)):
            raise ValidationError("a ground-truth index appears more than once")
        for _, _, iou in self.pairs:
            if iou < self.iou_threshold:
                raise ValidationError(f"pair iou {iou} below threshold {self.iou_threshold}")

    @property
    def num_predictions(self) -> int:
        return len(self.pairs) + len(self.false_positives)

    @property
    def num_ground_truths(self) -> int:
        return len(self.pairs) + len(self.false_negatives)


@dataclass(frozen=True)
class PRPoint:
    """One point of a precision-recall curve at a confidence cutoff."""

    confidence_cutoff: float
    precision: float
    recall: float


@dataclass(frozen=True)
class ClassAP:
    """Average precision of one class's binary detection task."""

    class_id: int
    ap: float
    num_ground_truths: int
    num_predictions: int


@dataclass(frozen=True)
class DetectionSummary:
    """Dataset-level detection metrics at one IoU threshold."""

    iou_threshold: float
    per_class: tuple[ClassAP, ...]
    mean_ap: float
    true_positives: int
    false_positives: int
    false_negatives: int

    @property
    def total_ground_truths(self) -> int:
        return self.true_positives + self.false_negatives


def _check_threshold(iou_threshold: float) -> float:
    iou_threshold = float(iou_threshold)
    if not math.isfinite(iou_threshold) or not 0.0 < iou_threshold <= 1.0:
        raise ConfigError(f"iou threshold must lie in (0, 1], got {iou_threshold}")
    return iou_threshold


def match_image(
    predictions: Sequence[Detection],
    ground_truths: Sequence[GroundTruthBox],
    iou_threshold: float,
) -> MatchResult:
    """Greedily match predictions to ground truths at an IoU threshold.

    Predictions are visited in descending confidence (ties: lower input
    index first). Each claims the unclaimed ground truth with the
    highest IoU >= threshold (ties: lower ground-truth index). Claimed
    ground truths are removed from consideration.
    """
    iou_threshold = _check_threshold(iou_threshold)
    order = sorted(range(len(predictions)), key=lambda i: (-predictions[i].confidence, i))
    claimed: set[int] = set()
    pairs: list[tuple[int, int, float]] = []
    false_positives: list[int] = []
    for pred_idx in order:
        best_gt = -1
        best_iou = 0.0
        for gt_idx, gt in enumerate(ground_truths):
            if gt_idx in claimed:
                continue
            iou = box_iou(predictions[pred_idx].box, gt.box)
            if iou >= iou_threshold and iou > best_iou:
                best_iou = iou
                best_gt = gt_idx
        if best_gt >= 0:
            claimed.add(best_gt)
            pairs.append((pred_idx, best_gt, best_iou))
        else:
            false_positives.append(pred_idx)
    false_negatives = [g for g in range(len(ground_truths)) if g not in claimed]
    return MatchResult(
        pairs=tuple(sorted(pairs)),
        false_positives=tuple(sorted(false_positives)),
        false_negatives=tuple(false_negatives),
        iou_threshold=iou_threshold,
    )


def pr_curve(
    scored_flags: Sequence[tuple[float, bool]],
    total_ground_truths: int,
) -> list[PRPoint]:
    """Cumulative precision/recall over flags sorted by descending confidence.

    scored_flags holds (confidence, is_true_positive) pairs pooled across
    the images of one class and already sorted.
    """
    if total_ground_truths < 1:
        raise UndefinedMetricError("precision-recall needs at least one ground truth")
    confidences = [c for c, _ in scored_flags]
    if any(a < b for a, b in zip(confidences, confidences[1:])):
        raise ValidationError("scored flags must be sorted by descending confidence")
    points: list[PRPoint] = []
    tp = 0
    for k, (confidence, is_tp) in enumerate(scored_flags, start=1):
        tp += bool(is_tp)
        points.append(
            PRPoint(
                confidence_cutoff=confidence,
                precision=tp / k,
                recall=tp / total_ground_truths,
            )
        )
    return points


def average_precision(points: Sequence[PRPoint]) -> float:
    """Integrate the precision envelope over recall (all-points form).

    Arithmetic runs on exact rationals so that telescoping recall
    increments cancel and a perfect curve scores exactly 1.0.
    """
    if not points:
        return 0.0
    precisions = [Fraction(p.precision) for p in points]
    recalls = [Fraction(p.recall) for p in points]
    envelope = list(precisions)
    for i in range(len(envelope) - 2, -1, -1):
        envelope[i] = max(envelope[i], envelope[i + 1])
    total = Fraction(0)
    prev_recall = Fraction(0)
    for recall, env in zip(recalls, envelope):
        total += (recall - prev_recall) * env
        prev_recall = recall
    return float(total)


def mean_average_precision(per_class: Sequence[ClassAP]) -> float:
    """Unweighted mean AP over classes that have ground truths."""
    contributing = [c for c in per_class if c.num_ground_truths >= 1]
    if not contributing:
        raise UndefinedMetricError("no class has ground truths; mAP undefined")
    return float(sum(Fraction(c.ap) for c in contributing) / len(contributing))


def evaluate_detection(
    image_ids: Sequence[str],
    gt_boxes: Mapping[str, Sequence[GroundTruthBox]],
    detections: Mapping[str, Sequence[Detection]],
    iou_threshold: float,
) -> tuple[DetectionSummary, dict[str, MatchResult]]:
    """Score a prediction set against box ground truth.

    Returns the dataset summary and the per-image class-agnostic match
    results (used for overlays and per-image TP/FP/FN counts). Per-class
    AP pools only the images containing that class's ground truths;
    every prediction on those images is a candidate for the class.
    """
    iou_threshold = _check_threshold(iou_threshold)
    matches: dict[str, MatchResult] = {}
    tp = fp = fn = 0
    for image_id in image_ids:
        result = match_image(
            detections.get(image_id, ()), gt_boxes.get(image_id, ()), iou_threshold
        )
        matches[image_id] = result
        tp += len(result.pairs)
        fp += len(result.false_positives)
        fn += len(result.false_negatives)

    class_ids = sorted(
        {gt.class_id for image_id in image_ids for gt in gt_boxes.get(image_id, ())}
    )
    per_class: list[ClassAP] = []
    for class_id in class_ids:
        flags: list[tuple[float, int, int, bool]] = []
        total_gts = 0
        for image_order, image_id in enumerate(image_ids):
            class_gts = [g for g in gt_boxes.get(image_id, ()) if g.class_id == class_id]
            if not class_gts:
                continue
            total_gts += len(class_gts)
            preds = detections.get(image_id, ())
            result = match_image(preds, class_gts, iou_threshold)
            paired = {p for p, _, _ in result.pairs}
            for pred_idx, pred in enumerate(preds):
                flags.append((pred.confidence, image_order, pred_idx, pred_idx in paired))
        flags.sort(key=lambda f: (-f[0], f[1], f[2]))
        points = pr_curve([(conf, is_tp) for conf, _, _, is_tp in flags], total_gts)
        per_class.append(
            ClassAP(
                class_id=class_id,
                ap=average_precision(points),
                num_ground_truths=total_gts,
                num_predictions=len(flags),
            )
        )

    summary = DetectionSummary(
        iou_threshold=iou_threshold,
        per_class=tuple(per_class),
        mean_ap=mean_average_precision(per_class),
        true_positives=tp,
        false_positives=fp,
        false_negatives=fn,
    )
    return summary, matches
