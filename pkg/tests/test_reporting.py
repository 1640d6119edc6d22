import io
import json

import numpy as np
import pytest
from PIL import Image

from colonyeval.detection import (
    ClassAP,
    Detection,
    DetectionSummary,
    GroundTruthBox,
    match_image,
)
from colonyeval.errors import ValidationError
from colonyeval.geometry import BoundingBox, ImageDims, box_to_mask
from colonyeval.reporting import (
    MATCHED_COLOR,
    UNMATCHED_GT_COLOR,
    UNMATCHED_PRED_COLOR,
    MetricsReport,
    OverlaySpec,
    PerImageRow,
    build_report,
    emit_report,
    load_report,
    render_overlay,
)
from colonyeval.segmentation import DatasetSegSummary

BASE_GRAY = 100


def blank_plate(size=64):
    return Image.new("RGB", (size, size), (BASE_GRAY,) * 3)


def color_pixels(img, color):
    arr = np.array(img)
    return int(np.count_nonzero(np.all(arr == np.array(color), axis=-1)))


def png_bytes(img):
    out = io.BytesIO()
    img.save(out, format="PNG")
    return out.getvalue()


def tp_fp_fn_scene():
    preds = [
        Detection(BoundingBox(10, 10, 20, 20), 0.9),  # matches gt 0
        Detection(BoundingBox(40, 40, 50, 50), 0.8),  # unmatched
    ]
    gts = [
        GroundTruthBox(BoundingBox(10, 10, 20, 20), 1),
        GroundTruthBox(BoundingBox(25, 25, 35, 35), 1),  # unmatched
    ]
    match = match_image(preds, gts, 0.2)
    assert len(match.pairs) == 1
    return preds, gts, match


class TestOverlaySpec:
    def test_defaults_use_contract_colors(self):
        spec = OverlaySpec()
        assert spec.matched_color == (0, 200, 0)
        assert spec.unmatched_gt_color == (230, 200, 0)
        assert spec.unmatched_pred_color == (220, 0, 0)

    def test_validation(self):
        with pytest.raises(ValidationError):
            OverlaySpec(stroke_width=0)
        with pytest.raises(ValidationError):
            OverlaySpec(matched_color=(1, 2, 3), unmatched_gt_color=(1, 2, 3))
        with pytest.raises(ValidationError):
            OverlaySpec(mask_opacity_percent=150)


class TestRenderOverlay:
    def test_probe_coordinates_all_three_colors(self):
        preds, gts, match = tp_fp_fn_scene()
        img = render_overlay(blank_plate(), match, preds, gts, spec=OverlaySpec(stroke_width=1))
        arr = np.array(img)
        # ring pixels sit just inside the box corners (pixel-center rule)
        assert tuple(arr[10, 10]) == MATCHED_COLOR
        assert tuple(arr[40, 40]) == UNMATCHED_PRED_COLOR
        assert tuple(arr[25, 25]) == UNMATCHED_GT_COLOR
        # box interiors stay untouched without masks
        assert tuple(arr[15, 15]) == (BASE_GRAY,) * 3
        assert tuple(arr[45, 45]) == (BASE_GRAY,) * 3

    def test_pure_tp_scene_has_no_red_or_yellow(self):
        gt = [GroundTruthBox(BoundingBox(10, 10, 20, 20), 1)]
        pred = [Detection(BoundingBox(10, 10, 20, 20), 0.9)]
        match = match_image(pred, gt, 0.2)
        img = render_overlay(blank_plate(), match, pred, gt)
        assert color_pixels(img, MATCHED_COLOR) > 0
        assert color_pixels(img, UNMATCHED_PRED_COLOR) == 0
        assert color_pixels(img, UNMATCHED_GT_COLOR) == 0

    def test_no_predictions_draws_exactly_two_yellow_rings(self):
        gts = [
            GroundTruthBox(BoundingBox(10, 10, 20, 20), 1),
            GroundTruthBox(BoundingBox(30, 30, 40, 40), 1),
        ]
        match = match_image([], gts, 0.2)
        img = render_overlay(blank_plate(), match, [], gts, spec=OverlaySpec(stroke_width=1))
        # each 10x10 box ring holds 4*10 - 4 = 36 pixels
        assert color_pixels(img, UNMATCHED_GT_COLOR) == 72
        assert color_pixels(img, MATCHED_COLOR) == 0
        assert color_pixels(img, UNMATCHED_PRED_COLOR) == 0

    def test_red_pixel_budget_counts_false_positives(self):
        # two disjoint unmatched predictions, no gts involved nearby
        preds = [
            Detection(BoundingBox(5, 5, 15, 15), 0.9),
            Detection(BoundingBox(40, 40, 52, 52), 0.8),
        ]
        gts = []
        match = match_image(preds, gts, 0.2)
        img = render_overlay(blank_plate(), match, preds, gts, spec=OverlaySpec(stroke_width=1))
        assert color_pixels(img, UNMATCHED_PRED_COLOR) == (4 * 10 - 4) + (4 * 12 - 4)

    def test_mask_fill_blend_arithmetic(self):
        gt = [GroundTruthBox(BoundingBox(10, 10, 20, 20), 1)]
        pred = [Detection(BoundingBox(10, 10, 20, 20), 0.9)]
        match = match_image(pred, gt, 0.2)
        mask = box_to_mask(pred[0].box, ImageDims(64, 64))
        img = render_overlay(blank_plate(), match, pred, gt, masks=[mask])
        arr = np.array(img)
        # 40% green over gray 100: R (100*60 + 0*40 + 50)//100 = 60,
        # G (100*60 + 200*40 + 50)//100 = 140, B = 60
        assert tuple(arr[15, 15]) == (60, 140, 60)

    def test_unmatched_mask_blends_red(self):
        preds = [Detection(BoundingBox(10, 10, 20, 20), 0.9)]
        match = match_image(preds, [], 0.2)
        mask = box_to_mask(preds[0].box, ImageDims(64, 64))
        img = render_overlay(blank_plate(), match, preds, [], masks=[mask])
        arr = np.array(img)
        # 40% red over gray: R (100*60 + 220*40 + 50)//100 = 148, G/B = 60
        assert tuple(arr[15, 15]) == (148, 60, 60)

    def test_byte_deterministic(self):
        preds, gts, match = tp_fp_fn_scene()
        masks = [box_to_mask(p.box, ImageDims(64, 64)) for p in preds]
        a = render_overlay(blank_plate(), match, preds, gts, masks=masks)
        b = render_overlay(blank_plate(), match, preds, gts, masks=masks)
        assert png_bytes(a) == png_bytes(b)

    def test_mask_count_mismatch_rejected(self):
        preds, gts, match = tp_fp_fn_scene()
        with pytest.raises(ValidationError):
            render_overlay(blank_plate(), match, preds, gts, masks=[])


def sample_report(with_seg=True):
    detection = DetectionSummary(
        iou_threshold=0.2,
        per_class=(
            ClassAP(class_id=1, ap=5 / 9, num_ground_truths=3, num_predictions=3),
            ClassAP(class_id=2, ap=1.0, num_ground_truths=1, num_predictions=1),
        ),
        mean_ap=7 / 9,
        true_positives=3,
        false_positives=1,
        false_negatives=1,
    )
    segmentation = (
        DatasetSegSummary(
            micro_dice=0.7025,
            macro_dice=0.77,
            micro_dice_at_detection=562 / 681,
            macro_dice_at_detection=0.8538983541803087,
            images_evaluated=3,
            images_skipped=0,
        )
        if with_seg
        else None
    )
    rows = (
        PerImageRow("plate_001", 1, 1, 1, 0.5, 2 / 3),
        PerImageRow("plate_002", 1, 0, 0, 0.81, 162 / 181),
        PerImageRow("plate_003", 1, 0, 0, 1.0, 1.0),
    )
    return MetricsReport(
        dataset_name="synthetic-plates",
        provider_source="stub",
        model_version="stub-detector-0.1",
        config_fingerprint="abc123",
        timestamp="2000-01-01T00:00:00+00:00",
        detection=detection,
        segmentation=segmentation,
        per_image=rows,
    )


class TestEmitReport:
    def test_json_values_rounded_to_six_places(self, tmp_path):
        emit_report(sample_report(), tmp_path)
        data = json.loads((tmp_path / "report.json").read_text())
        assert data["detection"]["map"] == 0.777778
        assert data["detection"]["per_class"][0]["ap"] == 0.555556
        assert data["segmentation"]["micro_dice_at_detection"] == 0.825257
        assert data["per_image"][1]["dice_at_detection"] == 0.895028

    def test_round_trip(self, tmp_path):
        emit_report(sample_report(), tmp_path)
        loaded = load_report(tmp_path / "report.json")
        assert loaded["dataset"] == "synthetic-plates"
        assert loaded["detection"]["true_positives"] == 3
        again = tmp_path / "again"
        emit_report(sample_report(), again)
        assert (tmp_path / "report.json").read_bytes() == (again / "report.json").read_bytes()

    def test_csv_rows(self, tmp_path):
        emit_report(sample_report(), tmp_path)
        lines = (tmp_path / "report.csv").read_text().strip().split("\n")
        assert lines[0] == "image_id,tp,fp,fn,dice,dice_at_detection"
        assert len(lines) == 1 + 3 + 1
        assert lines[1].startswith("plate_001,1,1,1,0.500000,0.666667")
        assert lines[-1].startswith("ALL,3,1,1,0.702500,0.825257")

    def test_detection_only_report(self, tmp_path):
        emit_report(sample_report(with_seg=False), tmp_path)
        data = json.loads((tmp_path / "report.json").read_text())
        assert data["segmentation"] is None
        lines = (tmp_path / "report.csv").read_text().strip().split("\n")
        assert lines[-1].startswith("ALL,3,1,1,,")

    def test_inconsistent_counts_rejected(self, tmp_path):
        report = sample_report()
        bad = MetricsReport(
            dataset_name=report.dataset_name,
            provider_source=report.provider_source,
            model_version=report.model_version,
            config_fingerprint=report.config_fingerprint,
            timestamp=report.timestamp,
            detection=DetectionSummary(
                iou_threshold=0.2,
                per_class=report.detection.per_class,
                mean_ap=7 / 9,
                true_positives=99,
                false_positives=1,
                false_negatives=1,
            ),
            segmentation=report.segmentation,
            per_image=report.per_image,
        )
        with pytest.raises(ValidationError):
            emit_report(bad, tmp_path)

    def test_inconsistent_map_rejected(self, tmp_path):
        report = sample_report()
        bad = MetricsReport(
            dataset_name=report.dataset_name,
            provider_source=report.provider_source,
            model_version=report.model_version,
            config_fingerprint=report.config_fingerprint,
            timestamp=report.timestamp,
            detection=DetectionSummary(
                iou_threshold=0.2,
                per_class=report.detection.per_class,
                mean_ap=0.5,
                true_positives=3,
                false_positives=1,
                false_negatives=1,
            ),
            segmentation=report.segmentation,
            per_image=report.per_image,
        )
        with pytest.raises(ValidationError):
            emit_report(bad, tmp_path)


class TestBuildReport:
    def test_rows_assembled_in_manifest_order(self):
        preds, gts, match = tp_fp_fn_scene()
        report = build_report(
            dataset_name="d",
            provider_source="s",
            model_version="m",
            config_fingerprint="f",
            timestamp="t",
            image_ids=["a", "b"],
            detection=None,
            matches={"a": match},
        )
        assert [row.image_id for row in report.per_image] == ["a", "b"]
        assert (report.per_image[0].tp, report.per_image[0].fp, report.per_image[0].fn) == (1, 1, 1)
        assert (report.per_image[1].tp, report.per_image[1].fp, report.per_image[1].fn) == (0, 0, 0)
        assert report.per_image[0].dice is None
