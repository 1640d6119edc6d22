"""Command-line entry point.

Subcommands: import coco|masks, run, eval-det, eval-seg, render,
export-preann. Settings resolve as command line > config file >
defaults; every evaluating command writes the resolved configuration
next to its outputs. Exit codes: 0 success, 1 I/O or provider
transport trouble (including partially failed runs), 2 validation,
configuration, or usage errors.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import asdict, dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional, Sequence

try:
    import tomllib
except ModuleNotFoundError:  # 3.10 ships no tomllib
    import tomli as tomllib

from PIL import Image

from .detection import evaluate_detection, match_image
from .errors import (
    ColonyEvalError,
    ConfigError,
    ProtocolError,
    ProviderUnreachable,
    RemoteError,
    UndefinedMetricError,
    ValidationError,
)
from .ingest import (
    DatasetManifest,
    PredictionSet,
    export_preannotations,
    import_coco_boxes,
    import_mask_folder,
    load_manifest,
    load_predictions,
    save_manifest,
    save_predictions,
    write_json,
)
from .pipeline import (
    FileProvider,
    PipelineConfig,
    PredictionProvider,
    RemoteProvider,
    run_pipeline,
)
from .reporting import OverlaySpec, build_report, emit_report, render_overlay
from .segmentation import evaluate_image, summarize_segmentation

log = logging.getLogger(__name__)

PROVIDER_ENV = "COLONY_PROVIDER_URL"

DEFAULTS = {
    "prompt": "bacterial colony",
    "confidence_floor": 0.0,
    "iou_threshold": 0.2,
    "box_threshold": 0.3,
    "text_threshold": 0.25,
    "jobs": 4,
    "out": "colonyeval-out",
    "provider": None,
    "cache_dir": None,
}

CONFIG_FILE_KEYS = set(DEFAULTS)


@dataclass(frozen=True)
class RunConfig:
    """Fully resolved settings for one invocation."""

    manifest: str
    out: str
    provider: Optional[str]
    prompt: str
    confidence_floor: float
    iou_threshold: float
    box_threshold: float
    text_threshold: float
    jobs: int
    cache_dir: Optional[str]
    predictions: Optional[str] = None
    timestamp: Optional[str] = None


def load_config_file(path: Path) -> dict:
    """Parse a TOML settings file; unknown keys are an error."""
    with open(path, "rb") as handle:
        try:
            data = tomllib.load(handle)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    unknown = set(data) - CONFIG_FILE_KEYS
    if unknown:
        raise ConfigError(
            f"{path}: unknown settings {sorted(unknown)}; known keys: "
            f"{sorted(CONFIG_FILE_KEYS)}"
        )
    return data


def resolve_run_config(args: argparse.Namespace) -> RunConfig:
    """Merge command line, optional config file, and defaults."""
    file_cfg = load_config_file(Path(args.config)) if getattr(args, "config", None) else {}

    def pick(key: str):
        cli_value = getattr(args, key, None)
        if cli_value is not None:
            return cli_value
        if key in file_cfg:
            return file_cfg[key]
        return DEFAULTS[key]

    provider = pick("provider")
    if provider is None:
        provider = os.environ.get(PROVIDER_ENV) or None
    return RunConfig(
        manifest=args.manifest,
        out=str(pick("out")),
        provider=provider,
        prompt=str(pick("prompt")),
        confidence_floor=float(pick("confidence_floor")),
        iou_threshold=float(pick("iou_threshold")),
        box_threshold=float(pick("box_threshold")),
        text_threshold=float(pick("text_threshold")),
        jobs=int(pick("jobs")),
        cache_dir=(str(pick("cache_dir")) if pick("cache_dir") is not None else None),
        predictions=getattr(args, "predictions", None),
        timestamp=getattr(args, "timestamp", None),
    )


def _timestamp(run_config: RunConfig) -> str:
    if run_config.timestamp is not None:
        return run_config.timestamp
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _pipeline_config(run_config: RunConfig, request_masks: bool = True) -> PipelineConfig:
    return PipelineConfig(
        prompt_text=run_config.prompt,
        confidence_floor=run_config.confidence_floor,
        iou_threshold=run_config.iou_threshold,
        box_threshold=run_config.box_threshold,
        text_threshold=run_config.text_threshold,
        request_parallelism=run_config.jobs,
        cache_dir=Path(run_config.cache_dir) if run_config.cache_dir else None,
        request_masks=request_masks,
    )


def make_provider(descriptor: str, manifest: DatasetManifest) -> PredictionProvider:
    """Build a provider from 'file:PATH' or an http(s) URL."""
    if descriptor.startswith("file:"):
        path = descriptor[len("file:"):]
        return FileProvider(load_predictions(Path(path), manifest))
    if descriptor.startswith(("http://", "https://")):
        return RemoteProvider(descriptor)
    raise ConfigError(
        f"provider {descriptor!r} must be an http(s) URL or file:PATH"
    )


def write_run_config(run_config: RunConfig, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    write_json(out_dir / "run_config.json", asdict(run_config))


def _segmentation_inputs(manifest: DatasetManifest, preds: PredictionSet):
    """Per-image Dice evaluations over images that have mask ground truth."""
    evals = {}
    for rec in manifest.images:
        gt_mask = manifest.gt_masks.get(rec.image_id)
        if gt_mask is None:
            continue
        if rec.image_id not in preds.detections:
            continue  # image failed upstream; do not score it
        pred_masks = preds.masks.get(rec.image_id, ())
        boxes = [d.box for d in preds.detections[rec.image_id]]
        evals[rec.image_id] = evaluate_image(rec.image_id, pred_masks, boxes, gt_mask)
    return evals


def _evaluate_and_report(
    manifest: DatasetManifest,
    preds: PredictionSet,
    run_config: RunConfig,
    out_dir: Path,
    want_detection: bool,
    want_segmentation: bool,
) -> None:
    image_ids = [i for i in manifest.image_ids if i in preds.detections]
    detection = matches = None
    if want_detection:
        if not manifest.has_boxes:
            raise UndefinedMetricError(
                f"dataset {manifest.name!r} has no box ground truth"
            )
        detection, matches = evaluate_detection(
            image_ids,
            manifest.gt_boxes,
            preds.detections,
            iou_threshold=run_config.iou_threshold,
        )
    segmentation = seg_evals = None
    if want_segmentation:
        if not manifest.has_masks:
            raise UndefinedMetricError(
                f"dataset {manifest.name!r} has no mask ground truth"
            )
        if not preds.has_masks:
            raise ValidationError(
                "prediction set carries no masks; segmentation scores need them"
            )
        seg_evals = _segmentation_inputs(manifest, preds)
        segmentation = summarize_segmentation(list(seg_evals.values()))

    fingerprint = _pipeline_config(run_config).fingerprint(preds.model_version)
    report = build_report(
        dataset_name=manifest.name,
        provider_source=preds.source,
        model_version=preds.model_version,
        config_fingerprint=fingerprint,
        timestamp=_timestamp(run_config),
        image_ids=image_ids,
        detection=detection,
        matches=matches,
        segmentation=segmentation,
        seg_evals=seg_evals,
    )
    for path in emit_report(report, out_dir):
        log.info("wrote %s", path)


def _render_overlays(
    manifest: DatasetManifest,
    preds: PredictionSet,
    run_config: RunConfig,
    out_dir: Path,
) -> None:
    overlay_dir = out_dir / "overlays"
    overlay_dir.mkdir(parents=True, exist_ok=True)
    spec = OverlaySpec()
    for rec in manifest.images:
        if rec.image_id not in preds.detections:
            continue
        dets = preds.detections[rec.image_id]
        gts = manifest.gt_boxes.get(rec.image_id, ())
        match = match_image(dets, gts, run_config.iou_threshold)
        with Image.open(rec.file_path) as img:
            overlay = render_overlay(
                img,
                match,
                dets,
                gts,
                masks=preds.masks.get(rec.image_id),
                spec=spec,
            )
        target = overlay_dir / f"{rec.image_id}.png"
        overlay.save(target)
        log.info("wrote %s", target)


# ----------------------------------------------------------------- commands


def cmd_import(args: argparse.Namespace) -> int:
    if args.kind == "coco":
        result = import_coco_boxes(Path(args.annotations), Path(args.images))
    else:
        result = import_mask_folder(
            Path(args.masks),
            Path(args.images),
            pairing_pattern=args.pattern,
        )
    for record, reason in result.rejected:
        log.warning("rejected %s: %s", record, reason)
    save_manifest(result.manifest, Path(args.out))
    log.info(
        "imported %d of %d records into %s",
        result.imported,
        result.source_records,
        args.out,
    )
    return 0


def cmd_run(args: argparse.Namespace) -> int:
    run_config = resolve_run_config(args)
    if run_config.provider is None:
        raise ConfigError(
            f"no provider: pass --provider, set {PROVIDER_ENV}, or put "
            "provider= in the config file"
        )
    manifest = load_manifest(Path(run_config.manifest))
    provider = make_provider(run_config.provider, manifest)
    out_dir = Path(run_config.out)
    write_run_config(run_config, out_dir)

    run = run_pipeline(manifest, _pipeline_config(run_config), provider)
    save_predictions(run.predictions, out_dir / "predictions.json")
    log.info("wrote %s", out_dir / "predictions.json")
    for failure in run.failures:
        log.error("image %s failed at %s: %s", failure.image_id, failure.stage, failure.message)
    if run.aborted:
        log.error("run aborted: %s", run.abort_reason)

    if run.completed:
        _evaluate_and_report(
            manifest,
            run.predictions,
            run_config,
            out_dir,
            want_detection=manifest.has_boxes,
            want_segmentation=manifest.has_masks and run.predictions.has_masks,
        )
        if manifest.has_boxes:
            _render_overlays(manifest, run.predictions, run_config, out_dir)
    return 0 if run.ok else 1


def cmd_eval_det(args: argparse.Namespace) -> int:
    run_config = resolve_run_config(args)
    manifest = load_manifest(Path(run_config.manifest))
    preds = load_predictions(Path(args.predictions), manifest)
    preds = preds.apply_confidence_floor(run_config.confidence_floor)
    out_dir = Path(run_config.out)
    write_run_config(run_config, out_dir)
    _evaluate_and_report(
        manifest, preds, run_config, out_dir,
        want_detection=True, want_segmentation=False,
    )
    return 0


def cmd_eval_seg(args: argparse.Namespace) -> int:
    run_config = resolve_run_config(args)
    manifest = load_manifest(Path(run_config.manifest))
    preds = load_predictions(Path(args.predictions), manifest)
    preds = preds.apply_confidence_floor(run_config.confidence_floor)
    out_dir = Path(run_config.out)
    write_run_config(run_config, out_dir)
    _evaluate_and_report(
        manifest, preds, run_config, out_dir,
        want_detection=False, want_segmentation=True,
    )
    return 0


def cmd_render(args: argparse.Namespace) -> int:
    run_config = resolve_run_config(args)
    manifest = load_manifest(Path(run_config.manifest))
    preds = load_predictions(Path(args.predictions), manifest)
    preds = preds.apply_confidence_floor(run_config.confidence_floor)
    out_dir = Path(run_config.out)
    write_run_config(run_config, out_dir)
    _render_overlays(manifest, preds, run_config, out_dir)
    return 0


def cmd_export_preann(args: argparse.Namespace) -> int:
    manifest = load_manifest(Path(args.manifest))
    preds = load_predictions(Path(args.predictions), manifest)
    export_preannotations(preds, manifest, Path(args.out))
    log.info("wrote %s", args.out)
    return 0


# ------------------------------------------------------------------ parsing


def _add_shared_eval_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--manifest", required=True, help="dataset manifest JSON")
    parser.add_argument("--config", help="TOML settings file")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--confidence-floor", dest="confidence_floor", type=float)
    parser.add_argument("--iou-threshold", dest="iou_threshold", type=float)
    parser.add_argument("--timestamp", help="fixed report timestamp (for reproducible outputs)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="colonyeval",
        description="Batch colony detection/segmentation runs and their evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_import = sub.add_parser("import", help="convert annotations to a manifest")
    import_sub = p_import.add_subparsers(dest="kind", required=True)
    p_coco = import_sub.add_parser("coco", help="COCO-style box annotations")
    p_coco.add_argument("--annotations", required=True)
    p_coco.add_argument("--images", required=True)
    p_coco.add_argument("--out", required=True)
    p_coco.set_defaults(handler=cmd_import)
    p_masks = import_sub.add_parser("masks", help="folder of mask rasters")
    p_masks.add_argument("--masks", required=True)
    p_masks.add_argument("--images", required=True)
    p_masks.add_argument("--pattern", default="{stem}.png")
    p_masks.add_argument("--out", required=True)
    p_masks.set_defaults(handler=cmd_import)

    p_run = sub.add_parser("run", help="detect + segment a dataset, then evaluate")
    _add_shared_eval_flags(p_run)
    p_run.add_argument("--provider", help="service URL or file:PATH")
    p_run.add_argument("--prompt")
    p_run.add_argument("--box-threshold", dest="box_threshold", type=float)
    p_run.add_argument("--text-threshold", dest="text_threshold", type=float)
    p_run.add_argument("--jobs", type=int)
    p_run.add_argument("--cache-dir", dest="cache_dir")
    p_run.set_defaults(handler=cmd_run)

    p_det = sub.add_parser("eval-det", help="detection metrics for saved predictions")
    _add_shared_eval_flags(p_det)
    p_det.add_argument("--predictions", required=True)
    p_det.set_defaults(handler=cmd_eval_det)

    p_seg = sub.add_parser("eval-seg", help="segmentation metrics for saved predictions")
    _add_shared_eval_flags(p_seg)
    p_seg.add_argument("--predictions", required=True)
    p_seg.set_defaults(handler=cmd_eval_seg)

    p_render = sub.add_parser("render", help="draw match-status overlays")
    _add_shared_eval_flags(p_render)
    p_render.add_argument("--predictions", required=True)
    p_render.set_defaults(handler=cmd_render)

    p_export = sub.add_parser("export-preann", help="write predictions as COCO pre-annotations")
    p_export.add_argument("--manifest", required=True)
    p_export.add_argument("--predictions", required=True)
    p_export.add_argument("--out", required=True)
    p_export.set_defaults(handler=cmd_export_preann)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.handler(args)
    except (ValidationError, ConfigError, UndefinedMetricError) as exc:
        log.error("error: %s", exc)
        return 2
    except (RemoteError, ProtocolError, ProviderUnreachable) as exc:
        log.error("provider error: %s", exc)
        return 1
    except ColonyEvalError as exc:
        log.error("error: %s", exc)
        return 1
    except OSError as exc:
        log.error("i/o error: %s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
