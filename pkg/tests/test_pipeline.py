import hashlib
import json
import logging
from pathlib import Path

import pytest

from colonyeval.errors import ConfigError
from colonyeval.geometry import ImageDims
from colonyeval.ingest import load_manifest, load_predictions, save_predictions
from colonyeval.pipeline import (
    FileProvider,
    PipelineConfig,
    RemoteProvider,
    ResultCache,
    clip_box_to_frame,
    run_pipeline,
)
from colonyeval.synthetic import build_demo_dataset, stub_prediction_set

from stub_server import StubServer, scripted_payloads


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("dataset")
    manifest_path = build_demo_dataset(root)
    manifest = load_manifest(manifest_path)
    return root, manifest


def image_sha(manifest, image_id):
    rec = manifest.record(image_id)
    return hashlib.sha256(Path(rec.file_path).read_bytes()).hexdigest()


def no_sleep(_):
    pass


class TestPipelineConfig:
    def test_defaults_follow_protocol(self):
        config = PipelineConfig()
        assert config.iou_threshold == 0.2
        assert config.prompt_text == "bacterial colony"

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"iou_threshold": 0.0},
            {"iou_threshold": 1.0001},
            {"confidence_floor": -0.1},
            {"confidence_floor": 1.5},
            {"box_threshold": 2.0},
            {"request_parallelism": 0},
            {"request_parallelism": 1000},
            {"prompt_text": ""},
        ],
    )
    def test_invalid_settings_rejected(self, kwargs):
        with pytest.raises(ConfigError):
            PipelineConfig(**kwargs)

    def test_fingerprint_reacts_to_each_knob(self):
        base = PipelineConfig().fingerprint("m1")
        assert PipelineConfig(prompt_text="colony").fingerprint("m1") != base
        assert PipelineConfig(box_threshold=0.4).fingerprint("m1") != base
        assert PipelineConfig(text_threshold=0.4).fingerprint("m1") != base
        assert PipelineConfig(confidence_floor=0.5).fingerprint("m1") != base
        assert PipelineConfig(request_masks=False).fingerprint("m1") != base
        assert PipelineConfig().fingerprint("m2") != base
        # parallelism and iou threshold cannot change provider answers
        assert PipelineConfig(request_parallelism=2).fingerprint("m1") == base
        assert PipelineConfig(iou_threshold=0.5).fingerprint("m1") == base


class TestClipping:
    def test_overhanging_box_clipped_with_warning(self, caplog):
        with caplog.at_level(logging.WARNING, logger="colonyeval.pipeline"):
            box = clip_box_to_frame([-5, 0, 10, 10], ImageDims(100, 100), "img")
        assert box is not None
        assert box.as_xyxy() == (0.0, 0.0, 10.0, 10.0)
        assert any("clipped" in rec.message for rec in caplog.records)

    def test_outside_box_dropped_with_warning(self, caplog):
        with caplog.at_level(logging.WARNING, logger="colonyeval.pipeline"):
            box = clip_box_to_frame([200, 200, 300, 300], ImageDims(100, 100), "img")
        assert box is None
        assert any("dropped" in rec.message for rec in caplog.records)

    def test_in_frame_box_untouched(self, caplog):
        with caplog.at_level(logging.WARNING, logger="colonyeval.pipeline"):
            box = clip_box_to_frame([1, 2, 3, 4], ImageDims(100, 100), "img")
        assert box.as_xyxy() == (1.0, 2.0, 3.0, 4.0)
        assert not caplog.records


class TestFileProvider:
    def test_passthrough_equals_file_content(self, dataset):
        root, manifest = dataset
        saved = load_predictions(root / "stub_predictions.json", manifest)
        run = run_pipeline(manifest, PipelineConfig(), FileProvider(saved))
        assert run.ok
        assert run.predictions == saved

    def test_confidence_floor_filters(self, dataset):
        _, manifest = dataset
        provider = FileProvider(stub_prediction_set())
        run = run_pipeline(
            manifest, PipelineConfig(confidence_floor=0.85), provider
        )
        dets = run.predictions.detections
        assert [d.confidence for d in dets["plate_001"]] == [0.9]
        assert dets["plate_002"] == ()
        assert len(run.predictions.masks["plate_001"]) == 1

    def test_boxes_only_set_keeps_masks_absent(self, dataset):
        _, manifest = dataset
        provider = FileProvider(stub_prediction_set(with_masks=False))
        run = run_pipeline(manifest, PipelineConfig(), provider)
        assert run.predictions.masks == {}


class TestRemoteRuns:
    def test_three_image_run_matches_stub_payload(self, dataset, tmp_path):
        _, manifest = dataset
        with StubServer(scripted_payloads(manifest)) as server:
            provider = RemoteProvider(server.url, sleeper=no_sleep)
            run = run_pipeline(manifest, PipelineConfig(), provider)
            assert run.ok
            assert len(run.completed) == 3
            # one detect and one segment per image
            detect_shas = [c["sha"] for c in server.calls("/v1/detect")]
            segment_shas = [c["sha"] for c in server.calls("/v1/segment")]
            assert sorted(detect_shas) == sorted(segment_shas)
            assert len(detect_shas) == 3 and len(set(detect_shas)) == 3
        expected = stub_prediction_set()
        for image_id in manifest.image_ids:
            got = run.predictions.detections[image_id]
            want = expected.detections[image_id]
            assert [d.box for d in got] == [d.box for d in want]
            assert [d.confidence for d in got] == [d.confidence for d in want]
            assert all(d.phrase == "bacterial colony" for d in got)
            assert run.predictions.masks[image_id] == expected.masks[image_id]

    def test_runs_are_byte_reproducible(self, dataset, tmp_path):
        _, manifest = dataset
        outs = []
        for k in range(2):
            with StubServer(scripted_payloads(manifest)) as server:
                provider = RemoteProvider(server.url, sleeper=no_sleep)
                run = run_pipeline(manifest, PipelineConfig(), provider)
            out = tmp_path / f"run{k}.json"
            save_predictions(run.predictions, out)
            outs.append(out.read_bytes())
        assert outs[0] == outs[1]

    def test_floor_shrinks_segment_prompt(self, dataset):
        _, manifest = dataset
        with StubServer(scripted_payloads(manifest)) as server:
            provider = RemoteProvider(server.url, sleeper=no_sleep)
            run_pipeline(manifest, PipelineConfig(confidence_floor=0.85), provider)
            sha1 = image_sha(manifest, "plate_001")
            seg = [c for c in server.calls("/v1/segment") if c["sha"] == sha1]
            assert [c["n_boxes"] for c in seg] == [1]

    def test_empty_detections_skip_segment(self, dataset):
        _, manifest = dataset
        sha2 = image_sha(manifest, "plate_002")
        with StubServer(
            scripted_payloads(manifest), detect_overrides={sha2: []}
        ) as server:
            provider = RemoteProvider(server.url, sleeper=no_sleep)
            run = run_pipeline(manifest, PipelineConfig(), provider)
            assert run.ok
            assert run.predictions.detections["plate_002"] == ()
            assert run.predictions.masks["plate_002"] == ()
            assert all(c["sha"] != sha2 for c in server.calls("/v1/segment"))

    def test_out_of_frame_boxes_clipped_in_run(self, dataset, caplog):
        _, manifest = dataset
        sha3 = image_sha(manifest, "plate_003")
        overrides = {
            sha3: [
                {"box": [-5, 0, 10, 10], "score": 0.9, "phrase": "colony"},
                {"box": [100, 100, 200, 200], "score": 0.8, "phrase": "colony"},
            ]
        }
        with StubServer(scripted_payloads(manifest), detect_overrides=overrides) as server:
            provider = RemoteProvider(server.url, sleeper=no_sleep)
            with caplog.at_level(logging.WARNING, logger="colonyeval.pipeline"):
                run = run_pipeline(manifest, PipelineConfig(), provider)
        dets = run.predictions.detections["plate_003"]
        assert len(dets) == 1  # the fully-outside box is dropped
        assert dets[0].box.as_xyxy() == (0.0, 0.0, 10.0, 10.0)

    def test_fault_on_one_image_isolates_others(self, dataset, tmp_path):
        _, manifest = dataset
        with StubServer(scripted_payloads(manifest)) as server:
            provider = RemoteProvider(server.url, sleeper=no_sleep)
            clean = run_pipeline(manifest, PipelineConfig(), provider)
        sha2 = image_sha(manifest, "plate_002")
        with StubServer(scripted_payloads(manifest), error_shas={sha2}) as server:
            provider = RemoteProvider(server.url, sleeper=no_sleep)
            faulty = run_pipeline(manifest, PipelineConfig(), provider)
        assert not faulty.aborted
        assert [f.image_id for f in faulty.failures] == ["plate_002"]
        assert "HTTP 500" in faulty.failures[0].message
        assert set(faulty.completed) == {"plate_001", "plate_003"}
        for image_id in ("plate_001", "plate_003"):
            assert faulty.predictions.detections[image_id] == clean.predictions.detections[image_id]
            assert faulty.predictions.masks[image_id] == clean.predictions.masks[image_id]
        assert "plate_002" not in faulty.predictions.detections

    def test_arity_violation_fails_image(self, dataset):
        _, manifest = dataset
        sha1 = image_sha(manifest, "plate_001")
        with StubServer(
            scripted_payloads(manifest), segment_short_shas={sha1}
        ) as server:
            provider = RemoteProvider(server.url, sleeper=no_sleep)
            run = run_pipeline(manifest, PipelineConfig(), provider)
        assert [f.image_id for f in run.failures] == ["plate_001"]
        assert "masks" in run.failures[0].message
        assert set(run.completed) == {"plate_002", "plate_003"}

    def test_transient_drops_retried_then_succeed(self, dataset):
        _, manifest = dataset
        sha1 = image_sha(manifest, "plate_001")
        delays = []
        with StubServer(
            scripted_payloads(manifest), transient_drops={sha1: 2}
        ) as server:
            provider = RemoteProvider(server.url, sleeper=delays.append)
            run = run_pipeline(
                manifest, PipelineConfig(request_parallelism=1), provider
            )
            assert run.ok
            attempts = [c for c in server.calls("/v1/detect") if c["sha"] == sha1]
            assert len(attempts) == 3
            assert sum(1 for c in attempts if c.get("dropped")) == 2
        # exponential backoff between the three attempts
        assert delays == [0.1, 0.2]

    def test_unreachable_provider_aborts(self, dataset):
        _, manifest = dataset
        provider = RemoteProvider("http://127.0.0.1:9", timeout=0.2, sleeper=no_sleep)
        run = run_pipeline(manifest, PipelineConfig(), provider)
        assert run.aborted
        assert run.abort_reason
        assert run.completed == ()

    def test_high_water_respects_parallelism(self, dataset):
        _, manifest = dataset
        with StubServer(scripted_payloads(manifest), latency=0.05) as server:
            provider = RemoteProvider(server.url, sleeper=no_sleep)
            run = run_pipeline(
                manifest, PipelineConfig(request_parallelism=2), provider
            )
            assert run.ok
            assert server.high_water <= 2

    def test_single_worker_serializes_requests(self, dataset):
        _, manifest = dataset
        with StubServer(scripted_payloads(manifest), latency=0.02) as server:
            provider = RemoteProvider(server.url, sleeper=no_sleep)
            run = run_pipeline(
                manifest, PipelineConfig(request_parallelism=1), provider
            )
            assert run.ok
            assert server.high_water == 1


class TestCache:
    def test_warm_rerun_makes_no_model_calls(self, dataset, tmp_path):
        _, manifest = dataset
        config = PipelineConfig(cache_dir=tmp_path / "cache")
        with StubServer(scripted_payloads(manifest)) as server:
            provider = RemoteProvider(server.url, sleeper=no_sleep)
            first = run_pipeline(manifest, config, provider)
            assert len(server.calls("/v1/detect")) == 3
            server.reset_ledger()
            provider2 = RemoteProvider(server.url, sleeper=no_sleep)
            second = run_pipeline(manifest, config, provider2)
            assert server.calls("/v1/detect") == []
            assert server.calls("/v1/segment") == []
            # version discovery may ping health, nothing else
            assert {c["endpoint"] for c in server.ledger} <= {"/v1/health"}
        assert first.predictions == second.predictions

    def test_changed_prompt_requeries(self, dataset, tmp_path):
        _, manifest = dataset
        with StubServer(scripted_payloads(manifest)) as server:
            provider = RemoteProvider(server.url, sleeper=no_sleep)
            run_pipeline(
                manifest, PipelineConfig(cache_dir=tmp_path / "cache"), provider
            )
            server.reset_ledger()
            run_pipeline(
                manifest,
                PipelineConfig(prompt_text="colony", cache_dir=tmp_path / "cache"),
                provider,
            )
            assert len(server.calls("/v1/detect")) == 3

    def test_corrupt_entry_requeries_one_image(self, dataset, tmp_path):
        _, manifest = dataset
        cache_dir = tmp_path / "cache"
        with StubServer(scripted_payloads(manifest)) as server:
            provider = RemoteProvider(server.url, sleeper=no_sleep)
            first = run_pipeline(
                manifest, PipelineConfig(cache_dir=cache_dir), provider
            )
            entries = sorted(cache_dir.glob("*.json"))
            assert len(entries) == 3
            entries[0].write_text("{ not json")
            server.reset_ledger()
            second = run_pipeline(
                manifest, PipelineConfig(cache_dir=cache_dir), provider
            )
            assert len(server.calls("/v1/detect")) == 1
        assert first.predictions == second.predictions

    def test_lookup_round_trips_result(self, tmp_path, dataset):
        _, manifest = dataset
        cache = ResultCache(tmp_path / "c")
        preds = stub_prediction_set()
        from colonyeval.pipeline import ProviderResult

        result = ProviderResult(
            image_id="plate_001",
            detections=preds.detections["plate_001"],
            masks=preds.masks["plate_001"],
            provider_latency_ms=12.5,
            model_version="m1",
        )
        cache.store("sha", "fp", result)
        hit = cache.lookup("sha", "fp")
        assert hit is not None
        assert hit.detections == result.detections
        assert hit.masks == result.masks
        assert cache.lookup("sha", "other-fp") is None
