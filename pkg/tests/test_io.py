import json
import os

import numpy as np
import pytest

from ditquant.artifacts import (load_archive, load_checkpoint, load_sidecar,
                                load_tensors, save_archive, save_checkpoint,
                                save_metric_table, save_sidecar, save_tensors)
from ditquant.calibration import build_calib_dataset, calibrate, collect_layer_stats
from ditquant.config import RunConfig, parse_config_text
from ditquant.diffusion import SyntheticDataset, make_schedule
from ditquant.errors import ConfigError
from ditquant.evaluation import model_digest
from ditquant.model import DiTConfig, DiTModel


class TestConfig:
    def test_defaults_valid(self):
        cfg = RunConfig.defaults()
        assert cfg["calib.groups"] == 10
        assert cfg["calib.samples_per_group"] == 32
        assert cfg["calib.rounds"] == 3

    def test_round_trip(self):
        cfg = RunConfig.defaults()
        again = RunConfig.from_text(cfg.to_text())
        assert again.values == cfg.values

    def test_unknown_key_named(self):
        with pytest.raises(ConfigError, match="model.embed_dims"):
            RunConfig.from_text("model.embed_dims = 12")

    def test_bad_value_named(self):
        with pytest.raises(ConfigError, match="train.steps"):
            RunConfig.from_text("train.steps = soon")

    def test_comments_and_blanks(self):
        raw = parse_config_text("# hi\n\nmodel.embed_dim = 32  # inline\n")
        assert raw == {"model.embed_dim": "32"}

    def test_duplicate_key_rejected(self):
        with pytest.raises(ConfigError, match="duplicate"):
            parse_config_text("a.b = 1\na.b = 2")

    def test_group_divisibility_enforced(self):
        with pytest.raises(ConfigError):
            RunConfig.from_text("calib.groups = 7")

    def test_bit_range_enforced(self):
        with pytest.raises(ConfigError):
            RunConfig.from_text("calib.k_w = 9")


class TestTensorContainer:
    def test_round_trip_byte_identical(self, tmp_path):
        rng = np.random.default_rng(0)
        arrays = {"w": rng.standard_normal((3, 4)).astype(np.float32),
                  "idx": np.arange(5, dtype=np.int64)}
        stem1 = str(tmp_path / "a")
        save_tensors(stem1, arrays, {"note": "x"})
        header, loaded = load_tensors(stem1)
        assert header["note"] == "x"
        stem2 = str(tmp_path / "b")
        save_tensors(stem2, loaded, {"note": "x"})
        assert open(stem1 + ".bin", "rb").read() == open(stem2 + ".bin", "rb").read()
        assert open(stem1 + ".manifest").read() == open(stem2 + ".manifest").read()

    def test_corrupt_payload_detected(self, tmp_path):
        stem = str(tmp_path / "c")
        save_tensors(stem, {"w": np.ones(4, dtype=np.float32)})
        with open(stem + ".bin", "r+b") as fh:
            fh.seek(0)
            fh.write(b"\xff")
        with pytest.raises(ConfigError, match="digest"):
            load_tensors(stem)


SMALL = DiTConfig(image_size=8, channels=1, patch_size=4, embed_dim=8,
                  num_blocks=1, num_heads=2, num_classes=4, timesteps=20)


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        model = DiTModel.init(SMALL, seed=3, zero_gates=False)
        stem = str(tmp_path / "ckpt")
        save_checkpoint(stem, model)
        loaded = load_checkpoint(stem)
        assert loaded.config == SMALL
        assert model_digest(loaded) == model_digest(model)
        x = np.random.default_rng(1).standard_normal((1, 1, 8, 8))
        assert np.array_equal(loaded.forward(x, 2, 1).data,
                              model.forward(x, 2, 1).data)

    def test_save_load_save_byte_identical(self, tmp_path):
        model = DiTModel.init(SMALL, seed=4, zero_gates=False)
        s1, s2 = str(tmp_path / "a"), str(tmp_path / "b")
        save_checkpoint(s1, model)
        save_checkpoint(s2, load_checkpoint(s1))
        assert open(s1 + ".bin", "rb").read() == open(s2 + ".bin", "rb").read()
        assert open(s1 + ".manifest").read() == open(s2 + ".manifest").read()


@pytest.fixture(scope="module")
def small_quantized():
    model = DiTModel.init(SMALL, seed=5, zero_gates=False)
    schedule = make_schedule(SMALL.timesteps)
    dataset = SyntheticDataset(SMALL.num_classes, SMALL.image_size, seed=8)
    calib = build_calib_dataset(model, schedule, dataset, groups=4, per_group=4,
                                mode="forward", seed=2)
    stats = collect_layer_stats(model, calib)
    qm, report = calibrate(model, stats, k_w=6, k_a=6, rounds=1, groups=4,
                           num_candidates=8)
    return model, qm, report


class TestSidecar:
    def test_round_trip_reproduces_quantized_outputs(self, small_quantized, tmp_path):
        model, qm, report = small_quantized
        path = str(tmp_path / "side.json")
        save_sidecar(path, qm, {"dataset_digest": report.dataset_digest,
                                "rounds": report.rounds, "groups": report.groups,
                                "k_w": report.k_w, "k_a": report.k_a})
        loaded, provenance = load_sidecar(path, model)
        assert provenance["k_w"] == 6
        x = np.random.default_rng(2).standard_normal((2, 1, 8, 8))
        assert np.array_equal(loaded.forward(x, 3, 1).data,
                              qm.forward(x, 3, 1).data)

    def test_covers_every_site(self, small_quantized, tmp_path):
        model, qm, _ = small_quantized
        path = str(tmp_path / "side.json")
        save_sidecar(path, qm, {})
        doc = json.load(open(path))
        assert set(doc["sites"]) == {s.site_id for s in model.sites()}

    def test_corrupt_digest_refused(self, small_quantized, tmp_path):
        model, qm, _ = small_quantized
        path = str(tmp_path / "side.json")
        save_sidecar(path, qm, {})
        doc = json.load(open(path))
        first_site = sorted(doc["sites"])[0]
        doc["sites"][first_site]["enabled"] = not doc["sites"][first_site]["enabled"]
        with open(path, "w") as fh:
            json.dump(doc, fh)
        with pytest.raises(ConfigError, match="corrupt"):
            load_sidecar(path, model)

    def test_byte_stable(self, small_quantized, tmp_path):
        _, qm, _ = small_quantized
        p1, p2 = str(tmp_path / "a.json"), str(tmp_path / "b.json")
        save_sidecar(p1, qm, {"k": 1})
        save_sidecar(p2, qm, {"k": 1})
        assert open(p1).read() == open(p2).read()


class TestArchive:
    def test_round_trip_and_preview(self, tmp_path):
        rng = np.random.default_rng(0)
        samples = rng.uniform(-1, 1, size=(10, 1, 8, 8)).astype(np.float32)
        labels = rng.integers(0, 4, size=10)
        stem = str(tmp_path / "samples")
        preview = str(tmp_path / "preview.png")
        save_archive(stem, samples, labels, {"mode": "fp"}, preview)
        loaded, y, header = load_archive(stem)
        assert np.array_equal(loaded, samples)
        assert np.array_equal(y, labels)
        assert header["mode"] == "fp"
        assert os.path.getsize(preview) > 0

    def test_empty_archive(self, tmp_path):
        stem = str(tmp_path / "empty")
        save_archive(stem, np.zeros((0, 1, 8, 8), dtype=np.float32),
                     np.zeros(0, dtype=np.int64))
        loaded, y, _ = load_archive(stem)
        assert loaded.shape[0] == 0 and y.shape[0] == 0


class TestMetricTable:
    def test_deterministic_and_mirrored(self, tmp_path):
        rows = [{"config": "fp", "toy_fd": 1.25, "seed": 0},
                {"config": "W6A6", "toy_fd": 2.5, "seed": 0}]
        s1, s2 = str(tmp_path / "m1"), str(tmp_path / "m2")
        save_metric_table(s1, rows)
        save_metric_table(s2, rows)
        assert open(s1 + ".csv").read() == open(s2 + ".csv").read()
        assert open(s1 + ".json").read() == open(s2 + ".json").read()
        parsed = json.load(open(s1 + ".json"))
        assert parsed[0]["toy_fd"] == 1.25
        header = open(s1 + ".csv").read().splitlines()[0]
        assert header == "config,seed,toy_fd"
