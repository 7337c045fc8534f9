import hashlib
import json
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from edgeo.geometry import Box, box_inside, iou
from edgeo.synthdata import (
    DatasetError,
    SceneConfig,
    generate_dataset,
    generate_sample,
    object_boxes,
    read_dataset,
    read_manifest,
    write_dataset,
)

SMALL = SceneConfig(n_objects=4, side_range=(12.0, 24.0), center_jitter=8.0, query_size=(64, 64),
                    reference_size=(128, 128))


def digest(s):
    h = hashlib.sha256()
    for a in (s.query_image, s.reference_image, s.mask.values):
        h.update(a.tobytes())
    h.update(json.dumps([s.point.x, s.point.y, s.gt_box.as_list()]).encode())
    return h.hexdigest()


class TestGenerate:
    def test_bit_identical(self):
        assert generate_sample(SceneConfig(), 5) == generate_sample(SceneConfig(), 5)
        assert digest(generate_sample(SceneConfig(), 5)) != digest(generate_sample(SceneConfig(), 6))

    def test_identical_across_processes(self):
        code = ("from edgeo.synthdata import SceneConfig, generate_sample;"
                "import hashlib, json;"
                "s = generate_sample(SceneConfig(seed=3), 11);"
                "h = hashlib.sha256();"
                "[h.update(a.tobytes()) for a in (s.query_image, s.reference_image, s.mask.values)];"
                "h.update(json.dumps([s.point.x, s.point.y, s.gt_box.as_list()]).encode());"
                "print(h.hexdigest())")
        out = subprocess.run([sys.executable, "-c", code], check=True, capture_output=True, text=True).stdout.strip()
        assert out == digest(generate_sample(SceneConfig(seed=3), 11))

    def test_seed_changes_output(self):
        assert generate_sample(SceneConfig(seed=0), 0) != generate_sample(SceneConfig(seed=1), 0)

    def test_shapes_and_dtypes(self):
        s = generate_sample(SceneConfig(), 0)
        assert s.query_image.shape == (3, 128, 128) and s.query_image.dtype == np.uint8
        assert s.reference_image.shape == (3, 256, 256)
        assert s.mask.values.shape == (128, 128)
        assert s.meta["generator_version"] and s.meta["seed"] == 0

    def test_all_elongated(self):
        cfg = SceneConfig(elongated_fraction=1.0)
        for i in range(30):
            s = generate_sample(cfg, i)
            assert s.meta["aspect"] > 1.5 and s.meta["elongated"]
        assert all(max(w, h) / min(w, h) > 1.5 for w, h in object_boxes(cfg, 20))

    def test_all_compact(self):
        assert all(max(w, h) / min(w, h) <= 1.5 for w, h in object_boxes(SceneConfig(elongated_fraction=0.0), 20))

    def test_targets_cycle(self):
        cfg = SceneConfig()
        samples = generate_dataset(cfg, 12)
        assert [s.meta["target_index"] for s in samples] == [i % cfg.n_objects for i in range(12)]
        kinds = {s.meta["elongated"] for s in samples[: cfg.n_objects]}
        assert kinds == {True, False}

    def test_invariants_1000(self):
        cfg = SceneConfig()
        hr, wr = cfg.reference_size
        for s in generate_dataset(cfg, 1000):
            assert s.mask.contains(s.point)
            assert box_inside(s.gt_box, wr, hr)
            frame = Box(wr / 2, hr / 2, wr, hr)
            assert iou(s.gt_box, frame) == pytest.approx(s.gt_box.area / (wr * hr), rel=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000), st.integers(0, 1000), st.floats(0, 1))
    def test_invariants_random_configs(self, seed, index, frac):
        cfg = SceneConfig(n_objects=4, side_range=(12.0, 24.0), center_jitter=8.0, query_size=(64, 64),
                          reference_size=(128, 128), seed=seed, elongated_fraction=frac)
        s = generate_sample(cfg, index)
        assert s.mask.contains(s.point)
        assert box_inside(s.gt_box, 128, 128)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            SceneConfig(aspect_range=(3.0, 2.0))
        with pytest.raises(ValueError):
            SceneConfig(elongated_fraction=1.2)
        with pytest.raises(ValueError):
            SceneConfig(n_objects=40)

    def test_config_dict_round_trip(self):
        cfg = SceneConfig(seed=9, rotations=(0.0, 90.0))
        assert SceneConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg
        with pytest.raises(ValueError):
            SceneConfig.from_dict({"bogus": 1})


class TestDiskFormat:
    def test_round_trip(self, tmp_path):
        samples = write_dataset(SMALL, 10, tmp_path / "ds")
        back = read_dataset(tmp_path / "ds")
        assert len(back) == 10
        assert back == samples

    def test_layout(self, tmp_path):
        write_dataset(SMALL, 3, tmp_path / "ds", start=5)
        m = read_manifest(tmp_path / "ds")
        assert m["schema_version"] == 1 and m["config"]["seed"] == 0
        rec = m["samples"][0]
        assert set(rec) == {"id", "query", "reference", "mask", "point", "gt_box", "meta"}
        assert rec["meta"]["index"] == 5
        for key in ("query", "reference", "mask"):
            assert (tmp_path / "ds" / rec[key]).is_file()

    def test_missing_mask_names_sample(self, tmp_path):
        write_dataset(SMALL, 3, tmp_path / "ds")
        (tmp_path / "ds" / "mask" / "000001.png").unlink()
        with pytest.raises(DatasetError, match="sample 000001"):
            read_dataset(tmp_path / "ds")

    def test_tampered_record(self, tmp_path):
        write_dataset(SMALL, 2, tmp_path / "ds")
        path = tmp_path / "ds" / "manifest.json"
        m = json.loads(path.read_text())
        del m["samples"][1]["gt_box"]
        path.write_text(json.dumps(m))
        with pytest.raises(DatasetError, match="sample 000001"):
            read_dataset(tmp_path / "ds")

    def test_malformed_manifest(self, tmp_path):
        (tmp_path / "ds").mkdir()
        (tmp_path / "ds" / "manifest.json").write_text("{not json")
        with pytest.raises(DatasetError):
            read_dataset(tmp_path / "ds")
        with pytest.raises(DatasetError):
            read_dataset(tmp_path / "nothing")
