import math
import zipfile
import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from edgeo.geometry import CVOGL_ANCHORS, AnchorSet, Box, iou
from edgeo.loss import total_loss
from edgeo.network import (
    BackboneSpec,
    DetectionHead,
    EDGeoModel,
    HeadOutput,
    ModelConfig,
    QueryAttentionFusion,
    assign,
    decode,
    ideal_raw,
    load_state,
    predict,
    read_checkpoint,
    save_checkpoint,
)

from conftest import finite_difference_errors, tiny_model

ANCHORS = AnchorSet(CVOGL_ANCHORS)


def raw_with(gh, gw, na=9, stride=16, anchors=ANCHORS, fill=0.0):
    return HeadOutput(torch.full((1, gh, gw, na, 5), fill, dtype=torch.float64), stride, anchors)


class TestEncoders:
    def test_query_shape(self):
        spec = BackboneSpec(downsample_factor=8, out_channels=64, widths=(16, 32, 64))
        m = EDGeoModel(ModelConfig(backbone=spec, anchors=ANCHORS))
        f = m.encode_query(torch.rand(3, 128, 128), torch.rand(1, 128, 128))
        assert f.shape == (1, 64, 16, 16)

    def test_reference_shape(self):
        m = EDGeoModel(ModelConfig(anchors=ANCHORS))
        assert m.encode_reference(torch.rand(3, 256, 256)).shape == (1, 128, 16, 16)

    def test_encoding_size_mismatch(self):
        m = tiny_model()
        with pytest.raises(ValueError):
            m.encode_query(torch.rand(3, 32, 32), torch.rand(1, 32, 16))

    def test_non_divisible(self):
        m = tiny_model()
        with pytest.raises(ValueError):
            m.encode_reference(torch.rand(3, 40, 40))

    def test_deterministic(self):
        m = tiny_model()
        x = torch.rand(3, 32, 32)
        assert torch.equal(m.encode_reference(x), m.encode_reference(x))
        assert torch.equal(tiny_model().encode_reference(x), m.encode_reference(x))

    def test_bad_specs(self):
        with pytest.raises(ValueError):
            BackboneSpec(downsample_factor=12)
        with pytest.raises(ValueError):
            BackboneSpec(downsample_factor=8, widths=(8, 8, 8, 8))


class TestFusion:
    def test_dims_and_range(self):
        fu = QueryAttentionFusion(16)
        fq, fr = torch.randn(2, 16, 3, 5), torch.randn(2, 16, 8, 8)
        out, attn = fu(fq, fr)
        assert out.shape == fr.shape and attn.shape == (2, 8, 8)
        assert torch.isfinite(out).all()
        assert ((attn > 0) & (attn < 1)).all()

    def test_zero_query_gives_half(self):
        fu = QueryAttentionFusion(8)
        attn = fu.attention(torch.zeros(1, 8, 4, 4), torch.randn(1, 8, 6, 6))
        assert torch.equal(attn, torch.full((1, 6, 6), 0.5))

    def test_attention_formula(self):
        fu = QueryAttentionFusion(4)
        fq, fr = torch.randn(1, 4, 2, 2, dtype=torch.float64), torch.randn(1, 4, 3, 3, dtype=torch.float64)
        q = fq.mean(dim=(2, 3))[0]
        expect = torch.sigmoid(torch.einsum("c,chw->hw", q, fr[0]) / 2.0)
        torch.testing.assert_close(fu.attention(fq, fr)[0], expect)

    def test_channel_mismatch(self):
        with pytest.raises(ValueError):
            QueryAttentionFusion(8).attention(torch.randn(1, 4, 2, 2), torch.randn(1, 8, 2, 2))


class TestHead:
    def test_layout(self):
        head = DetectionHead(12, 9)
        assert head(torch.randn(1, 12, 16, 16)).shape == (1, 16, 16, 9, 5)

    def test_layout_matches_channels(self):
        head = DetectionHead(3, 2)
        f = torch.randn(1, 3, 4, 5)
        out = head(f)
        flat = head.conv(f)
        # channel a*5+t lands at [..., a, t]
        assert torch.equal(out[0, 2, 3, 1, 4], flat[0, 1 * 5 + 4, 2, 3])

    def test_zero_weights(self):
        head = DetectionHead(6, 9)
        with torch.no_grad():
            head.conv.weight.zero_()
            head.conv.bias.zero_()
        assert (head(torch.randn(1, 6, 4, 4)) == 0).all()

    def test_objectness_prior(self):
        head = DetectionHead(6, 9)
        with torch.no_grad():
            head.conv.weight.zero_()
        assert torch.sigmoid(head(torch.randn(1, 6, 2, 2))[..., 4]).sub(0.01).abs().max() < 1e-6


class TestModel:
    @pytest.mark.parametrize("ref,widths,cem", [(64, (4, 4, 8, 8), True), (128, (8, 8, 16, 16), False),
                                                (96, (4, 8, 8), True)])
    def test_grid_dims(self, ref, widths, cem):
        m = tiny_model(cem=cem, widths=widths, out=widths[-1])
        out = m(torch.rand(2, 3, 32, 32), torch.rand(2, 1, 32, 32), torch.rand(2, 3, ref, ref))
        f = 2 ** len(widths)
        assert out.grid.shape == (2, ref // f, ref // f, 9, 5)
        assert out.stride == f
        assert torch.isfinite(out.grid).all()

    def test_forward_deterministic(self):
        args = (torch.rand(1, 3, 32, 32), torch.rand(1, 1, 32, 32), torch.rand(1, 3, 64, 64))
        assert torch.equal(tiny_model()(*args).grid, tiny_model()(*args).grid)

    def test_gradient_check(self):
        torch.manual_seed(1)
        m = tiny_model(seed=2).double()
        args = (torch.rand(1, 3, 32, 32, dtype=torch.float64), torch.rand(1, 1, 32, 32, dtype=torch.float64),
                torch.rand(1, 3, 64, 64, dtype=torch.float64))
        a = assign(Box(30, 20, 14, 22), m.cfg.anchors, (4, 4), 16)
        errs = finite_difference_errors(m, lambda: total_loss(m(*args), [a]).total, 60, seed=3)
        assert errs.max() <= 1e-3


class TestDecode:
    def test_zero_raw(self):
        box, conf = decode(raw_with(8, 8), (3, 4), 0)
        assert (box.cx, box.cy, box.w, box.h) == (72, 56, 37, 41)
        assert conf == 0.5

    def test_log_two(self):
        raw = raw_with(4, 4)
        raw.grid[0, 0, 0, 0, 2] = math.log(2)
        assert decode(raw, (0, 0), 0)[0].w == pytest.approx(74, abs=1e-12)

    def test_additive_mode(self):
        raw = raw_with(4, 4)
        raw.decode_mode = "additive"
        raw.grid[0, 1, 1, 2, 2] = 4.0
        raw.grid[0, 1, 1, 2, 3] = -15.0
        box, _ = decode(raw, (1, 1), 2)
        assert (box.w, box.h) == (100, 200)

    def test_index_errors(self):
        raw = raw_with(4, 4)
        for cell, a in [((4, 0), 0), ((0, -1), 0), ((0, 0), 9)]:
            with pytest.raises(IndexError):
                decode(raw, cell, a)

    @settings(max_examples=300)
    @given(st.floats(0, 255.99), st.floats(0, 255.99), st.floats(2, 500), st.floats(2, 500))
    def test_round_trip(self, cx, cy, w, h):
        gt = Box(cx, cy, w, h)
        a = assign(gt, ANCHORS, (16, 16), 16)
        raw = raw_with(16, 16)
        raw.grid[0, a.cell[0], a.cell[1], a.anchor_index, :4] = torch.tensor(ideal_raw(a, ANCHORS), dtype=torch.float64)
        box, _ = decode(raw, a.cell, a.anchor_index)
        for got, want in zip(box.as_list(), gt.as_list()):
            assert abs(got - want) <= 1e-4


def _brute_anchor(gt, anchors):
    ious = [iou(Box(0, 0, gt.w, gt.h), Box(0, 0, w, h)) for w, h in anchors]
    return ious.index(max(ious))


class TestAssign:
    def test_example(self):
        a = assign(Box(72, 56, 37, 41), ANCHORS, (16, 16), 16)
        assert a.cell == (3, 4) and a.anchor_index == 0
        assert a.targets == (4.5, 3.5, 37, 41)

    @pytest.mark.parametrize("idx", range(9))
    def test_exact_anchor_wins(self, idx):
        w, h = CVOGL_ANCHORS[idx]
        assert assign(Box(100, 100, w, h), ANCHORS, (16, 16), 16).anchor_index == idx

    def test_square(self):
        assert CVOGL_ANCHORS[assign(Box(50, 50, 129, 129), ANCHORS, (16, 16), 16).anchor_index] == (129, 129)

    def test_tie_goes_low(self):
        anchors = AnchorSet([(10, 20), (20, 10)])
        assert assign(Box(5, 5, 10, 10), anchors, (1, 1), 16).anchor_index == 0

    @settings(max_examples=200)
    @given(st.floats(0, 255.9), st.floats(0, 255.9), st.floats(1, 600), st.floats(1, 600))
    def test_matches_brute_force(self, cx, cy, w, h):
        gt = Box(cx, cy, w, h)
        a = assign(gt, ANCHORS, (16, 16), 16)
        assert a.cell == (int(cy // 16), int(cx // 16))
        assert a.anchor_index == _brute_anchor(gt, CVOGL_ANCHORS)

    def test_center_outside(self):
        with pytest.raises(ValueError):
            assign(Box(256, 10, 5, 5), ANCHORS, (16, 16), 16)


class TestPredict:
    def test_argmax(self):
        raw = raw_with(4, 4, fill=-5.0)
        raw.grid[0, 2, 1, 7, 4] = 5.0
        box, conf = predict(raw)
        assert box == decode(raw, (2, 1), 7)[0]
        assert conf == pytest.approx(1 / (1 + math.exp(-5)))

    def test_uniform_tie_break(self):
        raw = raw_with(4, 4)
        raw.grid[..., 4] = 1.5
        box, conf = predict(raw)
        assert box == decode(raw, (0, 0), 0)[0] == Box(8, 8, 37, 41)
        assert conf == pytest.approx(1 / (1 + math.exp(-1.5)))

    def test_saturated_logits_still_ordered(self):
        raw = raw_with(2, 2, fill=40.0)
        raw.grid[0, 1, 1, 3, 4] = 41.0
        box, _ = predict(raw)
        assert box == decode(raw, (1, 1), 3)[0]

    def test_batch_index(self):
        g = torch.full((2, 2, 2, 9, 5), -1.0)
        g[1, 0, 1, 4, 4] = 3.0
        raw = HeadOutput(g, 16, ANCHORS)
        assert predict(raw, 1)[0] == decode(raw, (0, 1), 4, 1)[0]


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        m = tiny_model(seed=7)
        cfg = {"note": "x"}
        path = save_checkpoint(m, tmp_path / "m.edgeo", cfg, seed=7)
        manifest, state = read_checkpoint(path)
        assert manifest["seed"] == 7 and manifest["config"] == cfg
        assert manifest["anchors"] == [list(a) for a in m.cfg.anchors]
        other = load_state(tiny_model(seed=99), state)
        for (k, a), (_, b) in zip(m.state_dict().items(), other.state_dict().items()):
            assert torch.equal(a, b), k

    def test_container_layout(self, tmp_path):
        m = tiny_model()
        path = save_checkpoint(m, tmp_path / "m.edgeo", {}, seed=0)
        with zipfile.ZipFile(path) as zf:
            manifest = json.loads(zf.read("manifest.json"))
            t = manifest["tensors"][0]
            raw = np.frombuffer(zf.read(t["file"]), dtype="<f4")
        assert manifest["format"] == "edgeo-checkpoint" and manifest["version"] == 1
        assert t["dtype"] == "float32-le"
        np.testing.assert_array_equal(raw.reshape(t["shape"]), m.state_dict()[t["key"]].numpy())

    def test_mismatch_rejected(self, tmp_path):
        path = save_checkpoint(tiny_model(cem=True), tmp_path / "m.edgeo", {}, seed=0)
        _, state = read_checkpoint(path)
        with pytest.raises(ValueError):
            load_state(tiny_model(cem=False), state)

    def test_bad_format(self, tmp_path):
        p = tmp_path / "bad.edgeo"
        with zipfile.ZipFile(p, "w") as zf:
            zf.writestr("manifest.json", json.dumps({"format": "other", "version": 1}))
        with pytest.raises(ValueError):
            read_checkpoint(p)
