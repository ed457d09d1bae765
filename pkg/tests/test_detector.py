import math

import numpy as np
import pytest
import torch
from hypothesis import assume, given, settings
from hypothesis import strategies as st

import oracles
from conftest import GOLDEN
from scleraseg.architectures import VOC_ANCHORS
from scleraseg.dataset import synthetic_eye
from scleraseg.detector import (BoundingBox, Detection, DetectorConfig, build_fast_yolo,
                                decode_predictions, detect, detector_loss, detector_spec,
                                encode_box, encode_raw, iou, prepare_input, read_boxes,
                                select_periocular, write_boxes)
from scleraseg.modelspec import ModelSpecError

CFG = DetectorConfig()


def _as_head(raw: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(raw.transpose(2, 0, 1).copy())[None].double()


# --------------------------------------------------------------------------
# architecture

def test_layer_table_matches_golden():
    assert detector_spec(CFG).describe() == (GOLDEN / "fast_yolo.txt").read_text()


def test_traced_network_matches_table():
    spec, net = build_fast_yolo(CFG, seed=0)
    rows = {l.index: l for l in spec.layers}
    assert rows[0].output_shape == (416, 416, 16)
    assert rows[9].output_shape == (13, 13, 256)
    assert rows[14].output_shape == (13, 13, 30)
    assert rows[11].stride == 1 and rows[11].input_shape == rows[11].output_shape
    convs = [l for l in spec.layers if l.kind == "conv"]
    pools = [l for l in spec.layers if l.kind == "max"]
    assert len(convs) == 9 and len(pools) == 6
    assert all(l.kernel == 3 for l in convs[:-1]) and convs[-1].kernel == 1


def test_real_forward_shape():
    _, net = build_fast_yolo(DetectorConfig(width_divisor=16), seed=0)
    with torch.no_grad():
        out = net(torch.zeros(1, 3, 416, 416))
    assert out.shape == (1, 30, 13, 13)


def test_grayscale_variant():
    spec, _ = build_fast_yolo(DetectorConfig(in_channels=1, width_divisor=16))
    assert spec.layers[0].input_shape == (416, 416, 1)


@pytest.mark.parametrize("anchors, classes, filters", [(5, 20, 125), (3, 1, 18), (5, 1, 30)])
def test_final_filter_count(anchors, classes, filters):
    cfg = DetectorConfig(anchors=VOC_ANCHORS[:anchors], classes=classes)
    assert cfg.final_filters == filters
    assert detector_spec(cfg).layers[14].output_shape == (13, 13, filters)


def test_inconsistent_filter_count_is_fatal():
    with pytest.raises(ModelSpecError):
        DetectorConfig(final_filters=125)


# --------------------------------------------------------------------------
# decoding

def test_all_negative_objectness_decodes_to_nothing():
    raw = np.zeros((13, 13, 30))
    raw[..., 4::6] = -1e4
    assert decode_predictions(raw, CFG) == []


def test_single_zero_cell():
    raw = np.zeros((13, 13, 30))
    raw[..., 4::6] = -50.0
    raw[6, 6, 0:6] = 0.0  # sigmoid(0) * sigmoid(0) = 0.25, right at the threshold
    dets = decode_predictions(raw, CFG)
    assert len(dets) == 1
    d = dets[0]
    assert d.cx == pytest.approx(6.5 / 13) and d.cy == pytest.approx(6.5 / 13)
    assert d.w == pytest.approx(VOC_ANCHORS[0][0] / 13)
    assert d.h == pytest.approx(VOC_ANCHORS[0][1] / 13)
    assert d.confidence == pytest.approx(0.25)


def test_two_hand_built_cells():
    raw = np.zeros((13, 13, 30))
    raw[..., 4::6] = -50.0
    # cell (2, 3), anchor 1: offsets ln(3) -> sigmoid 0.75, tw = ln 2, obj/cls logit 3
    raw[2, 3, 6:12] = [math.log(3), -math.log(3), math.log(2), 0.0, 3.0, 3.0]
    # cell (10, 0), anchor 4
    raw[10, 0, 24:30] = [0.0, 0.0, 0.0, math.log(0.5), 5.0, 2.0]
    dets = decode_predictions(raw, CFG)
    assert [(d.row, d.col, d.anchor) for d in dets] == [(2, 3, 1), (10, 0, 4)]
    s3, s5, s2 = 1 / (1 + math.exp(-3)), 1 / (1 + math.exp(-5)), 1 / (1 + math.exp(-2))
    a, b = dets
    assert (a.cx, a.cy) == pytest.approx(((3 + 0.75) / 13, (2 + 0.25) / 13))
    assert (a.w, a.h) == pytest.approx((2 * VOC_ANCHORS[1][0] / 13, VOC_ANCHORS[1][1] / 13))
    assert a.confidence == pytest.approx(s3 * s3)
    assert (b.cx, b.cy) == pytest.approx((0.5 / 13, 10.5 / 13))
    assert (b.w, b.h) == pytest.approx((VOC_ANCHORS[4][0] / 13, 0.5 * VOC_ANCHORS[4][1] / 13))
    assert b.confidence == pytest.approx(s5 * s2)


def test_decoder_matches_exhaustive_oracle(rng):
    for _ in range(10):
        raw = rng.normal(0, 2, (13, 13, 30))
        got = decode_predictions(raw, CFG)
        want = oracles.decode(raw.tolist(), VOC_ANCHORS, 1, 0.25)
        assert len(got) == len(want)
        for d, o in zip(got, want):
            assert (d.row, d.col, d.anchor) == o[5:]
            np.testing.assert_allclose([d.cx, d.cy, d.w, d.h, d.confidence], o[:5], atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0, 1), st.floats(0, 1))
def test_threshold_monotonicity(seed, t1, t2):
    raw = np.random.default_rng(seed).normal(0, 2, (13, 13, 30))
    lo, hi = sorted((t1, t2))
    assert len(decode_predictions(raw, CFG, hi)) <= len(decode_predictions(raw, CFG, lo))


boxes = st.builds(BoundingBox, st.floats(0.01, 0.99), st.floats(0.01, 0.99),
                  st.floats(0.02, 1.0), st.floats(0.02, 1.0))


@settings(max_examples=200, deadline=None)
@given(boxes)
def test_encode_decode_round_trip(box):
    dets = decode_predictions(encode_raw(box, CFG), CFG)
    assert len(dets) == 1
    d = dets[0]
    np.testing.assert_allclose([d.cx, d.cy, d.w, d.h], [box.cx, box.cy, box.w, box.h], atol=1e-6)
    e = encode_box(box, CFG)
    assert (d.row, d.col, d.anchor) == (e.row, e.col, e.anchor)


# --------------------------------------------------------------------------
# selection

def _det(conf, **kw):
    return Detection(0.5, 0.5, 0.1, 0.1, conf, **kw)


def test_select_empty():
    assert select_periocular([]) is None


def test_select_largest_confidence():
    a = Detection(0.2, 0.2, 0.1, 0.1, 0.3)
    b = Detection(0.7, 0.6, 0.2, 0.1, 0.9)
    assert select_periocular([a, b]) == b.box()


def test_select_tie_keeps_earliest():
    a = Detection(0.2, 0.2, 0.1, 0.1, 0.5, row=1)
    b = Detection(0.8, 0.8, 0.1, 0.1, 0.5, row=4)
    assert select_periocular([a, b]).cx == 0.2


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0.25, 1.0), min_size=1, max_size=12, unique=True), st.randoms())
def test_select_permutation_invariant(confs, random):
    dets = [Detection(i / 20, 0.5, 0.1, 0.1, c) for i, c in enumerate(confs)]
    shuffled = dets[:]
    random.shuffle(shuffled)
    assert select_periocular(dets) == select_periocular(shuffled)


# --------------------------------------------------------------------------
# loss

def test_loss_zero_for_perfect_prediction():
    box = BoundingBox(0.43, 0.61, 0.2, 0.15)
    pred = _as_head(encode_raw(box, CFG))
    assert detector_loss(pred, [box], CFG).item() < 1e-12


def test_doubling_coordinate_error_quadruples_coord_term():
    box = BoundingBox(0.43, 0.61, 0.2, 0.15)
    e = encode_box(box, CFG)
    terms = []
    for delta in (0.1, 0.2):
        raw = encode_raw(box, CFG)
        raw[e.row, e.col, e.anchor * 6 + 2] += delta  # width log-scale error
        _, parts = detector_loss(_as_head(raw), [box], CFG, components=True)
        terms.append(parts["coord"].item())
    assert terms[0] == pytest.approx(CFG.lambda_coord * 0.01)
    assert terms[1] == pytest.approx(4 * terms[0])


def test_noobj_term_is_down_weighted():
    box = BoundingBox(0.5, 0.5, 0.2, 0.2)
    raw = encode_raw(box, CFG)
    raw[0, 0, 4] = 0.0  # one stray predictor with objectness 0.5
    _, parts = detector_loss(_as_head(raw), [box], CFG, components=True)
    assert parts["noobj"].item() == pytest.approx(0.5 * 0.25)


def test_loss_decreases_when_overfitting_one_image():
    rng = np.random.default_rng(0)
    image, _, b = synthetic_eye(416, 416, rng)
    cfg = DetectorConfig(width_divisor=16)
    torch.manual_seed(0)
    _, net = build_fast_yolo(cfg)
    x, box = prepare_input(image, cfg), BoundingBox(*b)
    opt = torch.optim.Adam(net.parameters(), lr=1e-3)
    losses = []
    for _ in range(200):
        opt.zero_grad()
        loss = detector_loss(net(x), [box], cfg)
        loss.backward()
        opt.step()
        losses.append(loss.item())
    assert losses[-1] < 0.05 * losses[0]
    # smoothed over 20-step windows the curve keeps going down
    windows = np.asarray(losses).reshape(10, 20).mean(axis=1)
    assert (np.diff(windows) < 0).all()


# --------------------------------------------------------------------------
# misc

def test_iou():
    a = BoundingBox(0.5, 0.5, 0.2, 0.2)
    assert iou(a, a) == pytest.approx(1.0)
    assert iou(a, BoundingBox(0.9, 0.9, 0.1, 0.1)) == 0.0
    assert iou(a, BoundingBox(0.55, 0.5, 0.2, 0.2)) == pytest.approx(0.15 * 0.2 / (0.08 - 0.03))


@settings(max_examples=100, deadline=None)
@given(st.floats(-0.5, 1.5), st.floats(-0.5, 1.5), st.floats(0, 2), st.floats(0, 2))
def test_clamped_box_inside_image(cx, cy, w, h):
    b = BoundingBox(cx, cy, w, h).clamped()
    x0, y0, x1, y1 = b.corners()
    assume(b.w > 0 and b.h > 0)
    assert -1e-12 <= x0 and x1 <= 1 + 1e-12 and -1e-12 <= y0 and y1 <= 1 + 1e-12


def test_box_file_round_trip(tmp_path):
    boxes = {"b": BoundingBox(0.1, 0.2, 0.3, 0.4), "a": BoundingBox(0.5, 0.5, 0.25, 0.125)}
    write_boxes(tmp_path / "boxes.txt", boxes)
    assert read_boxes(tmp_path / "boxes.txt") == boxes


def test_detect_untrained_network_runs():
    _, net = build_fast_yolo(DetectorConfig(width_divisor=16), seed=1)
    image = np.zeros((300, 400, 3), np.uint8)
    dets = detect(net, image, threshold=0.0)
    assert len(dets) == 13 * 13 * 5
