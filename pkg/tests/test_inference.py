import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from numstr.anchors import Anchor
from numstr.core import BoundingBox, Detection
from numstr.detector import new_model
from numstr.inference import (
    SLOT,
    assemble_string,
    decode_grid,
    decode_slots,
    letterbox,
    predict_string,
    predict_strings,
    prepare_image,
    resize_bilinear,
    target_input_width,
)


@pytest.mark.parametrize(
    "s_w, expected",
    [(75, 128), (228, 384), (381, 640), (524, 896), (750, 1280), (76, 128), (1, 128)],
)
def test_target_input_width_table(s_w, expected):
    assert target_input_width(s_w) == expected


@given(st.integers(1, 5000), st.integers(1, 5000))
def test_target_input_width_monotone_and_aligned(a, b):
    lo, hi = sorted((a, b))
    wl, wh = target_input_width(lo), target_input_width(hi)
    assert wl <= wh
    assert wl % 32 == 0 and wl >= 128


def test_target_input_width_rejects_zero():
    with pytest.raises(ValueError):
        target_input_width(0)


def test_prepare_identity():
    img = np.random.default_rng(0).integers(0, 256, (128, 256)).astype(np.uint8)
    x, meta = prepare_image(img, (128, 256))
    assert x.shape == (1, 128, 256)
    np.testing.assert_allclose(x[0], (255.0 - img) / 255.0, atol=1e-6)
    assert (meta.scale_x, meta.scale_y, meta.pad_x, meta.pad_y) == (1.0, 1.0, 0.0, 0.0)


def test_prepare_exact_double():
    img = np.full((64, 128), 255, np.uint8)
    img[10:20, 30:50] = 0
    x, meta = prepare_image(img, (128, 256))
    assert (meta.scale_x, meta.scale_y, meta.pad_x, meta.pad_y) == (2.0, 2.0, 0.0, 0.0)
    assert x[0, 30, 80] == pytest.approx(1.0)
    assert x[0, 0, 0] == 0.0


def test_letterbox_pads_white_and_centres():
    img = np.zeros((32, 32), np.uint8)
    canvas, meta = letterbox(img, (128, 256))
    assert meta.scale_x == meta.scale_y == 4.0
    assert meta.pad_x == 64.0 and meta.pad_y == 0.0
    assert (canvas[:, :64] == 255).all() and (canvas[:, 192:] == 255).all()
    assert (canvas[:, 64:192] == 0).all()


@settings(max_examples=200)
@given(
    st.integers(5, 400),
    st.integers(5, 200),
    st.floats(0, 0.45),
    st.floats(0, 0.45),
    st.floats(0.5, 0.99),
    st.floats(0.5, 0.99),
)
def test_letterbox_box_roundtrip(w, h, fx0, fy0, fx1, fy1):
    img = np.full((h, w), 255, np.uint8)
    _, meta = letterbox(img, (128, target_input_width(w)))
    box = BoundingBox(fx0 * w, fy0 * h, fx1 * w, fy1 * h)
    back = meta.to_source(meta.to_network(box))
    np.testing.assert_allclose(back.as_tuple(), box.as_tuple(), rtol=1e-6, atol=1e-9)


def test_prepare_errors():
    with pytest.raises(ValueError):
        prepare_image(np.zeros((0, 5), np.uint8), (128, 128))
    with pytest.raises(ValueError):
        prepare_image(np.zeros((5, 5), np.uint8), (100, 128))


def test_resize_bilinear_constant_and_identity():
    img = np.arange(12, dtype=np.float32).reshape(3, 4)
    np.testing.assert_array_equal(resize_bilinear(img, 3, 4), img)
    np.testing.assert_allclose(resize_bilinear(np.full((5, 7), 9.0), 11, 3), 9.0)


def _single_slot(col, row, grid, t=(0, 0, 0, 0, 0), scores=None):
    pred = np.full((SLOT, *grid), 0.0)
    pred[4] = -50.0
    pred[:5, row, col] = t
    if scores is not None:
        pred[5:, row, col] = scores
    return pred


def test_decode_identity_offsets():
    pred = _single_slot(1, 0, (2, 3))
    dets = decode_grid(pred, [Anchor(16, 24)], stride=32, conf_threshold=0.04)
    assert len(dets) == 1
    d = dets[0]
    assert (d.box.x_center, d.box.y_center) == (48.0, 16.0)
    assert d.box.as_tuple() == (40.0, 4.0, 56.0, 28.0)
    assert d.posterior == pytest.approx(0.05)
    slots = decode_slots(pred, [Anchor(16, 24)], 32)
    assert slots["obj"][0, 0, 1] == 0.5
    np.testing.assert_allclose(slots["cls"][0, 0, 1], 0.1)


def test_decode_threshold_and_class():
    scores = np.zeros(10)
    scores[7] = 20.0
    pred = _single_slot(0, 1, (2, 2), t=(0, 0, 0, 0, 20.0), scores=scores)
    dets = decode_grid(pred, [Anchor(10, 10)], 32, conf_threshold=0.25)
    assert [d.digit for d in dets] == [7]
    with pytest.raises(ValueError):
        decode_grid(pred, [Anchor(10, 10)], 32, conf_threshold=1.0)
    with pytest.raises(ValueError):
        decode_grid(pred[:-1], [Anchor(10, 10)], 32)


@settings(max_examples=50)
@given(st.integers(0, 2**31))
def test_decoded_centres_stay_in_cell(seed):
    rng = np.random.default_rng(seed)
    anchors = [Anchor(20, 30), Anchor(35, 40)]
    pred = rng.normal(0, 8, (2 * SLOT, 3, 4))
    d = decode_slots(pred, anchors, 32)
    cols = np.arange(4)[None, None, :] * 32
    rows = np.arange(3)[None, :, None] * 32
    assert ((d["cx"] >= cols) & (d["cx"] <= cols + 32)).all()
    assert ((d["cy"] >= rows) & (d["cy"] <= rows + 32)).all()


def _det(xc, digit, p, w=10.0):
    return Detection(BoundingBox(xc - w / 2, 0, xc + w / 2, 10), digit, p)


def test_assemble_examples():
    r = assemble_string([_det(30, 2, 0.9), _det(10, 1, 0.9), _det(50, 3, 0.9)])
    assert r.text == "123"
    assert [d.box.x_center for d in r.detections] == [10, 30, 50]
    assert assemble_string([_det(10, 1, 0.9), _det(30, 2, 0.8)]).probability == pytest.approx(0.72)
    assert assemble_string([_det(10, 1, 1.0), _det(30, 2, 1.0)]).probability == 1.0
    empty = assemble_string([])
    assert (empty.text, empty.probability, empty.empty) == ("", 1.0, True)


@given(st.lists(st.tuples(st.floats(0, 500), st.integers(0, 9), st.floats(0, 1)), max_size=7), st.randoms())
def test_assemble_properties(items, rnd):
    dets = [_det(x, c, p) for x, c, p in items]
    r = assemble_string(dets)
    assert 0.0 <= r.probability <= 1.0
    assert len(r.text) == len(dets)
    if dets:
        assert r.probability <= min(d.posterior for d in dets)
    shuffled = dets[:]
    rnd.shuffle(shuffled)
    assert assemble_string(shuffled) == r


@pytest.fixture(scope="module")
def toy_model():
    return new_model([Anchor(20, 28), Anchor(30, 36), Anchor(44, 52)], seed=0)


def test_blank_image_gives_empty_reading(toy_model):
    r = predict_string(toy_model, np.full((40, 70), 255, np.uint8))
    assert r.empty and r.text == "" and r.probability == 1.0


def test_predict_deterministic_and_batch_consistent(toy_model):
    rng = np.random.default_rng(0)
    images = [rng.integers(0, 256, (30 + 5 * i, 40 + 60 * i)).astype(np.uint8) for i in range(4)]
    low = 0.01
    single = [predict_string(toy_model, im, low) for im in images]
    many = predict_strings(toy_model, images, low)
    again = predict_strings(toy_model, images, low)
    assert many == again
    for a, b in zip(single, many):
        assert a.text == b.text
        assert math.isclose(a.probability, b.probability, rel_tol=1e-5, abs_tol=1e-12)
