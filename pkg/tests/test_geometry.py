import math

import numpy as np
import pytest
from hypothesis import assume, given, strategies as st

from lmcyclegan import ops
from lmcyclegan.geometry import (centered_rect, decode_landmarks, default_sigma, encode_heatmaps, extract_patches,
                                 make_unmatched_pair, mouth_rect, shift_floor, translate_image, validate_landmarks)
from lmcyclegan.nets import patch_sizes
from lmcyclegan.tensor import Tensor, backward

LM = np.array([[40.0, 50.0], [88.0, 50.0], [64.0, 75.0], [50.0, 100.0], [80.0, 100.0]])


def _lm(p, size=32):
    """Landmark set with ``p`` as the left eye and fixed filler points."""
    lm = np.array([[p[0], p[1]], [3, 4], [5, 6], [7, 8], [9, 10]], dtype=float)
    return np.clip(lm, 0, size - 1)


def test_peak_and_one_sigma_value():
    hm = encode_heatmaps(_lm((10, 10)), 32, sigma=2)
    assert hm[0, 10, 10] == pytest.approx(1.0)
    assert hm[0, 10, 12] == pytest.approx(math.exp(-0.5), abs=1e-6)
    assert hm[0, 10, 12] == pytest.approx(0.6065, abs=1e-4)


def test_far_pixels_vanish():
    lm = np.array([[5, 5], [6, 5], [5, 6], [6, 6], [5.5, 5.5]])
    hm = encode_heatmaps(lm, 64, sigma=2)
    assert hm[:, 40, 40].sum() < 1e-6


def test_default_sigma():
    assert default_sigma(128) == 4.0
    assert default_sigma(64) == 2.0


def test_decode_subpixel_rounds_to_nearest():
    lm = LM / 2
    lm[0] = (31.6, 12.2)
    assert decode_landmarks(encode_heatmaps(lm, 64))[0].tolist() == [32.0, 12.0]


def test_decode_constant_channel_ties_to_origin():
    assert decode_landmarks(np.zeros((5, 16, 16))).tolist() == [[0, 0]] * 5


def test_encode_rejects_outside_points():
    bad = LM.copy()
    bad[2] = (128, 3)
    with pytest.raises(ValueError):
        encode_heatmaps(bad, 128)
    with pytest.raises(ValueError):
        encode_heatmaps(LM[:4], 128)


def test_order_check():
    swapped = LM[[1, 0, 2, 3, 4]]
    with pytest.raises(ValueError):
        validate_landmarks(swapped, 128, check_order=True)
    validate_landmarks(LM, 128, check_order=True)


def test_round_trip_thousand_integer_sets():
    r = np.random.default_rng(42)
    for _ in range(1000):
        lm = r.integers(0, 64, size=(5, 2)).astype(float)
        assert np.array_equal(decode_landmarks(encode_heatmaps(lm, 64)), lm)


@given(st.lists(st.tuples(st.floats(0, 63.49), st.floats(0, 63.49)), min_size=5, max_size=5),
       st.floats(0.7, 5.0))
def test_round_trip_error_at_most_half_pixel(pts, sigma):
    lm = np.array(pts)
    err = np.abs(decode_landmarks(encode_heatmaps(lm, 64, sigma)) - lm)
    # float32 heatmaps can tie two pixels a hair away from the half-way point
    assert (err <= 0.5 + 1e-4).all()


# keep round(scaled) on the grid: 31.7 * 2 = 63.4 -> 63
@given(st.lists(st.tuples(st.floats(0, 31.7), st.floats(0, 31.7)), min_size=5, max_size=5),
       st.sampled_from([64, 128]))
def test_rescale_commutes_with_encoding(pts, big):
    """decode(encode(scaled P)) == round(scaled P), heatmap width scaled too."""
    scaled = np.array(pts) * (big / 32)
    frac = scaled - np.floor(scaled)
    assume((np.abs(frac - 0.5) > 1e-3).all())
    got = decode_landmarks(encode_heatmaps(scaled, big, default_sigma(big)))
    assert np.array_equal(got, np.floor(scaled + 0.5))


# ---------------------------------------------------------------- patches

def test_eye_rect_centre_rule():
    assert centered_rect(40, 50, 32, 32, 128) == (24, 34, 32, 32)


def test_eye_rect_clamped_not_shrunk():
    assert centered_rect(5, 5, 32, 32, 128) == (0, 0, 32, 32)
    assert centered_rect(126, 127, 32, 32, 128) == (96, 96, 32, 32)


def test_mouth_span_with_margin():
    x0, y0, w, h = mouth_rect(LM, 40, 23, 128)
    assert (x0, x0 + w) == (45, 85)
    # height keeps the 40:23 aspect around the corners' mean y
    assert h == 23 and y0 == 89  # floor(100 - 11.5 + 0.5)


def test_mouth_rect_rejects_degenerate_corners():
    lm = LM.copy()
    lm[4] = lm[3]
    with pytest.raises(ValueError):
        mouth_rect(lm, 40, 23, 128)


def test_extract_patches_shapes_and_eye_order(rng):
    img = Tensor(rng.uniform(-1, 1, (1, 3, 128, 128)))
    ps = extract_patches(img, LM, patch_sizes(128))
    assert ps.eyes.shape == (1, 6, 32, 32)
    assert ps.nose.shape == (1, 3, 24, 28)
    assert ps.mouth.shape == (1, 3, 23, 40)
    left, right = ps.rects["eyes"]
    assert left == (24, 34, 32, 32) and right == (72, 34, 32, 32)
    # channels 0..2 are the left eye, 3..5 the right eye
    assert np.array_equal(ps.eyes.data[0, :3], img.data[0, :, 34:66, 24:56])
    assert np.array_equal(ps.eyes.data[0, 3:], img.data[0, :, 34:66, 72:104])
    assert ps.rects["mouth"][0] == 45 and ps.rects["mouth"][2] == 40


@given(st.lists(st.tuples(st.integers(0, 63), st.integers(0, 63)), min_size=5, max_size=5))
def test_patch_shapes_constant_anywhere(pts):
    lm = np.array(pts, dtype=float)
    if abs(lm[4, 0] - lm[3, 0]) < 1:
        lm[4, 0] = lm[3, 0] + 1 if lm[3, 0] < 63 else lm[3, 0] - 1
    sizes = patch_sizes(64)
    ps = extract_patches(Tensor(np.zeros((1, 3, 64, 64))), lm, sizes)
    assert ps.eyes.shape[2:] == (sizes["eyes"][1], sizes["eyes"][0])
    assert ps.nose.shape[2:] == (sizes["nose"][1], sizes["nose"][0])
    assert ps.mouth.shape[2:] == (sizes["mouth"][1], sizes["mouth"][0])


def test_patch_gradients_reach_source_pixels(rng):
    img = Tensor(rng.uniform(-1, 1, (1, 3, 128, 128)), requires_grad=True)
    ps = extract_patches(img, LM, patch_sizes(128))
    loss = ops.sum_scalars([ops.l2_mean(ps.eyes), ops.l2_mean(ps.nose), ops.l2_mean(ps.mouth)])
    g = backward(loss, [img])[0]
    assert np.abs(g[0, :, 34:66, 24:56]).min() > 0
    assert g[0, :, 0:10, 0:10].max() == 0


# ---------------------------------------------------------------- unmatched pairs

def test_translation_semantics(rng):
    img = rng.uniform(-1, 1, (3, 64, 64))
    out = translate_image(img, 8, 0)
    assert np.array_equal(out[:, :, 8:], img[:, :, :-8])
    # exposed border replicates the edge column
    assert np.array_equal(out[:, :, :8], np.repeat(img[:, :, :1], 8, axis=2))


@given(st.integers(0, 2 ** 31 - 1), st.sampled_from([32, 64, 128]))
def test_unmatched_offset_respects_floor(seed, size):
    r = np.random.default_rng(seed)
    img = np.zeros((3, size, size), dtype=np.float32)
    lm = np.array([[size * 0.3, size * 0.4], [size * 0.7, size * 0.4], [size * 0.5, size * 0.55],
                   [size * 0.35, size * 0.7], [size * 0.65, size * 0.7]])
    pair = make_unmatched_pair(img, lm, r)
    dx, dy = pair.offset
    assert (dx, dy) != (0, 0)
    assert abs(dx) + abs(dy) >= shift_floor(size)
    assert max(abs(dx), abs(dy)) <= size // 8
    assert np.array_equal(pair.heatmaps, encode_heatmaps(lm, size))


def test_unmatched_heatmap_misaligned_by_exact_offset(rng):
    size = 64
    lm = np.array([[20, 24], [44, 24], [32, 34], [24, 46], [40, 46]], dtype=float)
    img = np.zeros((3, size, size), dtype=np.float32)
    pair = make_unmatched_pair(img, lm, rng)
    dx, dy = pair.offset
    truth_after_shift = encode_heatmaps(lm + [dx, dy], size)
    diff = decode_landmarks(truth_after_shift) - decode_landmarks(pair.heatmaps)
    assert np.array_equal(diff, np.tile([dx, dy], (5, 1)))


def test_max_shift_below_floor_rejected(rng):
    with pytest.raises(ValueError):
        make_unmatched_pair(np.zeros((3, 64, 64)), LM / 2, rng, max_shift=2)
