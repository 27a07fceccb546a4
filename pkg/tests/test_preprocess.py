import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from taillight.preprocess import AugmentParams, FrameSequence, align_and_diff, apply_augment, augment, \
    chunk_starts, estimate_shift, make_chunks, resize_frames
from taillight.states import ALL_STATES, CLASS_CODES, TaillightState


def smooth_image(rng, h=24, w=24):
    # low-frequency texture so every shift gives a distinct residual
    base = rng.uniform(0, 255, size=(h // 4 + 2, w // 4 + 2))
    img = np.kron(base, np.ones((4, 4)))[:h, :w]
    return img + rng.uniform(0, 10, size=(h, w))


def shifted(img, dx, dy):
    out = np.zeros_like(img)
    h, w = img.shape
    out[max(dy, 0):h + min(dy, 0), max(dx, 0):w + min(dx, 0)] = img[max(-dy, 0):h - max(dy, 0), max(-dx, 0):w - max(dx, 0)]
    return out


def test_identical_frames_give_zero_diff():
    f = np.random.default_rng(0).uniform(size=(3, 8, 8))
    for mode in ("identity", "global_shift"):
        assert all(not d.any() for d in align_and_diff([f, f, f], mode))


def test_identity_mode_arithmetic():
    a = np.array([[10.0, 20.0], [30.0, 40.0]])
    b = np.array([[12.0, 18.0], [30.0, 40.0]])
    (d,) = align_and_diff([a, b], "identity")
    np.testing.assert_array_equal(d, [[2, 2], [0, 0]])


def test_known_shift_recovered():
    rng = np.random.default_rng(1)
    prev = smooth_image(rng)
    cur = shifted(prev, 2, 1)
    assert estimate_shift(prev, cur, 4) == (2, 1)
    (d,) = align_and_diff([prev, cur], "global_shift", 4)
    overlap = d[1:, 2:]
    assert overlap.mean() <= 0.01 * 255
    assert overlap.max() == 0


def test_exhaustive_search_agrees_with_brute_force():
    rng = np.random.default_rng(2)
    for _ in range(10):
        prev, cur = smooth_image(rng, 12, 12), smooth_image(rng, 12, 12)
        costs = {}
        for dy in range(-2, 3):
            for dx in range(-2, 3):
                ys = slice(max(dy, 0), 12 + min(dy, 0)), slice(max(-dy, 0), 12 - max(dy, 0))
                xs = slice(max(dx, 0), 12 + min(dx, 0)), slice(max(-dx, 0), 12 - max(dx, 0))
                costs[(dx, dy)] = np.abs(cur[ys[0], xs[0]] - prev[ys[1], xs[1]]).mean()
        best = min(costs.values())
        assert costs[estimate_shift(prev, cur, 2)] == best


def test_diffs_are_nonnegative():
    rng = np.random.default_rng(3)
    frames = [rng.uniform(size=(3, 10, 10)) for _ in range(5)]
    for mode in ("identity", "global_shift"):
        assert all((d >= 0).all() for d in align_and_diff(frames, mode, 2))


def test_align_rejects_short_input():
    with pytest.raises(ValueError):
        align_and_diff([np.zeros((4, 4))])


@pytest.mark.parametrize("n,window,stride,starts", [(16, 16, 1, [0]), (20, 16, 2, [0, 2, 4]), (15, 16, 1, [])])
def test_chunk_examples(n, window, stride, starts):
    assert chunk_starts(n, window, stride) == starts


def test_chunk_count_formula_200_triples():
    rng = np.random.default_rng(4)
    for _ in range(200):
        n, window, stride = int(rng.integers(0, 80)), int(rng.integers(2, 20)), int(rng.integers(1, 10))
        enumerated = [s for s in range(n) if s + window <= n and s % stride == 0]
        formula = (n - window) // stride + 1 if n >= window else 0
        assert chunk_starts(n, window, stride) == enumerated
        assert len(enumerated) == formula


def test_short_sequence_warns(caplog):
    seq = FrameSequence(np.zeros((15, 8, 8, 3), np.uint8), "short", TaillightState.from_code("OOO"))
    with caplog.at_level(logging.WARNING):
        assert make_chunks(seq, 16, 1) == []
    assert "fewer than the window" in caplog.text


def test_chunk_layout():
    rng = np.random.default_rng(5)
    seq = FrameSequence(rng.integers(0, 256, size=(20, 8, 8, 3), dtype=np.uint8), "s", TaillightState.from_code("BLO"))
    chunks = make_chunks(seq, 16, 2, "global_shift", 1)
    assert [c.origin for c in chunks] == [("s", 0), ("s", 2), ("s", 4)]
    for c in chunks:
        assert c.net_input.shape == (16, 3, 8, 8)
        np.testing.assert_array_equal(c.net_input[0], c.raw[0])
        assert (c.net_input[1:] >= 0).all()


def test_resize_bilinear_to_side():
    frames = np.random.default_rng(6).integers(0, 256, size=(2, 40, 40, 3), dtype=np.uint8)
    assert resize_frames(frames, 16).shape == (2, 16, 16, 3)
    assert resize_frames(frames, 40) is frames


def _chunk(seed=7):
    rng = np.random.default_rng(seed)
    seq = FrameSequence(rng.integers(0, 256, size=(16, 8, 8, 3), dtype=np.uint8), "s", TaillightState.from_code("OLO"))
    return make_chunks(seq, 16, 1, "global_shift", 1)[0]


def test_flip_label_map_all_classes():
    for s in ALL_STATES:
        f = s.flipped()
        assert f.flipped() == s
        assert f.brake == s.brake
        assert (f.left, f.right) == (s.right, s.left)
    table = {c: TaillightState.from_code(c).flipped().code for c in CLASS_CODES}
    assert table == {"OOO": "OOO", "BOO": "BOO", "OLO": "OOR", "BLO": "BOR", "OOR": "OLO", "BOR": "BLO",
                     "OLR": "OLR", "BLR": "BLR"}


def test_flip_twice_restores_chunk_and_label():
    c = _chunk()
    flip = AugmentParams(flip=True)
    once, label = apply_augment(c, c.label, flip)
    assert label.code == "OOR"
    twice, label2 = apply_augment(once, label, flip)
    assert label2 == c.label
    np.testing.assert_array_equal(twice.raw, c.raw)
    np.testing.assert_array_equal(twice.net_input, c.net_input)


def test_identity_augment_leaves_chunk_unchanged():
    c = _chunk()
    out, label = apply_augment(c, c.label, AugmentParams())
    assert label == c.label
    np.testing.assert_array_equal(out.net_input, c.net_input)


def test_augment_is_reproducible():
    c = _chunk()
    a, la = augment(c, c.label, 42)
    b, lb = augment(c, c.label, 42)
    assert la == lb and a.net_input.tobytes() == b.net_input.tobytes()


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31))
def test_augmented_diffs_nonnegative(seed):
    c = _chunk(seed % 100)
    out, _ = augment(c, c.label, seed)
    assert (out.net_input[1:] >= 0).all()
    assert out.raw.min() >= 0 and out.raw.max() <= 1
