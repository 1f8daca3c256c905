import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import spearmanr

from sepconv.data import (DatasetManifest, PipelineConfig, SampleRecord, SyntheticTranslationDataset, TransformLog,
                          TripletSample, apply_transform, augment, build_manifest, draw_transform, extract_triplets,
                          flow_percentiles, is_shot_boundary, mean_flow_block_match, temporal_swap,
                          translating_sequence, weighted_select)
from sepconv.errors import ParameterError
from sepconv.numeric import RandomStream


def canvas(seed, h, w):
    # i.i.d. noise smoothed a little so every block carries texture
    c = RandomStream(seed).uniform((h + 2, w + 2, 3), dtype=np.float64)
    return ((c[:-2, 1:-1] + c[2:, 1:-1] + c[1:-1, :-2] + c[1:-1, 2:] + 2 * c[1:-1, 1:-1]) / 6).astype(np.float32)


def moving_frames(seed, frames, size, vy, vx):
    """Frames cut from a canvas so content moves exactly ``(vy, vx)`` px per frame."""
    m = max(abs(vy), abs(vx)) * frames
    c = canvas(seed, size + 2 * m, size + 2 * m)
    return [c[m - k * vy:m - k * vy + size, m - k * vx:m - k * vx + size] for k in range(frames)]


# block matching ---------------------------------------------------------------


def test_block_match_identical_is_zero():
    a = canvas(0, 64, 64)
    assert mean_flow_block_match(a, a) == 0.0


@pytest.mark.parametrize("dy,dx,expected", [(3, 0, 3.0), (0, -3, 3.0), (3, 4, 5.0), (-6, 6, math.sqrt(72))])
def test_block_match_exact_on_integer_translation(dy, dx, expected):
    f = moving_frames(1, 2, 96, dy, dx)
    assert mean_flow_block_match(f[0], f[1]) == pytest.approx(expected, abs=1e-12)


def test_block_match_flat_patch_is_zero():
    flat = np.full((64, 64, 3), 0.5, dtype=np.float32)
    assert mean_flow_block_match(flat, flat + 0.1) == 0.0


def test_block_match_rejects_mismatch():
    with pytest.raises(ParameterError):
        mean_flow_block_match(np.zeros((8, 8, 3)), np.zeros((9, 8, 3)))


# extraction -------------------------------------------------------------------


def test_extract_static_constant_frames_all_rejected():
    frames = [np.full((160, 160, 3), 0.3, dtype=np.float32)] * 5
    assert extract_triplets(frames, 1, RandomStream(0)) == []


def test_extract_window_count_and_flow():
    frames = moving_frames(2, 6, 160, 0, 2)
    got = extract_triplets(frames, 1, RandomStream(0), source="clip")
    assert len(got) == 4
    assert all(s.mean_flow == pytest.approx(4.0) and s.source == "clip" for s in got)
    assert [s.frame_index for s in got] == [0, 1, 2, 3]
    assert len(extract_triplets(frames, 2, RandomStream(0))) == 2


def test_extract_drops_windows_across_cut():
    # dark shot followed by a bright one
    a = [0.5 * f for f in moving_frames(3, 3, 160, 0, 1)]
    b = [0.5 + 0.5 * f for f in moving_frames(4, 3, 160, 0, 1)]
    assert is_shot_boundary(a[-1], b[0])
    got = extract_triplets(a + b, 1, RandomStream(0))
    # windows starting at 1 and 2 span the cut
    assert [s.frame_index for s in got] == [0, 3]


def test_extract_rejects_small_frames():
    with pytest.raises(ParameterError):
        extract_triplets([np.zeros((100, 200, 3))] * 3, 1, RandomStream(0))
    with pytest.raises(ParameterError):
        extract_triplets([np.zeros((200, 200, 3))] * 2, 1, RandomStream(0))


def test_triplet_sample_invariants():
    z = np.zeros((4, 4, 3))
    with pytest.raises(ParameterError):
        TripletSample(z, z, np.zeros((5, 4, 3)), 0.0)
    with pytest.raises(ParameterError):
        TripletSample(z, z, z, -1.0)


# selection ----------------------------------------------------------------------


def test_select_all_returns_all():
    assert weighted_select([1.0] * 7, 7, RandomStream(0)).tolist() == list(range(7))


def test_select_without_replacement():
    idx = weighted_select(RandomStream(1).uniform(50, 0, 10), 30, RandomStream(2))
    assert len(set(idx.tolist())) == 30


def test_select_errors():
    with pytest.raises(ParameterError):
        weighted_select([1.0, 2.0], 3, RandomStream(0))
    with pytest.raises(ParameterError):
        weighted_select([1.0, -2.0], 1, RandomStream(0))


def test_heavy_candidate_almost_always_selected():
    flows = [0.0] * 20
    flows[7] = 0.05 * 1e6
    hits = sum(7 in weighted_select(flows, 1, RandomStream(0).child(t)) for t in range(1000))
    assert hits / 1000 > 0.999


def test_equal_weights_are_uniform():
    counts = np.zeros(10)
    for t in range(4000):
        counts[weighted_select([2.0] * 10, 3, RandomStream(5).child(t))] += 1
    expected = 4000 * 3 / 10
    assert np.all(np.abs(counts - expected) < 5 * math.sqrt(expected))


def test_inclusion_monotone_in_flow():
    flows = np.linspace(0, 10, 20)
    counts = np.zeros(20)
    for t in range(2000):
        counts[weighted_select(flows, 5, RandomStream(6).child(t))] += 1
    assert spearmanr(flows, counts).statistic > 0.9


def test_build_manifest_offsets():
    cands = [TripletSample(*(np.zeros((4, 4, 3)),) * 3, mean_flow=float(i)) for i in range(6)]
    cfg = PipelineConfig(crop_size=4)
    man, samples = build_manifest(cands, 4, RandomStream(0), cfg)
    assert man.count == 4 == len(samples)
    assert [r.offset for r in man.records] == [k * 3 * 4 * 4 * 3 * 4 for k in range(4)]
    with pytest.raises(ParameterError):
        DatasetManifest([SampleRecord(10, 0, "", 0), SampleRecord(10, 0, "", 1)])


def test_flow_percentiles():
    assert flow_percentiles(np.arange(1, 101)) == {"p90": 90.0, "p95": 95.0, "max": 100.0}
    assert flow_percentiles([5.0]) == {"p90": 5.0, "p95": 5.0, "max": 5.0}
    with pytest.raises(ParameterError):
        flow_percentiles([])


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(0, 50, allow_nan=False), min_size=1, max_size=200))
def test_flow_percentiles_vs_sort(flows):
    s = sorted(flows)
    got = flow_percentiles(flows)
    assert got["max"] == s[-1]
    assert got["p90"] == s[max(1, math.ceil(0.9 * len(s))) - 1]
    assert got["p95"] == s[max(1, math.ceil(0.95 * len(s))) - 1]


# augmentation -------------------------------------------------------------------


def _static_sample(seed=7):
    f = canvas(seed, 150, 150)
    return TripletSample(f, f, f, 0.0)


def test_draw_transform_bounds():
    r = RandomStream(0)
    for _ in range(300):
        log = draw_transform(r)
        assert all(abs(v) <= 6 and v % 2 == 0 for v in log.shift)
        assert 3 <= log.origin[0] <= 150 - 128 - 3


def test_shift_six_six_adds_sqrt72():
    s = _static_sample()
    p = apply_transform(s.first, s.middle, s.last, TransformLog((11, 11), (6, 6), False, False, False))
    assert mean_flow_block_match(p.first, p.last) == pytest.approx(math.sqrt(72), abs=0.05)


@pytest.mark.parametrize("sy,sx", [(0, 0), (6, 6), (-6, 2), (4, -6)])
@pytest.mark.parametrize("hflip,vflip,swap", [(False, False, False), (True, False, True), (True, True, False)])
def test_linear_motion_truth_is_exact_midpoint(sy, sx, hflip, vflip, swap):
    # content moves +2 px/frame horizontally
    f0, f1, f2 = moving_frames(8, 3, 150, 0, 2)
    p = apply_transform(f0, f1, f2, TransformLog((11, 11), (sy, sx), hflip, vflip, swap))
    a, t, b = p.first, p.truth, p.last
    if swap:
        a, b = b, a
    dy, dx = sy // 2, sx // 2 + 2
    if vflip:
        dy = -dy
    if hflip:
        dx = -dx
    n = 128
    ys, xs = slice(8, n - 8), slice(8, n - 8)
    ya, xa = slice(8 + dy, n - 8 + dy), slice(8 + dx, n - 8 + dx)
    yb, xb = slice(8 - dy, n - 8 - dy), slice(8 - dx, n - 8 - dx)
    # first is the truth displaced by +d, last by -d: truth sits exactly halfway
    np.testing.assert_array_equal(a[ys, xs], t[ya, xa])
    np.testing.assert_array_equal(b[ys, xs], t[yb, xb])


def test_truth_window_is_unshifted_crop():
    s = _static_sample(9)
    log = TransformLog((10, 12), (6, -4), False, False, False)
    p = apply_transform(s.first, s.middle, s.last, log)
    np.testing.assert_array_equal(p.truth, s.middle[10:138, 12:140])


def test_augment_reproducible_from_log():
    f0, f1, f2 = moving_frames(10, 3, 150, 1, 2)
    s = TripletSample(f0, f1, f2, 2.0)
    p = augment(s, RandomStream(4))
    q = apply_transform(f0, f1, f2, p.log)
    for x, y in ((p.first, q.first), (p.truth, q.truth), (p.last, q.last)):
        np.testing.assert_array_equal(x, y)
    assert p.first.shape == (128, 128, 3)


def test_temporal_swap_involution():
    p = augment(_static_sample(), RandomStream(5))
    q = temporal_swap(temporal_swap(p))
    assert q.log == p.log
    np.testing.assert_array_equal(q.first, p.first)
    np.testing.assert_array_equal(q.last, p.last)


def test_bad_shift_rejected():
    s = _static_sample()
    with pytest.raises(ParameterError):
        apply_transform(s.first, s.middle, s.last, TransformLog((11, 11), (3, 0), False, False, False))
    with pytest.raises(ParameterError):
        apply_transform(s.first, s.middle, s.last, TransformLog((0, 0), (6, 6), False, False, False))


# synthetic material ----------------------------------------------------------------


def test_synthetic_dataset_deterministic():
    a = SyntheticTranslationDataset(5, size=32, seed=3)
    b = SyntheticTranslationDataset(5, size=32, seed=3)
    for i in range(5):
        assert all(np.array_equal(x, y) for x, y in zip(a.triplet(i), b.triplet(i)))
    assert not np.array_equal(a.triplet(0)[0], a.triplet(1)[0])


def test_synthetic_sequence_flow():
    frames = translating_sequence(RandomStream(1), 3, 96, 96, (0.0, 3.0))
    assert mean_flow_block_match(frames[0], frames[1]) == pytest.approx(3.0, abs=0.05)
