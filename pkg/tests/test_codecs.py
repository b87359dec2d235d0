"""Heatmap and anchor codecs: targets, decoding and roundtrips."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from volmark.anchors import build_grid, decode_predictions, encode_targets, nearest_anchor
from volmark.heatmap import HeatmapVolume, decode_peaks, encode_heatmaps, scaled_sigma, sum_heatmap
from volmark.landmarks import LandmarkSet


def _lm(coords, present=None):
    coords = np.atleast_2d(np.asarray(coords, dtype=float))
    return LandmarkSet(coords, np.ones(len(coords), bool) if present is None else present)


# -- heatmaps -----------------------------------------------------------
def test_heatmap_peak_is_one():
    h = encode_heatmaps(_lm([3, 4, 5]), (8, 8, 8), sigma=2.0)
    assert h.values[3, 4, 5, 0] == 1.0


def test_heatmap_one_sigma_offset():
    h = encode_heatmaps(_lm([3, 4, 5]), (8, 8, 8), sigma=2.0)
    assert h.values[5, 4, 5, 0] == pytest.approx(np.exp(-0.5), abs=1e-12)
    assert h.values[5, 4, 5, 0] == pytest.approx(0.606531, abs=1e-6)


def test_absent_channel_is_zero():
    h = encode_heatmaps(_lm([[1, 1, 1], [2, 2, 2]], [True, False]), (4, 4, 4), 1.0)
    assert h.values[..., 1].sum() == 0.0
    assert h.values.min() >= 0 and h.values.max() <= 1


def test_encode_rejects_out_of_bounds():
    with pytest.raises(ValueError, match="outside"):
        encode_heatmaps(_lm([8, 0, 0]), (8, 8, 8), 2.0)


def test_decode_one_hot():
    v = np.zeros((8, 8, 8, 1))
    v[3, 4, 5, 0] = 1.0
    lm = decode_peaks(HeatmapVolume(v, 1.0), 0.1)
    assert lm.present[0] and tuple(lm.coords[0]) == (3, 4, 5)


def test_decode_zero_channel_is_absent():
    assert not decode_peaks(np.zeros((4, 4, 4, 1)), 0.1).present[0]


def test_decode_refined_centroid_of_symmetric_peak():
    h = encode_heatmaps(_lm([3, 3, 3]), (7, 7, 7), 1.5)
    lm = decode_peaks(h, refine=True)
    np.testing.assert_allclose(lm.coords[0], [3, 3, 3], atol=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_heatmap_roundtrip_separated_integer_landmarks(seed):
    rng = np.random.default_rng(seed)
    sigma, dims = 2.0, (16, 16, 12)
    pts = []
    while len(pts) < 3:
        p = rng.integers(0, dims)
        if all(np.linalg.norm(p - q) > 2 * sigma for q in pts):
            pts.append(p)
    present = rng.random(3) < 0.8
    gt = _lm(pts, present)
    out = decode_peaks(encode_heatmaps(gt, dims, sigma), 0.25)
    assert np.array_equal(out.present, gt.present)
    assert np.array_equal(out.coords[gt.present], gt.coords[gt.present])


def test_sum_of_disjoint_one_hots():
    v = np.zeros((4, 4, 4, 2))
    v[0, 0, 0, 0] = v[3, 3, 3, 1] = 1.0
    s = sum_heatmap(v)
    assert s.sum() == 2.0 and s[0, 0, 0] == 1.0 and s[3, 3, 3] == 1.0


def test_sum_of_zero_heatmap():
    assert not sum_heatmap(np.zeros((2, 2, 2, 3))).any()


def test_sum_at_equidistant_voxel():
    sigma = 1.5
    h = encode_heatmaps(_lm([[2, 4, 4], [6, 4, 4]]), (9, 9, 9), sigma)
    assert sum_heatmap(h)[4, 4, 4] == pytest.approx(2 * np.exp(-4 / (2 * sigma ** 2)), rel=1e-12)


def test_scaled_sigma_at_reference_is_identity():
    assert scaled_sigma((128, 128, 64), 3.0) == 3.0
    assert scaled_sigma((32, 32, 16), 3.0) == 0.75


# -- anchors ------------------------------------------------------------
def test_lattice_centers():
    g = build_grid((2, 2, 2), unit=4)
    assert sorted(set(g.centers.ravel().tolist())) == [2.0, 6.0]


def test_three_default_radii():
    g = build_grid((2, 2, 2), unit=4)
    assert g.radii == (2.0, 4.0, 6.0) and g.n_anchors == 3


def test_single_site_unit_one():
    np.testing.assert_array_equal(build_grid((1, 1, 1), unit=1).centers[0, 0, 0], [0.5, 0.5, 0.5])


def test_empty_radii_rejected():
    with pytest.raises(ValueError, match="radius"):
        build_grid((2, 2, 2), radii=())


def test_offset_target_formula():
    g = build_grid((1, 1, 1), unit=16, radii=(2.0,))  # single center at (8, 8, 8)
    t = encode_targets(_lm([10, 10, 10]), g)
    assert t.labels[0, 0, 0, 0] == 1.0
    np.testing.assert_array_equal(t.offsets[0, 0, 0, :3], [1.0, 1.0, 1.0])


def test_landmark_on_center_has_zero_offset():
    g = build_grid((2, 2, 2), unit=4, radii=(2.0,))
    t = encode_targets(_lm(g.centers[1, 0, 1]), g)
    assert t.labels[1, 0, 1, 0] == 1.0
    np.testing.assert_array_equal(t.offsets[1, 0, 1, :3], 0.0)


def test_nearest_anchor_tie_goes_to_lower_site():
    g = build_grid((4, 1, 1), unit=4)
    assert nearest_anchor((8.0, 2.0, 2.0), g) == (1, 0, 0)


def test_nearest_anchor_matches_brute_force():
    g = build_grid((3, 2, 2), unit=4)
    rng = np.random.default_rng(0)
    sites = [(i, j, k) for k in range(2) for j in range(2) for i in range(3)]  # x-fastest order
    for _ in range(50):
        p = rng.uniform(0, [12, 8, 8])
        d = [np.sum((g.centers[s] - p) ** 2) for s in sites]
        assert nearest_anchor(p, g) == sites[int(np.argmin(d))]


def test_absent_landmark_has_no_positives():
    g = build_grid((2, 2, 2))
    t = encode_targets(_lm([[3, 3, 3], [5, 5, 5]], [True, False]), g)
    assert t.labels[..., 3:].sum() == 0 and t.labels[..., :3].sum() > 0


def test_all_low_probabilities_decode_absent():
    g = build_grid((2, 2, 2))
    lm = decode_predictions(np.zeros((2, 2, 2, 18)), np.full((2, 2, 2, 6), 0.1), g, tau=0.5)
    assert not lm.present.any()


def test_decode_picks_most_probable_anchor():
    g = build_grid((2, 1, 1), unit=4, radii=(2.0,))
    probs = np.zeros((2, 1, 1, 1))
    probs[0, 0, 0, 0], probs[1, 0, 0, 0] = 0.9, 0.8
    offsets = np.zeros((2, 1, 1, 3))
    offsets[0, 0, 0] = (np.array([5, 5, 5]) - g.centers[0, 0, 0]) / 2.0
    offsets[1, 0, 0] = (np.array([7, 7, 7]) - g.centers[1, 0, 0]) / 2.0
    lm = decode_predictions(offsets, probs, g)
    np.testing.assert_allclose(lm.coords[0], [5, 5, 5])


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_anchor_roundtrip(seed):
    rng = np.random.default_rng(seed)
    dims = tuple(int(v) for v in rng.integers(1, 5, size=3))
    unit = int(rng.integers(1, 6))
    g = build_grid(dims, unit=unit)
    n = int(rng.integers(1, 4))
    coords = rng.uniform(0, np.array(dims) * unit - 1e-9, size=(n, 3))
    gt = _lm(coords, rng.random(n) < 0.7)
    t = encode_targets(gt, g)
    out = decode_predictions(t.offsets, t.labels, g, tau=0.5)
    assert np.array_equal(out.present, gt.present)
    np.testing.assert_allclose(out.coords[gt.present], gt.coords[gt.present], atol=1e-9)


def test_decode_invariant_under_monotone_transform():
    rng = np.random.default_rng(1)
    g = build_grid((2, 2, 2))
    probs, offs = rng.uniform(0.6, 1, (2, 2, 2, 6)), rng.standard_normal((2, 2, 2, 18))
    a = decode_predictions(offs, probs, g)
    b = decode_predictions(offs, probs ** 0.5, g)
    assert a == b


def test_radius_rule_keeps_offsets_bounded():
    g = build_grid((3, 3, 3))
    t = encode_targets(_lm([[5.3, 7.1, 2.2]]), g)
    offs = t.offsets.reshape(3, 3, 3, 3, 3)
    pos = t.labels.reshape(3, 3, 3, 3) > 0
    assert np.abs(offs[pos]).max() <= 1.0
