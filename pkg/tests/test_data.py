"""File formats, preprocessing and the synthetic generator."""

import numpy as np
import pytest

from volmark.data import (DataFormatError, Volume, crop_at, crop_corner, load_dataset, load_landmarks, load_volume,
                          network_input, normalize_intensity, random_crop, save_landmarks, save_volume,
                          synth_cases, synth_generate)
from volmark.landmarks import LandmarkSet


def test_normalize_three_values():
    np.testing.assert_allclose(normalize_intensity(np.array([-100.0, 0.0, 100.0])), [0, 127.5, 255])


def test_normalize_constant_volume():
    assert not normalize_intensity(np.full((3, 3, 3), 42.0)).any()


def test_normalize_range():
    v = normalize_intensity(np.random.default_rng(0).standard_normal((4, 5, 6)) * 300 - 1000)
    assert v.min() == 0.0 and v.max() == 255.0


def test_identity_crop():
    vol = np.random.default_rng(1).random((6, 5, 4))
    lm = LandmarkSet([[1.0, 2.0, 3.0]], [True])
    v2, lm2 = random_crop(vol, lm, (6, 5, 4), seed=3)
    np.testing.assert_array_equal(v2, vol)
    assert lm2 == lm


def test_crop_translates_landmarks():
    vol = np.zeros((12, 12, 12))
    _, lm = crop_at(vol, LandmarkSet([[5.0, 5.0, 5.0]], [True]), (4, 4, 4), (6, 6, 6))
    np.testing.assert_array_equal(lm.coords[0], [1, 1, 1])
    assert lm.present[0]


def test_crop_drops_landmarks_outside_window():
    _, lm = crop_at(np.zeros((12, 12, 12)), LandmarkSet([[1.0, 5.0, 5.0]], [True]), (4, 4, 4), (6, 6, 6))
    assert not lm.present[0]


def test_crop_corner_is_seeded():
    assert crop_corner((20, 20, 20), (8, 8, 8), 7) == crop_corner((20, 20, 20), (8, 8, 8), 7)


def test_crop_larger_than_volume():
    with pytest.raises(ValueError, match="does not fit"):
        random_crop(np.zeros((4, 4, 4)), LandmarkSet(np.zeros((1, 3)), [True]), (5, 4, 4), 0)


def test_synth_all_present_and_all_missing():
    assert all(lm.present.all() for _, lm in synth_cases(3, (16, 16, 16), 2, missing_prob=0.0))
    assert not any(lm.present.any() for _, lm in synth_cases(3, (16, 16, 16), 2, missing_prob=1.0))


def test_synth_files_are_byte_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    synth_generate(a, 2, (16, 16, 8), 2, seed=11)
    synth_generate(b, 2, (16, 16, 8), 2, seed=11)
    names = sorted(p.name for p in a.iterdir())
    assert names == sorted(p.name for p in b.iterdir()) and len(names) == 6
    for n in names:
        assert (a / n).read_bytes() == (b / n).read_bytes()


def test_synth_matches_in_memory_twin(tmp_path):
    synth_generate(tmp_path, 2, (16, 16, 8), 2, seed=5, missing_prob=0.3)
    loaded = load_dataset(tmp_path)
    for (_, vol, lm), (v2, lm2) in zip(loaded, synth_cases(2, (16, 16, 8), 2, seed=5, missing_prob=0.3)):
        np.testing.assert_array_equal(vol.data, v2.data)
        assert lm == lm2


def test_synth_blob_peaks_sit_on_landmarks():
    for vol, lm in synth_cases(3, (32, 32, 16), 2, seed=2):
        for c in lm.coords.astype(int):
            patch = vol.data[c[0] - 1:c[0] + 2, c[1] - 1:c[1] + 2, c[2] - 1:c[2] + 2]
            assert vol.data[tuple(c)] == patch.max()


def test_synth_rejects_impossible_placement():
    with pytest.raises(ValueError, match="cannot place|too small"):
        synth_cases(1, (8, 8, 8), 40, sigma_blob=2.0)


def test_volume_roundtrip(tmp_path):
    vol = Volume(np.random.default_rng(3).standard_normal((4, 3, 2)).astype(np.float32), (0.5, 1.0, 2.5))
    save_volume(tmp_path / "v", vol)
    back = load_volume(tmp_path / "v")
    assert back.spacing == vol.spacing and back.data.dtype == np.float32
    np.testing.assert_array_equal(back.data, vol.data)


def test_volume_payload_is_x_fastest(tmp_path):
    data = np.arange(24, dtype=np.int16).reshape(2, 3, 4)
    save_volume(tmp_path / "v", Volume(data))
    raw = np.frombuffer((tmp_path / "v.vol").read_bytes(), dtype="<i2")
    assert raw[:3].tolist() == [data[0, 0, 0], data[1, 0, 0], data[0, 1, 0]]


def test_truncated_payload_rejected(tmp_path):
    save_volume(tmp_path / "v", Volume(np.zeros((2, 2, 2), np.float32)))
    p = tmp_path / "v.vol"
    p.write_bytes(p.read_bytes()[:-4])
    with pytest.raises(DataFormatError, match="bytes"):
        load_volume(tmp_path / "v")


def test_unknown_version_rejected(tmp_path):
    save_volume(tmp_path / "v", Volume(np.zeros((2, 2, 2), np.float32)))
    h = tmp_path / "v.volhdr"
    h.write_text(h.read_text().replace("volmark-volume 1", "volmark-volume 9"))
    with pytest.raises(DataFormatError, match="version"):
        load_volume(tmp_path / "v")


def test_landmarks_roundtrip(tmp_path):
    lm = LandmarkSet([[1.25, 2.0, 3.0], [0, 0, 0]], [True, False], (0.8, 0.8, 1.5), ("nasion", "sella"))
    save_landmarks(tmp_path / "a.landmarks", lm)
    assert load_landmarks(tmp_path / "a.landmarks") == lm


def test_duplicate_landmark_ids_rejected(tmp_path):
    p = tmp_path / "a.landmarks"
    save_landmarks(p, LandmarkSet([[1.0, 1, 1], [2, 2, 2]], [True, True]))
    p.write_text(p.read_text().replace("\n1 L1", "\n0 L1"))
    with pytest.raises(DataFormatError, match="duplicate"):
        load_landmarks(p)


def test_out_of_bounds_landmark_rejected(tmp_path):
    p = tmp_path / "a.landmarks"
    save_landmarks(p, LandmarkSet([[9.0, 1, 1]], [True]))
    with pytest.raises(DataFormatError, match="outside"):
        load_landmarks(p, dims=(8, 8, 8))


def test_empty_dataset_dir(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_dataset(tmp_path)


def test_network_input_unit_range():
    x = network_input([v.data for v, _ in synth_cases(2, (16, 16, 8), 1)])
    assert x.shape == (2, 16, 16, 8) and x.dtype == np.float32
    assert x.min() == 0.0 and x.max() == 1.0


def test_landmark_set_invariants():
    with pytest.raises(ValueError, match="spacing"):
        LandmarkSet(np.zeros((1, 3)), [True], (1.0, 0.0, 1.0))
