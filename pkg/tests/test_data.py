import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image

from calipernet.data import (
    CONTRACTED,
    NORM_MEAN,
    NORM_STD,
    RESTING,
    DatasetConfig,
    DatasetError,
    apply_intensity,
    augment,
    crop_roi,
    kfold_split,
    load_dataset,
    make_sample,
    read_dataset_config,
    resize_normalize,
    resize_sample,
    synth_generate,
    synth_mm_per_pixel,
    write_dataset,
)


def blank_sample(h=60, w=50, top=(10, 20), bottom=(40, 22), sid="a"):
    img = np.random.default_rng(0).random((h, w))
    return make_sample(sid, img, top, bottom, 0.1)


# -- samples ------------------------------------------------------------


def test_sample_invariants():
    with pytest.raises(ValueError, match="above"):
        blank_sample(top=(40, 1), bottom=(10, 1))
    with pytest.raises(ValueError, match="outside"):
        blank_sample(bottom=(60, 1))
    s = blank_sample()
    assert s.top == (10, 20) and s.bottom == (40, 22)
    assert s.thickness_mm == s.thickness_px * 0.1


# -- disk layout --------------------------------------------------------


def test_empty_directory_loads_nothing(tmp_path):
    assert load_dataset(tmp_path) == []


def test_roundtrip_and_ordering(tmp_path):
    samples = [blank_sample(sid=i) for i in ("c", "a", "b")]
    write_dataset(samples, tmp_path)
    loaded = load_dataset(tmp_path)
    assert [s.id for s in loaded] == ["a", "b", "c"]
    for s in loaded:
        assert s.top == (10, 20) and s.bottom == (40, 22)
        np.testing.assert_array_equal(np.round(s.image * 255), np.round(samples[0].image * 255))
    rows = (tmp_path / "truth.csv").read_text().splitlines()
    assert rows[0] == "id,thickness_mm" and len(rows) == 4


def test_out_of_bounds_annotation_names_file(tmp_path):
    write_dataset([blank_sample()], tmp_path)
    path = tmp_path / "annotations" / "a.json"
    rec = json.loads(path.read_text())
    rec["bottom"] = [999, 3]
    path.write_text(json.dumps(rec))
    with pytest.raises(DatasetError, match="a.json"):
        load_dataset(tmp_path)


def test_malformed_coordinates(tmp_path):
    write_dataset([blank_sample()], tmp_path)
    path = tmp_path / "annotations" / "a.json"
    rec = json.loads(path.read_text())
    rec["top"] = ["x", 1]
    path.write_text(json.dumps(rec))
    with pytest.raises(DatasetError, match="'top'"):
        load_dataset(tmp_path)


def test_missing_image(tmp_path):
    write_dataset([blank_sample()], tmp_path)
    (tmp_path / "images" / "a.png").unlink()
    with pytest.raises(DatasetError, match="image file missing"):
        load_dataset(tmp_path)


def test_missing_annotation(tmp_path):
    write_dataset([blank_sample()], tmp_path)
    (tmp_path / "annotations" / "a.json").unlink()
    with pytest.raises(DatasetError, match="annotation file missing"):
        load_dataset(tmp_path)


def test_dataset_config_roundtrip(tmp_path):
    write_dataset([blank_sample()], tmp_path, DatasetConfig(roi=(1, 2, 50, 40), target_size=(32, 32)))
    cfg = read_dataset_config(tmp_path)
    assert cfg.roi == (1, 2, 50, 40) and cfg.target_size == (32, 32)


# -- crop / resize ------------------------------------------------------


def test_crop_identity_and_shift():
    s = make_sample("a", np.zeros((100, 100)), (50, 60), (70, 60), 0.1)
    full = crop_roi(s, (0, 0, 100, 100))
    assert full.top == s.top and np.array_equal(full.image, s.image)
    moved = crop_roi(s, (10, 20, 80, 70))
    assert moved.top == (40, 40) and moved.image.shape == (80, 70)
    assert crop_roi(s, None) is s
    with pytest.raises(ValueError, match="outside roi"):
        crop_roi(s, (55, 0, 40, 100))


def test_resize_same_size_keeps_coordinates():
    s = blank_sample()
    prep = resize_sample(s, (60, 50))
    np.testing.assert_array_equal(prep.points, [[10, 20], [40, 22]])
    np.testing.assert_array_equal(prep.image, s.image)
    assert prep.mm_per_pixel == 0.1 and prep.anisotropy == 1.0


def test_resize_scales_points():
    s = make_sample("a", np.zeros((1000, 800)), (100, 80), (300, 80), 0.05)
    prep = resize_sample(s, (500, 400))
    np.testing.assert_array_equal(prep.points[0], [50, 40])
    assert prep.annotation.points[0][:2] == (50, 40)
    assert prep.mm_per_pixel == pytest.approx(0.1)


def test_mm_length_survives_anisotropic_resize():
    rng = np.random.default_rng(1)
    for _ in range(50):
        h, w = (int(v) for v in rng.integers(100, 400, 2))
        th, tw = (int(v) for v in rng.integers(50, 300, 2))
        r0, r1 = sorted(rng.choice(h, 2, replace=False))
        c0, c1 = rng.integers(0, w, 2)
        s = make_sample("a", np.zeros((h, w)), (r0, c0), (r1, c1), 0.07)
        prep = resize_sample(s, (th, tw))
        after = np.hypot(*(prep.points[1] - prep.points[0])) * prep.mm_per_pixel
        ratio = max(prep.anisotropy, 1 / prep.anisotropy)
        # a geometric-mean scale is off by at most the square root of the axis ratio
        assert s.thickness_mm / np.sqrt(ratio) - 1e-9 <= after <= s.thickness_mm * np.sqrt(ratio) + 1e-9


def test_resize_keeps_features_under_annotations():
    img = np.zeros((96, 80))
    img[30, :] = 1.0
    img[70, :] = 1.0
    s = make_sample("a", img, (30, 40), (70, 40), 0.1)
    for target in ((48, 40), (192, 160), (64, 64)):
        prep = resize_sample(s, target)
        col = prep.image[:, prep.annotation.points[0][1]]
        for (r, _, _) in prep.annotation.points:
            lo = max(r - 4, 0)
            peak = lo + int(np.argmax(col[lo : r + 5]))
            assert abs(peak - r) <= 1, target


def test_normalisation_constants():
    s = make_sample("a", np.full((8, 8), 0.449), (1, 1), (5, 1), 0.1)
    x, ann, mm = resize_normalize(s, (8, 8))
    assert x.shape == (8, 8, 1)
    assert np.allclose(x, 0.0)
    assert (NORM_MEAN, NORM_STD) == (0.449, 0.226)


# -- augmentation -------------------------------------------------------


def test_identity_augmentation():
    img = np.random.default_rng(2).random((10, 10))
    np.testing.assert_array_equal(apply_intensity(img, 1.0, 0.0, 1.0), img)


def test_brightness_on_constant_image():
    np.testing.assert_allclose(apply_intensity(np.full((4, 4), 0.5), 1.0, 0.1, 1.0), 0.6, atol=1e-15)


def test_augment_is_seeded_and_bounded():
    img = np.random.default_rng(3).random((16, 16))
    a = augment(img, np.random.default_rng(5))
    b = augment(img, np.random.default_rng(5))
    assert a.tobytes() == b.tobytes()
    assert a.min() >= 0.0 and a.max() <= 1.0


# -- synthetic scenes ---------------------------------------------------


def test_synthetic_is_deterministic():
    a = synth_generate(3, (64, 64), np.random.default_rng(1))
    b = synth_generate(3, (64, 64), np.random.default_rng(1))
    for x, y in zip(a, b):
        assert x.image.tobytes() == y.image.tobytes() and x.annotation == y.annotation


def test_synthetic_thickness_is_exact_distance():
    for s in synth_generate(20, (128, 128), np.random.default_rng(2)):
        assert s.mm_per_pixel == synth_mm_per_pixel((128, 128))
        assert s.thickness_mm == np.hypot(*np.subtract(s.bottom, s.top)) * s.mm_per_pixel


def test_synthetic_thickness_statistics():
    samples = synth_generate(1000, (128, 128), np.random.default_rng(3))
    mm = {RESTING: [], CONTRACTED: []}
    for s in samples:
        mm[s.state].append(s.thickness_mm)
    allv = mm[RESTING] + mm[CONTRACTED]
    assert min(allv) >= 1.05 - 1e-9 and max(allv) <= 8.02 + 1e-9
    assert min(mm[RESTING]) >= 1.05 - 1e-9 and max(mm[RESTING]) <= 5.24 + 1e-9
    assert min(mm[CONTRACTED]) >= 2.07 - 1e-9
    assert abs(np.mean(mm[RESTING]) - 3.03) <= 0.3
    assert abs(np.mean(mm[CONTRACTED]) - 5.25) <= 0.3


def test_synthetic_endpoints_sit_on_bright_interfaces():
    for s in synth_generate(20, (128, 128), np.random.default_rng(4)):
        col = s.image[:, s.top[1]]
        mid = col[s.top[0] + 3 : s.bottom[0] - 2].mean()
        for r, _ in (s.top, s.bottom):
            assert col[r - 1 : r + 2].max() > mid + 0.15


def test_synthetic_count_must_be_positive():
    with pytest.raises(ValueError, match="count"):
        synth_generate(0, (32, 32), np.random.default_rng(0))


def test_synthetic_written_pngs_are_lossless(tmp_path):
    samples = synth_generate(2, (32, 32), np.random.default_rng(0))
    write_dataset(samples, tmp_path)
    back = load_dataset(tmp_path)
    for a, b in zip(samples, back):
        assert a.image.tobytes() == b.image.tobytes()
        assert np.asarray(Image.open(tmp_path / "images" / f"{a.id}.png")).dtype == np.uint8


# -- folds --------------------------------------------------------------


def check_plan(plan, ids):
    tests = [i for f in plan.folds for i in f["test"]]
    assert sorted(tests) == sorted(ids)
    for f in plan.folds:
        parts = [set(f["train"]), set(f["val"]), set(f["test"])]
        assert sum(len(p) for p in parts) == len(ids)
        assert set().union(*parts) == set(ids)


def test_reference_split_sizes():
    plan = kfold_split(range(400), 10, np.random.default_rng(0))
    for f in plan.folds:
        assert (len(f["train"]), len(f["val"]), len(f["test"])) == (320, 40, 40)
    check_plan(plan, list(range(400)))


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 60), st.integers(0, 2**32 - 1), st.data())
def test_partition_for_any_n_k(n, seed, data):
    k = data.draw(st.integers(2, n))
    ids = [f"id{i}" for i in range(n)]
    plan = kfold_split(ids, k, np.random.default_rng(seed))
    check_plan(plan, ids)
    sizes = sorted(len(f["test"]) for f in plan.folds)
    assert sizes[-1] - sizes[0] <= 1


def test_fold_rotation_and_determinism():
    a = kfold_split(range(11), 3, np.random.default_rng(9))
    b = kfold_split(range(11), 3, np.random.default_rng(9))
    assert a.folds == b.folds
    for f in range(3):
        assert a.folds[f]["val"] == a.folds[(f + 1) % 3]["test"]
    two = kfold_split(range(8), 2, np.random.default_rng(0))
    assert all(f["val"] == [] and len(f["train"]) == 4 for f in two.folds)


def test_fold_errors():
    with pytest.raises(ValueError, match="exceeds"):
        kfold_split(range(3), 4, np.random.default_rng(0))
    with pytest.raises(ValueError):
        kfold_split(range(3), 1, np.random.default_rng(0))
