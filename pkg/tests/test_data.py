import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import toy_dataset
from uaplab.data import (
    APTOS_PROPORTIONS,
    class_counts_for,
    generate_synthetic_dataset,
    load_dataset_csv,
    load_dataset_dir,
    save_dataset_dir,
    split_perturb_robust,
    stratified_kfold,
    write_image,
)
from uaplab.errors import (
    BadGrade,
    BadProportions,
    ClassTooSmall,
    EmptyResult,
    InvalidSigma,
    MalformedCsv,
    MissingImage,
)
from uaplab.preprocess import (
    PreprocessConfig,
    circular_crop,
    circular_mask,
    gaussian_blur,
    preprocess_image,
    smooth_normalize,
    trim_black_borders,
)


# ---------------------------------------------------------------- trimming and cropping

def test_trim_ten_pixel_frame():
    img = np.zeros((3, 64, 64), np.float32)
    img[:, 10:54, 10:54] = 0.5
    assert trim_black_borders(img, 0.03).shape == (3, 44, 44)


def test_trim_without_border_is_identity(rng):
    img = rng.uniform(0.2, 1.0, (3, 20, 30)).astype(np.float32)
    assert np.array_equal(trim_black_borders(img), img)


def test_trim_all_black():
    with pytest.raises(EmptyResult):
        trim_black_borders(np.zeros((3, 8, 8)))


def test_trim_uses_luma_not_single_channel():
    img = np.zeros((3, 10, 10))
    img[2, :, :2] = 0.2  # blue only: luma 0.0228 < 7/255
    img[:, 4:6, 4:6] = 1.0
    assert trim_black_borders(img).shape == (3, 2, 2)


@pytest.mark.parametrize("size", [1, 2, 5, 8, 33])
def test_circular_crop_geometry(size, rng):
    img = rng.uniform(0.1, 1.0, (3, size, size))
    out = circular_crop(img, fill=0.25)
    c = size // 2
    assert np.array_equal(out[:, c, c], img[:, c, c])
    if size > 2:
        assert np.all(out[:, 0, 0] == 0.25) and np.all(out[:, -1, -1] == 0.25)
    assert np.array_equal(circular_crop(out, fill=0.25), out)


def test_circular_mask_matches_pixel_centre_rule():
    h, w = 7, 11
    mask = circular_mask(h, w)
    r = min(h, w) / 2
    for i in range(h):
        for j in range(w):
            inside = (i + 0.5 - h / 2) ** 2 + (j + 0.5 - w / 2) ** 2 <= r * r
            assert mask[i, j] == inside
    assert np.array_equal(mask, mask[::-1, ::-1])


# ---------------------------------------------------------------- smoothing

def test_constant_image_maps_to_gamma():
    img = np.full((3, 16, 16), 0.37)
    assert np.allclose(smooth_normalize(img, 2.0, 4, -4, 0.5), 0.5, atol=1e-12)


def test_smooth_normalize_identity(rng):
    img = rng.uniform(0, 1, (3, 9, 9))
    assert np.allclose(smooth_normalize(img, 1.5, 1, 0, 0), img, atol=1e-15)


@pytest.mark.parametrize("sigma", [0.8, 1.5, 2.3])
def test_impulse_response_is_sampled_gaussian(sigma):
    size = 41
    img = np.zeros((1, size, size))
    img[0, 20, 20] = 1.0
    out = smooth_normalize(img, sigma, alpha=0.0, beta=1.0, gamma=0.0)[0]
    # direct oracle: normalized 1-D samples out to round(4 sigma), outer product
    radius = int(4 * sigma + 0.5)
    t = np.arange(-radius, radius + 1)
    g = np.exp(-t ** 2 / (2 * sigma ** 2))
    g /= g.sum()
    expected = np.zeros((size, size))
    expected[20 - radius:21 + radius, 20 - radius:21 + radius] = np.outer(g, g)
    assert np.max(np.abs(out - expected)) <= 1e-6


@pytest.mark.parametrize("sigma", [0.0, -1.0, float("nan")])
def test_invalid_sigma(sigma):
    with pytest.raises(InvalidSigma):
        gaussian_blur(np.zeros((1, 4, 4)), sigma)


# ---------------------------------------------------------------- full preprocessing

def _disc_on_black(size=80, radius=30, color=(0.6, 0.3, 0.2)):
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    disc = np.hypot(yy - size / 2, xx - size / 2) <= radius
    img = np.zeros((3, size, size))
    img[:, disc] = np.array(color)[:, None]
    return img, disc


def test_preprocess_default_output_contract():
    raw = generate_synthetic_dataset(5, seed=3, image_size=48).images[2]
    out = preprocess_image(raw, PreprocessConfig())
    assert out.shape == (3, 224, 224) and out.dtype == np.float32
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_preprocess_composed_no_op(rng):
    img = circular_crop(rng.uniform(0.2, 0.9, (3, 32, 32)))
    cfg = PreprocessConfig(target_size=32, alpha=1.0, beta=0.0, gamma=0.0)
    assert np.allclose(preprocess_image(img, cfg), img, atol=1e-7)


def test_preprocess_golden_disc():
    img, _ = _disc_on_black()
    cfg = PreprocessConfig(target_size=60, alpha=1.0, beta=0.0, gamma=0.0, fill=0.0)
    out = preprocess_image(img, cfg)
    # the disc fills the trimmed frame, so the crop circle is the disc itself
    assert np.all(out[:, 0, 0] == 0) and np.all(out[:, -1, 0] == 0)
    inner = circular_mask(60, 60) & (np.hypot(*(np.mgrid[0:60, 0:60] + 0.5 - 30)) < 27)
    assert np.allclose(out[:, inner], np.array([0.6, 0.3, 0.2])[:, None], atol=1e-6)


def test_preprocess_config_hash_tracks_fields():
    assert PreprocessConfig().hash() == PreprocessConfig().hash()
    assert PreprocessConfig().hash() != PreprocessConfig(sigma=3.0).hash()
    assert PreprocessConfig(target_size=60).effective_sigma == 2.0


# ---------------------------------------------------------------- csv ingestion

def _write_csv_dataset(tmp_path, rows, files=None):
    img_dir = tmp_path / "images"
    lines = ["id_code,diagnosis"] + [f"{i},{g}" for i, g in rows]
    (tmp_path / "labels.csv").write_text("\n".join(lines) + "\n")
    for ident in files if files is not None else [r[0] for r in rows]:
        write_image(img_dir / f"{ident}.png", np.full((3, 4, 4), 0.5, np.float32))
    return tmp_path / "labels.csv", img_dir


def test_csv_three_rows_in_id_order(tmp_path):
    csv, img_dir = _write_csv_dataset(tmp_path, [("c", 4), ("a", 0), ("b", 2)])
    ds = load_dataset_csv(csv, img_dir)
    assert ds.ids == ["a", "b", "c"] and list(ds.grades) == [0, 2, 4]
    assert ds.images.shape == (3, 3, 4, 4)


def test_csv_bad_grade(tmp_path):
    csv, img_dir = _write_csv_dataset(tmp_path, [("a", 0), ("b", 5)])
    with pytest.raises(BadGrade):
        load_dataset_csv(csv, img_dir)


def test_csv_missing_image_names_id(tmp_path):
    csv, img_dir = _write_csv_dataset(tmp_path, [("a", 0), ("ghost", 1)], files=["a"])
    with pytest.raises(MissingImage, match="ghost"):
        load_dataset_csv(csv, img_dir)


def test_csv_non_integer_grade(tmp_path):
    (tmp_path / "labels.csv").write_text("id_code,diagnosis\na,x\n")
    with pytest.raises(BadGrade):
        load_dataset_csv(tmp_path / "labels.csv", tmp_path)


@pytest.mark.parametrize("text", ["id,grade\na,1\n", "id_code,diagnosis\na\n", ""])
def test_csv_malformed(tmp_path, text):
    (tmp_path / "labels.csv").write_text(text)
    with pytest.raises(MalformedCsv):
        load_dataset_csv(tmp_path / "labels.csv", tmp_path)


def test_dataset_dir_round_trip(tmp_path):
    ds = generate_synthetic_dataset(12, seed=5, image_size=16)
    save_dataset_dir(ds, tmp_path / "d", preprocess_hash="abc")
    back = load_dataset_dir(tmp_path / "d")
    assert back.ids == ds.ids and np.array_equal(back.grades, ds.grades)
    assert np.max(np.abs(back.images - ds.images)) <= 0.5 / 255 + 1e-7
    manifest = json.loads((tmp_path / "d" / "manifest.json").read_text())
    assert {item["preprocess_config_hash"] for item in manifest["items"]} == {"abc"}


# ---------------------------------------------------------------- synthetic data

def test_aptos_class_counts():
    assert list(class_counts_for(1000, APTOS_PROPORTIONS)) == [493, 101, 273, 80, 53]
    ds = generate_synthetic_dataset(1000, APTOS_PROPORTIONS, image_size=8, seed=0)
    assert list(ds.class_counts()) == [493, 101, 273, 80, 53]


def test_uniform_five():
    ds = generate_synthetic_dataset(5, [0.2] * 5, image_size=8, seed=0)
    assert list(ds.class_counts()) == [1] * 5


@given(st.integers(5, 3000), st.lists(st.floats(0.01, 1.0), min_size=5, max_size=5))
def test_class_counts_sum_and_closeness(n, weights):
    p = np.array(weights) / sum(weights)
    counts = class_counts_for(n, p)
    assert counts.sum() == n
    assert np.all(np.abs(counts - n * p) < 1.0 + 1e-9)


@pytest.mark.parametrize("props", [[0.5, 0.5], [0.3, 0.3, 0.3, 0.1, 0.1], [1.2, -0.2, 0, 0, 0]])
def test_bad_proportions(props):
    with pytest.raises(BadProportions):
        generate_synthetic_dataset(10, props)


def test_synthetic_is_seeded():
    a = generate_synthetic_dataset(20, seed=9, image_size=16)
    b = generate_synthetic_dataset(20, seed=9, image_size=16)
    c = generate_synthetic_dataset(20, seed=10, image_size=16)
    assert a.sha256() == b.sha256() != c.sha256()
    assert a.images.min() >= 0 and a.images.max() <= 1


# ---------------------------------------------------------------- splits

def test_kfold_exact_stratification():
    ds = toy_dataset(np.zeros((8, 1, 2, 2)), [0, 0, 0, 0, 1, 1, 1, 1])
    fa = stratified_kfold(ds, 4, seed=3)
    for f in range(4):
        assert sorted(ds.grades[fa.indices(f)]) == [0, 1]


def test_kfold_class_too_small_names_class():
    ds = toy_dataset(np.zeros((7, 1, 2, 2)), [0, 0, 0, 0, 2, 2, 2])
    with pytest.raises(ClassTooSmall, match="class 2"):
        stratified_kfold(ds, 4)


def test_kfold_seeded():
    ds = generate_synthetic_dataset(200, image_size=8, seed=0)
    a, b = stratified_kfold(ds, 4, 11), stratified_kfold(ds, 4, 11)
    assert np.array_equal(a.folds, b.folds)
    sizes = np.bincount(a.folds)
    assert sizes.max() - sizes.min() <= 1


def test_perturb_robust_partition():
    grades = [0] * 40 + [1] * 25 + [2] * 20 + [3] * 10 + [4] * 5
    ds = toy_dataset(np.zeros((100, 1, 2, 2)), grades)
    dp, dr = split_perturb_robust(ds, 0.5, seed=2)
    assert len(dp) == 50 and len(dr) == 50
    assert sorted(dp.ids + dr.ids) == sorted(ds.ids)
    assert not set(dp.ids) & set(dr.ids)
    assert np.all(np.abs(dp.class_counts() - 0.5 * ds.class_counts()) <= 1)
    assert dp.role == "perturb_split" and dr.role == "robust_split"


@settings(max_examples=30)
@given(st.lists(st.integers(2, 30), min_size=1, max_size=5), st.floats(0.1, 0.9),
       st.integers(0, 1000))
def test_perturb_robust_properties(sizes, frac, seed):
    grades = np.repeat(np.arange(len(sizes)), sizes)
    ds = toy_dataset(np.zeros((len(grades), 1, 1, 1)), grades)
    dp, dr = split_perturb_robust(ds, frac, seed)
    assert len(dp) + len(dr) == len(ds)
    assert sorted(dp.ids + dr.ids) == sorted(ds.ids)
    # every class lands on both sides, within one item of its share
    assert np.all(dp.class_counts(len(sizes)) >= 1) and np.all(dr.class_counts(len(sizes)) >= 1)
    assert np.all(np.abs(dp.class_counts(len(sizes)) - frac * np.array(sizes)) <= 1)
    if all(1 <= n * frac and n * (1 - frac) >= 1 for n in sizes):
        assert len(dp) == round(len(ds) * frac)
