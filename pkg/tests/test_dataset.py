import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from eusseg.dataset import (
    CropSpec,
    ImageRecord,
    ManifestError,
    crop_periphery,
    cubic_kernel,
    load_folds,
    load_manifest,
    make_folds,
    preprocess_sample,
    resize_bicubic,
    resize_mask_nearest,
    save_folds,
    to_grayscale,
)

from conftest import write_dataset


# ---------------------------------------------------------------- manifest


def test_manifest_with_three_entries(tmp_path):
    path = write_dataset(tmp_path, {"a": 2, "b": 1})
    manifest = load_manifest(path)
    assert len(manifest) == 3
    assert [r.case_id for r in manifest] == ["a", "a", "b"]
    assert all(r.image_path.is_file() and r.mask_path.is_file() for r in manifest)


def test_manifest_missing_mask_names_entry(tmp_path):
    path = write_dataset(tmp_path, {"a": 3})
    (tmp_path / "masks" / "a_001.png").unlink()
    with pytest.raises(ManifestError, match=r"manifest.jsonl:2: mask file not found"):
        load_manifest(path)


def test_manifest_of_curated_external_size(tmp_path):
    path = write_dataset(tmp_path, {f"lep{i:03d}": 1 for i in range(350)}, size=40)
    assert len(load_manifest(path)) == 350


@pytest.mark.parametrize("line, message", [
    ("{not json", "malformed entry"),
    ('{"image_path": "images/a_000.png", "mask_path": "masks/a_000.png"}', "missing keys"),
    ('{"image_path": "images/a_000.png", "mask_path": "masks/a_000.png", "case_id": ""}', "case_id is empty"),
    ('{"image_path": "images/a_000.png", "mask_path": "masks/a_000.png", "case_id": "a", "crop": [1, 2]}',
     "four integers"),
    ('{"image_path": "images/a_000.png", "mask_path": "masks/a_000.png", "case_id": "a", "crop": [1, -2, 0, 0]}',
     "non-negative"),
])
def test_manifest_malformed_entries(tmp_path, line, message):
    write_dataset(tmp_path, {"a": 1})
    path = tmp_path / "bad.jsonl"
    path.write_text(line + "\n")
    with pytest.raises(ManifestError, match=message):
        load_manifest(path)


def test_manifest_missing_file(tmp_path):
    with pytest.raises(ManifestError, match="not found"):
        load_manifest(tmp_path / "nope.jsonl")


# ---------------------------------------------------------------- crop


def test_crop_identity():
    img = np.random.default_rng(0).random((100, 100))
    out = crop_periphery(img, CropSpec())
    assert np.array_equal(out, img)


def test_crop_center_window():
    img = np.random.default_rng(0).random((100, 100))
    out = crop_periphery(img, CropSpec(10, 10, 10, 10))
    assert out.shape == (80, 80)
    assert np.array_equal(out, img[10:90, 10:90])


def test_crop_moves_marked_pixel():
    img = np.zeros((64, 64))
    img[15, 15] = 1.0
    out = crop_periphery(img, CropSpec(left=10, top=10, right=0, bottom=0))
    assert out.shape == (54, 54)
    assert out[5, 5] == 1.0 and out.sum() == 1.0


def test_crop_too_large():
    with pytest.raises(ValueError, match="at least 32x32"):
        crop_periphery(np.zeros((64, 64)), CropSpec(20, 0, 20, 0))


@settings(max_examples=50, deadline=None)
@given(st.tuples(*[st.integers(0, 8)] * 4), st.tuples(*[st.integers(0, 8)] * 4))
def test_crop_composes(a, b):
    img = np.arange(80 * 90, dtype=float).reshape(80, 90)
    ca, cb = CropSpec(*a), CropSpec(*b)
    assert np.array_equal(crop_periphery(crop_periphery(img, ca), cb), crop_periphery(img, ca + cb))


# ---------------------------------------------------------------- grayscale


def test_grayscale_fixed_point():
    assert to_grayscale(np.full((2, 2, 3), 0.5))[0, 0] == pytest.approx(0.5, abs=1e-15)


def test_grayscale_passthrough_is_bitwise():
    img = np.random.default_rng(1).random((5, 7))
    assert to_grayscale(img) is img


def test_grayscale_red_pixel():
    px = np.zeros((1, 1, 3))
    px[..., 0] = 1.0
    assert to_grayscale(px)[0, 0] == pytest.approx(0.299, abs=1e-15)


def test_grayscale_rejects_four_channels():
    with pytest.raises(ValueError):
        to_grayscale(np.zeros((4, 4, 4)))


# ---------------------------------------------------------------- bicubic


def bicubic_oracle(img, out_h, out_w, a=-0.5):
    """Direct 4x4 kernel sum per output pixel, edge-replicated taps."""
    h, w = img.shape

    def kern(x):
        x = abs(x)
        if x <= 1:
            return (a + 2) * x ** 3 - (a + 3) * x ** 2 + 1
        if x < 2:
            return a * x ** 3 - 5 * a * x ** 2 + 8 * a * x - 4 * a
        return 0.0

    out = np.zeros((out_h, out_w))
    for i in range(out_h):
        sy = (i + 0.5) * h / out_h - 0.5
        for j in range(out_w):
            sx = (j + 0.5) * w / out_w - 0.5
            total = 0.0
            for m in range(int(np.floor(sy)) - 1, int(np.floor(sy)) + 3):
                for n in range(int(np.floor(sx)) - 1, int(np.floor(sx)) + 3):
                    pix = img[min(max(m, 0), h - 1), min(max(n, 0), w - 1)]
                    total += kern(sy - m) * kern(sx - n) * pix
            out[i, j] = min(max(total, 0.0), 1.0)
    return out


def test_cubic_kernel_catmull_rom_values():
    assert cubic_kernel(0.0) == 1.0
    assert cubic_kernel(1.0) == 0.0
    assert cubic_kernel(2.0) == 0.0
    # a = -0.5 at x = 0.5: 1.5/8 - 2.5/4 + 1
    assert cubic_kernel(0.5) == pytest.approx(0.5625)


def test_bicubic_constant():
    out = resize_bicubic(np.full((13, 7), 0.37), 20, 9)
    assert out.shape == (20, 9)
    np.testing.assert_allclose(out, 0.37, atol=1e-14)


def test_bicubic_same_size_identity():
    img = np.random.default_rng(2).random((17, 11))
    np.testing.assert_allclose(resize_bicubic(img, 17, 11), img, atol=1e-15)


def test_bicubic_ramp_matches_kernel_sum_oracle():
    ramp = np.add.outer(np.arange(8), np.arange(8)) / 14.0
    np.testing.assert_allclose(resize_bicubic(ramp, 16, 16), bicubic_oracle(ramp, 16, 16), atol=1e-12)


def test_bicubic_random_downscale_matches_oracle():
    img = np.random.default_rng(3).random((12, 9))
    np.testing.assert_allclose(resize_bicubic(img, 5, 7), bicubic_oracle(img, 5, 7), atol=1e-12)


def test_bicubic_degenerate_target():
    with pytest.raises(ValueError, match="degenerate"):
        resize_bicubic(np.zeros((8, 8)), 3, 8)


@settings(max_examples=40, deadline=None)
@given(st.integers(4, 24), st.integers(4, 24), st.integers(0, 2 ** 31))
def test_bicubic_stays_in_unit_range(h, w, seed):
    img = (np.random.default_rng(seed).random((9, 10)) > 0.5).astype(float)  # overshoot-prone
    out = resize_bicubic(img, h, w)
    assert out.min() >= 0.0 and out.max() <= 1.0


# ---------------------------------------------------------------- nearest


def test_nearest_all_ones():
    assert np.array_equal(resize_mask_nearest(np.ones((5, 3), np.uint8), 9, 4), np.ones((9, 4)))


def test_nearest_same_size():
    m = (np.random.default_rng(4).random((6, 5)) > 0.5).astype(np.uint8)
    assert np.array_equal(resize_mask_nearest(m, 6, 5), m)


def test_nearest_upscale_quadrant():
    m = np.zeros((4, 4), np.uint8)
    m[:2, :2] = 1
    # nearest source index per output pixel: floor((i + 0.5) / 2) = 0,0,1,1,2,2,3,3
    expected = np.zeros((8, 8), np.uint8)
    for i in range(8):
        for j in range(8):
            expected[i, j] = m[int((i + 0.5) // 2), int((j + 0.5) // 2)]
    out = resize_mask_nearest(m, 8, 8)
    assert np.array_equal(out, expected)
    assert out[:4, :4].all() and out.sum() == 16


def test_nearest_rejects_non_binary():
    with pytest.raises(ValueError):
        resize_mask_nearest(np.array([[0, 2], [1, 0]]), 4, 4)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 20), st.integers(1, 20), st.integers(1, 30), st.integers(1, 30), st.booleans())
def test_nearest_never_invents_values(h, w, oh, ow, all_zero):
    m = np.zeros((h, w), np.uint8) if all_zero else (np.random.default_rng(h * w).random((h, w)) > 0.5).astype(np.uint8)
    out = resize_mask_nearest(m, oh, ow)
    assert set(np.unique(out)) <= set(np.unique(m))


# ---------------------------------------------------------------- preprocess_sample


def _record(tmp_path, image, mask, crop=None, name="x"):
    ip, mp = tmp_path / f"{name}_img.png", tmp_path / f"{name}_mask.png"
    Image.fromarray(image).save(ip)
    Image.fromarray(mask).save(mp)
    return ImageRecord(ip, mp, case_id="c", crop_spec=crop)


def test_preprocess_passthrough_at_target(tmp_path):
    rng = np.random.default_rng(5)
    pixels = rng.integers(0, 256, (64, 64), dtype=np.uint8)
    mask = (rng.random((64, 64)) > 0.5).astype(np.uint8) * 255
    sample = preprocess_sample(_record(tmp_path, pixels, mask), (64, 64))
    assert np.array_equal(sample.image, (pixels / 255.0).astype(np.float32))
    assert np.array_equal(sample.mask, mask // 255)


def test_preprocess_binarizes_255_masks(tmp_path):
    pixels = np.full((40, 40), 100, np.uint8)
    mask = np.zeros((40, 40), np.uint8)
    mask[10:20, 10:20] = 255
    mask[0, 0] = 127  # below threshold
    sample = preprocess_sample(_record(tmp_path, pixels, mask), (40, 40))
    assert set(np.unique(sample.mask)) == {0, 1}
    assert sample.mask.sum() == 100


def test_preprocess_mismatched_sources_reach_target(tmp_path):
    rng = np.random.default_rng(6)
    img = rng.integers(0, 256, (90, 70, 3), dtype=np.uint8)
    mask = np.zeros((90, 70), np.uint8)
    mask[30:60, 20:50] = 255
    sample = preprocess_sample(_record(tmp_path, img, mask, CropSpec(5, 5, 5, 5)), (48, 48))
    assert sample.image.shape == sample.mask.shape == (48, 48)
    assert sample.image.dtype == np.float32 and 0 <= sample.image.min() and sample.image.max() <= 1


def test_preprocess_sixteen_bit(tmp_path):
    pixels = np.full((40, 40), 65535, np.uint16)
    pixels[:20] = 0
    mask = np.zeros((40, 40), np.uint8)
    ip, mp = tmp_path / "i16.png", tmp_path / "m.png"
    Image.fromarray(pixels).save(ip)
    Image.fromarray(mask).save(mp)
    sample = preprocess_sample(ImageRecord(ip, mp, "c"), (40, 40))
    assert sample.image[:20].max() == 0.0 and sample.image[20:].min() == 1.0


def test_preprocess_is_deterministic(tmp_path):
    rng = np.random.default_rng(7)
    rec = _record(tmp_path, rng.integers(0, 256, (77, 91, 3), dtype=np.uint8),
                  (rng.random((77, 91)) > 0.7).astype(np.uint8) * 255, CropSpec(3, 4, 5, 6))
    a, b = preprocess_sample(rec, (64, 64)), preprocess_sample(rec, (64, 64))
    assert a.image.tobytes() == b.image.tobytes() and a.mask.tobytes() == b.mask.tobytes()


def test_preprocess_corrupt_image(tmp_path):
    rec = _record(tmp_path, np.zeros((40, 40), np.uint8), np.zeros((40, 40), np.uint8))
    rec.image_path.write_bytes(b"not a png")
    with pytest.raises(ManifestError, match="cannot read"):
        preprocess_sample(rec, (40, 40))


# ---------------------------------------------------------------- folds


def _records(case_sizes):
    recs = []
    for c, n in enumerate(case_sizes):
        for j in range(n):
            recs.append(ImageRecord(f"/data/c{c}_{j}.png", f"/data/m{c}_{j}.png", case_id=f"case{c:02d}"))
    return recs


def check_fold_integrity(records, folds, k, grouped=True):
    assert len(folds) == k
    seen = []
    for f in folds:
        train = {r.image_path for r in f.train_records}
        val = {r.image_path for r in f.val_records}
        assert not train & val
        assert train | val == {r.image_path for r in records}
        if grouped:
            assert not {r.case_id for r in f.train_records} & {r.case_id for r in f.val_records}
        seen.extend(r.image_path for r in f.val_records)
    assert sorted(seen) == sorted(r.image_path for r in records)


def test_even_division():
    recs = _records([1] * 10)
    folds = make_folds(recs, k=5, seed=0)
    assert [len(f.val_records) for f in folds] == [2] * 5
    check_fold_integrity(recs, folds, 5)


def test_folds_deterministic():
    recs = _records([1] * 10)
    a, b = make_folds(recs, 5, seed=3), make_folds(recs, 5, seed=3)
    assert [[r.image_path for r in f.val_records] for f in a] == [[r.image_path for r in f.val_records] for f in b]


def test_eighteen_unequal_cases():
    sizes = [3 + (7 * i) % 11 for i in range(18)]
    recs = _records(sizes)
    folds = make_folds(recs, k=5, seed=11)
    check_fold_integrity(recs, folds, 5)
    case_counts = [len({r.case_id for r in f.val_records}) for f in folds]
    assert max(case_counts) - min(case_counts) <= 1


def test_too_few_cases():
    with pytest.raises(ValueError, match="cannot fill"):
        make_folds(_records([5, 5, 5]), k=5)
    with pytest.raises(ValueError):
        make_folds(_records([1] * 6), k=1)


def test_ungrouped_split_allows_case_straddling():
    recs = _records([40, 40])
    folds = make_folds(recs, k=5, seed=0, group_by_case=False)
    check_fold_integrity(recs, folds, 5, grouped=False)
    assert [len(f.val_records) for f in folds] == [16] * 5


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(1, 6), min_size=5, max_size=25), st.integers(2, 5), st.integers(0, 10 ** 6),
       st.booleans())
def test_fold_partition_property(sizes, k, seed, grouped):
    recs = _records(sizes)
    folds = make_folds(recs, k=k, seed=seed, group_by_case=grouped)
    check_fold_integrity(recs, folds, k, grouped)


def test_fold_file_roundtrip(tmp_path):
    path = write_dataset(tmp_path, {f"c{i}": 2 for i in range(6)}, size=40)
    manifest = load_manifest(path)
    folds = make_folds(manifest, k=3, seed=1)
    saved = save_folds(folds, tmp_path / "folds.json", root=manifest.root)
    payload = json.loads(saved.read_text())
    assert payload["k"] == 3 and payload["folds"][0]["val"][0].startswith("images/")
    back = load_folds(saved, manifest, root=manifest.root)
    for f, g in zip(folds, back):
        assert [r.image_path for r in f.val_records] == [r.image_path for r in g.val_records]
        assert [r.image_path for r in f.train_records] == [r.image_path for r in g.train_records]
