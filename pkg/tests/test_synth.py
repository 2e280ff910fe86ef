import json
import math

import numpy as np
import pytest

from tapfm.metrics import roc_auc
from tapfm.synth import (
    DEFAULT_TEXTURES,
    FOREGROUND_THRESHOLD,
    DataError,
    DatasetSpec,
    PseudoSlide,
    SlideParams,
    TextureSpec,
    augment,
    blur,
    generate_slide,
    load_dataset,
    make_dataset,
    plan_dataset,
    positives_for,
    read_bag_file,
    sample_bag_tiles,
    tile_slide,
    write_bag_file,
)

SMALL = SlideParams(size=256)


def test_negative_slide_has_no_signal():
    s = generate_slide(0, [0], SMALL)
    assert not s.signal_mask.any()
    assert s.image.min() >= 0 and s.image.max() <= 1


def test_signal_count_uses_floor_with_minimum_one():
    s = generate_slide(1, [1], SMALL)
    bag = tile_slide(s)
    n_fg = int((~background_tiles(s)).sum())
    assert s.signal_mask.sum() == max(1, math.floor(0.1 * n_fg))
    assert (bag.signal >= 0).sum() == s.signal_mask.sum()
    tiny = generate_slide(1, [1], SlideParams(size=64, signal_fraction=0.01))
    assert tiny.signal_mask.sum() == 1


def background_tiles(slide):
    n = slide.signal_mask.shape[0]
    t = slide.tile_size * slide.magnification
    means = slide.image.reshape(n, t, n, t, -1).mean(axis=(1, 3, 4))
    return means > FOREGROUND_THRESHOLD


def test_generation_is_deterministic():
    a, b = generate_slide(3, [1], SMALL), generate_slide(3, [1], SMALL)
    assert np.array_equal(a.image, b.image) and np.array_equal(a.signal_mask, b.signal_mask)
    assert not np.array_equal(a.image, generate_slide(4, [1], SMALL).image)


def test_overlapping_textures_rejected():
    tex = (TextureSpec(0.0, 4.0), TextureSpec(180.0, 4.0))
    with pytest.raises(DataError, match="overlapping"):
        generate_slide(0, [1, 0], SMALL, tex)
    with pytest.raises(DataError):
        generate_slide(0, [1, 0, 1], SMALL, tex)


def test_full_grid_and_background_filter():
    img = np.full((1024, 1024, 3), 0.5, np.float32)
    s = PseudoSlide(img, np.array([0]), np.zeros((32, 32), bool), np.full((32, 32), -1))
    bag = tile_slide(s)
    assert bag.K == 1024 and bag.tiles.shape == (1024, 32, 32, 3)
    assert len({tuple(c) for c in bag.tile_coords}) == 1024
    white = PseudoSlide(np.ones((64, 64, 3), np.float32), np.array([0]), np.zeros((2, 2), bool), np.full((2, 2), -1))
    with pytest.raises(DataError, match="no foreground"):
        tile_slide(white)


def test_generated_slides_have_background_tiles():
    s = generate_slide(5, [0], SMALL)
    bag = tile_slide(s)
    assert 0 < bag.K < 64
    assert bag.tiles.mean(axis=(1, 2, 3)).max() <= FOREGROUND_THRESHOLD


def test_2x_downscale_matches_1x():
    rng = np.random.default_rng(0)
    img = rng.random((1024, 1024, 3)).astype(np.float32)
    img[:64, :64] = 0.97  # two background tiles at 1x
    up = np.repeat(np.repeat(img, 2, axis=0), 2, axis=1)
    one = tile_slide(PseudoSlide(img, np.array([0]), np.zeros((32, 32), bool), np.full((32, 32), -1)))
    two = tile_slide(PseudoSlide(up, np.array([0]), np.zeros((32, 32), bool), np.full((32, 32), -1), magnification=2))
    assert one.K == two.K == 1024 - 4
    np.testing.assert_allclose(two.tiles.mean(axis=(1, 2, 3)), one.tiles.mean(axis=(1, 2, 3)), atol=1e-6)
    np.testing.assert_allclose(two.tiles, one.tiles, atol=1e-6)


def test_bag_file_round_trip_and_layout(tmp_path):
    tiles = np.random.default_rng(0).random((3, 4, 4, 2)).astype(np.float32)
    path = tmp_path / "b.tpfm"
    write_bag_file(path, tiles)
    raw = path.read_bytes()
    assert raw[:4] == b"TPFM"
    assert np.frombuffer(raw[4:24], "<u4").tolist() == [1, 3, 4, 4, 2]
    np.testing.assert_array_equal(np.frombuffer(raw[24:], "<f4"), tiles.reshape(-1))
    np.testing.assert_array_equal(read_bag_file(path), tiles)
    np.testing.assert_array_equal(read_bag_file(path, mmap=False), tiles)
    path.write_bytes(raw[:-4])
    with pytest.raises(DataError, match="size"):
        read_bag_file(path)
    path.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(DataError, match="magic"):
        read_bag_file(path)


# --------------------------------------------------------------- augmentation


class FixedRng:
    """Stands in for a Generator so a specific augmentation can be forced."""

    def __init__(self, flip, k, blur_):
        self._r = iter([0.0 if flip else 0.9, 0.0 if blur_ else 0.9])
        self.k = k

    def random(self):
        return next(self._r)

    def integers(self, lo, hi):
        return self.k


def test_augment_involutions():
    tile = np.random.default_rng(0).random((8, 8, 3)).astype(np.float32)
    r180 = augment(augment(tile, FixedRng(False, 2, False)), FixedRng(False, 2, False))
    np.testing.assert_array_equal(r180, tile)
    flip2 = augment(augment(tile, FixedRng(True, 0, False)), FixedRng(True, 0, False))
    np.testing.assert_array_equal(flip2, tile)
    np.testing.assert_array_equal(augment(tile, FixedRng(True, 0, False)), tile[:, ::-1])
    np.testing.assert_array_equal(augment(tile, FixedRng(False, 1, False)), np.rot90(tile, 1))


def test_blur_of_constant_tile():
    tile = np.full((6, 6, 3), 0.37, np.float32)
    np.testing.assert_allclose(blur(tile), tile, atol=1e-7)
    np.testing.assert_allclose(augment(tile, FixedRng(False, 0, True)), tile, atol=1e-7)


def test_augment_frequencies_and_range():
    rng = np.random.default_rng(0)
    tile = np.random.default_rng(1).random((8, 8, 3)).astype(np.float32)
    out = np.stack([augment(tile, rng) for _ in range(400)])
    assert out.min() >= 0 and out.max() <= 1
    blurred = sum(not any(np.array_equal(o, np.rot90(t, k)) for t in (tile, tile[:, ::-1]) for k in range(4))
                  for o in out)
    assert 60 <= blurred <= 140  # p = 0.25, n = 400


def test_augment_rejects_non_square():
    with pytest.raises(ValueError):
        augment(np.zeros((4, 6, 3)), np.random.default_rng(0))


# ------------------------------------------------------------------- sampling


def test_sampling_boundaries():
    np.testing.assert_array_equal(sample_bag_tiles(5, 5, np.random.default_rng(0)), np.arange(5))
    np.testing.assert_array_equal(sample_bag_tiles(5, 9, np.random.default_rng(0)), np.arange(5))
    one = sample_bag_tiles(7, 1, np.random.default_rng(0))
    assert one.shape == (1,) and 0 <= one[0] < 7
    idx = sample_bag_tiles(100, 30, np.random.default_rng(0))
    assert len(set(idx.tolist())) == 30
    with pytest.raises(ValueError):
        sample_bag_tiles(5, 0, np.random.default_rng(0))


def test_sampling_is_uniform():
    rng = np.random.default_rng(11)
    counts = np.bincount([sample_bag_tiles(4, 1, rng)[0] for _ in range(10000)], minlength=4)
    assert np.all(np.abs(counts - 2500) <= 150)


# -------------------------------------------------------------------- datasets


def test_positive_counts_rule():
    assert [positives_for(0.5, n) for n in (80, 10, 10)] == [40, 5, 5]
    assert positives_for(0.03, 10) == 1
    assert positives_for(0.25, 10) == 3  # 2.5 rounds half up


def test_split_arithmetic_and_stratification():
    spec = DatasetSpec.from_total(100)
    assert (spec.n_train, spec.n_val, spec.n_test) == (80, 10, 10)
    plan = plan_dataset(spec, seed=0)
    pos = {s: sum(p["labels"][0] for p in plan if p["split"] == s) for s in ("train", "val", "test")}
    assert pos == {"train": 40, "val": 5, "test": 5}
    for s in ("train", "val", "test"):
        items = [p for p in plan if p["split"] == s]
        for lab in (0, 1):
            grp = [p for p in items if p["labels"][0] == lab]
            two = sum(p["magnification"] == 2 for p in grp)
            assert two == math.floor(0.3 * len(grp) + 0.5)


def test_multilabel_prevalence_audit():
    spec = DatasetSpec.multilabel(n_train=200, n_val=25, n_test=25)
    plan = plan_dataset(spec, seed=2)
    for s, n in (("train", 200), ("val", 25), ("test", 25)):
        lab = np.array([p["labels"] for p in plan if p["split"] == s])
        assert lab.shape == (n, 4)
        assert np.all(np.abs(lab.sum(axis=0) - np.array(spec.prevalences) * n) <= 1)


def test_split_too_small_rejected():
    with pytest.raises(DataError, match="too small"):
        plan_dataset(DatasetSpec(n_train=10, n_val=1, n_test=2), seed=0)


def test_make_dataset_on_disk(tmp_path):
    spec = DatasetSpec(n_train=4, n_val=2, n_test=2, slide=SlideParams(size=128))
    ds = make_dataset(spec, seed=0, out_dir=tmp_path / "d")
    doc = json.loads((tmp_path / "d" / "manifest.json").read_text())
    rec = doc["bags"][0]
    assert {"bag_id", "split", "labels", "magnification", "path", "K", "tile_size", "C"} <= set(rec)
    again = load_dataset(tmp_path / "d")
    assert [r.bag_id for r in again.records] == [r.bag_id for r in ds.records]
    b = again.split("val")[0]
    assert b.tiles.shape == (b.K, 32, 32, 3) and b.tiles.min() >= 0 and b.tiles.max() <= 1
    assert b.signal.shape == (b.K,)
    make_dataset(spec, seed=0, out_dir=tmp_path / "e")
    assert (tmp_path / "d" / "manifest.json").read_bytes() == (tmp_path / "e" / "manifest.json").read_bytes()
    assert (tmp_path / "d" / rec["path"]).read_bytes() == (tmp_path / "e" / rec["path"]).read_bytes()
    with pytest.raises(FileExistsError):
        make_dataset(spec, seed=0, out_dir=tmp_path / "d")
    with pytest.raises(DataError):
        load_dataset(tmp_path / "missing")


def stripe_response(tiles, texture):
    """Magnitude of the tile's projection on the texture's sinusoid (a matched filter)."""
    t = tiles.shape[1]
    yy, xx = np.mgrid[0:t, 0:t]
    th = math.radians(texture.angle)
    arg = 2 * math.pi * (xx * math.cos(th) + yy * math.sin(th)) / texture.period
    gray = tiles.mean(axis=-1)
    gray = gray - gray.mean(axis=(1, 2), keepdims=True)
    re = (gray * np.cos(arg)).mean(axis=(1, 2))
    im = (gray * np.sin(arg)).mean(axis=(1, 2))
    return np.hypot(re, im)


@pytest.mark.parametrize("task", ["binary", "multilabel"])
def test_brute_force_detector_separates_bags(task):
    if task == "binary":
        spec = DatasetSpec(n_train=10, n_val=5, n_test=5, slide=SMALL)
    else:
        spec = DatasetSpec.multilabel(n_train=30, n_val=10, n_test=10, prevalences=(0.3, 0.3, 0.2, 0.2), slide=SMALL)
    ds = make_dataset(spec, seed=3)
    bags = [ds.bag(i) for i in range(len(ds.records))]
    labels = np.array([b.label for b in bags])
    for j, tex in enumerate(DEFAULT_TEXTURES[task]):
        scores = [stripe_response(np.asarray(b.tiles), tex).max() for b in bags]
        assert roc_auc(scores, labels[:, j]) == 1.0
        for b in bags:
            r = stripe_response(np.asarray(b.tiles), tex)
            if b.label[j]:
                assert r[b.signal == j].min() > r[b.signal != j].max()
