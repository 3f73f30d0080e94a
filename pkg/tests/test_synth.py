import numpy as np
import pytest

from keysel.errors import BadConfig, BadManifest, MissingFile, PlacementFailure
from keysel.losses import pixelwise_correlation_map
from keysel.synth import (
    SceneGeometry,
    SynthConfig,
    class_signature,
    disc_mask,
    format_manifest,
    gen_dataset,
    gen_scene,
    load_dataset,
    parse_manifest,
    plan_splits,
    config_from_header,
)
from keysel.tensor import Rng

TINY = SynthConfig(SceneGeometry(size=16, num_classes=3, radius_min=2.0, radius_max=3.0), 5, 2, 0.2)


def test_noise_free_background_is_exactly_half():
    geom = SceneGeometry(noise_amp=0.0, pixel_noise=0.0)
    s = gen_scene(1, Rng(0), geom)
    assert np.all(s.x_rgb[:, ~s.mask] == 0.5)
    assert np.all(s.x_d[:, ~s.mask] == 0.5)
    assert not np.any(s.x_rgb[:, s.mask] == 0.5)


def test_scene_ranges_and_determinism():
    a = gen_scene(2, Rng(3, 9))
    b = gen_scene(2, Rng(3, 9))
    assert np.array_equal(a.x_rgb, b.x_rgb) and np.array_equal(a.x_d, b.x_d)
    assert a.x_rgb.shape == (3, 32, 32)
    assert 0.0 <= a.x_rgb.min() and a.x_rgb.max() <= 1.0
    assert len(a.object_centers) == len(class_signature(2, 6)) == 3
    c = gen_scene(2, Rng(3, 10))
    assert not np.array_equal(a.x_rgb, c.x_rgb)


def test_objects_are_aligned_and_separated():
    quiet = SceneGeometry(noise_amp=0.0, pixel_noise=0.0)
    for i in range(30):
        s = gen_scene(i % 6, Rng(1, i), quiet)
        drawn_rgb = np.any(s.x_rgb != 0.5, axis=0)
        drawn_d = np.any(s.x_d != 0.5, axis=0)
        assert np.array_equal(drawn_rgb, s.mask) and np.array_equal(drawn_d, s.mask)
        s = gen_scene(i % 6, Rng(1, i), SceneGeometry(distractors=1))
        pts = np.array(s.object_centers)
        for j in range(len(pts)):
            for k in range(j):
                assert np.hypot(*(pts[j] - pts[k])) >= 2 * 3.0 + 1


@pytest.mark.parametrize("distractors", [0, 1])
def test_objects_raise_cross_modal_correlation(distractors):
    gaps = []
    for i in range(100):
        s = gen_scene(i % 6, Rng(11, i), SceneGeometry(distractors=distractors))
        c = pixelwise_correlation_map(s.x_rgb, s.x_d)
        gaps.append(c[s.mask].mean() - c[~s.mask].mean())
    assert np.mean(gaps) >= 0.3


def test_class_signatures_are_distinct():
    sigs = [frozenset(class_signature(c, 6)) for c in range(6)]
    assert len(set(sigs)) == 6


def test_bad_geometry_and_placement_failure():
    with pytest.raises(BadConfig):
        SceneGeometry(radius_min=4, radius_max=3)
    with pytest.raises(BadConfig):
        gen_scene(7, Rng(0))
    crowded = SceneGeometry(size=12, radius_min=5.0, radius_max=5.0)
    with pytest.raises(PlacementFailure):
        gen_scene(2, Rng(0), crowded)


def test_split_arithmetic():
    cfg = SynthConfig(SceneGeometry(num_classes=10), train_per_class=30, test_per_class=4, val_fraction=0.2)
    plan = plan_splits(cfg, 0)
    for c in range(10):
        assert sum(1 for s, y in plan if s == "val" and y == c) == 6
        assert sum(1 for s, y in plan if s == "train" and y == c) == 24
        assert sum(1 for s, y in plan if s == "test" and y == c) == 4
    assert plan_splits(cfg, 0) == plan
    assert plan_splits(cfg, 1) != plan


def test_default_split_sizes():
    plan = plan_splits(SynthConfig(), 7)
    counts = {s: sum(1 for p, _ in plan if p == s) for s in ("train", "val", "test")}
    assert counts == {"train": 240, "val": 60, "test": 120}


def test_dataset_roundtrip_and_regeneration(tmp_path):
    m1 = gen_dataset(TINY, 4, tmp_path / "a")
    m2 = gen_dataset(TINY, 4, tmp_path / "b")
    assert (tmp_path / "a/manifest.txt").read_bytes() == (tmp_path / "b/manifest.txt").read_bytes()
    for r in m1.samples:
        assert (tmp_path / "a" / r["rgb"]).read_bytes() == (tmp_path / "b" / r["rgb"]).read_bytes()
    assert m1.counts() == {"train": 12, "val": 3, "test": 6}
    text = format_manifest(m1)
    assert format_manifest(parse_manifest(text)) == text
    cfg, seed = config_from_header(parse_manifest(text).header)
    assert cfg == TINY and seed == 4
    ds = load_dataset(tmp_path / "a/manifest.txt")
    assert ds["train"].x_rgb.shape == (12, 3, 16, 16)
    assert sorted(ds["test"].labels.tolist()) == [0, 0, 1, 1, 2, 2]
    ex = ds["val"].example(0)
    assert ex.mask.shape == (16, 16) and ex.mask[ex.object_centers[0]]
    # regeneration from the recorded header reproduces the sample bytes
    gen_dataset(cfg, seed, tmp_path / "c")
    assert (tmp_path / "c/manifest.txt").read_bytes() == (tmp_path / "a/manifest.txt").read_bytes()
    assert m2.path == tmp_path / "b/manifest.txt"


def test_splits_are_disjoint(tmp_path):
    m = gen_dataset(TINY, 0, tmp_path)
    files = [r["rgb"] for r in m.samples]
    assert len(files) == len(set(files))
    ds = load_dataset(m.path)
    flat = {s: ds[s].x_rgb.reshape(len(ds[s]), -1) for s in ("train", "val", "test")}
    for a, b in (("train", "val"), ("train", "test"), ("val", "test")):
        for row in flat[a]:
            assert not np.any(np.all(flat[b] == row, axis=1))


def test_batches_shuffle_deterministically(tmp_path):
    ds = load_dataset(gen_dataset(TINY, 0, tmp_path).path)
    tr = ds["train"]
    plain = np.concatenate(list(tr.batches(5)))
    assert plain.tolist() == list(range(12))
    assert [len(b) for b in tr.batches(5)] == [5, 5, 2]
    s1 = np.concatenate(list(tr.batches(5, Rng(1))))
    s2 = np.concatenate(list(tr.batches(5, Rng(1))))
    assert np.array_equal(s1, s2) and sorted(s1.tolist()) == list(range(12))
    assert not np.array_equal(s1, np.concatenate(list(tr.batches(5, Rng(2)))))


def test_manifest_errors(tmp_path):
    with pytest.raises(MissingFile):
        load_dataset(tmp_path / "nope.txt")
    with pytest.raises(BadManifest):
        parse_manifest("version=1\n")
    good = format_manifest(gen_dataset(TINY, 0, tmp_path))
    with pytest.raises(BadManifest):
        parse_manifest(good + "train\tx\t1,1\ta\tb\n")
    with pytest.raises(BadManifest):
        parse_manifest(good.replace("train\t0", "train\t9", 1))
    (tmp_path / "samples/00000_rgb.dten").unlink()
    with pytest.raises(MissingFile):
        load_dataset(tmp_path / "manifest.txt")


def test_disc_mask():
    m = disc_mask([(2, 2)], 1.0, 5)
    assert m.sum() == 5 and m[2, 2] and m[1, 2] and not m[1, 1]
