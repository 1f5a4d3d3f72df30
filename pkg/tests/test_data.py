import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from qapseg.data import (FN_COLOR, FP_COLOR, PHANTOM_LEVELS, TP_COLOR, DatasetManifest, ManifestEntry, Sample,
                         color_counts, load_pgm, load_pgm_image, load_ppm, normalize_resize, overlay_panels,
                         parse_pgm, render_overlay, resize_mask, save_pgm, split, synth_phantoms, write_dataset)
from qapseg.errors import ConfigurationError, DimensionError, FormatError
from qapseg.metrics import ConfusionMatrix


class TestPgm:
    def test_round_trip_8bit(self, tmp_path):
        grid = np.random.default_rng(0).integers(0, 256, (7, 5)).astype(np.uint8)
        save_pgm(grid, tmp_path / "a.pgm")
        assert np.array_equal(load_pgm(tmp_path / "a.pgm"), grid)

    def test_round_trip_16bit(self, tmp_path):
        grid = np.random.default_rng(1).integers(0, 65536, (4, 6))
        save_pgm(grid, tmp_path / "b.pgm", maxval=65535)
        assert np.array_equal(load_pgm(tmp_path / "b.pgm"), grid)
        img = load_pgm_image(tmp_path / "b.pgm")
        assert img.min() >= 0 and img.max() <= 1

    def test_known_bytes(self):
        grid, maxval = parse_pgm(b"P5 2 2 255\n" + bytes([0, 128, 255, 64]))
        assert grid.tolist() == [[0, 128], [255, 64]] and maxval == 255

    def test_comment_in_header(self):
        grid, _ = parse_pgm(b"P5\n# made by hand\n1 1\n255\n" + bytes([9]))
        assert grid.tolist() == [[9]]

    def test_truncated(self):
        with pytest.raises(FormatError, match="expected 4 bytes, got 3"):
            parse_pgm(b"P5 2 2 255\n" + bytes([0, 1, 2]))

    @pytest.mark.parametrize("blob,where", [(b"P6 1 1 255\n\x00", "byte 0"), (b"P5 x 1 255\n\x00", "byte 3"),
                                            (b"P5 1 1", "byte")])
    def test_bad_header(self, blob, where):
        with pytest.raises(FormatError, match=where):
            parse_pgm(blob)


class TestNormalize:
    def test_already_normalised_unchanged(self):
        img = np.random.default_rng(0).random((256, 256)).astype(np.float32)
        img.flat[0], img.flat[1] = 0.0, 1.0
        s = Sample(img, np.zeros((256, 256), int), "x")
        out = normalize_resize(s)
        assert np.max(np.abs(out.image - img)) < 1e-6
        again = normalize_resize(out)
        assert np.max(np.abs(again.image - out.image)) < 1e-6 and np.array_equal(again.mask, out.mask)

    def test_minmax_bounds_and_size(self):
        rng = np.random.default_rng(1)
        s = Sample(rng.random((40, 50)) * 300 - 20, rng.integers(0, 4, (40, 50)), "y")
        out = normalize_resize(s, target=64)
        assert out.image.shape == (64, 64) and out.mask.shape == (64, 64)
        assert out.image.min() == 0.0 and out.image.max() == 1.0

    def test_constant_image_warns(self):
        s = Sample(np.full((20, 20), 3.0), np.zeros((20, 20), int))
        with pytest.warns(RuntimeWarning, match="constant"):
            out = normalize_resize(s, target=32)
        assert np.all(out.image == 0)

    def test_too_small(self):
        with pytest.raises(DimensionError):
            normalize_resize(Sample(np.zeros((8, 8)), np.zeros((8, 8), int)))

    def test_mask_alphabet_preserved(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            h, w = rng.integers(16, 60, 2)
            mask = rng.integers(0, 4, (h, w))
            out = resize_mask(mask, int(rng.integers(8, 80)), int(rng.integers(8, 80)))
            assert set(np.unique(out)) <= set(np.unique(mask))


def manifest_of(n, scans=None):
    return DatasetManifest([ManifestEntry(f"s{i}", "", "", scan=None if scans is None else scans[i])
                            for i in range(n)])


class TestSplit:
    def test_twenty(self):
        out = split(manifest_of(20), seed=3)
        counts = {k: len(out.ids(k)) for k in ("train", "val", "test")}
        assert counts == {"train": 16, "val": 2, "test": 2}

    def test_deterministic(self):
        a = split(manifest_of(30), seed=5)
        b = split(manifest_of(30), seed=5)
        assert [e.split for e in a.samples] == [e.split for e in b.samples]

    @settings(max_examples=30)
    @given(st.integers(10, 100), st.integers(0, 1000))
    def test_partition(self, n, seed):
        out = split(manifest_of(n), seed)
        parts = [set(out.ids(k)) for k in ("train", "val", "test")]
        assert set.union(*parts) == {f"s{i}" for i in range(n)}
        assert sum(len(p) for p in parts) == n
        assert len(parts[1]) == len(parts[2]) == int(np.ceil(0.1 * n))

    def test_scans_stay_together(self):
        scans = [f"scan{i // 3}" for i in range(36)]
        out = split(manifest_of(36, scans), seed=0)
        by_scan = {}
        for e in out.samples:
            by_scan.setdefault(e.scan, set()).add(e.split)
        assert all(len(v) == 1 for v in by_scan.values())

    def test_too_few(self):
        with pytest.raises(ConfigurationError):
            split(manifest_of(9), 0)


class TestPhantoms:
    def test_class_presence(self):
        samples = synth_phantoms(1000, 32, seed=11)
        present = np.array([[np.any(s.mask == c) for c in range(4)] for s in samples])
        assert present[:, 0].all() and present[:, 1].all()
        assert present[:, 2].mean() >= 0.8 and present[:, 3].mean() >= 0.8

    def test_deterministic(self):
        a = synth_phantoms(5, 48, seed=2)
        b = synth_phantoms(5, 48, seed=2)
        assert all(x.image.tobytes() == y.image.tobytes() and np.array_equal(x.mask, y.mask) for x, y in zip(a, b))

    def test_intensity_order(self):
        samples = synth_phantoms(50, 64, seed=4)
        img = np.concatenate([s.image.ravel() for s in samples])
        msk = np.concatenate([s.mask.ravel() for s in samples])
        means = [img[msk == c].mean() for c in range(4)]
        # background < ground glass < lung-other < consolidation
        assert means[0] < means[2] < means[1] < means[3]
        assert PHANTOM_LEVELS[0] < PHANTOM_LEVELS[2] < PHANTOM_LEVELS[1] < PHANTOM_LEVELS[3]

    def test_size_limit(self):
        with pytest.raises(ConfigurationError):
            synth_phantoms(1, 16)

    def test_write_dataset(self, tmp_path):
        samples = synth_phantoms(12, 32, seed=0)
        write_dataset(samples, tmp_path, seed=0)
        man = DatasetManifest.load(tmp_path / "manifest.json")
        assert len(man.samples) == 12
        s = man.load_sample(man.samples[0])
        assert np.array_equal(s.mask, samples[0].mask)
        assert np.max(np.abs(s.image - samples[0].image)) < 1e-4

    def test_bad_manifest(self, tmp_path):
        (tmp_path / "m.json").write_text('{"samples": [{"id": "a"}]}')
        with pytest.raises(FormatError, match="lacks"):
            DatasetManifest.load(tmp_path / "m.json")
        (tmp_path / "n.json").write_text('{"samples": [')
        with pytest.raises(FormatError, match="byte"):
            DatasetManifest.load(tmp_path / "n.json")


def colors(rgb, color):
    return int(np.all(rgb == color, axis=-1).sum())


class TestOverlay:
    def test_identical_masks(self, tmp_path):
        m = synth_phantoms(1, 32, seed=1)[0]
        rgb = render_overlay(m.mask, m.mask, tmp_path / "o.ppm", image=m.image)
        assert colors(rgb, FP_COLOR) == 0 and colors(rgb, FN_COLOR) == 0
        assert np.array_equal(load_ppm(tmp_path / "o.ppm"), rgb)

    def test_all_background_prediction(self):
        true = np.zeros((8, 8), int)
        true[2:5, 3:6] = 1
        rgb = overlay_panels(np.zeros_like(true), true, classes=[1])
        green = np.all(rgb == FN_COLOR, axis=-1)
        assert np.array_equal(green, true == 1)

    def test_counts_reconcile_with_confusion(self):
        rng = np.random.default_rng(9)
        pred, true = rng.integers(0, 4, (20, 20)), rng.integers(0, 4, (20, 20))
        image = rng.random((20, 20))
        counts = color_counts(overlay_panels(pred, true, image), 20)
        cm = ConfusionMatrix(4).accumulate(pred, true)
        for c, panel in zip((1, 2, 3), counts):
            assert (panel["tp"], panel["fp"], panel["fn"]) == (cm.tp[c], cm.fp[c], cm.fn[c])

    def test_extent_mismatch(self):
        with pytest.raises(DimensionError):
            overlay_panels(np.zeros((3, 3), int), np.zeros((3, 4), int))
