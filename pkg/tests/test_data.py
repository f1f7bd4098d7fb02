import numpy as np
import pytest

from msafeb.data import (AugmentFlags, DataError, Dataset, augment,
                         bilinear_resize, hflip, load_image_dataset,
                         make_splits, random_crop_resize, read_ppm,
                         synth_dataset, write_ppm)

from oracles import nearest_centroid_purity, orientation_statistic


class TestPpm:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        img = rng.integers(0, 256, (5, 7, 3), dtype=np.uint8)
        path = tmp_path / "img.ppm"
        write_ppm(path, img)
        assert np.array_equal(read_ppm(path), img)

    def test_header_layout(self, tmp_path):
        path = tmp_path / "img.ppm"
        write_ppm(path, np.zeros((2, 3, 3), dtype=np.uint8))
        assert path.read_bytes().startswith(b"P6\n3 2\n255\n")

    def test_bad_magic_names_file(self, tmp_path):
        path = tmp_path / "gray.ppm"
        path.write_bytes(b"P5\n2 2\n255\n" + bytes(4))
        with pytest.raises(DataError, match="gray.ppm"):
            read_ppm(path)

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "short.ppm"
        path.write_bytes(b"P6\n2 2\n255\n" + bytes(11))
        with pytest.raises(DataError, match="expected 12"):
            read_ppm(path)


class TestLoadDirectory:
    def test_layout_and_labels(self, tmp_path):
        for name, count in (("a", 2), ("b", 3)):
            (tmp_path / name).mkdir()
            for i in range(count):
                write_ppm(tmp_path / name / f"{i}.ppm",
                          np.full((4, 4, 3), 10 * i, dtype=np.uint8))
        ds = load_image_dataset(tmp_path, (4, 4))
        assert len(ds) == 5
        assert ds.labels.tolist() == [0, 0, 1, 1, 1]
        assert ds.class_names == ["a", "b"]

    def test_resize_constant_stays_constant(self, tmp_path):
        (tmp_path / "a").mkdir()
        (tmp_path / "b").mkdir()
        write_ppm(tmp_path / "a" / "0.ppm", np.full((6, 6, 3), 77, dtype=np.uint8))
        write_ppm(tmp_path / "b" / "0.ppm", np.full((3, 9, 3), 20, dtype=np.uint8))
        ds = load_image_dataset(tmp_path, (4, 4))
        assert (ds.images[0] == 77).all()
        assert (ds.images[1] == 20).all()

    def test_undecodable_file_names_path(self, tmp_path):
        (tmp_path / "a").mkdir()
        (tmp_path / "b").mkdir()
        write_ppm(tmp_path / "a" / "0.ppm", np.zeros((2, 2, 3), dtype=np.uint8))
        (tmp_path / "b" / "junk.ppm").write_bytes(b"not a ppm")
        with pytest.raises(DataError, match="junk.ppm"):
            load_image_dataset(tmp_path, (2, 2))

    def test_empty_class_dir(self, tmp_path):
        (tmp_path / "a").mkdir()
        (tmp_path / "b").mkdir()
        write_ppm(tmp_path / "a" / "0.ppm", np.zeros((2, 2, 3), dtype=np.uint8))
        with pytest.raises(DataError, match="'b' is empty"):
            load_image_dataset(tmp_path, (2, 2))

    def test_single_class_rejected(self, tmp_path):
        (tmp_path / "only").mkdir()
        write_ppm(tmp_path / "only" / "0.ppm", np.zeros((2, 2, 3), dtype=np.uint8))
        with pytest.raises(DataError, match=">= 2 class"):
            load_image_dataset(tmp_path, (2, 2))


class TestSynthetic:
    def test_counts_and_boxes(self):
        ds = synth_dataset(4, 10, (32, 32), seed=7)
        assert len(ds) == 40
        assert [int((ds.labels == k).sum()) for k in range(4)] == [10] * 4
        assert len(ds.patch_boxes) == 40
        for y0, x0, y1, x1 in ds.patch_boxes:
            area = (y1 - y0) * (x1 - x0)
            assert 0.2 <= area / (32 * 32) <= 0.55

    def test_seed_determinism(self):
        a = synth_dataset(3, 5, (16, 16), seed=11)
        b = synth_dataset(3, 5, (16, 16), seed=11)
        assert np.array_equal(a.images, b.images)
        assert a.patch_boxes == b.patch_boxes

    def test_orientation_statistic_separates_classes(self):
        # learnability oracle: gradient-orientation nearest-centroid purity
        ds = synth_dataset(4, 50, (64, 64), seed=7)
        stats = np.stack([orientation_statistic(img) for img in ds.images])
        assert nearest_centroid_purity(stats, ds.labels, 4) >= 0.90


class TestSplits:
    def test_worked_stratification(self):
        images = np.zeros((100, 2, 2, 3), dtype=np.uint8)
        labels = np.array([0] * 50 + [1] * 50, dtype=np.int64)
        ds = Dataset(images, labels, ["a", "b"], source="synthetic")
        splits = make_splits(ds, 0.2, 3, seed=0)
        for s in splits:
            assert len(s.train_indices) == 20
            assert len(s.test_indices) == 80
            assert (ds.labels[s.train_indices] == 0).sum() == 10
            assert (ds.labels[s.train_indices] == 1).sum() == 10

    def test_five_splits_distinct(self):
        ds = synth_dataset(2, 30, (8, 8), seed=3)
        splits = make_splits(ds, 0.5, 5, seed=1)
        seen = {tuple(s.train_indices.tolist()) for s in splits}
        assert len(seen) == 5

    def test_union_disjoint_invariants(self):
        rng = np.random.default_rng(4)
        for trial in range(50):
            n_classes = int(rng.integers(2, 5))
            counts = rng.integers(2, 12, n_classes)
            labels = np.concatenate([np.full(c, k, dtype=np.int64)
                                     for k, c in enumerate(counts)])
            images = np.zeros((len(labels), 2, 2, 3), dtype=np.uint8)
            ds = Dataset(images, labels, [f"c{k}" for k in range(n_classes)],
                         source="synthetic")
            ratio = float(rng.uniform(0.15, 0.85))
            for s in make_splits(ds, ratio, 2, seed=trial):
                train = set(s.train_indices.tolist())
                test = set(s.test_indices.tolist())
                assert train | test == set(range(len(labels)))
                assert not train & test
                for k, c in enumerate(counts):
                    got = (labels[s.train_indices] == k).sum()
                    assert abs(got - ratio * c) <= 1

    def test_tiny_class_rejected(self):
        images = np.zeros((3, 2, 2, 3), dtype=np.uint8)
        labels = np.array([0, 0, 1], dtype=np.int64)
        ds = Dataset(images, labels, ["a", "b"], source="synthetic")
        with pytest.raises(DataError, match="'b'"):
            make_splits(ds, 0.5, 1, seed=0)


class TestAugment:
    def test_disabled_is_identity(self):
        rng = np.random.default_rng(5)
        img = rng.integers(0, 256, (8, 8, 3), dtype=np.uint8)
        out = augment(img, np.random.default_rng(0), AugmentFlags(enabled=False))
        assert out is img

    def test_double_hflip_bit_exact(self):
        rng = np.random.default_rng(6)
        img = rng.integers(0, 256, (8, 10, 3), dtype=np.uint8)
        assert np.array_equal(hflip(hflip(img)), img)

    def test_crop_resize_preserves_vertical_monotonicity(self):
        ramp = np.repeat(np.linspace(0, 255, 32)[:, None], 24, axis=1)
        img = np.repeat(ramp[:, :, None], 3, axis=2).astype(np.uint8)
        out = random_crop_resize(img, np.random.default_rng(7), 0.875)
        col = out[:, 5, 0].astype(np.int64)
        assert (np.diff(col) >= 0).all()

    def test_dimensions_preserved(self):
        rng = np.random.default_rng(8)
        img = rng.integers(0, 256, (16, 12, 3), dtype=np.uint8)
        out = augment(img, np.random.default_rng(9), AugmentFlags())
        assert out.shape == img.shape and out.dtype == np.uint8

    def test_stream_determinism(self):
        rng = np.random.default_rng(10)
        img = rng.integers(0, 256, (16, 16, 3), dtype=np.uint8)
        a = augment(img, np.random.default_rng(42), AugmentFlags())
        b = augment(img, np.random.default_rng(42), AugmentFlags())
        assert np.array_equal(a, b)


class TestBilinear:
    def test_constant_image(self):
        out = bilinear_resize(np.full((5, 5), 9.0, dtype=np.float32), 8, 3)
        assert np.allclose(out, 9.0)

    def test_identity_when_same_size(self):
        rng = np.random.default_rng(11)
        img = rng.random((6, 6)).astype(np.float32)
        assert np.allclose(bilinear_resize(img, 6, 6), img, atol=1e-6)
