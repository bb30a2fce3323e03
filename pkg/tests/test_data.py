"""Synthetic shapes, directory-tree loading and split assignment."""
import logging

import numpy as np
import pytest

from cocoreco.data import DatasetIndex, load_dataset, split_dataset, standardize, synth_dataset, write_dataset
from cocoreco.imageio import encode_pnm


class TestSynth:
    def test_balanced_counts(self):
        ds = synth_dataset(30, image_size=32)
        assert len(ds) == 90
        assert np.bincount(ds.labels).tolist() == [30, 30, 30]
        assert ds.images.shape == (90, 3, 32, 32)

    def test_seeded(self):
        a, b = synth_dataset(5, image_size=32, seed=4), synth_dataset(5, image_size=32, seed=4)
        np.testing.assert_array_equal(a.images, b.images)
        assert not np.array_equal(a.images, synth_dataset(5, image_size=32, seed=5).images)

    def test_pixel_range(self):
        imgs = synth_dataset(10, image_size=32).images
        assert imgs.min() >= 0.0 and imgs.max() <= 1.0

    def test_splits(self):
        ds = synth_dataset(0, image_size=32, splits={"train": 4, "val": 2, "test": 1})
        assert [len(ds.indices(s)) for s in ("train", "val", "test")] == [12, 6, 3]
        assert not ds.ids("train") & ds.ids("test")

    def test_standardize(self):
        np.testing.assert_array_equal(standardize(np.array([0.0, 0.5, 1.0])), [-1.0, 0.0, 1.0])


class TestLoad:
    def test_class_ids_sorted(self, tmp_path):
        for name in ("b", "a"):
            (tmp_path / name).mkdir()
            (tmp_path / name / "0.ppm").write_bytes(encode_pnm(np.zeros((4, 4, 3), dtype=np.uint8)))
        ds = load_dataset(tmp_path, image_size=4)
        assert ds.class_names == ["a", "b"]
        assert ds.labels.tolist() == [0, 1]

    def test_resizes(self, tmp_path):
        (tmp_path / "a").mkdir()
        (tmp_path / "a" / "0.ppm").write_bytes(encode_pnm(np.full((8, 6, 3), 255, dtype=np.uint8)))
        ds = load_dataset(tmp_path, image_size=16)
        assert ds.images.shape == (1, 3, 16, 16)
        np.testing.assert_allclose(ds.images, 1.0)

    def test_round_trip_through_tree(self, tmp_path):
        ds = synth_dataset(0, image_size=16, seed=2, splits={"train": 2, "val": 1})
        write_dataset(ds, tmp_path)
        back = load_dataset(tmp_path, image_size=16)
        assert sorted(back.class_names) == back.class_names
        assert len(back) == len(ds) and sorted(set(back.split)) == ["train", "val"]
        # stored as bytes, so pixels agree to quantisation
        order = {sid: i for i, (sid, _) in enumerate(ds.samples)}
        for j, (path, k) in enumerate(back.samples):
            split, cls, stem = path.replace("\\", "/").split("/")
            i = order[f"{split}/{cls}/{stem[:-4]}"]
            assert back.class_names[k] == ds.class_names[ds.samples[i][1]]
            np.testing.assert_allclose(back.images[j], ds.images[i], atol=0.5 / 255 + 1e-6)

    def test_missing_root(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_dataset(tmp_path / "nope")


class TestSplit:
    def _index(self, n_per_class, classes=1):
        samples = [(f"s{k}_{i}", k) for k in range(classes) for i in range(n_per_class)]
        return DatasetIndex(samples, [f"c{k}" for k in range(classes)], ["val"] * len(samples))

    def test_sixty_thirty_ten(self):
        out = split_dataset(self._index(100))
        assert [out.split.count(t) for t in ("val", "test", "discard")] == [60, 30, 10]

    def test_disjoint_and_seeded(self):
        idx = self._index(50, classes=2)
        a, b = split_dataset(idx, seed=3), split_dataset(idx, seed=3)
        assert a.split == b.split
        assert not a.ids("val") & a.ids("test")

    def test_train_untouched(self):
        idx = self._index(10)
        idx.split[0] = "train"
        assert split_dataset(idx).split[0] == "train"

    def test_small_class_warns(self, caplog):
        with caplog.at_level(logging.WARNING):
            split_dataset(self._index(3))
        assert "only 3 val samples" in caplog.text
