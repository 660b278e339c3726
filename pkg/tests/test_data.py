"""Tests for synthetic data generation, splitting, and dataset IO."""

import numpy as np
import pytest
from PIL import Image

from mempure.data import (
    DatasetManifest,
    load_dataset,
    load_npz,
    make_vein_dataset,
    save_npz,
    split_per_class,
)


class TestMakeVeinDataset:
    def test_shapes_dtypes_and_range(self):
        images, labels = make_vein_dataset(4, 3, image_size=32, seed=0)
        assert images.shape == (12, 32, 32, 1)
        assert images.dtype == np.float32
        assert labels.shape == (12,)
        assert labels.dtype == np.int64
        assert images.min() >= 0.0 and images.max() <= 1.0
        assert np.isfinite(images).all()

    def test_labels_are_class_major(self):
        _, labels = make_vein_dataset(3, 4, image_size=32, seed=1)
        assert np.array_equal(labels, np.repeat(np.arange(3), 4))

    def test_same_seed_reproduces(self):
        a, _ = make_vein_dataset(3, 2, image_size=32, seed=7)
        b, _ = make_vein_dataset(3, 2, image_size=32, seed=7)
        assert np.array_equal(a, b)

    def test_different_seed_differs(self):
        a, _ = make_vein_dataset(3, 2, image_size=32, seed=7)
        b, _ = make_vein_dataset(3, 2, image_size=32, seed=8)
        assert not np.array_equal(a, b)

    def test_classes_independent_of_class_count(self):
        # sample (seed, cls, variant) must not depend on how many classes follow
        small, _ = make_vein_dataset(2, 3, image_size=32, seed=3)
        large, _ = make_vein_dataset(4, 3, image_size=32, seed=3)
        assert np.array_equal(small, large[: len(small)])

    def test_variants_independent_of_per_class_count(self):
        small, _ = make_vein_dataset(2, 2, image_size=32, seed=3)
        large, _ = make_vein_dataset(2, 5, image_size=32, seed=3)
        assert np.array_equal(small[:2], large[:2])
        assert np.array_equal(small[2:4], large[5:7])

    def test_variants_within_class_differ(self):
        images, _ = make_vein_dataset(1, 3, image_size=32, seed=0)
        assert not np.array_equal(images[0], images[1])
        assert not np.array_equal(images[1], images[2])

    def test_intra_class_distance_below_inter_class(self):
        # identities must be separable: same-class pairs closer than cross-class
        images, labels = make_vein_dataset(6, 4, image_size=32, seed=5)
        rng = np.random.default_rng(0)
        intra, inter = [], []
        while len(intra) < 20 or len(inter) < 20:
            i, j = rng.integers(0, len(images), size=2)
            if i == j:
                continue
            dist = float(np.abs(images[i] - images[j]).mean())
            (intra if labels[i] == labels[j] else inter).append(dist)
        assert np.mean(intra) < np.mean(inter)

    @pytest.mark.parametrize("n_classes,n_per_class", [(0, 3), (3, 0)])
    def test_rejects_empty_dimensions(self, n_classes, n_per_class):
        with pytest.raises(ValueError):
            make_vein_dataset(n_classes, n_per_class, image_size=32)

    @pytest.mark.parametrize("size", [8, 20, 63])
    def test_rejects_bad_image_size(self, size):
        with pytest.raises(ValueError, match="image_size"):
            make_vein_dataset(2, 2, image_size=size)


class TestSplitPerClass:
    def test_first_k_go_to_train(self):
        images, labels = make_vein_dataset(3, 5, image_size=32, seed=0)
        x_tr, y_tr, x_te, y_te = split_per_class(images, labels, 2)
        assert x_tr.shape[0] == 6 and x_te.shape[0] == 9
        assert np.array_equal(y_tr, np.repeat(np.arange(3), 2))
        assert np.array_equal(y_te, np.repeat(np.arange(3), 3))
        # class-major input means train rows are the first 2 of each 5-block
        for cls in range(3):
            assert np.array_equal(x_tr[2 * cls], images[5 * cls])
            assert np.array_equal(x_tr[2 * cls + 1], images[5 * cls + 1])
            assert np.array_equal(x_te[3 * cls], images[5 * cls + 2])

    def test_handles_interleaved_labels(self):
        # selection is per-class but row order stays as given
        images = np.arange(6, dtype=np.float32).reshape(6, 1, 1, 1)
        labels = np.array([0, 1, 0, 1, 0, 1])
        x_tr, y_tr, x_te, y_te = split_per_class(images, labels, 2)
        assert np.array_equal(y_tr, [0, 1, 0, 1])
        assert np.array_equal(x_tr.ravel(), [0.0, 1.0, 2.0, 3.0])
        assert np.array_equal(y_te, [0, 1])
        assert np.array_equal(x_te.ravel(), [4.0, 5.0])

    def test_rejects_exhausted_class(self):
        images, labels = make_vein_dataset(2, 3, image_size=32, seed=0)
        with pytest.raises(ValueError, match="class"):
            split_per_class(images, labels, 3)


class TestNpzRoundTrip:
    def test_images_labels_and_meta_survive(self, tmp_path):
        images, labels = make_vein_dataset(2, 2, image_size=32, seed=0)
        meta = {"seed": 0, "note": "round-trip"}
        path = tmp_path / "data.npz"
        save_npz(path, images, labels, meta)
        loaded_images, loaded_labels, loaded_meta = load_npz(path)
        assert np.array_equal(loaded_images, images)
        assert loaded_images.dtype == images.dtype
        assert np.array_equal(loaded_labels, labels)
        assert loaded_meta == meta

    def test_meta_defaults_to_empty_dict(self, tmp_path):
        path = tmp_path / "bare.npz"
        save_npz(path, np.zeros((1, 16, 16, 1), np.float32), np.zeros(1, np.int64))
        _, _, meta = load_npz(path)
        assert meta == {}

    def test_creates_parent_directories(self, tmp_path):
        path = tmp_path / "a" / "b" / "data.npz"
        save_npz(path, np.zeros((1, 16, 16, 1), np.float32), np.zeros(1, np.int64))
        assert path.exists()


def _write_tree(root, class_names, files_per_class, size=32, value_fn=None):
    """Build root/<class>/<file>.png with constant-valued grayscale images."""
    for c, name in enumerate(class_names):
        cls_dir = root / name
        cls_dir.mkdir(parents=True)
        for i in range(files_per_class):
            value = value_fn(c, i) if value_fn else 40 * c + 10 * i
            arr = np.full((size, size), value, dtype=np.uint8)
            Image.fromarray(arr, mode="L").save(cls_dir / f"img_{i:02d}.png")


class TestDirectoryLoader:
    def test_loads_split_and_labels(self, tmp_path):
        _write_tree(tmp_path, ["c0", "c1", "c2"], 4)
        manifest = DatasetManifest(root=str(tmp_path), class_count=3,
                                   images_per_class=4, train_k=2, test_k=2,
                                   image_size=32)
        x_tr, y_tr, x_te, y_te = load_dataset(manifest)
        assert x_tr.shape == (6, 32, 32, 1) and x_te.shape == (6, 32, 32, 1)
        assert x_tr.dtype == np.float32
        assert np.array_equal(y_tr, np.repeat(np.arange(3), 2))
        assert np.array_equal(y_te, np.repeat(np.arange(3), 2))
        # constant image of byte v loads as v/255; files are sorted by name
        for c in range(3):
            for i in range(2):
                expected = (40 * c + 10 * i) / 255.0
                assert x_tr[2 * c + i].ravel() == pytest.approx(expected, abs=1e-6)
                expected = (40 * c + 10 * (i + 2)) / 255.0
                assert x_te[2 * c + i].ravel() == pytest.approx(expected, abs=1e-6)

    def test_labels_follow_sorted_directory_order(self, tmp_path):
        _write_tree(tmp_path, ["zebra", "apple"], 2)
        manifest = DatasetManifest(root=str(tmp_path), class_count=2,
                                   images_per_class=2, train_k=1, test_k=1,
                                   image_size=32)
        x_tr, y_tr, _, _ = load_dataset(manifest)
        # "apple" sorts first so it takes label 0; it was written with value 40
        assert np.array_equal(y_tr, [0, 1])
        assert x_tr[0].ravel()[0] == pytest.approx(40 / 255.0, abs=1e-6)
        assert x_tr[1].ravel()[0] == pytest.approx(0.0, abs=1e-6)

    def test_resizes_to_manifest_size(self, tmp_path):
        _write_tree(tmp_path, ["c0"], 2, size=48)
        manifest = DatasetManifest(root=str(tmp_path), class_count=1,
                                   images_per_class=2, train_k=1, test_k=1,
                                   image_size=32)
        x_tr, _, x_te, _ = load_dataset(manifest)
        assert x_tr.shape == (1, 32, 32, 1) and x_te.shape == (1, 32, 32, 1)

    def test_rgb_input_collapses_to_one_channel(self, tmp_path):
        cls_dir = tmp_path / "c0"
        cls_dir.mkdir()
        rgb = np.zeros((32, 32, 3), dtype=np.uint8)
        rgb[..., 0], rgb[..., 1], rgb[..., 2] = 200, 100, 50
        for name in ("a.png", "b.png"):
            Image.fromarray(rgb, mode="RGB").save(cls_dir / name)
        manifest = DatasetManifest(root=str(tmp_path), class_count=1,
                                   images_per_class=2, train_k=1, test_k=1,
                                   image_size=32)
        x_tr, _, _, _ = load_dataset(manifest)
        assert x_tr.shape == (1, 32, 32, 1)
        with Image.open(cls_dir / "a.png") as img:
            expected = np.asarray(img.convert("L"), dtype=np.float32)[0, 0] / 255.0
        assert x_tr[0, 0, 0, 0] == pytest.approx(expected, abs=1e-6)

    def test_train_k_zero_gives_empty_gallery(self, tmp_path):
        _write_tree(tmp_path, ["c0", "c1"], 2)
        manifest = DatasetManifest(root=str(tmp_path), class_count=2,
                                   images_per_class=2, train_k=0, test_k=2,
                                   image_size=32)
        x_tr, y_tr, x_te, _ = load_dataset(manifest)
        assert x_tr.shape == (0, 32, 32, 1)
        assert y_tr.shape == (0,)
        assert x_te.shape == (4, 32, 32, 1)

    def test_deterministic_across_calls(self, tmp_path):
        _write_tree(tmp_path, ["c0", "c1"], 3)
        manifest = DatasetManifest(root=str(tmp_path), class_count=2,
                                   images_per_class=3, train_k=1, test_k=2,
                                   image_size=32)
        first = load_dataset(manifest)
        second = load_dataset(manifest)
        for a, b in zip(first, second):
            assert np.array_equal(a, b)

    def test_wrong_class_count_raises(self, tmp_path):
        _write_tree(tmp_path, ["c0", "c1"], 2)
        manifest = DatasetManifest(root=str(tmp_path), class_count=3,
                                   images_per_class=2, train_k=1, test_k=1,
                                   image_size=32)
        with pytest.raises(ValueError, match="class directories"):
            load_dataset(manifest)

    def test_ragged_classes_lists_every_offender(self, tmp_path):
        _write_tree(tmp_path, ["c0", "c1", "c2"], 3)
        (tmp_path / "c0" / "img_02.png").unlink()
        (tmp_path / "c2" / "img_02.png").unlink()
        (tmp_path / "c2" / "img_01.png").unlink()
        manifest = DatasetManifest(root=str(tmp_path), class_count=3,
                                   images_per_class=3, train_k=1, test_k=1,
                                   image_size=32)
        with pytest.raises(ValueError) as excinfo:
            load_dataset(manifest)
        message = str(excinfo.value)
        assert "c0" in message and "c2" in message and "c1:" not in message

    def test_unreadable_files_list_every_offender(self, tmp_path):
        _write_tree(tmp_path, ["c0", "c1"], 2)
        (tmp_path / "c0" / "img_00.png").write_bytes(b"not a png")
        (tmp_path / "c1" / "img_01.png").write_bytes(b"junk")
        manifest = DatasetManifest(root=str(tmp_path), class_count=2,
                                   images_per_class=2, train_k=1, test_k=1,
                                   image_size=32)
        with pytest.raises(ValueError) as excinfo:
            load_dataset(manifest)
        message = str(excinfo.value)
        assert "img_00.png" in message and "img_01.png" in message

    def test_extra_files_beyond_split_are_ignored(self, tmp_path):
        _write_tree(tmp_path, ["c0"], 4)
        # corrupt a file the split never touches: train_k+test_k = 2 of 4
        (tmp_path / "c0" / "img_03.png").write_bytes(b"junk")
        manifest = DatasetManifest(root=str(tmp_path), class_count=1,
                                   images_per_class=4, train_k=1, test_k=1,
                                   image_size=32)
        x_tr, _, x_te, _ = load_dataset(manifest)
        assert x_tr.shape[0] == 1 and x_te.shape[0] == 1


class TestManifestValidation:
    def _manifest(self, **overrides):
        params = dict(root=".", class_count=2, images_per_class=4,
                      train_k=2, test_k=2, image_size=32, channels=1)
        params.update(overrides)
        return DatasetManifest(**params)

    def test_valid_manifest_passes(self):
        assert self._manifest().validate() is not None

    @pytest.mark.parametrize("overrides", [
        {"class_count": 0},
        {"images_per_class": 0},
        {"train_k": -1},
        {"test_k": 0},
        {"train_k": 3, "test_k": 2},
        {"image_size": 20},
        {"image_size": 8},
        {"channels": 3},
    ])
    def test_invalid_manifest_raises(self, overrides):
        with pytest.raises(ValueError):
            self._manifest(**overrides).validate()
