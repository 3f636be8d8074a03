"""Dataset loader tests: binary-format fixtures, synthetic renderer properties."""

import os

import numpy as np
import pytest

from sjea.data import (
    Dataset,
    compute_channel_stats,
    load_cifar10,
    load_stl10,
    synth_dataset,
)
from sjea.errors import ContractViolation, FormatError

RECORD = 1 + 3072
STL_IMG = 3 * 96 * 96


def write_cifar_fixture(directory, records_per_file=2):
    """Deterministic little batch files; returns the first record's bytes."""
    first = None
    for name in [f"data_batch_{i}" for i in range(1, 6)] + ["test_batch"]:
        buf = bytearray()
        for r in range(records_per_file):
            label = (r + len(name)) % 10
            pixels = bytes(((r * 7 + k * 13) % 256) for k in range(3072))
            buf.append(label)
            buf.extend(pixels)
            if first is None:
                first = (label, pixels)
        with open(os.path.join(directory, name), "wb") as f:
            f.write(buf)
    return first


def write_stl_fixture(directory, n=2):
    for split in ("train", "test"):
        imgs = bytearray()
        for r in range(n):
            imgs.extend(bytes(((r * 11 + k * 3) % 256) for k in range(STL_IMG)))
        with open(os.path.join(directory, f"{split}_X.bin"), "wb") as f:
            f.write(imgs)
        with open(os.path.join(directory, f"{split}_y.bin"), "wb") as f:
            f.write(bytes((r % 10) + 1 for r in range(n)))


class TestCifarLoader:
    def test_fixture_roundtrip(self, tmp_path):
        label, pixels = write_cifar_fixture(tmp_path)
        splits = load_cifar10(str(tmp_path))
        assert len(splits.train) == 10 and len(splits.test) == 2
        assert splits.train.labels[0] == label
        # red plane of the first image is the first 1024 pixel bytes, row-major
        expect = np.frombuffer(pixels[:1024], dtype=np.uint8).reshape(32, 32) / 255.0
        np.testing.assert_allclose(splits.train.images[0, 0], expect, atol=1e-7)

    def test_pixels_in_unit_range_and_shared_stats(self, tmp_path):
        write_cifar_fixture(tmp_path)
        splits = load_cifar10(str(tmp_path))
        assert splits.train.images.min() >= 0.0 and splits.train.images.max() <= 1.0
        np.testing.assert_array_equal(splits.train.channel_stats[0],
                                      splits.test.channel_stats[0])

    def test_missing_file(self, tmp_path):
        write_cifar_fixture(tmp_path)
        os.remove(tmp_path / "data_batch_3")
        with pytest.raises(FormatError, match="data_batch_3"):
            load_cifar10(str(tmp_path))

    def test_truncated_file_names_offset(self, tmp_path):
        write_cifar_fixture(tmp_path)
        with open(tmp_path / "data_batch_1", "ab") as f:
            f.write(b"\x00" * 10)  # partial trailing record
        with pytest.raises(FormatError, match="offset"):
            load_cifar10(str(tmp_path))

    def test_label_out_of_range(self, tmp_path):
        write_cifar_fixture(tmp_path)
        with open(tmp_path / "test_batch", "r+b") as f:
            f.write(b"\x0b")  # label byte 11
        with pytest.raises(FormatError, match="label"):
            load_cifar10(str(tmp_path))


class TestStlLoader:
    def test_fixture_shapes_and_labels(self, tmp_path):
        write_stl_fixture(tmp_path)
        splits = load_stl10(str(tmp_path))
        assert splits.train.images.shape == (2, 3, 96, 96)
        assert splits.test.images.shape == (2, 3, 96, 96)
        assert splits.train.labels.tolist() == [0, 1]  # bytes 1,2 shifted down
        assert splits.unlabeled is None

    def test_column_major_plane_decoding(self, tmp_path):
        n = 1
        img = bytearray(STL_IMG)
        row, col, value = 5, 17, 200
        img[col * 96 + row] = value  # red plane, column-major position
        for split in ("train", "test"):
            with open(tmp_path / f"{split}_X.bin", "wb") as f:
                f.write(img)
            with open(tmp_path / f"{split}_y.bin", "wb") as f:
                f.write(bytes([1]))
        splits = load_stl10(str(tmp_path))
        assert splits.train.images[0, 0, row, col] == pytest.approx(value / 255.0)

    def test_unlabeled_split_loaded_when_present(self, tmp_path):
        write_stl_fixture(tmp_path)
        with open(tmp_path / "unlabeled_X.bin", "wb") as f:
            f.write(bytes(STL_IMG * 3))
        splits = load_stl10(str(tmp_path))
        assert splits.unlabeled is not None
        assert len(splits.unlabeled) == 3
        assert splits.unlabeled.labels is None

    def test_label_count_mismatch(self, tmp_path):
        write_stl_fixture(tmp_path)
        with open(tmp_path / "train_y.bin", "ab") as f:
            f.write(b"\x01")
        with pytest.raises(FormatError, match="labels"):
            load_stl10(str(tmp_path))

    def test_label_range(self, tmp_path):
        write_stl_fixture(tmp_path)
        with open(tmp_path / "test_y.bin", "r+b") as f:
            f.write(b"\x00")  # labels are 1-based
        with pytest.raises(FormatError):
            load_stl10(str(tmp_path))


class TestSynthetic:
    def test_deterministic_per_seed(self):
        a = synth_dataset(4, 10, seed=5)
        b = synth_dataset(4, 10, seed=5)
        np.testing.assert_array_equal(a.images, b.images)
        np.testing.assert_array_equal(a.labels, b.labels)
        c = synth_dataset(4, 10, seed=6)
        assert not np.array_equal(a.images, c.images)

    def test_uniform_class_histogram(self):
        ds = synth_dataset(4, 25, seed=1)
        np.testing.assert_array_equal(np.bincount(ds.labels), [25, 25, 25, 25])

    def test_values_in_unit_interval(self):
        ds = synth_dataset(4, 10, seed=2)
        assert ds.images.min() >= 0.0 and ds.images.max() <= 1.0
        assert ds.images.dtype == np.float32

    def test_pixel_nearest_neighbor_band(self):
        """Pixel-space 1-NN must be learnable but not trivial: 40%..95%."""
        train = synth_dataset(4, 120, seed=0)
        test = synth_dataset(4, 40, seed=1)
        xa = train.images.reshape(len(train), -1)
        xb = test.images.reshape(len(test), -1)
        dists = ((xb[:, None, :] - xa[None, :, :]) ** 2).sum(-1)
        acc = (train.labels[dists.argmin(1)] == test.labels).mean()
        assert 0.40 <= acc <= 0.95

    def test_validation(self):
        with pytest.raises(ContractViolation):
            synth_dataset(1, 10)
        with pytest.raises(ContractViolation):
            synth_dataset(99, 10)
        with pytest.raises(ContractViolation):
            synth_dataset(4, 0)


class TestDatasetType:
    def test_label_range_validated(self):
        imgs = np.zeros((4, 3, 8, 8), dtype=np.float32)
        stats = compute_channel_stats(imgs)
        with pytest.raises(ContractViolation):
            Dataset(imgs, np.array([0, 1, 2, 5]), "train", stats, num_classes=4)

    def test_label_count_validated(self):
        imgs = np.zeros((4, 3, 8, 8), dtype=np.float32)
        stats = compute_channel_stats(imgs)
        with pytest.raises(ContractViolation):
            Dataset(imgs, np.array([0, 1]), "train", stats, num_classes=4)

    def test_renormalization_is_centered(self):
        rng = np.random.default_rng(3)
        imgs = rng.uniform(size=(64, 3, 8, 8)).astype(np.float32)
        mean, std = compute_channel_stats(imgs)
        normed = (imgs.astype(np.float64) - mean.reshape(3, 1, 1)) / std.reshape(3, 1, 1)
        assert np.all(np.abs(normed.mean(axis=(0, 2, 3))) < 1e-6)
