import gzip
import os
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from advforge.data import (BadMagicError, CountMismatchError, Dataset, TruncatedFileError, batches,
                           load_idx, load_mnist, quantize, read_csv, subset, write_csv, write_idx)

from conftest import MNIST_DIR, needs_mnist


def _write_images(path, pixels, magic=0x803):
    pixels = np.asarray(pixels, dtype=np.uint8)
    n, h, w = pixels.shape
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", magic, n, h, w) + pixels.tobytes())


def _write_labels(path, labels, magic=0x801):
    with open(path, "wb") as f:
        f.write(struct.pack(">II", magic, len(labels)) + bytes(labels))


@pytest.fixture
def two_images(tmp_path):
    pix = np.arange(2 * 28 * 28).reshape(2, 28, 28) % 256
    _write_images(tmp_path / "img", pix)
    _write_labels(tmp_path / "lab", [4, 9])
    return tmp_path, pix


def test_hand_built_fixture_gives_exact_k_over_255(two_images):
    d, pix = two_images
    ds = load_idx(d / "img", d / "lab")
    assert ds.images.shape == (2, 1, 28, 28)
    assert ds.labels.tolist() == [4, 9]
    for k in (0, 1, 17, 128, 255):
        pos = np.argwhere(pix == k)[0]
        assert ds.images[pos[0], 0, pos[1], pos[2]] == k / 255.0


def test_gzip_files_are_read(two_images):
    d, _ = two_images
    for name in ("img", "lab"):
        with open(d / name, "rb") as f, gzip.open(d / f"{name}.gz", "wb") as g:
            g.write(f.read())
    a = load_idx(d / "img", d / "lab")
    b = load_idx(d / "img.gz", d / "lab.gz")
    assert np.array_equal(a.images, b.images)


def test_count_mismatch(two_images):
    d, _ = two_images
    _write_labels(d / "lab3", [1, 2, 3])
    with pytest.raises(CountMismatchError):
        load_idx(d / "img", d / "lab3")


def test_bad_magic(two_images):
    d, pix = two_images
    _write_images(d / "bad", pix, magic=0x801)
    with pytest.raises(BadMagicError):
        load_idx(d / "bad", d / "lab")
    with pytest.raises(BadMagicError):
        load_idx(d / "img", d / "img")


def test_truncated_file(two_images):
    d, _ = two_images
    raw = (d / "img").read_bytes()
    (d / "short").write_bytes(raw[:-10])
    with pytest.raises(TruncatedFileError):
        load_idx(d / "short", d / "lab")
    (d / "stub").write_bytes(raw[:6])
    with pytest.raises(TruncatedFileError):
        load_idx(d / "stub", d / "lab")


def _reference_parse(images_path, labels_path):
    """Byte-by-byte parser kept independent of the library reader."""
    with open(labels_path, "rb") as f:
        raw = f.read()
    n = int.from_bytes(raw[4:8], "big")
    labels = list(raw[8:8 + n])
    with open(images_path, "rb") as f:
        raw = f.read()
    count, rows, cols = (int.from_bytes(raw[o:o + 4], "big") for o in (4, 8, 12))
    first = [raw[16 + i] / 255.0 for i in range(rows * cols)]
    last = [raw[16 + (count - 1) * rows * cols + i] / 255.0 for i in range(rows * cols)]
    return count, labels, first, last


@needs_mnist
def test_official_mnist_test_split():
    ds = load_mnist(MNIST_DIR, "test")
    assert len(ds) == 10000
    assert ds.labels[0] == 7
    img = os.path.join(MNIST_DIR, "t10k-images-idx3-ubyte")
    lab = os.path.join(MNIST_DIR, "t10k-labels-idx1-ubyte")
    if os.path.exists(img) and os.path.exists(lab):
        count, labels, first, last = _reference_parse(img, lab)
        assert count == 10000
        assert ds.labels.tolist() == labels
        assert ds.images[0].ravel().tolist() == first
        assert ds.images[-1].ravel().tolist() == last


@needs_mnist
def test_stratified_mnist_subset_has_100_per_class():
    ds = load_mnist(MNIST_DIR, "test")
    sub = subset(ds, 1000, seed=3)
    assert np.bincount(sub.labels, minlength=10).tolist() == [100] * 10
    again = subset(ds, 1000, seed=3)
    assert np.array_equal(sub.images, again.images)


def _small_dataset(rng, n=30, classes=10):
    return Dataset(rng.integers(0, 256, (n, 1, 28, 28)) / 255.0, np.arange(n) % classes)


def test_full_size_subset_is_permutation(rng):
    ds = _small_dataset(rng)
    sub = subset(ds, len(ds), seed=1)
    order = np.lexsort(sub.images.reshape(len(ds), -1).T)
    ref = np.lexsort(ds.images.reshape(len(ds), -1).T)
    assert np.array_equal(sub.images[order], ds.images[ref])
    assert sorted(sub.labels.tolist()) == sorted(ds.labels.tolist())


def test_subset_errors_and_uneven_classes(rng):
    ds = Dataset(rng.random((13, 1, 28, 28)), [0] * 10 + [1] * 3)
    with pytest.raises(ValueError):
        subset(ds, 14)
    sub = subset(ds, 8, seed=0)
    assert np.bincount(sub.labels).tolist() == [5, 3]


def test_idx_round_trip_is_bit_identical(two_images, tmp_path):
    d, _ = two_images
    ds = load_idx(d / "img", d / "lab")
    write_idx(ds, tmp_path / "o_img", tmp_path / "o_lab")
    back = load_idx(tmp_path / "o_img", tmp_path / "o_lab")
    assert back.images.tobytes() == ds.images.tobytes()
    assert np.array_equal(back.labels, ds.labels)


def test_quantize_stays_inside_ball():
    clean = np.array([100, 100, 0, 255]) / 255.0
    eps = 0.3
    adv = np.clip(clean + np.array([eps, -eps, eps, -eps]), 0, 1)
    q = quantize(adv, clean, eps).astype(float) / 255.0
    assert np.max(np.abs(q - clean)) <= eps


def test_csv_round_trip_is_exact(rng, tmp_path):
    ds = Dataset(rng.random((3, 1, 28, 28)), [1, 2, 3])
    write_csv(ds, tmp_path / "d.csv")
    back = read_csv(tmp_path / "d.csv")
    assert back.images.tobytes() == ds.images.tobytes()
    assert back.labels.tolist() == [1, 2, 3]


def test_dataset_validation(rng):
    with pytest.raises(ValueError):
        Dataset(np.full((1, 1, 28, 28), 1.5), [0])
    with pytest.raises(ValueError):
        Dataset(np.zeros((1, 1, 28, 28)), [10])
    with pytest.raises(CountMismatchError):
        Dataset(np.zeros((2, 1, 28, 28)), [0])


def test_batch_sizes_with_remainder(rng):
    ds = _small_dataset(rng, n=10)
    sizes = [len(y) for _, y in batches(ds, 3, seed=0)]
    assert sizes == [3, 3, 3, 1]


def test_single_batch_is_whole_set(rng):
    ds = _small_dataset(rng, n=10)
    (xb, yb), = list(batches(ds, 10, seed=0))
    assert sorted(yb.tolist()) == sorted(ds.labels.tolist())
    assert len(xb) == 10


def test_same_seed_same_sequence_and_reproducible_batch(rng):
    ds = _small_dataset(rng, n=25)
    a, b = batches(ds, 4, seed=6), batches(ds, 4, seed=6)
    for _ in range(3):
        for (xa, ya), (xb, yb) in zip(a, b):
            assert np.array_equal(xa, xb) and np.array_equal(ya, yb)
    it = batches(ds, 4, seed=6)
    assert np.array_equal(it.indices(2, 3), it.epoch_indices(2)[3])


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 60), st.integers(1, 70), st.integers(0, 1000), st.integers(0, 5))
def test_every_epoch_visits_each_index_once(n, m, seed, epoch):
    ds = Dataset(np.zeros((n, 1, 28, 28)), np.zeros(n, dtype=int))
    parts = batches(ds, m, seed).epoch_indices(epoch)
    assert sorted(np.concatenate(parts).tolist()) == list(range(n))
    assert all(len(p) == m for p in parts[:-1]) and 1 <= len(parts[-1]) <= m
