"""
MNIST IDX reading/writing, stratified subsets and seeded mini-batches.
"""

import csv
import gzip
import os
import struct
from dataclasses import dataclass
from typing import Iterator, Optional, Tuple

import numpy as np

from .nn import DTYPE

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801

TRAIN_FILES = ("train-images-idx3-ubyte", "train-labels-idx1-ubyte")
TEST_FILES = ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")


class IdxError(ValueError):
    pass


class BadMagicError(IdxError):
    pass


class TruncatedFileError(IdxError):
    pass


class CountMismatchError(IdxError):
    pass


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    data_range: Tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        images = np.asarray(self.images, dtype=DTYPE)
        labels = np.asarray(self.labels, dtype=np.int64)
        if images.ndim == 3:
            images = images[:, None]
        if len(images) != len(labels):
            raise CountMismatchError(f"{len(images)} images but {len(labels)} labels")
        lo, hi = self.data_range
        if images.size and (images.min() < lo or images.max() > hi):
            raise ValueError(f"pixels outside data_range {self.data_range}")
        if labels.size and (labels.min() < 0 or labels.max() > 9):
            raise ValueError("labels must lie in 0..9")
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "data_range", (float(lo), float(hi)))

    def __len__(self):
        return len(self.labels)

    def take(self, idx):
        return Dataset(self.images[idx], self.labels[idx], self.data_range)


def _open(path):
    path = str(path)
    return gzip.open(path, "rb") if path.endswith(".gz") else open(path, "rb")


def _read_idx(path, magic, ndim):
    with _open(path) as f:
        raw = f.read()
    if len(raw) < 4 + 4 * ndim:
        raise TruncatedFileError(f"{path}: header truncated")
    found = struct.unpack(">I", raw[:4])[0]
    if found != magic:
        raise BadMagicError(f"{path}: magic 0x{found:08x}, expected 0x{magic:08x}")
    dims = struct.unpack(">" + "I" * ndim, raw[4:4 + 4 * ndim])
    body = raw[4 + 4 * ndim:]
    need = int(np.prod(dims))
    if len(body) < need:
        raise TruncatedFileError(f"{path}: expected {need} data bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8, count=need).reshape(dims)


def read_idx_images(path):
    return _read_idx(path, IMAGE_MAGIC, 3)


def read_idx_labels(path):
    return _read_idx(path, LABEL_MAGIC, 1)


def load_idx(images_path, labels_path):
    """Load an IDX image/label pair; pixels are scaled by 1/255 into [0, 1]."""
    images = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if len(images) != len(labels):
        raise CountMismatchError(
            f"{images_path} holds {len(images)} images but {labels_path} holds {len(labels)} labels")
    return Dataset(images[:, None].astype(DTYPE) / 255.0, labels.astype(np.int64))


def _find(data_dir, name):
    for candidate in (name, name + ".gz"):
        path = os.path.join(data_dir, candidate)
        if os.path.exists(path):
            return path
    raise FileNotFoundError(f"{name} not found in {data_dir}")


def load_mnist(data_dir, split="train"):
    files = TRAIN_FILES if split == "train" else TEST_FILES
    if split not in ("train", "test"):
        raise ValueError(f"split must be 'train' or 'test', got {split!r}")
    return load_idx(_find(data_dir, files[0]), _find(data_dir, files[1]))


def quantize(images, clean=None, epsilon=None):
    """
    Nearest 1/255 level. With ``clean``/``epsilon`` the level is kept inside
    the eps-ball around the (already byte-valued) clean pixels.
    """
    q = np.rint(np.asarray(images, dtype=DTYPE) * 255.0)
    if clean is not None:
        base = np.rint(np.asarray(clean, dtype=DTYPE) * 255.0)
        slack = np.floor(epsilon * 255.0 + 1e-9)
        q = np.clip(q, base - slack, base + slack)
    return np.clip(q, 0, 255).astype(np.uint8)


def write_idx(dataset, images_path, labels_path, clean=None, epsilon=None):
    """Write ``dataset`` as an IDX pair (pixels quantized to bytes)."""
    if dataset.data_range != (0.0, 1.0):
        raise ValueError("IDX export needs data_range (0, 1)")
    pix = quantize(dataset.images[:, 0], None if clean is None else clean[:, 0], epsilon)
    n, h, w = pix.shape
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IMAGE_MAGIC, n, h, w))
        f.write(pix.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", LABEL_MAGIC, n))
        f.write(dataset.labels.astype(np.uint8).tobytes())


def write_csv(dataset, path):
    """Lossless float export: ``index,label,pix_0..pix_{d-1}`` with repr() floats."""
    flat = dataset.images.reshape(len(dataset), -1)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["index", "label"] + [f"pix_{i}" for i in range(flat.shape[1])])
        for i, (row, label) in enumerate(zip(flat, dataset.labels)):
            writer.writerow([i, int(label)] + [repr(float(v)) for v in row])


def read_csv(path, image_shape=(1, 28, 28), data_range=(0.0, 1.0)):
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        if header[:2] != ["index", "label"]:
            raise ValueError(f"{path}: unexpected header")
        rows = [r for r in reader]
    labels = np.array([int(r[1]) for r in rows], dtype=np.int64)
    pix = np.array([[float(v) for v in r[2:]] for r in rows], dtype=DTYPE)
    return Dataset(pix.reshape((len(rows),) + tuple(image_shape)), labels, data_range)


def _allocate(counts_available, n, rng):
    """Water-fill ``n`` picks across classes as evenly as capacity allows."""
    k = len(counts_available)
    take = np.zeros(k, dtype=np.int64)
    order = rng.permutation(k)
    remaining = n
    while remaining > 0:
        open_ = [c for c in order if take[c] < counts_available[c]]
        share = remaining // len(open_)
        if share == 0:
            for c in open_[:remaining]:
                take[c] += 1
            break
        for c in open_:
            add = min(share, counts_available[c] - take[c])
            take[c] += add
            remaining -= add
    return take


def subset(dataset, n, seed=0):
    """Seeded class-stratified sample of ``n`` examples without replacement."""
    if n > len(dataset) or n < 0:
        raise ValueError(f"cannot draw {n} examples from a dataset of {len(dataset)}")
    rng = np.random.default_rng(seed)
    classes = np.unique(dataset.labels)
    members = [np.flatnonzero(dataset.labels == c) for c in classes]
    take = _allocate(np.array([len(m) for m in members]), n, rng)
    picked = [rng.choice(m, size=t, replace=False) for m, t in zip(members, take)]
    idx = np.concatenate(picked) if picked else np.array([], dtype=np.int64)
    return dataset.take(rng.permutation(idx))


class BatchIterator:
    """
    Seeded shuffling mini-batches. Epoch ``e`` uses the permutation drawn from
    ``default_rng([seed, e])``; the last short batch of an epoch is kept.
    """

    def __init__(self, dataset, batch_size, seed=0):
        if batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        self.dataset = dataset
        self.batch_size = int(batch_size)
        self.seed = int(seed)
        self.epoch = 0

    def permutation(self, epoch):
        return np.random.default_rng([self.seed, epoch]).permutation(len(self.dataset))

    def batches_per_epoch(self):
        return -(-len(self.dataset) // self.batch_size)

    def indices(self, epoch, t):
        m = self.batch_size
        return self.permutation(epoch)[t * m:(t + 1) * m]

    def epoch_indices(self, epoch):
        perm = self.permutation(epoch)
        m = self.batch_size
        return [perm[i:i + m] for i in range(0, len(perm), m)]

    def __iter__(self):
        """One epoch of ``(images, labels)`` batches; advances the epoch counter."""
        parts = self.epoch_indices(self.epoch)
        self.epoch += 1
        for idx in parts:
            yield self.dataset.images[idx], self.dataset.labels[idx]

    def stream(self):
        """Endless batches across epochs."""
        while True:
            yield from self


def batches(dataset, m, seed=0):
    return BatchIterator(dataset, m, seed)
