"""Dataset readers (MNIST IDX, CIFAR-10 binary) and train-time augmentation."""
from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 1 + 3 * 32 * 32

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


class DataError(IOError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # uint8, (N, C, H, W)
    labels: np.ndarray  # int64, (N,)

    def __len__(self):
        return len(self.labels)

    def subset(self, n):
        return Dataset(self.images[:n], self.labels[:n])


def _read_bytes(path):
    opener = gzip.open if str(path).endswith(".gz") else open
    try:
        with opener(path, "rb") as f:
            return f.read()
    except OSError as e:
        raise DataError(f"cannot read {path}: {e}") from e


def read_idx(path, expected_magic=None) -> np.ndarray:
    """Parse an IDX file of unsigned bytes (big-endian header)."""
    raw = _read_bytes(path)
    if len(raw) < 4:
        raise DataError(f"{path}: file too short for an IDX header")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic not in (IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC) or (expected_magic and magic != expected_magic):
        want = f"0x{expected_magic:08x}" if expected_magic else "an unsigned-byte IDX magic"
        raise DataError(f"{path}: bad magic 0x{magic:08x}, expected {want}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DataError(f"{path}: truncated IDX header")
    shape = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(shape))
    if len(raw) - header < count:
        raise DataError(f"{path}: expected {count} payload bytes, found {len(raw) - header}")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(shape)


def write_idx(path, array: np.ndarray):
    array = np.ascontiguousarray(array, dtype=np.uint8)
    magic = 0x00000800 | array.ndim
    with open(path, "wb") as f:
        f.write(struct.pack(f">I{array.ndim}I", magic, *array.shape))
        f.write(array.tobytes())


def _find(root, name):
    for candidate in (name, name + ".gz", name.replace("-idx", ".idx")):
        p = os.path.join(root, candidate)
        if os.path.exists(p):
            return p
    raise DataError(f"{name} not found under {root}")


def load_mnist(root, split="train") -> Dataset:
    img_name, lbl_name = MNIST_FILES[split]
    images = read_idx(_find(root, img_name), IDX_IMAGES_MAGIC)
    labels = read_idx(_find(root, lbl_name), IDX_LABELS_MAGIC)
    if len(images) != len(labels):
        raise DataError(f"{root}: {len(images)} images but {len(labels)} labels")
    return Dataset(images[:, None].copy(), labels.astype(np.int64))


def read_cifar_batch(path) -> Dataset:
    raw = _read_bytes(path)
    if len(raw) == 0 or len(raw) % CIFAR_RECORD:
        raise DataError(f"{path}: size {len(raw)} is not a whole number of {CIFAR_RECORD}-byte records")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    if labels.max() > 9:
        raise DataError(f"{path}: label byte {labels.max()} out of range")
    return Dataset(rec[:, 1:].reshape(-1, 3, 32, 32).copy(), labels)


def load_cifar10(root, split="train") -> Dataset:
    names = [f"data_batch_{i}.bin" for i in range(1, 6)] if split == "train" else ["test_batch.bin"]
    parts = [read_cifar_batch(_find(root, n)) for n in names]
    return Dataset(np.concatenate([p.images for p in parts]), np.concatenate([p.labels for p in parts]))


LOADERS = {"mnist_idx": load_mnist, "cifar10_binary": load_cifar10}


def ingest(dataset: str, root):
    """Load ``(train, test)`` for ``mnist_idx`` or ``cifar10_binary``."""
    if dataset not in LOADERS:
        raise DataError(f"unknown dataset {dataset!r}; expected one of {sorted(LOADERS)}")
    if not os.path.isdir(root):
        raise DataError(f"data root {root} does not exist")
    load = LOADERS[dataset]
    return load(root, "train"), load(root, "test")


# ------------------------------------------------------------ preprocessing

def channel_stats(images: np.ndarray):
    x = images.astype(np.float64) / 255.0
    return x.mean(axis=(0, 2, 3)), x.std(axis=(0, 2, 3))


def normalize(images: np.ndarray, mean, std, dtype=np.float32) -> np.ndarray:
    x = images.astype(np.float32) / 255.0
    m = np.asarray(mean, np.float32)[None, :, None, None]
    s = np.asarray(std, np.float32)[None, :, None, None]
    return ((x - m) / s).astype(dtype)


def augment(x, rng, pad=4, flip_prob=0.5, offsets=None, fill=None):
    """Zero-pad by ``pad``, crop back at a random offset, flip horizontally.

    ``fill`` is the per-channel value of a black pixel after normalization.
    ``offsets`` pins the crop corner for every sample (``(pad, pad)`` is the
    identity crop).
    """
    b, c, h, w = x.shape
    if pad:
        fill = np.zeros(c, x.dtype) if fill is None else np.asarray(fill, x.dtype)
        padded = np.empty((b, c, h + 2 * pad, w + 2 * pad), x.dtype)
        padded[:] = fill[None, :, None, None]
        padded[:, :, pad:pad + h, pad:pad + w] = x
        if offsets is None:
            oy = rng.integers(0, 2 * pad + 1, size=b)
            ox = rng.integers(0, 2 * pad + 1, size=b)
        else:
            oy = np.full(b, offsets[0])
            ox = np.full(b, offsets[1])
        out = np.empty_like(x)
        for i in range(b):
            out[i] = padded[i, :, oy[i]:oy[i] + h, ox[i]:ox[i] + w]
    else:
        out = x.copy()
    if flip_prob > 0:
        flip = rng.random(b) < flip_prob
        out[flip] = out[flip, :, :, ::-1]
    return out


# ------------------------------------------------------------------ MNIST-5k

def prepare_mnist5k(out_dir, n_test_per_class=100, seed=0):
    """Write the 5000-digit MNIST subset bundled with mlxtend as IDX files.

    The split is stratified: ``n_test_per_class`` digits of each class go to
    the test files, the rest to the training files.
    """
    try:
        from mlxtend.data import mnist_data
    except ImportError as e:
        raise DataError("mlxtend is required for the MNIST-5k subset (pip install mlxtend)") from e
    X, y = mnist_data()
    X = X.reshape(-1, 28, 28).astype(np.uint8)
    rng = np.random.default_rng(seed)
    test_idx = np.concatenate([rng.permutation(np.flatnonzero(y == k))[:n_test_per_class] for k in range(10)])
    train_mask = np.ones(len(y), bool)
    train_mask[test_idx] = False
    train_idx = rng.permutation(np.flatnonzero(train_mask))
    test_idx = rng.permutation(test_idx)
    os.makedirs(out_dir, exist_ok=True)
    for split, idx in (("train", train_idx), ("test", test_idx)):
        img_name, lbl_name = MNIST_FILES[split]
        write_idx(os.path.join(out_dir, img_name), X[idx])
        write_idx(os.path.join(out_dir, lbl_name), y[idx])
    return len(train_idx), len(test_idx)
