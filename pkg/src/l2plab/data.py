"""Dataset loading (CIFAR binary batches, MNIST idx), subsetting and batching.

Images are stored as float64 ``(N, C, H, W)`` arrays scaled from bytes by
1/255. ``L2PLAB_DATA`` overrides the dataset root directory.
"""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterator, Optional, Tuple

import numpy as np

ENV_ROOT = "L2PLAB_DATA"

CIFAR10_TRAIN = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR10_TEST = ("test_batch.bin",)
CIFAR100_TRAIN = ("train.bin",)
CIFAR100_TEST = ("test.bin",)
CIFAR_PIXELS = 3 * 32 * 32


class DataError(ValueError):
    """Dataset files are missing, truncated or malformed."""


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    class_count: int
    split: str = "train"
    name: str = ""

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise DataError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise DataError(f"labels outside [0, {self.class_count})")

    def __len__(self):
        return len(self.labels)

    @property
    def input_shape(self) -> tuple:
        return tuple(self.images.shape[1:])


@dataclass(frozen=True)
class BatchPlan:
    batch_size: int = 128
    shuffle: bool = True
    seed: int = 0
    flip: bool = False
    crop_pad: int = 0


def data_root(path=None) -> Path:
    env = os.environ.get(ENV_ROOT)
    if env:
        return Path(env)
    return Path(path) if path is not None else Path("data")


# ------------------------------------------------------------------- CIFAR
def decode_cifar(raw: bytes, label_bytes: int, source: str = "<bytes>") -> Tuple[np.ndarray, np.ndarray]:
    """Decode records of ``label_bytes`` label bytes + 3072 pixel bytes.

    The last label byte is used (the fine label for CIFAR-100).
    """
    rec = label_bytes + CIFAR_PIXELS
    if len(raw) % rec:
        full = len(raw) // rec
        raise DataError(f"{source}: truncated record at byte offset {full * rec} (record size {rec})")
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(-1, rec)
    labels = arr[:, label_bytes - 1].astype(np.int64)
    pixels = arr[:, label_bytes:].reshape(-1, 3, 32, 32)
    return pixels, labels


def encode_cifar(pixels: np.ndarray, labels: np.ndarray, coarse: Optional[np.ndarray] = None) -> bytes:
    """Inverse of :func:`decode_cifar` for uint8 pixels."""
    n = len(labels)
    cols = [] if coarse is None else [np.asarray(coarse, dtype=np.uint8).reshape(n, 1)]
    cols.append(np.asarray(labels, dtype=np.uint8).reshape(n, 1))
    cols.append(np.asarray(pixels, dtype=np.uint8).reshape(n, CIFAR_PIXELS))
    return np.concatenate(cols, axis=1).tobytes()


def _find_cifar_dir(root: Path, variant: int) -> Path:
    sub = "cifar-10-batches-bin" if variant == 10 else "cifar-100-binary"
    for cand in (root / sub, root):
        if cand.is_dir() and any((cand / f).exists() for f in (CIFAR10_TEST + CIFAR100_TEST)):
            return cand
    return root / sub


def load_cifar(path=None, variant: int = 10, split: str = "train") -> Dataset:
    if variant not in (10, 100):
        raise ValueError(f"variant must be 10 or 100, got {variant}")
    directory = _find_cifar_dir(data_root(path), variant)
    if variant == 10:
        files, label_bytes = (CIFAR10_TRAIN if split == "train" else CIFAR10_TEST), 1
    else:
        files, label_bytes = (CIFAR100_TRAIN if split == "train" else CIFAR100_TEST), 2
    pix, lab = [], []
    for f in files:
        p = directory / f
        if not p.exists():
            raise DataError(f"missing CIFAR file {p}")
        px, lb = decode_cifar(p.read_bytes(), label_bytes, str(p))
        pix.append(px)
        lab.append(lb)
    pixels = np.concatenate(pix)
    expected = {"train": 50000, "test": 10000}.get(split)
    if expected is not None and len(pixels) != expected:
        raise DataError(f"CIFAR-{variant} {split}: expected {expected} records, found {len(pixels)}")
    return Dataset(pixels / 255.0, np.concatenate(lab), variant, split, f"cifar{variant}")


# ------------------------------------------------------------------- MNIST
def _read_idx(p: Path) -> np.ndarray:
    opener = gzip.open if p.suffix == ".gz" else open
    with opener(p, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4 or raw[0] != 0 or raw[1] != 0 or raw[2] != 0x08:
        raise DataError(f"{p}: bad idx magic {raw[:4]!r}")
    ndim = raw[3]
    dims = struct.unpack(f">{ndim}I", raw[4:4 + 4 * ndim])
    body = raw[4 + 4 * ndim:]
    need = int(np.prod(dims))
    if len(body) != need:
        raise DataError(f"{p}: expected {need} bytes of data, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(dims)


def _mnist_file(directory: Path, stem: str) -> Path:
    for name in (stem, stem + ".gz"):
        if (directory / name).exists():
            return directory / name
    raise DataError(f"missing MNIST file {directory / stem}")


def load_mnist(path=None, split: str = "train") -> Dataset:
    root = data_root(path)
    directory = root / "mnist" if (root / "mnist").is_dir() else root
    prefix = "train" if split == "train" else "t10k"
    images = _read_idx(_mnist_file(directory, f"{prefix}-images-idx3-ubyte"))
    labels = _read_idx(_mnist_file(directory, f"{prefix}-labels-idx1-ubyte"))
    if images.ndim != 3:
        raise DataError(f"MNIST images must be 3-D, got shape {images.shape}")
    if len(images) != len(labels):
        raise DataError(f"MNIST {split}: {len(images)} images but {len(labels)} labels")
    return Dataset(images[:, None] / 255.0, labels.astype(np.int64), 10, split, "mnist")


def write_idx(p, arr: np.ndarray) -> None:
    arr = np.asarray(arr, dtype=np.uint8)
    header = bytes([0, 0, 0x08, arr.ndim]) + struct.pack(f">{arr.ndim}I", *arr.shape)
    Path(p).write_bytes(header + arr.tobytes())


# ---------------------------------------------------------------- synthetic
def synthetic(n: int = 1000, classes: int = 10, shape=(3, 32, 32), seed: int = 0, split: str = "train",
              noise: float = 0.15) -> Dataset:
    """Quantised class-template images for smoke runs when no real dataset is present.

    Each class has a fixed smooth template (shared across splits); samples add
    per-pixel noise, then values are quantised to bytes like real images.
    """
    C, H, W = shape
    trng = np.random.default_rng(np.random.SeedSequence([seed, 99]))
    coarse = trng.random((classes, C, max(H // 4, 1), max(W // 4, 1)))
    templates = np.repeat(np.repeat(coarse, H // coarse.shape[2], axis=2), W // coarse.shape[3], axis=3)
    srng = np.random.default_rng(np.random.SeedSequence([seed, 100 if split == "train" else 101]))
    labels = np.arange(n) % classes
    srng.shuffle(labels)
    imgs = templates[labels] + noise * srng.standard_normal((n, C, H, W))
    imgs = np.round(np.clip(imgs, 0.0, 1.0) * 255) / 255.0
    return Dataset(imgs, labels.astype(np.int64), classes, split, "synthetic")


def load_digits_dataset(split: str = "train", test_fraction: float = 0.25, seed: int = 0) -> Dataset:
    """scikit-learn's bundled 8x8 handwritten digits (16 grey levels) as a tiny real dataset."""
    from sklearn.datasets import load_digits

    d = load_digits()
    imgs = (d.images / 16.0)[:, None]
    labels = d.target.astype(np.int64)
    perm = np.random.default_rng(seed).permutation(len(labels))
    n_test = int(round(len(labels) * test_fraction))
    idx = perm[:n_test] if split == "test" else perm[n_test:]
    return Dataset(imgs[idx], labels[idx], 10, split, "digits")


# ------------------------------------------------------------ subset/batches
def subset(ds: Dataset, n: int, seed: int = 0) -> Dataset:
    """Class-stratified deterministic sample of ``n`` items.

    Quotas are ``n // classes`` per class with the remainder handed to the
    lowest class ids that still have spare items.
    """
    if n > len(ds):
        raise ValueError(f"cannot take {n} items from a dataset of {len(ds)}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 5]))
    by_class = [np.flatnonzero(ds.labels == c) for c in range(ds.class_count)]
    for idx in by_class:
        rng.shuffle(idx)
    present = [c for c in range(ds.class_count) if len(by_class[c])]
    quota = {c: 0 for c in present}
    remaining = n
    while remaining:
        open_classes = [c for c in present if quota[c] < len(by_class[c])]
        share = max(remaining // len(open_classes), 1)
        for c in open_classes:
            take = min(share, len(by_class[c]) - quota[c], remaining)
            quota[c] += take
            remaining -= take
            if not remaining:
                break
    chosen = np.concatenate([by_class[c][: quota[c]] for c in present])
    rng.shuffle(chosen)
    return replace(ds, images=ds.images[chosen], labels=ds.labels[chosen])


def augment(x: np.ndarray, rng: np.random.Generator, flip: bool, crop_pad: int) -> np.ndarray:
    out = x.copy()
    if flip:
        mask = rng.random(len(x)) < 0.5
        out[mask] = out[mask, :, :, ::-1]
    if crop_pad:
        N, C, H, W = x.shape
        padded = np.pad(out, ((0, 0), (0, 0), (crop_pad, crop_pad), (crop_pad, crop_pad)))
        dy = rng.integers(0, 2 * crop_pad + 1, size=N)
        dx = rng.integers(0, 2 * crop_pad + 1, size=N)
        for i in range(N):
            out[i] = padded[i, :, dy[i]:dy[i] + H, dx[i]:dx[i] + W]
    return out


def batches(ds: Dataset, plan: BatchPlan, epoch: int = 0) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
    """Yield ``ceil(N / B)`` batches covering every index once."""
    n = len(ds)
    rng = np.random.default_rng(np.random.SeedSequence([plan.seed, 6, epoch]))
    order = rng.permutation(n) if plan.shuffle else np.arange(n)
    for i in range(0, n, plan.batch_size):
        idx = order[i:i + plan.batch_size]
        x = ds.images[idx]
        if plan.flip or plan.crop_pad:
            x = augment(x, rng, plan.flip, plan.crop_pad)
        yield x, ds.labels[idx]


def load_dataset(name: str, split: str, root=None, **kw) -> Dataset:
    if name == "cifar10":
        return load_cifar(root, 10, split)
    if name == "cifar100":
        return load_cifar(root, 100, split)
    if name == "mnist":
        return load_mnist(root, split)
    if name == "digits":
        return load_digits_dataset(split)
    if name == "synthetic":
        return synthetic(split=split, **kw)
    raise DataError(f"unknown dataset {name!r}")
