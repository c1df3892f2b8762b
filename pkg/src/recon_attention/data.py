"""MNIST / MNIST-C loading and the corruption subsets."""
from __future__ import annotations

import gzip
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .config import DEFAULT_SHAPE_SUBSET, MNIST_C_CORRUPTIONS

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}


class DataError(ValueError):
    pass


def _read_bytes(path: Path) -> bytes:
    if path.suffix == ".gz":
        with gzip.open(path, "rb") as f:
            return f.read()
    return path.read_bytes()


def read_idx(path: str | Path, expected_magic: int) -> np.ndarray:
    """Parse a big-endian IDX file into a uint8 array."""
    path = Path(path)
    data = _read_bytes(path)
    if len(data) < 8:
        raise DataError(f"{path}: truncated header")
    magic = int.from_bytes(data[:4], "big")
    if magic != expected_magic:
        raise DataError(f"{path}: bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(data) < header:
        raise DataError(f"{path}: truncated header")
    dims = tuple(int(d) for d in np.frombuffer(data, ">u4", count=ndim, offset=4))
    size = int(np.prod(dims))
    if len(data) - header < size:
        raise DataError(f"{path}: truncated, expected {size} bytes of data, found {len(data) - header}")
    return np.frombuffer(data, np.uint8, count=size, offset=header).reshape(dims)


def _find(root: Path, stem: str) -> Path:
    for name in (stem, stem + ".gz", stem.replace("-idx", ".idx")):
        if (root / name).exists():
            return root / name
    raise FileNotFoundError(f"{stem}[.gz] not found under {root}")


def load_idx_pair(images_path, labels_path):
    images = read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = read_idx(labels_path, IDX_LABELS_MAGIC)
    if len(images) != len(labels):
        raise DataError(f"image/label count mismatch: {len(images)} images, {len(labels)} labels")
    return (images.astype(np.float32) / 255.0), labels.astype(np.int64)


def load_mnist(path: str | Path):
    """Return ((train_x, train_y), (test_x, test_y)); images float32 in [0, 1]."""
    root = Path(path)
    train = load_idx_pair(_find(root, MNIST_FILES["train_images"]), _find(root, MNIST_FILES["train_labels"]))
    test = load_idx_pair(_find(root, MNIST_FILES["test_images"]), _find(root, MNIST_FILES["test_labels"]))
    return train, test


@dataclass
class CorruptionDataset:
    name: str
    images: np.ndarray  # (n, 28, 28) float32 in [0, 1]
    labels: np.ndarray  # (n,) int64

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise DataError(f"{self.name}: {len(self.images)} images but {len(self.labels)} labels")
        if self.images.shape[1:] != (28, 28):
            raise DataError(f"{self.name}: expected 28x28 images, got {self.images.shape[1:]}")


class CorruptionSuite(dict):
    """Mapping corruption name -> dataset, remembering which expected names were absent."""

    def __init__(self, *args, missing: Iterable[str] = (), **kwargs):
        super().__init__(*args, **kwargs)
        self.missing = list(missing)


def _normalize_images(arr: np.ndarray, name: str) -> np.ndarray:
    if arr.ndim == 4 and arr.shape[-1] == 1:
        arr = arr[..., 0]
    elif arr.ndim == 4 and arr.shape[1] == 1:
        arr = arr[:, 0]
    if arr.ndim != 3:
        raise DataError(f"{name}: unexpected image array shape {arr.shape}")
    arr = arr.astype(np.float32)
    if arr.max(initial=0) > 1.0:
        arr = arr / 255.0
    return np.clip(arr, 0.0, 1.0)


def read_manifest(path: str | Path) -> list[str]:
    """Corruption names, one per line; blank lines and ``#`` comments ignored."""
    names = []
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            names.append(line)
    return names


def write_manifest(names: Iterable[str], path: str | Path) -> None:
    Path(path).write_text("".join(f"{n}\n" for n in names))


def load_mnist_c(root: str | Path, names: Optional[Iterable[str]] = None, split: str = "test") -> CorruptionSuite:
    """Load the released MNIST-C layout: ``root/<name>/{split}_images.npy`` and ``{split}_labels.npy``.

    Without explicit ``names`` the expected list comes from ``root/manifest.txt``
    if present, else the 15 standard corruptions. Missing directories are
    skipped with a warning and listed in ``.missing``.
    """
    root = Path(root)
    if names is None:
        manifest = root / "manifest.txt"
        names = read_manifest(manifest) if manifest.exists() else MNIST_C_CORRUPTIONS
    suite = CorruptionSuite()
    for name in names:
        folder = root / name
        img_path, lab_path = folder / f"{split}_images.npy", folder / f"{split}_labels.npy"
        if not (img_path.exists() and lab_path.exists()):
            warnings.warn(f"MNIST-C corruption {name!r} not found under {root}; skipping", stacklevel=2)
            suite.missing.append(name)
            continue
        images = _normalize_images(np.load(img_path), name)
        labels = np.load(lab_path).reshape(-1).astype(np.int64)
        suite[name] = CorruptionDataset(name, images, labels)
    return suite


def shape_subset(datasets: dict, names: Iterable[str] = DEFAULT_SHAPE_SUBSET) -> dict:
    """The noise/blur/occlusion subset, in the order of ``names``."""
    names = list(names)
    absent = [n for n in names if n not in datasets]
    if absent:
        raise KeyError(f"shape-subset corruptions not loaded: {absent}")
    return {n: datasets[n] for n in names}


def load_digits_28():
    """scikit-learn's bundled 8x8 handwritten digits, upsampled into a 28x28 MNIST-like frame.

    Each digit is resized to 20x20 (bilinear) and centred with a 4-pixel
    border, mirroring MNIST's layout. Intended for desk-scale smoke runs when
    MNIST itself is not available.
    """
    from scipy.ndimage import zoom
    from sklearn.datasets import load_digits

    digits = load_digits()
    small = digits.images.astype(np.float32) / 16.0
    big = np.clip(zoom(small, (1, 2.5, 2.5), order=1), 0.0, 1.0)
    out = np.zeros((len(small), 28, 28), dtype=np.float32)
    out[:, 4:24, 4:24] = big
    return out, digits.target.astype(np.int64)
