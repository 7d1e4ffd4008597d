"""MNIST IDX ingestion, class-pair filtering and a synthetic planted-shape set."""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
PATCH = 4  # pixels per feature-grid cell for 28x28 inputs and a 7x7 grid

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "validation": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


class IdxError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # (N, 28, 28, 1) float64 in [0, 1]
    labels: np.ndarray  # (N,) int
    masks: Optional[np.ndarray] = None  # (N, 7, 7) uint8 ground-truth cells
    split: str = "train"

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.masks is not None and len(self.masks) != len(self.labels):
            raise ValueError("mask count does not match label count")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        masks = None if self.masks is None else self.masks[idx]
        return Dataset(self.images[idx], self.labels[idx], masks, self.split)


def _read_bytes(path) -> bytes:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:2] == b"\x1f\x8b":
        blob = gzip.decompress(blob)
    return blob


def read_idx(path, expected_magic: int) -> np.ndarray:
    """Parse one IDX file of unsigned bytes into a uint8 array."""
    blob = _read_bytes(path)
    if len(blob) < 4:
        raise IdxError(f"{path}: truncated header")
    (magic,) = struct.unpack(">I", blob[:4])
    if magic != expected_magic:
        raise IdxError(f"{path}: bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(blob) < header:
        raise IdxError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", blob[4:header])
    count = int(np.prod(dims))
    if len(blob) - header < count:
        raise IdxError(f"{path}: truncated payload, {len(blob) - header} of {count} bytes")
    return np.frombuffer(blob, dtype=np.uint8, count=count, offset=header).reshape(dims)


def load_idx(images_path, labels_path, split: str = "train") -> Dataset:
    """Load an IDX image/label pair; pixels are scaled to [0, 1]."""
    raw = read_idx(images_path, IMAGE_MAGIC)
    labels = read_idx(labels_path, LABEL_MAGIC)
    if len(raw) != len(labels):
        raise IdxError(f"{len(raw)} images but {len(labels)} labels")
    images = (raw.astype(np.float64) / 255.0)[..., None]
    return Dataset(images, labels.astype(np.int64), split=split)


def write_idx(ds: Dataset, images_path, labels_path) -> None:
    raw = np.rint(ds.images[..., 0] * 255.0).astype(np.uint8)
    n, h, w = raw.shape
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IMAGE_MAGIC, n, h, w))
        fh.write(raw.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", LABEL_MAGIC, n))
        fh.write(np.asarray(ds.labels, dtype=np.uint8).tobytes())


def write_masks(ds: Dataset, path) -> None:
    """Sidecar with one line of 49 ground-truth bits per image."""
    with open(path, "w", encoding="ascii") as fh:
        for m in ds.masks:
            fh.write("".join(str(int(b)) for b in m.reshape(-1)) + "\n")


def read_masks(path, grid=(7, 7)) -> np.ndarray:
    with open(path, encoding="ascii") as fh:
        rows = [line.strip() for line in fh if line.strip()]
    return np.array([[int(ch) for ch in row] for row in rows], dtype=np.uint8).reshape(-1, *grid)


def filter_pair(ds: Dataset, a: int, b: int) -> Dataset:
    """Keep digits ``a`` and ``b`` (in original order), relabelled 0 and 1."""
    if a == b:
        raise ValueError("the two classes must differ")
    keep = (ds.labels == a) | (ds.labels == b)
    labels = (ds.labels[keep] == b).astype(np.int64)
    masks = None if ds.masks is None else ds.masks[keep]
    return Dataset(ds.images[keep], labels, masks, ds.split)


def find_mnist(root) -> Path:
    root = Path(root)
    for cand in (root, root / "mnist", root / "MNIST" / "raw"):
        name = MNIST_FILES["train"][0]
        if (cand / name).exists() or (cand / f"{name}.gz").exists():
            return cand
    raise FileNotFoundError(f"no MNIST IDX files under {root}")


def _resolve(directory: Path, name: str) -> Path:
    plain = directory / name
    return plain if plain.exists() else directory / f"{name}.gz"


def load_mnist(root, split: str) -> Dataset:
    directory = find_mnist(root)
    img, lab = MNIST_FILES[split]
    return load_idx(_resolve(directory, img), _resolve(directory, lab), split=split)


def mnist_pair(root=None, a: int = 3, b: int = 8) -> tuple[Dataset, Dataset]:
    """Train and validation (official test split) sets for digits ``a`` vs ``b``."""
    root = root or os.environ.get("BLA_DATA_DIR")
    if root is None:
        raise FileNotFoundError("no dataset root given and BLA_DATA_DIR is unset")
    return (
        filter_pair(load_mnist(root, "train"), a, b),
        filter_pair(load_mnist(root, "validation"), a, b),
    )


def _frame() -> np.ndarray:
    shape = np.ones((8, 8))
    shape[1:-1, 1:-1] = 0.0
    return shape


def synth_planted_patch(count: int, seed, split: str = "train") -> Dataset:
    """28x28 noise images with a bright 8x8 shape on the 4-pixel grid.

    Label 1 carries a filled square, label 0 a hollow one-pixel frame. The
    ground-truth mask marks the 2x2 block of grid cells under the shape.
    Noise levels are byte-quantised in [0, 76/255] so the set survives an
    IDX round trip exactly.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = np.random.default_rng(seed)
    labels = np.arange(count) % 2
    rng.shuffle(labels)
    raw = rng.integers(0, 77, size=(count, 28, 28)).astype(np.float64)
    corners = rng.integers(0, 6, size=(count, 2))
    masks = np.zeros((count, 7, 7), dtype=np.uint8)
    square, frame = np.ones((8, 8)), _frame()
    for i in range(count):
        r, c = corners[i] * PATCH
        shape = square if labels[i] == 1 else frame
        region = raw[i, r : r + 8, c : c + 8]
        raw[i, r : r + 8, c : c + 8] = np.where(shape > 0, 255.0, region)
        masks[i, corners[i, 0] : corners[i, 0] + 2, corners[i, 1] : corners[i, 1] + 2] = 1
    return Dataset((raw / 255.0)[..., None], labels.astype(np.int64), masks, split)


def synthetic_pair(train_count: int = 5000, val_count: int = 1000, seed: int = 0) -> tuple[Dataset, Dataset]:
    return (
        synth_planted_patch(train_count, [seed, 0], "train"),
        synth_planted_patch(val_count, [seed, 1], "validation"),
    )
