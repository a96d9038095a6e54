"""Dataset ingestion, synthetic digit generation, and attention-map export.

File formats:
  IDX       big-endian; magic 0x00000803 (images, 3 dims) / 0x00000801
            (labels, 1 dim); each dim a big-endian u32; payload u8.
  CIFAR-10  3073-byte records: 1 label byte + 3072 channel-major pixels.
  PGM       binary P5, one byte per pixel, maxval 255.
"""
from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from aal.rng import keyed_rng

__all__ = [
    "Dataset",
    "DataFormatError",
    "BadMagicError",
    "TruncatedPayloadError",
    "CountMismatchError",
    "load_mnist_idx",
    "load_cifar10_bin",
    "load_cifar10_dir",
    "synthetic_digits",
    "subset_balanced",
    "channel_stats",
    "dump_attention_pgm",
    "data_root",
]

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 3073


class DataFormatError(ValueError):
    """Malformed dataset file."""


class BadMagicError(DataFormatError):
    pass


class TruncatedPayloadError(DataFormatError):
    pass


class CountMismatchError(DataFormatError):
    pass


@dataclass
class Dataset:
    """Images in [0,1] as [N,C,H,W] float32 plus integer labels."""

    images: np.ndarray
    labels: np.ndarray
    split: str = ""
    num_classes: int = 10

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float32)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise DataFormatError(f"images must be [N,C,H,W], got {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise CountMismatchError(
                f"{self.labels.shape[0]} labels for {self.images.shape[0]} images"
            )
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataFormatError("label outside [0, num_classes)")

    def __len__(self):
        return self.images.shape[0]

    @property
    def image_size(self):
        return self.images.shape[2]

    @property
    def channels(self):
        return self.images.shape[1]


def data_root():
    """Default dataset directory (overridable via AAL_DATA_DIR)."""
    return Path(os.environ.get("AAL_DATA_DIR", "data"))


def _open_maybe_gzip(path):
    with open(path, "rb") as f:
        head = f.read(2)
    if head == b"\x1f\x8b":
        return gzip.open(path, "rb")
    return open(path, "rb")


def _read_exact(f, count, path):
    data = f.read(count)
    if len(data) != count:
        raise TruncatedPayloadError(f"{path}: truncated payload (wanted {count} bytes, got {len(data)})")
    return data


def load_mnist_idx(images_path, labels_path):
    """Parse an IDX image/label file pair into a Dataset (pixels in [0,1])."""
    with _open_maybe_gzip(images_path) as f:
        magic, n, rows, cols = struct.unpack(">IIII", _read_exact(f, 16, images_path))
        if magic != IDX_IMAGES_MAGIC:
            raise BadMagicError(f"{images_path}: bad magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}")
        raw = _read_exact(f, n * rows * cols, images_path)
    images = np.frombuffer(raw, dtype=np.uint8).reshape(n, 1, rows, cols)

    with _open_maybe_gzip(labels_path) as f:
        magic, n_labels = struct.unpack(">II", _read_exact(f, 8, labels_path))
        if magic != IDX_LABELS_MAGIC:
            raise BadMagicError(f"{labels_path}: bad magic 0x{magic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}")
        raw = _read_exact(f, n_labels, labels_path)
    labels = np.frombuffer(raw, dtype=np.uint8)

    if n != n_labels:
        raise CountMismatchError(f"{n} images but {n_labels} labels")
    return Dataset(images.astype(np.float32) / 255.0, labels.astype(np.int64))


def write_mnist_idx(dataset, images_path, labels_path):
    """Serialize a single-channel dataset back to the IDX pair."""
    n, c, h, w = dataset.images.shape
    if c != 1:
        raise DataFormatError("IDX export supports single-channel images only")
    pixels = np.round(dataset.images * 255.0).astype(np.uint8)
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w))
        f.write(pixels.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, n))
        f.write(dataset.labels.astype(np.uint8).tobytes())


def load_cifar10_bin(path):
    """Parse one CIFAR-10 binary batch file."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) % CIFAR_RECORD:
        raise TruncatedPayloadError(
            f"{path}: length {len(raw)} is not a multiple of {CIFAR_RECORD}"
        )
    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = records[:, 0].astype(np.int64)
    if labels.size and labels.max() > 9:
        raise DataFormatError(f"{path}: label byte {labels.max()} out of range 0..9")
    images = records[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    return Dataset(images, labels)


def load_cifar10_dir(directory, split):
    """Load the standard CIFAR-10 batch files from a directory."""
    directory = Path(directory)
    names = [f"data_batch_{i}.bin" for i in range(1, 6)] if split == "train" else ["test_batch.bin"]
    parts = [load_cifar10_bin(directory / name) for name in names]
    return Dataset(
        np.concatenate([p.images for p in parts]),
        np.concatenate([p.labels for p in parts]),
        split=split,
    )


_FONT_DIRS = ("/usr/share/fonts/truetype/dejavu",)


def _digit_fonts():
    paths = []
    for d in _FONT_DIRS:
        p = Path(d)
        if p.is_dir():
            paths.extend(sorted(p.glob("*.ttf")))
    if not paths:
        try:
            import matplotlib

            paths = sorted((Path(matplotlib.get_data_path()) / "fonts" / "ttf").glob("DejaVu*.ttf"))
        except ImportError:
            pass
    if not paths:
        raise RuntimeError("no TrueType fonts found for synthetic digit rendering")
    return paths


def synthetic_digits(n, seed, image_size=28, split=""):
    """Class-balanced rendered-digit dataset, deterministic given the seed.

    Each sample draws a digit glyph (random DejaVu face, size, position,
    rotation, brightness) on a black canvas and adds light pixel noise.
    Serves as the desk-scale stand-in when the real handwritten corpus is
    not on disk; identical file formats and shapes apply.
    """
    from PIL import Image, ImageDraw, ImageFont

    rng = keyed_rng(seed, 0xD161)
    font_paths = _digit_fonts()
    font_cache = {}
    labels = np.arange(n) % 10
    rng.shuffle(labels)
    images = np.empty((n, 1, image_size, image_size), dtype=np.float32)
    for i in range(n):
        face = int(rng.integers(len(font_paths)))
        size = int(rng.integers(16, 25))
        key = (face, size)
        if key not in font_cache:
            font_cache[key] = ImageFont.truetype(str(font_paths[face]), size)
        font = font_cache[key]
        canvas = Image.new("L", (image_size, image_size), 0)
        draw = ImageDraw.Draw(canvas)
        left, top, right, bottom = draw.textbbox((0, 0), str(labels[i]), font=font)
        ox = (image_size - (right - left)) // 2 - left + int(rng.integers(-3, 4))
        oy = (image_size - (bottom - top)) // 2 - top + int(rng.integers(-3, 4))
        draw.text((ox, oy), str(labels[i]), fill=255, font=font)
        angle = float(rng.uniform(-20.0, 20.0))
        canvas = canvas.rotate(angle, resample=Image.BILINEAR)
        img = np.asarray(canvas, dtype=np.float32) / 255.0
        img *= float(rng.uniform(0.7, 1.0))
        img += rng.normal(0.0, 0.08, size=img.shape)
        images[i, 0] = np.clip(img, 0.0, 1.0)
    return Dataset(images, labels.astype(np.int64), split=split)


def subset_balanced(dataset, per_class, seed=0):
    """First-K indices per class after a seeded per-class shuffle."""
    picks = []
    for c in range(dataset.num_classes):
        idx = np.flatnonzero(dataset.labels == c)
        if idx.size < per_class:
            raise ValueError(f"class {c} has only {idx.size} samples, need {per_class}")
        idx = keyed_rng(seed, c).permutation(idx)[:per_class]
        picks.append(idx)
    order = np.sort(np.concatenate(picks))
    return Dataset(dataset.images[order], dataset.labels[order], split=dataset.split)


def channel_stats(dataset):
    """Per-channel mean and std over all pixels (std floored at 1e-6)."""
    mean = dataset.images.mean(axis=(0, 2, 3))
    std = np.maximum(dataset.images.std(axis=(0, 2, 3)), 1e-6)
    return mean.astype(np.float64), std.astype(np.float64)


def dump_attention_pgm(maps, directory):
    """Write each [N,1,H,W] map in `maps` as binary PGM files.

    maps is a mapping kind-name -> array; files are named
    {sample_index}_{kind}.pgm. Values must already lie in [0,1]; bytes are
    round-half-up of 255 * value. Returns the list of written paths.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    for kind, arr in maps.items():
        arr = np.asarray(arr)
        if arr.ndim != 4 or arr.shape[1] != 1:
            raise ValueError(f"dump_attention_pgm: {kind} must be [N,1,H,W], got {arr.shape}")
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise ValueError(f"dump_attention_pgm: {kind} values outside [0,1]")
        h, w = arr.shape[2], arr.shape[3]
        bytes_ = np.floor(arr * 255.0 + 0.5).astype(np.uint8)  # round half up
        for i in range(arr.shape[0]):
            path = directory / f"{i}_{kind}.pgm"
            with open(path, "wb") as f:
                f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
                f.write(bytes_[i, 0].tobytes())
            written.append(path)
    return written
