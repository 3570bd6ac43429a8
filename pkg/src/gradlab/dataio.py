"""IDX image/label files and seeded synthetic datasets."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

# IDX type byte -> big-endian numpy dtype
IDX_DTYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}


class IdxFormatError(ValueError):
    pass


class IdxMagicError(IdxFormatError):
    pass


class IdxTruncatedError(IdxFormatError):
    pass


class CountMismatchError(IdxFormatError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # (n, h, w), float64 in [0, 1]
    labels: np.ndarray  # (n,), int64
    class_count: int

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 3:
            raise ValueError(f"images must have shape (n, h, w), got {self.images.shape}")
        if len(self.labels) != len(self.images):
            raise CountMismatchError(
                f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ValueError("label outside [0, class_count)")
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise ValueError("pixel values outside [0, 1]")

    def __len__(self):
        return len(self.labels)

    @property
    def image_shape(self) -> tuple[int, int]:
        return self.images.shape[1], self.images.shape[2]

    @property
    def flat(self) -> np.ndarray:
        return self.images.reshape(len(self.images), -1)

    def subset(self, start: int, stop: int) -> "Dataset":
        return Dataset(self.images[start:stop], self.labels[start:stop], self.class_count)


def read_idx(path) -> np.ndarray:
    """Parse one IDX file into an array with its native dtype and shape."""
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise IdxTruncatedError(f"{path}: file shorter than the 4-byte magic")
    if raw[0] != 0 or raw[1] != 0:
        raise IdxMagicError(f"{path}: bad magic {raw[:4].hex()}")
    dtype = IDX_DTYPES.get(raw[2])
    if dtype is None:
        raise IdxMagicError(f"{path}: unknown IDX data type 0x{raw[2]:02x}")
    rank = raw[3]
    header_len = 4 + 4 * rank
    if len(raw) < header_len:
        raise IdxTruncatedError(f"{path}: truncated dimension header")
    shape = struct.unpack(f">{rank}I", raw[4:header_len])
    count = int(np.prod(shape, dtype=np.int64))
    need = header_len + count * dtype.itemsize
    if len(raw) < need:
        raise IdxTruncatedError(f"{path}: expected {need} bytes, found {len(raw)}")
    if len(raw) > need:
        raise IdxFormatError(f"{path}: {len(raw) - need} trailing bytes")
    return np.frombuffer(raw, dtype=dtype, count=count, offset=header_len).reshape(shape)


def write_idx(path, array: np.ndarray) -> None:
    array = np.asarray(array)
    for code, dtype in IDX_DTYPES.items():
        if array.dtype.newbyteorder(">") == dtype or array.dtype == dtype:
            break
    else:
        raise ValueError(f"no IDX type for dtype {array.dtype}")
    header = bytes([0, 0, code, array.ndim]) + struct.pack(f">{array.ndim}I", *array.shape)
    Path(path).write_bytes(header + array.astype(dtype).tobytes())


def load_idx(images_path, labels_path, class_count: int | None = None) -> Dataset:
    """Load an IDX image/label pair; unsigned-byte pixels are scaled by 1/255."""
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if images.ndim != 3:
        raise IdxFormatError(f"{images_path}: expected rank-3 image data, got rank {images.ndim}")
    if labels.ndim != 1:
        raise IdxFormatError(f"{labels_path}: expected rank-1 label data, got rank {labels.ndim}")
    if len(images) != len(labels):
        raise CountMismatchError(f"{len(images)} images but {len(labels)} labels")
    if images.dtype.kind == "u" and images.dtype.itemsize == 1:
        pixels = images.astype(np.float64) / 255.0
    else:
        pixels = np.clip(images.astype(np.float64), 0.0, 1.0)
    if class_count is None:
        class_count = int(labels.max()) + 1 if len(labels) else 0
    return Dataset(pixels, labels.astype(np.int64), class_count)


def save_idx(dataset: Dataset, images_path, labels_path) -> None:
    """Write a dataset back out as unsigned-byte IDX files."""
    pixels = np.rint(dataset.images * 255.0).astype(np.uint8)
    write_idx(images_path, pixels)
    write_idx(labels_path, dataset.labels.astype(np.uint8))


def synth_blobs(rng: np.random.Generator, n: int, C: int, h: int = 28, w: int = 28,
                noise: float = 0.35, smooth: float = 2.0, modes: int = 2,
                templates: np.ndarray | None = None) -> Dataset:
    """Noisy samples around smooth per-class pixel templates.

    Each class owns ``modes`` templates drawn as Gaussian-blurred Gaussian
    fields; a sample picks a class uniformly, one of its templates, and adds
    blurred per-pixel noise before clamping to [0, 1]. Pass ``templates``
    (shape ``(C, modes, h, w)``) to draw fresh samples around the same classes.
    """
    if templates is None:
        templates = blob_templates(rng, C, h, w, smooth=smooth, modes=modes)
    C, modes = templates.shape[:2]
    if n == 0:
        return Dataset(np.zeros((0, h, w)), np.zeros(0, dtype=np.int64), C)
    labels = rng.integers(0, C, size=n)
    which = rng.integers(0, modes, size=n)
    field = rng.standard_normal((n, h, w))
    field = gaussian_filter(field, sigma=(0, smooth / 2, smooth / 2), mode="wrap")
    field /= field.std(axis=(1, 2), keepdims=True)
    images = templates[labels, which] + noise * 0.5 * field
    return Dataset(np.clip(images, 0.0, 1.0), labels, C)


def blob_templates(rng: np.random.Generator, C: int, h: int, w: int,
                   smooth: float = 2.0, modes: int = 2) -> np.ndarray:
    base = rng.standard_normal((C * modes, h, w))
    base = gaussian_filter(base, sigma=(0, smooth, smooth), mode="wrap")
    base /= base.std(axis=(1, 2), keepdims=True)
    return (0.5 + 0.2 * base).reshape(C, modes, h, w)
