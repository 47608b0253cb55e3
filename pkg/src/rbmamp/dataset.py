"""Image ingestion (IDX container), support statistics, and synthetic
sparse-signal generation."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass

import numpy as np

IDX_IMAGE_MAGIC = 0x00000803
SIGMA2_FLOOR = 1e-4


class IdxFormatError(ValueError):
    """An IDX byte stream failed a structural check."""


@dataclass(frozen=True)
class ImageSet:
    """Row-major images with pixel values in [0, 1]."""

    images: np.ndarray          # (count, rows * cols)
    rows: int
    cols: int

    def __post_init__(self):
        images = np.asarray(self.images, dtype=np.float64)
        if images.ndim != 2 or images.shape[1] != self.rows * self.cols:
            raise ValueError(
                f"images must have shape (count, {self.rows * self.cols}), "
                f"got {images.shape}"
            )
        if np.any(images < 0.0) or np.any(images > 1.0):
            raise ValueError("pixel values must lie in [0, 1]")
        object.__setattr__(self, "images", images)

    @property
    def count(self):
        return self.images.shape[0]


def parse_idx(data):
    """Decode an IDX image container (optionally gzip-compressed).

    Layout: big-endian u32 magic 0x00000803, u32 count, u32 rows,
    u32 cols, then count*rows*cols unsigned pixel bytes, scaled to
    [0, 1] by 1/255.
    """
    if data[:2] == b"\x1f\x8b":
        data = gzip.decompress(data)
    if len(data) < 4:
        raise IdxFormatError(f"unexpected end of file at offset {len(data)}")
    (magic,) = struct.unpack(">I", data[:4])
    if magic != IDX_IMAGE_MAGIC:
        raise IdxFormatError(
            f"wrong magic 0x{magic:08x} at offset 0, expected 0x{IDX_IMAGE_MAGIC:08x}"
        )
    if len(data) < 16:
        raise IdxFormatError(f"unexpected end of file at offset {len(data)}")
    count, rows, cols = struct.unpack(">III", data[4:16])
    expected = 16 + count * rows * cols
    if len(data) < expected:
        raise IdxFormatError(
            f"truncated payload: file ends at offset {len(data)}, "
            f"expected {expected}"
        )
    if len(data) > expected:
        raise IdxFormatError(
            f"trailing data after offset {expected} ({len(data) - expected} bytes)"
        )
    pixels = np.frombuffer(data, dtype=np.uint8, count=count * rows * cols,
                           offset=16)
    images = pixels.reshape(count, rows * cols).astype(np.float64) / 255.0
    return ImageSet(images=images, rows=rows, cols=cols)


def serialize_idx(imageset):
    """Inverse of parse_idx; round-trips bit-exactly because pixel values
    are multiples of 1/255."""
    header = struct.pack(">IIII", IDX_IMAGE_MAGIC, imageset.count,
                         imageset.rows, imageset.cols)
    pixels = np.rint(imageset.images * 255.0).astype(np.uint8)
    return header + pixels.tobytes()


def load_idx(path):
    with open(path, "rb") as fh:
        return parse_idx(fh.read())


def save_idx(imageset, path):
    with open(path, "wb") as fh:
        fh.write(serialize_idx(imageset))


def binarize(images, threshold=0.0):
    """Support indicator per pixel: 1 where the value exceeds threshold.

    The default threshold 0 marks every non-zero pixel as on-support.
    """
    pixels = images.images if isinstance(images, ImageSet) else np.asarray(images)
    return (pixels > threshold).astype(np.float64)


def fit_gb_params(images, sigma2_floor=SIGMA2_FLOOR):
    """Mean and variance of the pooled non-zero pixel values.

    The variance is floored to keep the slab of the Gauss-Bernoulli
    prior non-degenerate.
    """
    pixels = images.images if isinstance(images, ImageSet) else np.asarray(images)
    nonzero = pixels[pixels > 0.0]
    if nonzero.size == 0:
        raise ValueError("cannot fit slab parameters: no non-zero pixels")
    mu = float(np.mean(nonzero))
    sigma2 = float(np.var(nonzero))
    return mu, max(sigma2, sigma2_floor)


def synth_gb_signal(n, rho, mu, sigma2, rng):
    """Draw a sparse vector: each coordinate is 0 with probability
    1 - rho, otherwise Normal(mu, sigma2)."""
    support = rng.random(n) < rho
    values = mu + np.sqrt(sigma2) * rng.standard_normal(n)
    return np.where(support, values, 0.0)
