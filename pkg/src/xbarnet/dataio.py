"""MNIST IDX ingestion, affine augmentation and deterministic rate coding."""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import (ConfigError, CountMismatchError, DimensionMismatchError,
                     ShortReadError, WrongMagicError)

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801
# Emission threshold slack for the rate encoder's accumulator.
RATE_EPS = 1e-9


@dataclass
class ImageBatch:
    """Images ``(n, h, w, ch)`` float32 in [0, 1] with integer labels."""

    images: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise CountMismatchError(
                f"{len(self.images)} images but {len(self.labels)} labels")
        if self.images.ndim == 3:
            self.images = self.images[..., None]

    def __len__(self):
        return len(self.labels)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def flat(self, idx=None) -> np.ndarray:
        """Pixels flattened in ``(row, col, channel)`` order as float64."""
        imgs = self.images if idx is None else self.images[idx]
        return imgs.reshape(len(imgs), -1).astype(np.float64)

    def subset(self, idx) -> "ImageBatch":
        return ImageBatch(self.images[idx], self.labels[idx])


@dataclass(frozen=True)
class AugmentConfig:
    max_rotation_deg: float = 0.0
    max_shift_px: float = 0.0
    max_rescale_frac: float = 0.0

    def __post_init__(self):
        for v in (self.max_rotation_deg, self.max_shift_px, self.max_rescale_frac):
            if not math.isfinite(v) or v < 0:
                raise ConfigError(f"augmentation limits must be finite and >= 0: {self}")

    @property
    def is_identity(self) -> bool:
        return self.max_rotation_deg == 0 and self.max_shift_px == 0 \
            and self.max_rescale_frac == 0


AUGMENT_PRESETS = {
    "none": None,
    "aug1": AugmentConfig(7.5, 2.5, 0.075),
    "aug2": AugmentConfig(15.0, 5.0, 0.15),
}


def _read_idx(path: Path, magic: int, ndims: int) -> tuple[tuple[int, ...], bytes]:
    data = Path(path).read_bytes()
    if len(data) < 4:
        raise ShortReadError(f"{path}: file too short for an IDX header")
    (found,) = struct.unpack(">I", data[:4])
    if found != magic:
        hint = " (gzip-compressed? decompress first)" if data[:2] == b"\x1f\x8b" else ""
        raise WrongMagicError(f"{path}: magic 0x{found:08x}, expected 0x{magic:08x}{hint}")
    header = 4 + 4 * ndims
    if len(data) < header:
        raise ShortReadError(f"{path}: truncated IDX header")
    dims = struct.unpack(">" + "I" * ndims, data[4:header])
    need = header + math.prod(dims)
    if len(data) < need:
        raise ShortReadError(f"{path}: expected {need} bytes, found {len(data)}")
    return dims, data[header:need]


def load_idx(images_path, labels_path, image_shape=(28, 28)) -> ImageBatch:
    """Read a big-endian IDX image/label pair and normalize pixels by 255."""
    dims, pixels = _read_idx(images_path, IMAGES_MAGIC, 3)
    if tuple(dims[1:]) != tuple(image_shape):
        raise DimensionMismatchError(
            f"{images_path}: images are {dims[1]}x{dims[2]}, expected "
            f"{image_shape[0]}x{image_shape[1]}")
    (n_labels,), labels = _read_idx(labels_path, LABELS_MAGIC, 1)
    if n_labels != dims[0]:
        raise CountMismatchError(f"{dims[0]} images but {n_labels} labels")
    raw = np.frombuffer(pixels, dtype=np.uint8).reshape(dims[0], dims[1], dims[2], 1)
    images = raw.astype(np.float32) / np.float32(255.0)
    return ImageBatch(images, np.frombuffer(labels, dtype=np.uint8).astype(np.int64))


def load_mnist(directory, split: str = "train") -> ImageBatch:
    prefix = {"train": "train", "test": "t10k"}[split]
    d = Path(directory)
    return load_idx(d / f"{prefix}-images-idx3-ubyte", d / f"{prefix}-labels-idx1-ubyte")


def image_rng(seed: int, *stream: int) -> np.random.Generator:
    """PCG64 generator keyed by ``(seed, *stream)``, e.g. ``(seed, epoch, index)``."""
    key = [seed & 0xFFFFFFFFFFFFFFFF, *stream]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(key)))


def augment(image: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Random rotation, shift and rescale about the image centre.

    Draws rotation, column shift, row shift and scale (in that order) from
    uniform ranges, resamples bilinearly with zero fill and clamps to [0, 1].
    Accepts ``(h, w)`` or ``(h, w, ch)`` arrays.
    """
    if cfg.is_identity:
        return image.copy()
    theta = math.radians(rng.uniform(-cfg.max_rotation_deg, cfg.max_rotation_deg))
    dx = rng.uniform(-cfg.max_shift_px, cfg.max_shift_px)
    dy = rng.uniform(-cfg.max_shift_px, cfg.max_shift_px)
    scale = rng.uniform(1.0 - cfg.max_rescale_frac, 1.0 + cfg.max_rescale_frac)

    h, w = image.shape[:2]
    center = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    cos, sin = math.cos(theta), math.sin(theta)
    # (row, col) coordinates; maps output pixels back into the input.
    inverse = np.array([[cos, sin], [-sin, cos]]) / scale
    offset = center - inverse @ (center + np.array([dy, dx]))

    def warp(plane):
        return ndimage.affine_transform(plane, inverse, offset=offset, order=1,
                                        mode="constant", cval=0.0)

    if image.ndim == 2:
        out = warp(image.astype(np.float64))
    else:
        out = np.stack([warp(image[..., k].astype(np.float64))
                        for k in range(image.shape[2])], axis=-1)
    return np.clip(out, 0.0, 1.0).astype(image.dtype)


def rate_encode(image, ticks: int) -> np.ndarray:
    """Deterministic error-diffusion rate code.

    Every pixel keeps an accumulator that starts at one half and gains the
    pixel intensity each tick; whenever it exceeds one the pixel spikes and
    the accumulator drops by one.  A pixel of intensity ``p`` therefore fires
    ``round(p * ticks)`` times, with exact halves rounded down.

    Returns ``(ticks, n_pixels)`` uint8 frames over the flattened image.
    """
    if ticks < 1:
        raise ValueError("tick count must be >= 1")
    p = np.asarray(image, dtype=np.float64).reshape(-1)
    if p.size and (p.min() < 0 or p.max() > 1):
        raise ValueError("pixel intensities must lie in [0, 1]")
    frames = np.zeros((ticks, p.size), dtype=np.uint8)
    acc = np.full(p.size, 0.5)
    for t in range(ticks):
        acc += p
        fire = acc > 1.0 + RATE_EPS
        frames[t] = fire
        acc[fire] -= 1.0
    return frames


def rate_encode_batch(flat_images: np.ndarray, ticks: int) -> np.ndarray:
    """Vectorised :func:`rate_encode` over ``(n, pixels)``; returns ``(ticks, n, pixels)``."""
    p = np.asarray(flat_images, dtype=np.float64)
    if ticks < 1:
        raise ValueError("tick count must be >= 1")
    frames = np.zeros((ticks,) + p.shape, dtype=np.uint8)
    acc = np.full(p.shape, 0.5)
    for t in range(ticks):
        acc += p
        fire = acc > 1.0 + RATE_EPS
        frames[t] = fire
        acc -= fire
    return frames
