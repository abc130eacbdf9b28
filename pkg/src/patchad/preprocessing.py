"""Frame pipeline: block-average downsampling, per-channel standardization,
and in-bounds random 64x64 patch extraction.

All functions are pure; the patch coordinate stream is counter-based so the
same (seed, n) always yields the same coordinates, and the first k draws of
a longer request equal a request for k.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import rng
from .errors import ConfigError, ShapeError

FRAME_EXTENT = 512
PATCH_EXTENT = 64
SCALES = (1, 2, 4, 8)
STANDARDIZE_EPS = 1e-6


@dataclass
class Frame:
    """One camera frame: [C,512,512] float32 intensities in [0,1]."""

    pixels: np.ndarray
    source_id: str
    label: str | None = None

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float32)
        if self.pixels.ndim != 3 or self.pixels.shape[1:] != (FRAME_EXTENT, FRAME_EXTENT):
            raise ShapeError(f"Frame must be (C,{FRAME_EXTENT},{FRAME_EXTENT}), got {self.pixels.shape}")
        if self.pixels.shape[0] not in (1, 3):
            raise ShapeError(f"Frame channels must be 1 or 3, got {self.pixels.shape[0]}")

    @property
    def channels(self) -> int:
        return self.pixels.shape[0]

    @property
    def is_normal(self) -> bool:
        return self.label == "normal"


@dataclass(frozen=True)
class PatchCoords:
    top: int
    left: int
    extent: int = PATCH_EXTENT


def _as_image(image) -> np.ndarray:
    pixels = image.pixels if isinstance(image, Frame) else np.asarray(image)
    if pixels.ndim != 3:
        raise ShapeError(f"expected a (C,H,W) image, got shape {pixels.shape}")
    return pixels


def downsample(image, scale: int) -> np.ndarray:
    """Block-average the image by `scale`; each output pixel is the mean of
    the corresponding scale x scale input block."""
    pixels = _as_image(image)
    if scale not in SCALES:
        raise ConfigError(f"downsample scale must be one of {SCALES}, got {scale}")
    c, h, w = pixels.shape
    if h % scale or w % scale:
        raise ShapeError(f"downsample: {h}x{w} not divisible by scale {scale}")
    if scale == 1:
        return pixels.copy()
    return pixels.reshape(c, h // scale, scale, w // scale, scale).mean(axis=(2, 4))


def standardize(image) -> np.ndarray:
    """Zero mean, unit variance per channel; near-constant channels (std
    below the epsilon guard) map to exactly zero."""
    pixels = _as_image(image)
    mean = pixels.mean(axis=(1, 2), keepdims=True)
    std = pixels.std(axis=(1, 2), keepdims=True)
    eps = np.asarray(STANDARDIZE_EPS, dtype=pixels.dtype)
    out = (pixels - mean) / np.maximum(std, eps)
    return np.where(std < eps, np.zeros((), dtype=pixels.dtype), out)


def sample_patch_coords(height: int, width: int, n: int, rng_seed: int) -> list[PatchCoords]:
    """n patch positions uniform over the valid in-bounds rectangle.

    Each coordinate consumes exactly two uniform doubles from a Philox
    stream keyed by the seed, so shorter requests are prefixes of longer
    ones under the same seed.
    """
    if n < 1:
        raise ConfigError(f"sample_patch_coords: n must be positive, got {n}")
    if height < PATCH_EXTENT or width < PATCH_EXTENT:
        raise ShapeError(f"image {height}x{width} smaller than patch extent {PATCH_EXTENT}")
    top_range = height - PATCH_EXTENT + 1
    left_range = width - PATCH_EXTENT + 1
    draws = rng.stream(rng_seed, "patch-coords").random(2 * n)
    tops = (draws[0::2] * top_range).astype(np.int64)
    lefts = (draws[1::2] * left_range).astype(np.int64)
    return [PatchCoords(int(t), int(l)) for t, l in zip(tops, lefts)]


def extract_patch(image, coords: PatchCoords) -> np.ndarray:
    """Copy out the 64x64 window at coords."""
    pixels = _as_image(image)
    _, h, w = pixels.shape
    if not (0 <= coords.top <= h - coords.extent and 0 <= coords.left <= w - coords.extent):
        raise ShapeError(f"patch at ({coords.top},{coords.left}) extends outside {h}x{w}")
    return pixels[:, coords.top:coords.top + coords.extent,
                  coords.left:coords.left + coords.extent].copy()


def prepare(frame, scale: int) -> np.ndarray:
    """Downsample then standardize: the canonical per-frame pipeline order."""
    return standardize(downsample(frame, scale))
