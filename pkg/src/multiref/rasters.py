"""Raster images and the exact pixel <-> latent codec.

The codec is a space-to-depth rearrangement followed by the affine map
``value / 127.5 - 1``. It is lossless: ``decode(encode(img)) == img`` for
every valid image.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

PIXEL_SCALE = 127.5


class CodecError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class RasterImage:
    """An H x W x 3 grid of 8-bit RGB pixels."""

    pixels: np.ndarray

    def __post_init__(self) -> None:
        px = np.asarray(self.pixels)
        if px.ndim != 3 or px.shape[2] != 3:
            raise CodecError(f"expected H x W x 3 pixels, got shape {px.shape}")
        if px.dtype != np.uint8:
            if np.issubdtype(px.dtype, np.floating) and not np.all(np.isfinite(px)):
                raise CodecError("pixel values must be finite")
            if px.size and (px.min() < 0 or px.max() > 255):
                raise CodecError("pixel values must lie in [0, 255]")
            if np.issubdtype(px.dtype, np.floating) and np.any(px != np.round(px)):
                raise CodecError("pixel values must be integers")
            px = px.astype(np.uint8)
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    @property
    def height(self) -> int:
        return int(self.pixels.shape[0])

    @property
    def width(self) -> int:
        return int(self.pixels.shape[1])

    @property
    def size(self) -> tuple[int, int]:
        return self.height, self.width

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, RasterImage):
            return NotImplemented
        return self.pixels.shape == other.pixels.shape and bool(np.array_equal(self.pixels, other.pixels))

    def __hash__(self) -> int:
        return hash((self.pixels.shape, self.pixels.tobytes()))

    @classmethod
    def filled(cls, height: int, width: int, color) -> RasterImage:
        px = np.empty((height, width, 3), dtype=np.uint8)
        px[...] = np.asarray(color, dtype=np.uint8)
        return cls(px)


@dataclass(frozen=True, eq=False)
class Latent:
    """rows x cols x channels grid of reals, channels = 3 * patch_pixels**2."""

    values: np.ndarray

    def __post_init__(self) -> None:
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 3:
            raise CodecError(f"latent must be rows x cols x channels, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise CodecError("latent values must be finite")
        object.__setattr__(self, "values", v)

    @property
    def rows(self) -> int:
        return int(self.values.shape[0])

    @property
    def cols(self) -> int:
        return int(self.values.shape[1])

    @property
    def channels(self) -> int:
        return int(self.values.shape[2])

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Latent):
            return NotImplemented
        return self.values.shape == other.values.shape and bool(np.array_equal(self.values, other.values))


def encode(image: RasterImage, patch_pixels: int = 4) -> Latent:
    p = int(patch_pixels)
    if p < 1:
        raise CodecError("patch_pixels must be >= 1")
    h, w = image.size
    if h < p or h % p:
        raise CodecError(f"height {h} is not a positive multiple of patch_pixels={p}")
    if w < p or w % p:
        raise CodecError(f"width {w} is not a positive multiple of patch_pixels={p}")
    blocks = image.pixels.reshape(h // p, p, w // p, p, 3).transpose(0, 2, 1, 3, 4)
    cells = blocks.reshape(h // p, w // p, 3 * p * p).astype(np.float64)
    return Latent(cells / PIXEL_SCALE - 1.0)


def decode(latent: Latent, patch_pixels: int = 4) -> RasterImage:
    p = int(patch_pixels)
    if latent.channels != 3 * p * p:
        raise CodecError(f"latent has {latent.channels} channels, expected {3 * p * p} for patch_pixels={p}")
    rows, cols = latent.rows, latent.cols
    # round half up, then clamp
    px = np.floor((latent.values + 1.0) * PIXEL_SCALE + 0.5)
    px = np.clip(px, 0, 255).astype(np.uint8)
    px = px.reshape(rows, cols, p, p, 3).transpose(0, 2, 1, 3, 4).reshape(rows * p, cols * p, 3)
    return RasterImage(px)


def read_png(path: str | Path) -> RasterImage:
    with Image.open(path) as im:
        if im.format != "PNG":
            raise CodecError(f"{path}: not a PNG file (format {im.format})")
        if im.mode != "RGB":
            raise CodecError(f"{path}: unsupported color type {im.mode!r}; only 8-bit RGB without alpha is accepted")
        return RasterImage(np.array(im, dtype=np.uint8))


def write_png(image: RasterImage, path: str | Path) -> None:
    Image.fromarray(np.ascontiguousarray(image.pixels), mode="RGB").save(path, format="PNG", optimize=False)


def resize(image: RasterImage, height: int, width: int) -> RasterImage:
    """Bilinear resize; returns the input unchanged when the size already matches."""
    if (height, width) == image.size:
        return image
    im = Image.fromarray(np.ascontiguousarray(image.pixels), mode="RGB")
    out = im.resize((width, height), resample=Image.BILINEAR)
    return RasterImage(np.array(out, dtype=np.uint8))
