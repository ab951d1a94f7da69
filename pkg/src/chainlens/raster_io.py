"""Raster persistence (PFM float maps, PNG index masks) and fill-mask decoding."""

from __future__ import annotations

import io
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage
from skimage.color import rgb2hsv

from chainlens.core import ClassVocabulary, RasterSize, ValidationError, check_image

DEFAULT_IGNORE_INDEX = 255


class RasterFormatError(ValueError):
    """Malformed or unsupported raster file."""


@dataclass(eq=False)
class FloatRaster:
    values: np.ndarray
    valid: np.ndarray | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 2:
            raise ValidationError(f"float raster must be 2-D, got {self.values.shape}")
        if self.valid is not None:
            self.valid = np.asarray(self.valid, dtype=bool)
            if self.valid.shape != self.values.shape:
                raise ValidationError("validity mask shape does not match raster")

    @property
    def size(self) -> RasterSize:
        return RasterSize.of(self.values)

    def valid_mask(self) -> np.ndarray:
        finite = np.isfinite(self.values)
        return finite if self.valid is None else finite & self.valid


@dataclass(eq=False)
class IndexMask:
    labels: np.ndarray
    ignore_index: int = DEFAULT_IGNORE_INDEX

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 2:
            raise ValidationError(f"index mask must be 2-D, got {labels.shape}")
        if labels.size and (labels.min() < 0 or labels.max() > 0xFFFF):
            raise ValidationError("index mask labels must fit in 16 bits")
        self.labels = labels.astype(np.uint16)

    @property
    def size(self) -> RasterSize:
        return RasterSize.of(self.labels)

    def validate(self, vocab: ClassVocabulary) -> "IndexMask":
        bad = (self.labels != self.ignore_index) & (self.labels >= len(vocab))
        if bad.any():
            offending = int(self.labels[bad].max())
            raise ValidationError(
                f"mask label {offending} out of range for a {len(vocab)}-class vocabulary"
            )
        return self


# -- PFM ---------------------------------------------------------------------

_PFM_HEADER = re.compile(rb"\A(P[fF])\s+(\d+)\s+(\d+)\s+(\S+)\s")


def write_pfm(raster: FloatRaster | np.ndarray, path: str | Path) -> None:
    """Write a single-channel PFM, little-endian, rows stored bottom-to-top."""
    if not isinstance(raster, FloatRaster):
        raster = FloatRaster(raster)
    values = raster.values.copy()
    if raster.valid is not None:
        values[~raster.valid] = np.nan
    h, w = values.shape
    header = f"Pf\n{w} {h}\n-1.0\n".encode("ascii")
    payload = np.flipud(values).astype("<f4").tobytes()
    Path(path).write_bytes(header + payload)


def read_pfm(path: str | Path) -> FloatRaster:
    data = Path(path).read_bytes()
    match = _PFM_HEADER.match(data)
    if match is None:
        raise RasterFormatError(f"{path}: malformed PFM header")
    tag, w, h, scale_text = match.groups()
    if tag == b"PF":
        raise RasterFormatError(f"{path}: color PFM ('PF') is not supported, expected 'Pf'")
    width, height = int(w), int(h)
    if width < 1 or height < 1:
        raise RasterFormatError(f"{path}: invalid PFM dimensions {width}x{height}")
    try:
        scale = float(scale_text)
    except ValueError:
        raise RasterFormatError(f"{path}: invalid PFM scale {scale_text!r}") from None
    if scale == 0:
        raise RasterFormatError(f"{path}: PFM scale must be non-zero")
    dtype = "<f4" if scale < 0 else ">f4"
    offset = match.end()
    expected = width * height * 4
    payload = data[offset : offset + expected]
    if len(payload) < expected:
        raise RasterFormatError(f"{path}: truncated PFM payload ({len(payload)} of {expected} bytes)")
    values = np.flipud(np.frombuffer(payload, dtype=dtype).reshape(height, width)).astype(np.float32)
    finite = np.isfinite(values)
    return FloatRaster(values, None if finite.all() else finite)


# -- PNG masks ---------------------------------------------------------------


def write_mask_png(mask: IndexMask, path: str | Path) -> None:
    labels = mask.labels
    if labels.size and labels.max() > 255:
        img = Image.fromarray(labels.astype(np.uint16))
    else:
        img = Image.fromarray(labels.astype(np.uint8))
    img.save(path, format="PNG")


def read_mask_png(
    path: str | Path, vocab: ClassVocabulary | None = None, ignore_index: int = DEFAULT_IGNORE_INDEX
) -> IndexMask:
    with Image.open(path) as img:
        if img.mode not in ("L", "P", "I", "I;16", "I;16B", "I;16L"):
            raise RasterFormatError(f"{path}: expected a single-channel PNG, got mode {img.mode}")
        labels = np.array(img)
    if labels.ndim != 2:
        raise RasterFormatError(f"{path}: expected a single-channel PNG")
    mask = IndexMask(labels.astype(np.int64), ignore_index=ignore_index)
    if vocab is not None:
        mask.validate(vocab)
    return mask


def write_binary_png(mask: np.ndarray, path: str | Path) -> None:
    Image.fromarray(np.asarray(mask, dtype=bool).astype(np.uint8) * 255).save(path, format="PNG")


def read_binary_png(path: str | Path) -> np.ndarray:
    with Image.open(path) as img:
        return np.array(img.convert("L")) > 127


def read_image(path: str | Path) -> np.ndarray:
    with Image.open(path) as img:
        return np.array(img.convert("RGB"))


def write_image(image: np.ndarray, path: str | Path) -> None:
    Image.fromarray(check_image(image)).save(path, format="PNG")


def encode_png(image: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(check_image(image)).save(buf, format="PNG")
    return buf.getvalue()


# -- generation-model decode -------------------------------------------------


def pad_to_square(image: np.ndarray, fill: int = 0) -> tuple[np.ndarray, tuple[int, int]]:
    """Zero-pad to S x S, S = max(w, h), content centered.

    Returns the padded image and the (x, y) offset of the original content.
    """
    image = np.asarray(image)
    h, w = image.shape[:2]
    side = max(h, w)
    ox, oy = (side - w) // 2, (side - h) // 2
    out = np.full((side, side) + image.shape[2:], fill, dtype=image.dtype)
    out[oy : oy + h, ox : ox + w] = image
    return out, (ox, oy)


def crop_from_square(image: np.ndarray, offset: tuple[int, int], size: RasterSize) -> np.ndarray:
    ox, oy = offset
    return np.asarray(image)[oy : oy + size.height, ox : ox + size.width].copy()


def largest_component(mask: np.ndarray) -> np.ndarray:
    """Keep the largest 4-connected component; ties go to the first in raster order."""
    labeled, n = ndimage.label(mask)
    if n == 0:
        return np.zeros(mask.shape, dtype=bool)
    counts = np.bincount(labeled.ravel())
    counts[0] = 0
    return labeled == int(np.argmax(counts))


def extract_fill_mask(
    image: np.ndarray,
    hue_window: tuple[float, float] = (0.0, 10.0),
    min_saturation: float = 0.5,
    min_value: float = 0.3,
) -> np.ndarray:
    """Threshold a solid-color fill in HSV and keep its largest component.

    ``hue_window`` is (center, half width) in degrees; it wraps around 360.
    """
    hsv = rgb2hsv(check_image(image))
    hue = hsv[..., 0] * 360.0
    center, half = hue_window
    delta = np.abs((hue - center + 180.0) % 360.0 - 180.0)
    hit = (delta <= half) & (hsv[..., 1] >= min_saturation) & (hsv[..., 2] >= min_value)
    return largest_component(hit)
