"""Shared value types, box geometry and normalized report scores."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


class ValidationError(ValueError):
    """Raised when an input violates a type invariant."""


@dataclass(frozen=True)
class RasterSize:
    width: int
    height: int

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValidationError(f"raster size must be positive, got {self.width}x{self.height}")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    @classmethod
    def of(cls, array: np.ndarray) -> "RasterSize":
        return cls(width=int(array.shape[1]), height=int(array.shape[0]))


@dataclass(frozen=True, order=True)
class PixelBox:
    """Integer rectangle, half-open on the max edges."""

    x_min: int
    y_min: int
    x_max: int
    y_max: int

    def __post_init__(self):
        for name in ("x_min", "y_min", "x_max", "y_max"):
            value = getattr(self, name)
            if int(value) != value:
                raise ValidationError(f"{name} must be an integer, got {value!r}")
            object.__setattr__(self, name, int(value))
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValidationError(f"degenerate box {self.as_tuple()}")

    @property
    def width(self) -> int:
        return self.x_max - self.x_min

    @property
    def height(self) -> int:
        return self.y_max - self.y_min

    @property
    def area(self) -> int:
        return self.width * self.height

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    def intersection(self, other: "PixelBox") -> "PixelBox | None":
        x0, y0 = max(self.x_min, other.x_min), max(self.y_min, other.y_min)
        x1, y1 = min(self.x_max, other.x_max), min(self.y_max, other.y_max)
        if x0 >= x1 or y0 >= y1:
            return None
        return PixelBox(x0, y0, x1, y1)

    def intersects(self, other: "PixelBox") -> bool:
        return self.intersection(other) is not None

    def contains(self, other: "PixelBox") -> bool:
        return (
            self.x_min <= other.x_min
            and self.y_min <= other.y_min
            and self.x_max >= other.x_max
            and self.y_max >= other.y_max
        )

    def within(self, size: RasterSize) -> bool:
        return self.x_min >= 0 and self.y_min >= 0 and self.x_max <= size.width and self.y_max <= size.height

    def slices(self) -> tuple[slice, slice]:
        """Row/column slices selecting this box from a row-major array."""
        return slice(self.y_min, self.y_max), slice(self.x_min, self.x_max)

    @classmethod
    def full(cls, size: RasterSize) -> "PixelBox":
        return cls(0, 0, size.width, size.height)

    @classmethod
    def cover(cls, boxes: Iterable["PixelBox"]) -> "PixelBox":
        boxes = list(boxes)
        if not boxes:
            raise ValidationError("cannot cover an empty set of boxes")
        return cls(
            min(b.x_min for b in boxes),
            min(b.y_min for b in boxes),
            max(b.x_max for b in boxes),
            max(b.y_max for b in boxes),
        )

    @classmethod
    def of_mask(cls, mask: np.ndarray) -> "PixelBox":
        """Tight bounding box of the true pixels of a boolean mask."""
        rows = np.flatnonzero(mask.any(axis=1))
        cols = np.flatnonzero(mask.any(axis=0))
        if rows.size == 0:
            raise ValidationError("mask is empty")
        return cls(int(cols[0]), int(rows[0]), int(cols[-1]) + 1, int(rows[-1]) + 1)


@dataclass(frozen=True)
class LabeledBox:
    box: PixelBox
    class_id: int
    score: float = 1.0

    def __post_init__(self):
        if self.class_id < 0:
            raise ValidationError(f"class_id must be non-negative, got {self.class_id}")
        if not 0.0 <= self.score <= 1.0:
            raise ValidationError(f"score must lie in [0, 1], got {self.score}")


@dataclass(frozen=True)
class Point:
    x: int
    y: int

    def within(self, size: RasterSize) -> bool:
        return 0 <= self.x < size.width and 0 <= self.y < size.height


@dataclass(frozen=True)
class ClassVocabulary:
    names: tuple[str, ...]
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        names = tuple(str(n) for n in self.names)
        if not names:
            raise ValidationError("vocabulary is empty")
        if any(not n.strip() for n in names):
            raise ValidationError("vocabulary contains a blank class name")
        if len(set(names)) != len(names):
            dupes = sorted({n for n in names if names.count(n) > 1})
            raise ValidationError(f"duplicate class names: {dupes}")
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "_index", {n: i for i, n in enumerate(names)})

    def __len__(self) -> int:
        return len(self.names)

    def __iter__(self):
        return iter(self.names)

    def __contains__(self, name) -> bool:
        return name in self._index

    def id_of(self, name: str) -> int:
        try:
            return self._index[name]
        except KeyError:
            raise KeyError(f"unknown class {name!r}") from None

    def name_of(self, class_id: int) -> str:
        return self.names[class_id]

    @classmethod
    def load(cls, path: str | Path) -> "ClassVocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        # a trailing blank line is tolerated, interior blanks are not
        while lines and not lines[-1].strip():
            lines.pop()
        return cls(tuple(line.strip() for line in lines))

    def save(self, path: str | Path) -> None:
        Path(path).write_text("".join(n + "\n" for n in self.names), encoding="utf-8")


def box_iou(a: PixelBox, b: PixelBox) -> float:
    inter = a.intersection(b)
    if inter is None:
        return 0.0
    i = inter.area
    return i / (a.area + b.area - i)


LOWER_IS_BETTER = frozenset({"AbsRel", "abs_rel"})


def normalize_axis(value: float, blind: float, specialist: float, lower_is_better: bool = False) -> float:
    """Map a metric onto [0, 1] between the blind-guess and specialist anchors.

    For lower-is-better metrics all three values are negated first so that the
    specialist still maps to 1.
    """
    if lower_is_better:
        value, blind, specialist = -value, -blind, -specialist
    if specialist == blind:
        raise ValidationError(f"degenerate normalization anchors: blind == specialist == {blind}")
    score = (value - blind) / (specialist - blind)
    return float(min(1.0, max(0.0, score)))


def check_image(image, name: str = "image") -> np.ndarray:
    """Validate an RGB image and return it as a contiguous uint8 array of shape (H, W, 3)."""
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValidationError(f"{name} must have shape (H, W, 3), got {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValidationError(f"{name} is empty")
    if arr.dtype != np.uint8:
        if np.issubdtype(arr.dtype, np.floating) and arr.size and arr.max() <= 1.0:
            arr = np.round(arr * 255.0)
        arr = np.clip(arr, 0, 255).astype(np.uint8)
    return np.ascontiguousarray(arr)


def check_raster(values, name: str = "raster", size: RasterSize | None = None) -> np.ndarray:
    arr = np.asarray(values)
    if arr.ndim != 2:
        raise ValidationError(f"{name} must be 2-D, got shape {arr.shape}")
    if size is not None and arr.shape != size.shape:
        raise ValidationError(f"{name} has shape {arr.shape}, expected {size.shape}")
    return arr


def check_same_shape(*arrays: np.ndarray, names: Sequence[str] | None = None) -> None:
    shapes = {a.shape for a in arrays}
    if len(shapes) > 1:
        label = ", ".join(names) if names else "inputs"
        raise ValidationError(f"shape mismatch between {label}: {[a.shape for a in arrays]}")
