"""Prompt-chained evaluation of multimodal models on standard vision tasks."""

from chainlens.core import (
    ClassVocabulary,
    LabeledBox,
    PixelBox,
    Point,
    RasterSize,
    box_iou,
    normalize_axis,
)

__version__ = "0.1.0"

__all__ = [
    "ClassVocabulary",
    "LabeledBox",
    "PixelBox",
    "Point",
    "RasterSize",
    "box_iou",
    "normalize_axis",
]
