"""Seeded synthetic datasets for every task, small enough to run offline in seconds."""

from __future__ import annotations

import numpy as np

from chainlens.core import ClassVocabulary, PixelBox, Point, ValidationError
from chainlens.raster_io import FloatRaster, IndexMask

from .dataset import TASKS, Dataset, Sample

CLASS_COLORS = {
    "apple": (220, 40, 40),
    "leaf": (40, 170, 60),
    "sky": (60, 110, 230),
    "sand": (230, 200, 90),
    "plum": (140, 50, 160),
    "orange": (245, 140, 30),
    "teal": (30, 170, 170),
    "stone": (120, 120, 120),
    "rose": (240, 120, 170),
    "wood": (120, 75, 40),
}
DEFAULT_SIZE = 96
MIN_BOX_FRACTION = 0.05


def default_vocab() -> ClassVocabulary:
    return ClassVocabulary(tuple(CLASS_COLORS))


def _noise(rng: np.random.Generator, shape, scale: float) -> np.ndarray:
    return rng.normal(0.0, scale, size=shape)


def _to_u8(x: np.ndarray) -> np.ndarray:
    return np.clip(np.round(x), 0, 255).astype(np.uint8)


def _colors(vocab: ClassVocabulary) -> np.ndarray:
    return np.array([CLASS_COLORS[n] for n in vocab], dtype=float)


def classification(n: int, seed: int, size: int = DEFAULT_SIZE) -> Dataset:
    rng = np.random.default_rng(seed)
    vocab = default_vocab()
    colors = _colors(vocab)
    samples = []
    for i in range(n):
        c = int(rng.integers(len(vocab)))
        img = colors[c] + _noise(rng, (size, size, 3), 12.0)
        samples.append(Sample(f"cls{i:05d}", _to_u8(img), label=vocab.name_of(c)))
    return Dataset("classification", vocab, samples)


def random_box(rng: np.random.Generator, size: int, min_fraction: float = MIN_BOX_FRACTION) -> PixelBox:
    """Uniformly placed box covering at least ``min_fraction`` of a size x size image."""
    while True:
        w = int(rng.integers(max(2, size // 8), size + 1))
        h = int(rng.integers(max(2, size // 8), size + 1))
        if w * h >= min_fraction * size * size:
            break
    x0 = int(rng.integers(0, size - w + 1))
    y0 = int(rng.integers(0, size - h + 1))
    return PixelBox(x0, y0, x0 + w, y0 + h)


def detection(n: int, seed: int, size: int = DEFAULT_SIZE, max_objects: int = 3) -> Dataset:
    rng = np.random.default_rng(seed)
    vocab = default_vocab()
    colors = _colors(vocab)
    samples = []
    for i in range(n):
        img = 200.0 + _noise(rng, (size, size, 3), 10.0)
        count = int(rng.integers(1, max_objects + 1))
        classes = rng.choice(len(vocab), size=count, replace=False)
        boxes = []
        for c in classes:
            box = random_box(rng, size)
            img[box.slices()] = colors[c] + _noise(rng, (box.height, box.width, 3), 8.0)
            boxes.append((vocab.name_of(int(c)), box))
        samples.append(Sample(f"det{i:05d}", _to_u8(img), boxes=boxes))
    return Dataset("detection", vocab, samples)


def _voronoi(rng: np.random.Generator, size: int, cells: int) -> np.ndarray:
    seeds = rng.uniform(0, size, size=(cells, 2))
    yy, xx = np.mgrid[0:size, 0:size]
    d = (xx[..., None] - seeds[:, 0]) ** 2 + (yy[..., None] - seeds[:, 1]) ** 2
    return np.argmin(d, axis=-1)


def segmentation(n: int, seed: int, size: int = DEFAULT_SIZE) -> Dataset:
    rng = np.random.default_rng(seed)
    vocab = default_vocab()
    colors = _colors(vocab)
    samples = []
    for i in range(n):
        cells = _voronoi(rng, size, int(rng.integers(3, 9)))
        cell_class = rng.integers(len(vocab), size=cells.max() + 1)
        labels = cell_class[cells]
        img = colors[labels] + _noise(rng, (size, size, 3), 10.0)
        samples.append(Sample(f"seg{i:05d}", _to_u8(img), semantic=IndexMask(labels)))
    return Dataset("segmentation", vocab, samples)


def grouping(n: int, seed: int, size: int = DEFAULT_SIZE) -> Dataset:
    rng = np.random.default_rng(seed)
    samples = []
    for i in range(n):
        cells = _voronoi(rng, size, int(rng.integers(3, 7)))
        palette = rng.uniform(30, 225, size=(cells.max() + 1, 3))
        img = palette[cells] + _noise(rng, (size, size, 3), 8.0)
        y, x = int(rng.integers(size)), int(rng.integers(size))
        instance = cells == cells[y, x]
        samples.append(Sample(f"grp{i:05d}", _to_u8(img), instance=instance, point=Point(x, y)))
    return Dataset("grouping", None, samples)


def depth_field(rng: np.random.Generator, size: int) -> np.ndarray:
    """Positive smooth field: a tilted plane plus two low-frequency sinusoids."""
    v, u = np.mgrid[0:size, 0:size] / float(size - 1)
    a, b = rng.uniform(-2.0, 2.0, size=2)
    field = 4.0 + a * u + b * v
    for _ in range(2):
        fu, fv = rng.uniform(0.5, 2.0, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        field += rng.uniform(0.3, 1.0) * np.sin(2 * np.pi * (fu * u + fv * v) + phase)
    return np.maximum(field, 0.5)


def depth(n: int, seed: int, size: int = DEFAULT_SIZE) -> Dataset:
    rng = np.random.default_rng(seed)
    samples = []
    for i in range(n):
        d = depth_field(rng, size)
        t = (d - d.min()) / max(d.max() - d.min(), 1e-9)
        # near is warm, far is cool
        img = np.stack([255 * (1 - t), 80 + 60 * np.sin(np.pi * t), 255 * t], axis=-1)
        img += _noise(rng, img.shape, 6.0)
        samples.append(Sample(f"dep{i:05d}", _to_u8(img), depth=FloatRaster(d)))
    return Dataset("depth", None, samples)


def sphere_normals(size: int, cx: float, cy: float, r: float) -> np.ndarray:
    """Unit normals of a sphere in front of a fronto-parallel plane; x right, y down, z toward the camera."""
    yy, xx = np.mgrid[0:size, 0:size].astype(float)
    nx = (xx + 0.5 - cx) / r
    ny = (yy + 0.5 - cy) / r
    inside = nx**2 + ny**2 < 1.0
    out = np.zeros((size, size, 3))
    out[..., 2] = 1.0
    out[inside, 0] = nx[inside]
    out[inside, 1] = ny[inside]
    out[inside, 2] = np.sqrt(1.0 - nx[inside] ** 2 - ny[inside] ** 2)
    return out


def normals(n: int, seed: int, size: int = DEFAULT_SIZE) -> Dataset:
    rng = np.random.default_rng(seed)
    samples = []
    for i in range(n):
        r = rng.uniform(0.25, 0.4) * size
        cx, cy = rng.uniform(r, size - r, size=2)
        nrm = sphere_normals(size, cx, cy, r)
        light = np.array([-0.4, -0.5, 0.77])
        light /= np.linalg.norm(light)
        shade = np.clip(nrm @ light, 0.0, 1.0)
        base = np.where((nrm[..., 2] < 1.0)[..., None], np.array([200.0, 90.0, 60.0]), np.array([90.0, 140.0, 200.0]))
        # encode the normal direction in the colors too, so the image carries the signal
        img = base * (0.35 + 0.65 * shade[..., None]) + 40.0 * nrm[..., :1] + _noise(rng, (size, size, 3), 4.0)
        rasters = tuple(FloatRaster(nrm[..., a]) for a in range(3))
        samples.append(Sample(f"nrm{i:05d}", _to_u8(img), normals=rasters))
    return Dataset("normals", None, samples)


GENERATORS = {
    "classification": classification,
    "detection": detection,
    "segmentation": segmentation,
    "grouping": grouping,
    "depth": depth,
    "normals": normals,
}

DEFAULT_COUNTS = {"classification": 100, "detection": 50, "segmentation": 20, "grouping": 10, "depth": 10, "normals": 5}


def generate(task: str, n: int, seed: int, size: int = DEFAULT_SIZE) -> Dataset:
    if task not in GENERATORS:
        raise ValidationError(f"unknown task {task!r}; expected one of {TASKS}")
    if n < 1:
        raise ValidationError("n must be at least 1")
    if size < 8:
        raise ValidationError("size must be at least 8")
    return GENERATORS[task](n, seed, size)
