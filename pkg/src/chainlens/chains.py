"""Task chains: each vision task reduced to a sequence of backend queries."""

from __future__ import annotations

import functools
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from chainlens.backend import (
    BINARY_RELATIONS,
    TERNARY_RELATIONS,
    ChoiceItem,
    InvalidAnswer,
    MultiChoice,
    MultiLabel,
    PairOrder,
    Presence,
    SameObject,
    Session,
)
from chainlens.core import ClassVocabulary, LabeledBox, PixelBox, Point, RasterSize, ValidationError, check_image
from chainlens.globalize import Comparison, RankField, Weights, floodfill_ranks, globalize
from chainlens.raster_io import DEFAULT_IGNORE_INDEX, FloatRaster, IndexMask
from chainlens.superpixel import SuperpixelMap, adjacency, sample_pairs, slic

STRATEGIES = ("whole", "regions")


class NotFound(LookupError):
    """Every cell of the first grid was answered "no"."""


@dataclass(frozen=True)
class GridParams:
    """Recursive grid search settings.

    The fine grid is given as rows x cols and alternates with its transpose.
    Its outer strips take ``fine_outer`` of the window each, so a window that
    is already tight on the coarse grid can still lose a thin margin.
    """

    coarse: tuple[int, int] = (3, 3)
    fine: tuple[int, int] = (1, 3)
    fine_outer: float = 0.15
    max_iterations: int = 10
    min_window: int = 4

    def __post_init__(self):
        if min(self.coarse) < 1 or min(self.fine) < 1:
            raise ValidationError("grid dimensions must be at least 1")
        if self.max_iterations < 1 or self.min_window < 1:
            raise ValidationError("max_iterations and min_window must be at least 1")
        if not 0.0 < self.fine_outer <= 0.5:
            raise ValidationError("fine_outer must lie in (0, 0.5]")


def _cuts(lo: int, hi: int, n: int, outer: float | None) -> list[int]:
    span = hi - lo
    if outer is None or n < 3:
        fracs = np.linspace(0.0, 1.0, n + 1)
    else:
        fracs = np.concatenate([[0.0], np.linspace(outer, 1.0 - outer, n - 1), [1.0]])
    return [lo + int(round(f * span)) for f in fracs]


def grid_cells(window: PixelBox, rows: int, cols: int, outer: float | None = None) -> list[PixelBox]:
    """Partition ``window`` into rows x cols cells in raster order, skipping empty ones."""
    xs = _cuts(window.x_min, window.x_max, cols, outer)
    ys = _cuts(window.y_min, window.y_max, rows, outer)
    return [
        PixelBox(xs[c], ys[r], xs[c + 1], ys[r + 1])
        for r in range(rows)
        for c in range(cols)
        if xs[c + 1] > xs[c] and ys[r + 1] > ys[r]
    ]


# -- classification ------------------------------------------------------------


def classify_batch(
    images: Sequence[np.ndarray],
    image_ids: Sequence[str],
    vocab: ClassVocabulary,
    session: Session,
    batch_size: int = 100,
) -> list[str]:
    """One label per image, ``batch_size`` images per query."""
    if batch_size < 1:
        raise ValidationError("batch_size must be at least 1")
    if len(images) != len(image_ids):
        raise ValidationError("images and image_ids differ in length")
    options = tuple(vocab)
    labels: list[str] = []
    for start in range(0, len(images), batch_size):
        items = tuple(
            ChoiceItem(iid, check_image(img)) for iid, img in zip(image_ids[start : start + batch_size], images[start : start + batch_size])
        )
        labels.extend(session.answer(MultiChoice(items, options)).value)
    return labels


# -- detection -----------------------------------------------------------------


def list_regions(size: RasterSize) -> list[PixelBox]:
    """Four quadrants and a centered half-size crop."""
    w, h = size.width, size.height
    mx, my = max(1, w // 2), max(1, h // 2)
    boxes = [PixelBox(0, 0, mx, my), PixelBox(mx, 0, w, my), PixelBox(0, my, mx, h), PixelBox(mx, my, w, h)]
    cx0, cy0 = w // 4, h // 4
    boxes.append(PixelBox(cx0, cy0, max(cx0 + 1, w - w // 4), max(cy0 + 1, h - h // 4)))
    return [b for b in boxes if b.x_max > b.x_min and b.y_max > b.y_min and b.within(size)]


def list_objects(
    image: np.ndarray, image_id: str, vocab: ClassVocabulary, session: Session, strategy: str = "regions"
) -> list[str]:
    """Classes reported present, in vocabulary order."""
    if strategy not in STRATEGIES:
        raise ValidationError(f"strategy must be one of {STRATEGIES}")
    image = check_image(image)
    size = RasterSize.of(image)
    windows = [PixelBox.full(size)] if strategy == "whole" else list_regions(size)
    options = tuple(vocab)
    answers = session.answer_many([MultiLabel(image_id, image, w, options) for w in windows])
    found = set().union(*(a.value for a in answers))
    return [c for c in vocab if c in found]


@dataclass
class LocateTrace:
    box: PixelBox
    windows: list[PixelBox]
    queries: int


def locate_trace(image: np.ndarray, image_id: str, class_name: str, session: Session, grid: GridParams = GridParams()) -> LocateTrace:
    """Recursive grid search, returning every intermediate window.

    Coarse grids repeat while they shrink the window; then the two fine
    orientations alternate until two fine steps in a row discard nothing.
    """
    image = check_image(image)
    window = PixelBox.full(RasterSize.of(image))
    windows = [window]
    queries = 0
    fine_phase, idle, flip = False, 0, False
    for step in range(grid.max_iterations):
        if max(window.width, window.height) <= grid.min_window:
            break
        if fine_phase:
            rows, cols = grid.fine[::-1] if flip else grid.fine
            cells = grid_cells(window, rows, cols, grid.fine_outer)
        else:
            cells = grid_cells(window, *grid.coarse)
        answers = session.answer_many([Presence(image_id, image, c, class_name) for c in cells])
        queries += len(cells)
        hits = [c for c, a in zip(cells, answers) if a.value]
        if not hits:
            if step == 0:
                raise NotFound(f"no grid cell contains {class_name!r}")
            break
        shrunk = PixelBox.cover(hits)
        progressed = shrunk.area < window.area
        window = shrunk
        windows.append(window)
        if not fine_phase:
            fine_phase = not progressed
        else:
            idle = 0 if progressed else idle + 1
            flip = not flip
            if idle >= 2:
                break
    return LocateTrace(window, windows, queries)


def locate_object(image: np.ndarray, image_id: str, class_name: str, session: Session, grid: GridParams = GridParams()) -> PixelBox:
    return locate_trace(image, image_id, class_name, session, grid).box


@dataclass
class DetectionOutcome:
    boxes: list[LabeledBox]
    not_found: list[str] = field(default_factory=list)


def detect(
    image: np.ndarray,
    image_id: str,
    vocab: ClassVocabulary,
    session: Session,
    strategy: str = "regions",
    grid: GridParams = GridParams(),
) -> DetectionOutcome:
    """List the classes present, then localize one box per class. Scores are constant 1.0."""
    boxes, missing = [], []
    for name in list_objects(image, image_id, vocab, session, strategy):
        try:
            box = locate_object(image, image_id, name, session, grid)
        except NotFound:
            missing.append(name)
            continue
        boxes.append(LabeledBox(box, vocab.id_of(name), 1.0))
    return DetectionOutcome(boxes, missing)


# -- segmentation --------------------------------------------------------------


@dataclass
class SegmentationOutcome:
    mask: IndexMask
    superpixels: SuperpixelMap
    labels: np.ndarray  # per-superpixel class id, ignore_index where no answer was obtained


def _answer_items(session: Session, query: MultiChoice) -> list[str | None]:
    """Per-item answers; items that stay unparsable come back as None."""
    try:
        return list(session.answer(query).value)
    except InvalidAnswer:
        if query.batch_size == 1:
            return [None]
        out: list[str | None] = []
        for single in query.split():
            out.extend(_answer_items(session, single))
        return out


def segment_image(
    image: np.ndarray,
    image_id: str,
    vocab: ClassVocabulary,
    session: Session,
    k: int = 100,
    batch_size: int = 16,
    use_history: bool = True,
    ignore_index: int = DEFAULT_IGNORE_INDEX,
    superpixels: SuperpixelMap | None = None,
) -> SegmentationOutcome:
    """Label each superpixel by a multiple-choice query and flood-fill the answers.

    Batches run in order; with ``use_history`` every query carries the labels
    already given to earlier superpixels.
    """
    if batch_size < 1:
        raise ValidationError("batch_size must be at least 1")
    image = check_image(image)
    spmap = superpixels if superpixels is not None else slic(image, k)
    options = tuple(vocab)
    labels = np.full(spmap.k, ignore_index, dtype=np.int64)
    history: list[tuple[int, str]] = []
    for start in range(0, spmap.k, batch_size):
        ids = range(start, min(start + batch_size, spmap.k))
        items = tuple(ChoiceItem(image_id, image, spmap.mask(s), s) for s in ids)
        query = MultiChoice(items, options, tuple(history) if use_history else (), template_id="segment")
        for s, name in zip(ids, _answer_items(session, query)):
            if name is not None:
                labels[s] = vocab.id_of(name)
                history.append((s, name))
    return SegmentationOutcome(IndexMask(labels[spmap.labels], ignore_index), spmap, labels)


# -- grouping ------------------------------------------------------------------


@dataclass
class GroupingOutcome:
    mask: np.ndarray
    superpixels: SuperpixelMap
    accepted: list[int]
    rounds: int


def group_point(
    image: np.ndarray,
    image_id: str,
    point: Point,
    session: Session,
    k: int = 100,
    batch_size: int = 8,
    superpixels: SuperpixelMap | None = None,
    template_id: str = "same_object",
) -> GroupingOutcome:
    """Grow a region from the superpixel under ``point`` by asking about each adjacent candidate once."""
    image = check_image(image)
    size = RasterSize.of(image)
    if not point.within(size):
        raise ValidationError(f"point {point} lies outside a {size.width}x{size.height} image")
    spmap = superpixels if superpixels is not None else slic(image, k)
    neighbors = adjacency(spmap).neighbors()
    seed = spmap.segment_at(point)
    accepted, rejected = {seed}, set()
    order = [seed]
    frontier = sorted(set(neighbors[seed]))
    rounds = 0
    while frontier:
        rounds += 1
        for start in range(0, len(frontier), batch_size):
            batch = frontier[start : start + batch_size]
            query = SameObject(
                image_id, image, tuple(spmap.mask(s) for s in batch), spmap.mask_of(sorted(accepted)), tuple(batch),
                template_id=template_id,
            )
            for s, same in zip(batch, session.answer(query).value):
                (accepted if same else rejected).add(s)
                if same:
                    order.append(s)
        frontier = sorted({n for s in accepted for n in neighbors[s]} - accepted - rejected)
    return GroupingOutcome(spmap.mask_of(sorted(accepted)), spmap, order, rounds)


# -- depth and normals -----------------------------------------------------------


@dataclass
class RankOutcome:
    raster: FloatRaster
    field: RankField
    comparisons: list[Comparison]


@dataclass
class DepthOutcome(RankOutcome):
    superpixels: SuperpixelMap | None = None


@dataclass
class NormalsOutcome:
    axes: dict[str, RankOutcome]
    superpixels: SuperpixelMap

    @property
    def rasters(self) -> tuple[FloatRaster, FloatRaster, FloatRaster]:
        return tuple(self.axes[a].raster for a in "xyz")


def _rank_axis(image, image_id, session, spmap, pairs, axis, relations, template_id, smooth) -> RankOutcome:
    queries = [
        PairOrder(image_id, image, spmap.mask(p.i), spmap.mask(p.j), axis, relations, template_id) for p in pairs
    ]
    answers = session.answer_many(queries)
    comparisons = [Comparison(p.i, p.j, a.value) for p, a in zip(pairs, answers)]
    field_ = globalize(comparisons, adjacency(spmap), Weights(smooth=smooth), k=spmap.k)
    return RankOutcome(floodfill_ranks(spmap, field_), field_, comparisons)


def estimate_depth_ranks(
    image: np.ndarray,
    image_id: str,
    session: Session,
    k: int = 100,
    n_pairs: int = 200,
    smooth: float = 1.0,
    seed: int = 0,
    relations: tuple[str, ...] = BINARY_RELATIONS,
    superpixels: SuperpixelMap | None = None,
) -> DepthOutcome:
    """Relative depth from pairwise farther/closer answers; larger rank means farther."""
    image = check_image(image)
    spmap = superpixels if superpixels is not None else slic(image, k)
    if spmap.k < 2:
        raise ValidationError("depth ranking needs at least two superpixels")
    pairs = sample_pairs(spmap, n_pairs, seed)
    r = _rank_axis(image, image_id, session, spmap, pairs, "depth", tuple(relations), "depth_pair", smooth)
    return DepthOutcome(r.raster, r.field, r.comparisons, spmap)


def estimate_normal_ranks(
    image: np.ndarray,
    image_id: str,
    session: Session,
    k: int = 100,
    n_pairs: int = 200,
    smooth: float = 1.0,
    seed: int = 0,
    relations: tuple[str, ...] = TERNARY_RELATIONS,
    superpixels: SuperpixelMap | None = None,
) -> NormalsOutcome:
    """Per-axis relative normal components, each globalized on its own."""
    image = check_image(image)
    spmap = superpixels if superpixels is not None else slic(image, k)
    if spmap.k < 2:
        raise ValidationError("normal ranking needs at least two superpixels")
    pairs = sample_pairs(spmap, n_pairs, seed)
    axes = {
        axis: _rank_axis(image, image_id, session, spmap, pairs, axis, tuple(relations), "normal_pair", smooth)
        for axis in "xyz"
    }
    return NormalsOutcome(axes, spmap)


# -- blind baseline --------------------------------------------------------------


def blank_like(image: np.ndarray, color: tuple[int, int, int] = (0, 0, 0)) -> np.ndarray:
    image = check_image(image)
    out = np.empty_like(image)
    out[...] = color
    return out


def blind_variant(chain: Callable, blank_color: tuple[int, int, int] = (0, 0, 0)) -> Callable:
    """Wrap a chain so it runs on a blank raster of the input's size.

    Region markers and grid cells are still drawn on the blank raster, so the
    backend is forced to answer every sub-query without seeing content.
    """

    @functools.wraps(chain)
    def run(image, *args, **kwargs):
        if isinstance(image, (list, tuple)):
            return chain([blank_like(im, blank_color) for im in image], *args, **kwargs)
        return chain(blank_like(image, blank_color), *args, **kwargs)

    return run
