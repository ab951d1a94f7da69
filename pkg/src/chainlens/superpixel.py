"""SLIC superpixels, region adjacency, semantic pyramids, markers and pair sampling."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from skimage.color import rgb2lab

from chainlens.core import PixelBox, Point, RasterSize, ValidationError, check_image

MARKER_STYLES = ("curve", "rectangle", "point")
DEFAULT_MARKER_COLOR = (255, 0, 0)


@dataclass(eq=False)
class SuperpixelMap:
    """Dense segment labels plus per-segment statistics."""

    labels: np.ndarray
    k: int = field(init=False)
    counts: np.ndarray = field(init=False, repr=False)
    boxes: list[PixelBox] = field(init=False, repr=False)
    centroids: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 2 or labels.size == 0:
            raise ValidationError("superpixel labels must be a non-empty 2-D raster")
        if labels.min() < 0:
            raise ValidationError("superpixel labels must be non-negative")
        self.labels = labels.astype(np.int32)
        flat = self.labels.ravel()
        self.k = int(flat.max()) + 1
        self.counts = np.bincount(flat, minlength=self.k)
        if (self.counts == 0).any():
            raise ValidationError("superpixel ids must be dense 0..k-1")
        h, w = self.labels.shape
        ys, xs = np.divmod(np.arange(flat.size), w)
        self.centroids = np.stack(
            [np.bincount(flat, xs, self.k) / self.counts, np.bincount(flat, ys, self.k) / self.counts],
            axis=1,
        )
        x0 = np.full(self.k, w)
        y0 = np.full(self.k, h)
        x1 = np.zeros(self.k, dtype=int)
        y1 = np.zeros(self.k, dtype=int)
        np.minimum.at(x0, flat, xs)
        np.minimum.at(y0, flat, ys)
        np.maximum.at(x1, flat, xs + 1)
        np.maximum.at(y1, flat, ys + 1)
        self.boxes = [PixelBox(int(a), int(b), int(c), int(d)) for a, b, c, d in zip(x0, y0, x1, y1)]

    @property
    def size(self) -> RasterSize:
        return RasterSize.of(self.labels)

    def mask(self, segment: int) -> np.ndarray:
        return self.labels == segment

    def mask_of(self, segments) -> np.ndarray:
        lut = np.zeros(self.k, dtype=bool)
        lut[list(segments)] = True
        return lut[self.labels]

    def segment_at(self, point: Point) -> int:
        if not point.within(self.size):
            raise ValidationError(f"point {point} outside {self.size}")
        return int(self.labels[point.y, point.x])

    def anchor(self, segment: int) -> Point:
        """Pixel of the segment closest to its centroid."""
        cx, cy = self.centroids[segment]
        ys, xs = np.nonzero(self.labels == segment)
        i = int(np.argmin((xs - cx) ** 2 + (ys - cy) ** 2))
        return Point(int(xs[i]), int(ys[i]))


@dataclass(frozen=True)
class AdjacencyGraph:
    k: int
    edges: tuple[tuple[int, int], ...]

    def neighbors(self) -> list[list[int]]:
        out: list[list[int]] = [[] for _ in range(self.k)]
        for i, j in self.edges:
            out[i].append(j)
            out[j].append(i)
        return [sorted(n) for n in out]


@dataclass(eq=False)
class SemanticPyramid:
    crop: np.ndarray
    context: np.ndarray
    full: np.ndarray
    crop_box: PixelBox
    context_box: PixelBox
    full_box: PixelBox
    marker_style: str

    def layers(self) -> list[np.ndarray]:
        return [self.crop, self.context, self.full]


@dataclass(frozen=True)
class PairSample:
    i: int
    j: int
    anchor_i: Point
    anchor_j: Point

    def __post_init__(self):
        if self.i == self.j:
            raise ValidationError("a pair must reference two distinct segments")


# -- SLIC --------------------------------------------------------------------


def _grid_shape(h: int, w: int, k_target: int) -> tuple[int, int]:
    step = math.sqrt(h * w / k_target)
    rows = min(h, max(1, round(h / step)))
    cols = min(w, max(1, round(w / step)))
    return rows, cols


def slic(image: np.ndarray, k_target: int = 100, compactness: float = 10.0, iterations: int = 10) -> SuperpixelMap:
    """Cluster pixels in (L*a*b*, x, y) space around a regular grid of seeds.

    Each pixel only competes for the seeds of its own and the 8 neighbouring
    grid cells, which bounds the search window to roughly 2S x 2S as in the
    original method. Connectivity is enforced afterwards.
    """
    image = check_image(image)
    h, w = image.shape[:2]
    if k_target < 1:
        raise ValidationError(f"k_target must be >= 1, got {k_target}")
    if k_target > h * w:
        raise ValidationError(f"k_target={k_target} exceeds the pixel count {h * w}")
    rows, cols = _grid_shape(h, w, k_target)
    lab = rgb2lab(image).reshape(-1, 3)
    ys, xs = np.mgrid[0:h, 0:w]
    ys = ys.ravel().astype(float)
    xs = xs.ravel().astype(float)

    # seed at the center of each grid cell
    ry = np.linspace(0, h, rows + 1)
    rx = np.linspace(0, w, cols + 1)
    cy0 = (ry[:-1] + ry[1:]) / 2 - 0.5
    cx0 = (rx[:-1] + rx[1:]) / 2 - 0.5
    cy, cx = np.meshgrid(cy0, cx0, indexing="ij")
    centers_xy = np.stack([cx.ravel(), cy.ravel()], axis=1)
    seed_pix = (np.clip(np.round(cy.ravel()), 0, h - 1) * w + np.clip(np.round(cx.ravel()), 0, w - 1)).astype(int)
    centers_lab = lab[seed_pix].copy()
    n_centers = rows * cols

    cell_r = np.minimum((ys * rows / h).astype(int), rows - 1)
    cell_c = np.minimum((xs * cols / w).astype(int), cols - 1)
    candidates = []
    for dr in (-1, 0, 1):
        for dc in (-1, 0, 1):
            r, c = cell_r + dr, cell_c + dc
            ok = (r >= 0) & (r < rows) & (c >= 0) & (c < cols)
            candidates.append(np.where(ok, r * cols + c, -1))
    candidates = np.stack(candidates)  # (9, N)
    valid = candidates >= 0
    safe = np.where(valid, candidates, 0)

    step = math.sqrt(h * w / n_centers)
    spatial_weight = (compactness / step) ** 2
    assignment = safe[4]
    for _ in range(max(1, iterations)):
        dlab = ((lab[None, :, :] - centers_lab[safe]) ** 2).sum(axis=2)
        dxy = (xs[None, :] - centers_xy[safe, 0]) ** 2 + (ys[None, :] - centers_xy[safe, 1]) ** 2
        dist = np.where(valid, dlab + spatial_weight * dxy, np.inf)
        assignment = safe[np.argmin(dist, axis=0), np.arange(h * w)]
        counts = np.bincount(assignment, minlength=n_centers).astype(float)
        live = counts > 0
        for dim in range(3):
            s = np.bincount(assignment, lab[:, dim], n_centers)
            centers_lab[live, dim] = s[live] / counts[live]
        centers_xy[live, 0] = np.bincount(assignment, xs, n_centers)[live] / counts[live]
        centers_xy[live, 1] = np.bincount(assignment, ys, n_centers)[live] / counts[live]

    labels = enforce_connectivity(assignment.reshape(h, w))
    return SuperpixelMap(labels)


def _pixel_components(labels: np.ndarray) -> tuple[int, np.ndarray]:
    """4-connected components of equal-label pixels."""
    h, w = labels.shape
    idx = np.arange(h * w).reshape(h, w)
    same_h = labels[:, 1:] == labels[:, :-1]
    same_v = labels[1:, :] == labels[:-1, :]
    rows = np.concatenate([idx[:, :-1][same_h], idx[:-1, :][same_v]])
    cols = np.concatenate([idx[:, 1:][same_h], idx[1:, :][same_v]])
    graph = coo_matrix((np.ones(rows.size, dtype=np.int8), (rows, cols)), shape=(h * w, h * w))
    n, comp = connected_components(graph, directed=False)
    return n, comp.reshape(h, w)


def _densify(labels: np.ndarray) -> np.ndarray:
    """Renumber labels 0..k-1 in order of first appearance in raster scan."""
    flat = labels.ravel()
    _, first, inverse = np.unique(flat, return_index=True, return_inverse=True)
    rank = np.empty(first.size, dtype=np.int32)
    rank[np.argsort(first)] = np.arange(first.size, dtype=np.int32)
    return rank[inverse].reshape(labels.shape)


def enforce_connectivity(labels: np.ndarray) -> np.ndarray:
    """Make every label 4-connected.

    For each label the largest component keeps the label; every other
    component (an orphan) is merged into its largest adjacent segment, smallest
    orphans first. Ids are re-densified in raster-scan order afterwards.
    """
    labels = np.asarray(labels)
    n, comp = _pixel_components(labels)
    flat_comp = comp.ravel()
    sizes = np.bincount(flat_comp, minlength=n).astype(np.int64)
    comp_label = np.zeros(n, dtype=np.int64)
    comp_label[flat_comp] = labels.ravel()

    # keeper = largest component per label (first component id on ties)
    order = np.lexsort((np.arange(n), -sizes, comp_label))
    keeper = np.zeros(n, dtype=bool)
    first_of_label = np.ones(n, dtype=bool)
    first_of_label[1:] = comp_label[order[1:]] != comp_label[order[:-1]]
    keeper[order[first_of_label]] = True
    if keeper.all():
        return _densify(labels)

    a = np.concatenate([comp[:, :-1].ravel(), comp[:-1, :].ravel()])
    b = np.concatenate([comp[:, 1:].ravel(), comp[1:, :].ravel()])
    diff = a != b
    pairs = np.unique(np.sort(np.stack([a[diff], b[diff]], axis=1), axis=1), axis=0)
    neighbors: list[set[int]] = [set() for _ in range(n)]
    for i, j in pairs:
        neighbors[i].add(int(j))
        neighbors[j].add(int(i))

    parent = np.arange(n)

    def find(x: int) -> int:
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    orphans = sorted(np.flatnonzero(~keeper), key=lambda c: (sizes[c], c))
    for o in orphans:
        root_o = find(o)
        best, best_size = -1, -1
        for nb in neighbors[o]:
            r = find(nb)
            if r == root_o:
                continue
            if sizes[nb] > best_size or (sizes[nb] == best_size and r < best):
                best, best_size = r, sizes[nb]
        if best < 0:
            continue
        parent[root_o] = best
        neighbors[best] |= neighbors[root_o]

    roots = np.array([find(c) for c in range(n)])
    return _densify(roots[comp])


# -- adjacency ---------------------------------------------------------------


def adjacency(spmap: SuperpixelMap) -> AdjacencyGraph:
    labels = spmap.labels
    a = np.concatenate([labels[:, :-1].ravel(), labels[:-1, :].ravel()])
    b = np.concatenate([labels[:, 1:].ravel(), labels[1:, :].ravel()])
    diff = a != b
    if not diff.any():
        return AdjacencyGraph(spmap.k, ())
    pairs = np.unique(np.sort(np.stack([a[diff], b[diff]], axis=1), axis=1), axis=0)
    return AdjacencyGraph(spmap.k, tuple((int(i), int(j)) for i, j in pairs))


# -- markers and pyramids ----------------------------------------------------


def region_boundary(region: np.ndarray, width: int = 1) -> np.ndarray:
    """Region pixels within ``width`` 4-steps of the outside (image border counts as outside)."""
    region = np.asarray(region, dtype=bool)
    inner = ndimage.binary_erosion(region, iterations=width, border_value=0)
    return region & ~inner


def _box_outline(shape: tuple[int, int], box: PixelBox, width: int) -> np.ndarray:
    out = np.zeros(shape, dtype=bool)
    out[box.slices()] = True
    x0, y0 = box.x_min + width, box.y_min + width
    x1, y1 = box.x_max - width, box.y_max - width
    if x0 < x1 and y0 < y1:
        out[y0:y1, x0:x1] = False
    return out


def _disc(shape: tuple[int, int], center: Point, radius: int) -> np.ndarray:
    yy, xx = np.ogrid[0 : shape[0], 0 : shape[1]]
    return (xx - center.x) ** 2 + (yy - center.y) ** 2 <= radius**2


def marker_pixels(region: np.ndarray, style: str, stroke: int = 2, point_radius: int = 3) -> np.ndarray:
    """Boolean raster of the pixels a marker of ``style`` recolors."""
    region = np.asarray(region, dtype=bool)
    if style not in MARKER_STYLES:
        raise ValidationError(f"unknown marker style {style!r}; expected one of {MARKER_STYLES}")
    if not region.any():
        raise ValidationError("cannot mark an empty region")
    if style == "curve":
        return region_boundary(region, stroke)
    if style == "rectangle":
        return _box_outline(region.shape, PixelBox.of_mask(region), stroke)
    ys, xs = np.nonzero(region)
    cx, cy = xs.mean(), ys.mean()
    i = int(np.argmin((xs - cx) ** 2 + (ys - cy) ** 2))
    return _disc(region.shape, Point(int(xs[i]), int(ys[i])), point_radius)


def draw_marker(
    image: np.ndarray,
    region: np.ndarray,
    style: str = "curve",
    color: tuple[int, int, int] = DEFAULT_MARKER_COLOR,
    stroke: int = 2,
) -> np.ndarray:
    """Return a copy of ``image`` with ``region`` marked; the input is left untouched."""
    image = check_image(image)
    region = np.asarray(region, dtype=bool)
    if region.shape != image.shape[:2]:
        raise ValidationError(f"region shape {region.shape} does not match image {image.shape[:2]}")
    out = image.copy()
    out[marker_pixels(region, style, stroke)] = color
    return out


def context_box(box: PixelBox, factor: float, size: RasterSize) -> PixelBox:
    """``box`` scaled by ``factor`` about its center and clipped to the raster."""
    cx = (box.x_min + box.x_max) / 2
    cy = (box.y_min + box.y_max) / 2
    half_w = box.width * factor / 2
    half_h = box.height * factor / 2
    x0 = max(0, math.floor(cx - half_w))
    y0 = max(0, math.floor(cy - half_h))
    x1 = min(size.width, math.ceil(cx + half_w))
    y1 = min(size.height, math.ceil(cy + half_h))
    # never smaller than the region itself, so crop <= context always holds
    return PixelBox.cover([PixelBox(x0, y0, x1, y1), box])


def build_pyramid(
    image: np.ndarray,
    region: np.ndarray,
    context_factor: float = 2.0,
    marker_style: str = "curve",
    color: tuple[int, int, int] = DEFAULT_MARKER_COLOR,
) -> SemanticPyramid:
    """Crop, context and full-image views of ``region``, marked on the outer two."""
    image = check_image(image)
    region = np.asarray(region, dtype=bool)
    size = RasterSize.of(image)
    crop_box = PixelBox.of_mask(region)
    ctx_box = context_box(crop_box, context_factor, size)
    marked = draw_marker(image, region, marker_style, color)
    return SemanticPyramid(
        crop=image[crop_box.slices()].copy(),
        context=marked[ctx_box.slices()].copy(),
        full=marked,
        crop_box=crop_box,
        context_box=ctx_box,
        full_box=PixelBox.full(size),
        marker_style=marker_style,
    )


# -- pair sampling -----------------------------------------------------------


def _unrank_pair(index: int, k: int) -> tuple[int, int]:
    """Map 0..k(k-1)/2-1 onto pairs (i, j), i < j, in lexicographic order."""
    i = int(k - 2 - math.floor(math.sqrt(-8 * index + 4 * k * (k - 1) - 7) / 2.0 - 0.5))
    j = int(index + i + 1 - k * (k - 1) // 2 + (k - i) * ((k - i) - 1) // 2)
    return i, j


def sample_pairs(spmap: SuperpixelMap, n: int, seed: int = 0) -> list[PairSample]:
    """Draw ``n`` distinct unordered segment pairs without replacement.

    The presentation order of each pair is randomized too, so position biases
    of a model do not line up with segment ids.
    """
    if n <= 0:
        raise ValidationError(f"n must be positive, got {n}")
    k = spmap.k
    if k < 2:
        raise ValidationError("need at least two segments to sample pairs")
    total = k * (k - 1) // 2
    n = min(n, total)
    rng = np.random.default_rng(seed)
    picks = rng.choice(total, size=n, replace=False)
    flips = rng.random(n) < 0.5
    anchors: dict[int, Point] = {}

    def anchor(s: int) -> Point:
        if s not in anchors:
            anchors[s] = spmap.anchor(s)
        return anchors[s]

    out = []
    for index, flip in zip(picks, flips):
        i, j = _unrank_pair(int(index), k)
        if flip:
            i, j = j, i
        out.append(PairSample(i, j, anchor(i), anchor(j)))
    return out
