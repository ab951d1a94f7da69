import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp
from scipy import ndimage

from chainlens.core import PixelBox, RasterSize, ValidationError
from chainlens.superpixel import (
    SuperpixelMap,
    adjacency,
    build_pyramid,
    context_box,
    draw_marker,
    enforce_connectivity,
    sample_pairs,
    slic,
)


def brute_edges(labels):
    h, w = labels.shape
    edges = set()
    for y, x in itertools.product(range(h), range(w)):
        for dy, dx in ((0, 1), (1, 0)):
            yy, xx = y + dy, x + dx
            if yy < h and xx < w and labels[y, x] != labels[yy, xx]:
                edges.add(tuple(sorted((int(labels[y, x]), int(labels[yy, xx])))))
    return edges


def test_slic_single_segment(rng):
    img = rng.integers(0, 256, (10, 13, 3), dtype=np.uint8)
    sp = slic(img, 1)
    assert sp.k == 1 and (sp.labels == 0).all()


def test_slic_tiny_singletons():
    img = np.array([[[0, 0, 0], [255, 0, 0]], [[0, 255, 0], [0, 0, 255]]], np.uint8)
    sp = slic(img, 4)
    assert sp.k == 4 and sorted(sp.labels.ravel().tolist()) == [0, 1, 2, 3]


def test_slic_rejects_too_many_segments():
    with pytest.raises(ValidationError):
        slic(np.zeros((2, 2, 3), np.uint8), 5)


def test_slic_deterministic(rng):
    img = rng.integers(0, 256, (24, 30, 3), dtype=np.uint8)
    assert np.array_equal(slic(img, 20).labels, slic(img, 20).labels)


def test_slic_follows_color_edge():
    img = np.zeros((20, 40, 3), np.uint8)
    img[:, 17:] = 255
    sp = slic(img, 8, compactness=1.0)
    # no segment straddles the edge
    for s in range(sp.k):
        cols = np.nonzero(sp.mask(s))[1]
        assert cols.max() < 17 or cols.min() >= 17


@given(hnp.arrays(np.uint8, st.tuples(st.integers(4, 20), st.integers(4, 20), st.just(3))), st.integers(1, 30))
def test_slic_partition_properties(img, k):
    k = min(k, img.shape[0] * img.shape[1])
    sp = slic(img, k)
    assert sorted(np.unique(sp.labels)) == list(range(sp.k))
    assert sp.counts.sum() == img.shape[0] * img.shape[1]
    assert sp.k <= 4 * k
    for s in range(sp.k):
        assert ndimage.label(sp.mask(s))[1] == 1


def test_enforce_connectivity_splits_and_merges():
    labels = np.array([[0, 0, 1, 0], [0, 0, 1, 0]])
    out = enforce_connectivity(labels)
    for s in np.unique(out):
        assert ndimage.label(out == s)[1] == 1


def test_map_statistics():
    labels = np.array([[0, 0, 1], [0, 0, 1]])
    sp = SuperpixelMap(labels)
    assert sp.counts.tolist() == [4, 2]
    assert sp.boxes[1] == PixelBox(2, 0, 3, 2)
    assert sp.centroids[0].tolist() == [0.5, 0.5]
    with pytest.raises(ValidationError):
        SuperpixelMap(np.array([[0, 2]]))


def test_adjacency_cases():
    assert adjacency(SuperpixelMap(np.zeros((3, 3), int))).edges == ()
    halves = np.zeros((4, 6), int)
    halves[:, 3:] = 1
    assert adjacency(SuperpixelMap(halves)).edges == ((0, 1),)
    four = SuperpixelMap(np.array([[0, 1], [2, 3]]))
    assert set(adjacency(four).edges) == {(0, 1), (0, 2), (1, 3), (2, 3)}


@given(hnp.arrays(np.int64, st.tuples(st.integers(1, 7), st.integers(1, 7)), elements=st.integers(0, 5)))
def test_adjacency_matches_brute_force(raw):
    _, dense = np.unique(raw, return_inverse=True)
    labels = dense.reshape(raw.shape)
    g = adjacency(SuperpixelMap(labels))
    assert set(g.edges) == brute_edges(labels)
    nb = g.neighbors()
    assert all(i in nb[j] for i in range(g.k) for j in nb[i])


def test_pyramid_whole_image(rng):
    img = rng.integers(0, 256, (10, 12, 3), dtype=np.uint8)
    pyr = build_pyramid(img, np.ones((10, 12), bool))
    full = PixelBox(0, 0, 12, 10)
    assert pyr.crop_box == pyr.context_box == pyr.full_box == full


def test_pyramid_centered_context():
    region = np.zeros((100, 100), bool)
    region[45:55, 45:55] = True
    pyr = build_pyramid(np.zeros((100, 100, 3), np.uint8), region, context_factor=2.0)
    assert pyr.crop_box == PixelBox(45, 45, 55, 55)
    assert pyr.context_box == PixelBox(40, 40, 60, 60)
    assert pyr.crop.shape == (10, 10, 3) and pyr.context.shape == (20, 20, 3)


def test_pyramid_corner_clipped():
    region = np.zeros((100, 100), bool)
    region[0:10, 0:10] = True
    pyr = build_pyramid(np.zeros((100, 100, 3), np.uint8), region, context_factor=2.0)
    assert pyr.context_box == PixelBox(0, 0, 15, 15)


@given(st.integers(0, 30), st.integers(0, 30), st.integers(1, 20), st.integers(1, 20), st.floats(1.0, 4.0))
def test_context_nested(x, y, w, h, factor):
    size = RasterSize(40, 40)
    box = PixelBox(x, y, min(40, x + w), min(40, y + h))
    ctx = context_box(box, factor, size)
    assert ctx.contains(box) and PixelBox.full(size).contains(ctx)


def test_marker_rectangle_locality():
    img = np.full((20, 20, 3), 50, np.uint8)
    region = np.zeros((20, 20), bool)
    region[5:15, 4:12] = True
    before = img.copy()
    out = draw_marker(img, region, "rectangle", stroke=1)
    assert np.array_equal(img, before)
    changed = (out != img).any(axis=2)
    outline = np.zeros((20, 20), bool)
    outline[5:15, 4:12] = True
    outline[6:14, 5:11] = False
    assert np.array_equal(changed, outline)


def test_marker_point_disc_at_centroid():
    img = np.zeros((21, 21, 3), np.uint8)
    region = np.zeros((21, 21), bool)
    region[5:16, 5:16] = True
    changed = (draw_marker(img, region, "point") != img).any(axis=2)
    ys, xs = np.nonzero(changed)
    assert (ys.mean(), xs.mean()) == (10.0, 10.0)
    assert changed.sum() < region.sum()


def test_marker_curve_traces_boundary():
    img = np.zeros((30, 30, 3), np.uint8)
    yy, xx = np.mgrid[:30, :30]
    region = (yy - 15) ** 2 + (xx - 14) ** 2 <= 64
    changed = (draw_marker(img, region, "curve", stroke=1) != img).any(axis=2)
    # a region pixel is on the trace iff one of its 4-neighbours is outside
    padded = np.pad(region, 1)
    inner = padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    assert np.array_equal(changed, region & ~inner)
    # the trace is a single closed loop around a hole
    assert ndimage.label(changed, structure=np.ones((3, 3)))[1] == 1
    assert ndimage.label(~changed & region)[1] == 1


def test_marker_rejects_unknown_style():
    with pytest.raises(ValidationError):
        draw_marker(np.zeros((3, 3, 3), np.uint8), np.ones((3, 3), bool), "arrow")


def _grid_map(k):
    return SuperpixelMap(np.arange(k).reshape(1, k))


def test_sample_pairs_deterministic():
    sp = _grid_map(30)
    assert sample_pairs(sp, 40, seed=5) == sample_pairs(sp, 40, seed=5)
    assert sample_pairs(sp, 40, seed=5) != sample_pairs(sp, 40, seed=6)


def test_sample_pairs_exhaustion():
    pairs = sample_pairs(_grid_map(3), 3)
    assert {frozenset((p.i, p.j)) for p in pairs} == {frozenset(s) for s in itertools.combinations(range(3), 2)}
    assert len(sample_pairs(_grid_map(3), 50)) == 3


def test_sample_pairs_distinct():
    pairs = sample_pairs(_grid_map(100), 200, seed=1)
    assert len(pairs) == 200
    assert all(p.i != p.j for p in pairs)
    assert len({frozenset((p.i, p.j)) for p in pairs}) == 200


def test_sample_pairs_errors():
    with pytest.raises(ValidationError):
        sample_pairs(_grid_map(5), 0)
    with pytest.raises(ValidationError):
        sample_pairs(_grid_map(1), 3)
