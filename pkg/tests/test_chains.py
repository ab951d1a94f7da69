from collections import deque

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from chainlens.backend import GroundTruth, OracleBackend, RandomBackend, ScriptedBackend
from chainlens.chains import (
    GridParams,
    NotFound,
    blank_like,
    blind_variant,
    classify_batch,
    detect,
    estimate_depth_ranks,
    estimate_normal_ranks,
    grid_cells,
    group_point,
    list_objects,
    list_regions,
    locate_trace,
    segment_image,
)
from chainlens.core import ClassVocabulary, PixelBox, Point, RasterSize, ValidationError, box_iou
from chainlens.harness.synthetic import generate
from chainlens.metrics import normal_axis_rho, pairwise_accuracy
from chainlens.raster_io import FloatRaster
from chainlens.superpixel import adjacency
from conftest import make_session
from oracles import majority_fill

VOCAB = ClassVocabulary(("cat", "dog", "bird"))
BLANK = np.zeros((96, 96, 3), np.uint8)


def box_session(boxes, image_id="img"):
    return make_session(truths={image_id: GroundTruth(boxes=boxes)})


# -- grid ------------------------------------------------------------------------


@given(
    st.integers(0, 20), st.integers(0, 20), st.integers(1, 60), st.integers(1, 60),
    st.integers(1, 4), st.integers(1, 4), st.sampled_from([None, 0.15, 0.3]),
)
def test_grid_cells_tile_the_window(x0, y0, w, h, rows, cols, outer):
    window = PixelBox(x0, y0, x0 + w, y0 + h)
    cells = grid_cells(window, rows, cols, outer)
    cover = np.zeros((y0 + h, x0 + w), int)
    for c in cells:
        assert c.area > 0
        cover[c.slices()] += 1
    assert (cover[window.slices()] == 1).all()
    assert cover.sum() == window.area


def test_fine_grid_outer_strips():
    cells = grid_cells(PixelBox(0, 0, 100, 10), 1, 3, 0.15)
    assert [c.width for c in cells] == [15, 70, 15]


def test_list_regions_cover_image():
    regions = list_regions(RasterSize(96, 64))
    assert len(regions) == 5
    assert PixelBox.cover(regions) == PixelBox(0, 0, 96, 64)


# -- classification --------------------------------------------------------------


def test_classify_oracle_and_batch_invariance():
    ds = generate("classification", 60, seed=3)
    images, ids = [s.image for s in ds], [s.image_id for s in ds]
    gt = [s.label for s in ds]
    for bs in (1, 7, 100):
        assert classify_batch(images, ids, ds.vocab, make_session(truths=ds.truths()), bs) == gt


def test_classify_scripted_error_rate():
    ds = generate("classification", 1000, seed=5, size=16)
    session = make_session(ScriptedBackend(ds.truths(), 0.2, seed=1))
    pred = classify_batch([s.image for s in ds], [s.image_id for s in ds], ds.vocab, session)
    acc = np.mean([p == s.label for p, s in zip(pred, ds)])
    assert 0.76 <= acc <= 0.84


def test_classify_rejects_bad_batch():
    with pytest.raises(ValidationError):
        classify_batch([BLANK], ["a"], VOCAB, make_session(), 0)


# -- detection -------------------------------------------------------------------


def test_list_objects_matches_gt_set():
    boxes = [("dog", PixelBox(0, 0, 10, 10)), ("cat", PixelBox(50, 50, 90, 90))]
    for strategy in ("whole", "regions"):
        assert list_objects(BLANK, "img", VOCAB, box_session(boxes), strategy) == ["cat", "dog"]
    assert list_objects(BLANK, "img", VOCAB, box_session([])) == []


def test_list_objects_add_noise_keeps_recall():
    boxes = [("dog", PixelBox(0, 0, 10, 10))]
    backend = ScriptedBackend({"img": GroundTruth(boxes=boxes)}, 0.5, kinds=["multi_label"], multilabel_mode="add")
    assert "dog" in list_objects(BLANK, "img", VOCAB, make_session(backend))


def test_locate_single_cell_after_first_step():
    trace = locate_trace(BLANK, "img", "cat", box_session([("cat", PixelBox(32, 32, 64, 64))]))
    assert trace.windows[1] == PixelBox(32, 32, 64, 64)
    assert trace.box == PixelBox(32, 32, 64, 64)


def test_locate_full_image_is_fixed_point():
    trace = locate_trace(BLANK, "img", "cat", box_session([("cat", PixelBox(0, 0, 96, 96))]))
    assert trace.box == PixelBox(0, 0, 96, 96)


def test_locate_suite_mean_iou():
    ds = generate("detection", 100, seed=11)
    session = make_session(truths=ds.truths())
    grid = GridParams(coarse=(3, 3), max_iterations=10)
    ious = [box_iou(locate_trace(s.image, s.image_id, c, session, grid).box, b) for s in ds for c, b in s.boxes]
    assert np.mean(ious) >= 0.75


def test_locate_not_found():
    with pytest.raises(NotFound):
        locate_trace(BLANK, "img", "bird", box_session([("cat", PixelBox(0, 0, 9, 9))]))


@given(st.integers(0, 90), st.integers(0, 90), st.integers(1, 40), st.integers(1, 40))
def test_locate_windows_nest_and_contain_the_object(x0, y0, w, h):
    gt = PixelBox(x0, y0, min(96, x0 + w), min(96, y0 + h))
    trace = locate_trace(BLANK, "img", "cat", box_session([("cat", gt)]))
    for outer, inner in zip(trace.windows, trace.windows[1:]):
        assert PixelBox.cover([outer, inner]) == outer
    assert PixelBox.cover([trace.box, gt]) == trace.box
    assert len(trace.windows) <= GridParams().max_iterations + 1


def test_detect_end_to_end():
    boxes = [("cat", PixelBox(10, 10, 40, 50)), ("bird", PixelBox(60, 5, 90, 30))]
    out = detect(BLANK, "img", VOCAB, box_session(boxes))
    assert out.not_found == []
    got = {VOCAB.name_of(b.class_id): b.box for b in out.boxes}
    assert set(got) == {"cat", "bird"}
    for name, box in boxes:
        assert PixelBox.cover([got[name], box]) == got[name]
    assert all(b.score == 1.0 for b in out.boxes)


def test_detect_empty_class_set():
    assert detect(BLANK, "img", VOCAB, box_session([])).boxes == []


def test_presence_noise_degrades_iou():
    ds = generate("detection", 40, seed=12)

    def mean_iou(eps):
        session = make_session(ScriptedBackend(ds.truths(), eps, seed=0, kinds=["presence"]))
        ious = []
        for s in ds:
            found = {ds.vocab.name_of(b.class_id): b.box for b in detect(s.image, s.image_id, ds.vocab, session).boxes}
            ious += [box_iou(found[c], b) if c in found else 0.0 for c, b in s.boxes]
        return np.mean(ious)

    assert mean_iou(0.1) < mean_iou(0.0)


def test_regions_recall_at_least_whole_under_added_noise():
    ds = generate("detection", 30, seed=13)
    backend = ScriptedBackend(ds.truths(), 0.3, seed=0, kinds=["multi_label"], multilabel_mode="add")

    def recall(strategy):
        session = make_session(backend)
        hits = [c in list_objects(s.image, s.image_id, ds.vocab, session, strategy) for s in ds for c, _ in s.boxes]
        return np.mean(hits)

    assert recall("regions") >= recall("whole")


# -- segmentation ----------------------------------------------------------------


def test_segment_equals_majority_fill():
    ds = generate("segmentation", 4, seed=2)
    for s in ds:
        out = segment_image(s.image, s.image_id, ds.vocab, make_session(truths=ds.truths()), k=60)
        assert np.array_equal(out.mask.labels, majority_fill(out.superpixels, s.semantic))


def test_segment_single_superpixel():
    ds = generate("segmentation", 1, seed=4)
    s = ds.samples[0]
    out = segment_image(s.image, s.image_id, ds.vocab, make_session(truths=ds.truths()), k=1)
    assert len(np.unique(out.mask.labels)) == 1


def test_segment_history_only_changes_prompts():
    ds = generate("segmentation", 1, seed=6)
    s = ds.samples[0]
    outs, prompts = [], []
    for use_history in (True, False):
        session = make_session(truths=ds.truths())
        outs.append(segment_image(s.image, s.image_id, ds.vocab, session, k=40, batch_size=8, use_history=use_history))
        prompts.append([e.prompt for e in session.transcript])
    assert np.array_equal(outs[0].mask.labels, outs[1].mask.labels)
    assert any("already assigned" in p for p in prompts[0])
    assert not any("already assigned" in p for p in prompts[1])


# -- grouping --------------------------------------------------------------------


def bfs_group(spmap, instance, seed):
    neighbors = adjacency(spmap).neighbors()
    inside = [instance[spmap.labels == s].mean() > 0.5 for s in range(spmap.k)]
    seen, queue, accepted = {seed}, deque([seed]), {seed}
    while queue:
        s = queue.popleft()
        for n in neighbors[s]:
            if n not in seen:
                seen.add(n)
                if inside[n]:
                    accepted.add(n)
                    queue.append(n)
    return np.isin(spmap.labels, sorted(accepted))


def test_grouping_matches_bfs():
    ds = generate("grouping", 5, seed=1)
    for s in ds:
        out = group_point(s.image, s.image_id, s.point, make_session(truths=ds.truths()), k=50)
        assert np.array_equal(out.mask, bfs_group(out.superpixels, s.instance, out.superpixels.segment_at(s.point)))
        assert out.rounds <= out.superpixels.k


def test_grouping_stays_inside_instance():
    img = np.zeros((32, 32, 3), np.uint8)
    img[:, 16:] = 255
    inst = np.zeros((32, 32), bool)
    inst[:, :16] = True
    session = make_session(truths={"g": GroundTruth(instance=inst)})
    out = group_point(img, "g", Point(3, 3), session, k=16)
    assert np.array_equal(out.mask, inst)


def test_grouping_point_outside():
    with pytest.raises(ValidationError):
        group_point(BLANK, "g", Point(200, 3), make_session(), k=4)


# -- depth and normals -----------------------------------------------------------


def test_depth_deterministic():
    ds = generate("depth", 1, seed=8)
    s = ds.samples[0]
    runs = [estimate_depth_ranks(s.image, s.image_id, make_session(truths=ds.truths()), k=40, n_pairs=80, seed=3) for _ in range(2)]
    assert np.array_equal(runs[0].raster.values, runs[1].raster.values)


def test_depth_constant_field_all_equal():
    img = (np.random.default_rng(0).random((32, 32, 3)) * 255).astype(np.uint8)
    truth = GroundTruth(depth=FloatRaster(np.full((32, 32), 3.0, np.float32)))
    out = estimate_depth_ranks(img, "d", make_session(truths={"d": truth}), k=16, n_pairs=40, relations=("greater", "less", "equal"))
    assert {c.relation for c in out.comparisons} == {"equal"}
    assert np.allclose(out.raster.values, 0.0, atol=1e-9)


def test_depth_needs_two_segments():
    with pytest.raises(ValidationError):
        estimate_depth_ranks(BLANK, "d", make_session(), k=1)


def _normals_truth(nx):
    ny = np.zeros_like(nx)
    nz = np.sqrt(1.0 - nx**2)
    return GroundTruth(normals=tuple(FloatRaster(a.astype(np.float32)) for a in (nx, ny, nz)))


def test_normals_on_spheres():
    ds = generate("normals", 4, seed=14)
    session = make_session(truths=ds.truths())
    rhos = []
    for s in ds:
        out = estimate_normal_ranks(s.image, s.image_id, session, k=100, n_pairs=200)
        rhos.append([normal_axis_rho(r, g) for r, g in zip(out.rasters, s.normals)])
    assert (np.mean(rhos, axis=0) >= 0.6).all()


def test_normals_flat_plane_constant():
    img = (np.random.default_rng(1).random((32, 32, 3)) * 255).astype(np.uint8)
    out = estimate_normal_ranks(img, "n", make_session(truths={"n": _normals_truth(np.zeros((32, 32)))}), k=16, n_pairs=40)
    for raster in out.rasters:
        assert np.allclose(raster.values, 0.0, atol=1e-9)


def test_normals_axis_isolation():
    img = (np.random.default_rng(2).random((32, 32, 3)) * 255).astype(np.uint8)
    nx = np.tile(np.linspace(-0.1, 0.1, 32), (32, 1))
    out = estimate_normal_ranks(img, "n", make_session(truths={"n": _normals_truth(nx)}), k=16, n_pairs=60)
    x, y, _ = (r.values for r in out.rasters)
    assert np.corrcoef(x.ravel(), nx.ravel())[0, 1] > 0.8
    assert np.allclose(y, 0.0, atol=1e-9)


class FlipX(OracleBackend):
    """Oracle that answers the x axis with the opposite relation."""

    def structured(self, query):
        value = super().structured(query)
        if getattr(query, "axis", None) == "x":
            return {"greater": "less", "less": "greater"}.get(value, value)
        return value


def test_normals_axes_do_not_interact():
    ds = generate("normals", 1, seed=15, size=48)
    s = ds.samples[0]
    plain = estimate_normal_ranks(s.image, s.image_id, make_session(truths=ds.truths()), k=30, n_pairs=60)
    flipped = estimate_normal_ranks(s.image, s.image_id, make_session(FlipX(ds.truths())), k=30, n_pairs=60)
    assert not np.array_equal(plain.axes["x"].raster.values, flipped.axes["x"].raster.values)
    for axis in "yz":
        assert np.array_equal(plain.axes[axis].raster.values, flipped.axes[axis].raster.values)


# -- blind baselines -------------------------------------------------------------


def test_blank_like():
    img = np.full((5, 7, 3), 9, np.uint8)
    out = blank_like(img, (1, 2, 3))
    assert out.shape == img.shape and (out == (1, 2, 3)).all()


def test_blind_segmentation_gives_valid_mask():
    ds = generate("segmentation", 1, seed=9)
    s = ds.samples[0]
    out = blind_variant(segment_image)(s.image, s.image_id, ds.vocab, make_session(RandomBackend(0)), k=30)
    assert out.mask.labels.shape == s.image.shape[:2]
    assert set(np.unique(out.mask.labels)) <= set(range(len(ds.vocab)))


def test_blind_detection_boxes_in_bounds():
    out = blind_variant(detect)(BLANK, "img", VOCAB, make_session(RandomBackend(1)))
    for b in out.boxes:
        assert b.box.within(RasterSize(96, 96))


def test_blind_depth_is_near_chance():
    ds = generate("depth", 4, seed=10)
    accs = []
    for s in ds:
        out = blind_variant(estimate_depth_ranks)(s.image, s.image_id, make_session(RandomBackend(2)), k=60, n_pairs=200)
        spmap = out.superpixels
        means = np.array([s.depth.values[spmap.labels == i].mean() for i in range(spmap.k)])
        accs.append(pairwise_accuracy(out.comparisons, means))
    assert 40.0 <= np.mean(accs) <= 60.0
