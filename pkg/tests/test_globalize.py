import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from chainlens.core import ValidationError
from chainlens.globalize import (
    Comparison,
    ComparisonSet,
    Weights,
    assemble_objective,
    floodfill_ranks,
    globalize,
    normalize_and_sphere,
    scale_shift_fit,
    solve_ranks,
    sphere_vectors,
)
from chainlens.superpixel import AdjacencyGraph, SuperpixelMap
from oracles import dense_reference, random_instance

def test_empty_objective_is_zero():
    obj = assemble_objective([], AdjacencyGraph(3, ()), k=3)
    assert obj.matrix.nnz == 0 and obj.value(np.array([4.0, -1.0, 2.0])) == 0.0
    assert solve_ranks(obj).values.tolist() == [0.0, 0.0, 0.0]


def test_single_greater():
    field = globalize([Comparison(0, 1, "greater")], None, Weights(smooth=0.0), k=2)
    assert field.values == pytest.approx([0.5, -0.5], abs=1e-10)
    obj = assemble_objective([Comparison(0, 1, "greater")], None, Weights(smooth=0.0), k=2)
    assert obj.value(np.array([3.0, 2.0])) == pytest.approx(0.0)


def test_chain_of_greater():
    comps = [Comparison(2, 1, "greater"), Comparison(1, 0, "greater")]
    field = globalize(comps, None, Weights(smooth=0.0), k=3)
    assert field.values == pytest.approx([-1.0, 0.0, 1.0], abs=1e-10)


def test_less_mirrors_greater():
    a = globalize([Comparison(0, 1, "less")], None, k=2).values
    b = globalize([Comparison(1, 0, "greater")], None, k=2).values
    assert a == pytest.approx(b, abs=1e-12)


def test_equal_only():
    field = globalize([Comparison(0, 1, "equal")], None, k=2)
    assert field.values[0] == pytest.approx(field.values[1], abs=1e-12)


def test_contradictions_average_out():
    comps = [Comparison(0, 1, "greater"), Comparison(0, 1, "less")]
    assert globalize(comps, None, k=2).values == pytest.approx([0.0, 0.0], abs=1e-12)


def test_components_independently_centered():
    comps = [Comparison(0, 1, "greater"), Comparison(3, 2, "greater"), Comparison(2, 4, "greater")]
    field = globalize(comps, None, Weights(smooth=0.0), k=5)
    assert len(set(field.components[[0, 1]])) == 1 and field.components[0] != field.components[2]
    assert field.values[:2].sum() == pytest.approx(0.0, abs=1e-12)
    assert field.values[2:].sum() == pytest.approx(0.0, abs=1e-12)


def test_out_of_range_comparison():
    with pytest.raises(ValidationError):
        assemble_objective([Comparison(0, 5, "less")], None, k=3)
    with pytest.raises(ValidationError):
        Comparison(1, 1, "less")


@pytest.mark.parametrize("seed", range(25))
def test_solver_matches_dense_reference(seed):
    rng = np.random.default_rng(seed)
    k = int(rng.integers(2, 31))
    comps, graph, weights = random_instance(rng, k)
    field = globalize(comps, graph, weights, k=k)
    assert np.allclose(field.values, dense_reference(comps, graph, weights, k), atol=1e-8)


@pytest.mark.parametrize("seed", range(10))
def test_gauge_invariance(seed):
    """Relations from a true field do not change if a component's field is shifted."""
    rng = np.random.default_rng(seed)
    k = 12
    truth = rng.normal(size=k)
    pairs = [tuple(rng.choice(k, 2, replace=False)) for _ in range(30)]

    def rel(t, i, j):
        return "greater" if t[i] > t[j] else "less"

    a = globalize([Comparison(int(i), int(j), rel(truth, i, j)) for i, j in pairs], None, k=k).values
    b = globalize([Comparison(int(i), int(j), rel(truth + 7.5, i, j)) for i, j in pairs], None, k=k).values
    assert np.array_equal(a, b)


@given(st.permutations(list(range(8))))
def test_total_order_recovered(order):
    # neighbours in the true order are all compared
    comps = [Comparison(order[n + 1], order[n], "greater") for n in range(7)]
    comps += [Comparison(order[7], order[0], "greater"), Comparison(order[5], order[2], "greater")]
    values = globalize(comps, None, Weights(smooth=0.0), k=8).values
    assert all(values[order[n + 1]] > values[order[n]] for n in range(7))


def test_comparison_set_from_tuples():
    cs = ComparisonSet.from_tuples([(0, 1, "greater"), (2, 1, "equal")], axis="x")
    assert len(cs) == 2 and cs.axis == "x"


def test_scale_shift_identity_and_exact():
    d = np.linspace(-1, 3, 50).reshape(5, 10)
    fit = scale_shift_fit(d, d)
    assert (fit.scale, fit.shift) == pytest.approx((1.0, 0.0), abs=1e-12)
    fit = scale_shift_fit(d, 2 * d + 3)
    assert fit.scale == pytest.approx(2.0, abs=1e-9) and fit.shift == pytest.approx(3.0, abs=1e-9)


def test_scale_shift_degenerate():
    gt = np.arange(12.0).reshape(3, 4)
    fit = scale_shift_fit(np.full((3, 4), 4.2), gt)
    assert fit.degenerate and fit.scale == 0.0 and fit.shift == pytest.approx(gt.mean())


def test_scale_shift_respects_validity():
    d = np.array([[0.0, 1.0, 2.0, 3.0]])
    gt = np.array([[1.0, 3.0, 5.0, 100.0]])
    fit = scale_shift_fit(d, gt, valid=np.array([[True, True, True, False]]))
    assert (fit.scale, fit.shift) == pytest.approx((2.0, 1.0))
    with pytest.raises(ValidationError):
        scale_shift_fit(d, gt, valid=np.array([[True, False, False, False]]))


@given(hnp.arrays(float, 30, elements=st.floats(-10, 10)), hnp.arrays(float, 30, elements=st.floats(-10, 10)))
def test_scale_shift_residual_orthogonal(d, g):
    fit = scale_shift_fit(d, g)
    if fit.degenerate:
        return
    r = fit.apply(d) - g
    assert abs(r @ d) < 1e-8 * max(1.0, np.abs(d).sum() * np.abs(g).sum())
    assert abs(r.sum()) < 1e-8 * max(1.0, np.abs(g).sum())


def test_floodfill():
    sp = SuperpixelMap(np.array([[0, 0, 1], [0, 1, 1]]))
    out = floodfill_ranks(sp, np.array([-0.5, 0.5]))
    assert out.values.tolist() == [[-0.5, -0.5, 0.5], [-0.5, 0.5, 0.5]]
    assert len(np.unique(floodfill_ranks(SuperpixelMap(np.zeros((3, 3), int)), np.array([2.0])).values)) == 1
    with pytest.raises(ValidationError):
        floodfill_ranks(sp, np.zeros(3))


def test_sphere_uniform_axis():
    x = np.ones((3, 3))
    rgb = normalize_and_sphere([x, np.zeros((3, 3)), np.zeros((3, 3))])
    assert len(np.unique(rgb.reshape(-1, 3), axis=0)) == 1


@given(hnp.arrays(float, (3, 5, 5), elements=st.floats(-5, 5)))
def test_sphere_unit_norm_and_channel_permutation(stack):
    vec = sphere_vectors(list(stack))
    norms = np.linalg.norm(vec, axis=-1)
    assert np.all((np.abs(norms - 1) < 1e-6) | (norms == 0))
    swapped = sphere_vectors([stack[1], stack[0], stack[2]])
    assert np.allclose(swapped, vec[..., [1, 0, 2]])
