import numpy as np
import pytest

from chainlens.backend import (
    BINARY_RELATIONS,
    TERNARY_RELATIONS,
    ChoiceItem,
    GroundTruth,
    MissingGroundTruth,
    MultiChoice,
    MultiLabel,
    OracleBackend,
    PairOrder,
    Presence,
    RandomBackend,
    SameObject,
    ScriptedBackend,
    oracle_answer,
)
from chainlens.core import PixelBox
from chainlens.raster_io import FloatRaster, IndexMask

IMG = np.zeros((10, 10, 3), np.uint8)


def halves():
    left = np.zeros((10, 10), bool)
    left[:, :5] = True
    return left, ~left


def test_presence_oracle():
    truth = GroundTruth(boxes=[("cat", PixelBox(2, 2, 6, 6))])
    assert oracle_answer(Presence("i", IMG, PixelBox(5, 5, 10, 10), "cat"), truth) is True
    assert oracle_answer(Presence("i", IMG, PixelBox(6, 6, 10, 10), "cat"), truth) is False
    assert oracle_answer(Presence("i", IMG, PixelBox(0, 0, 10, 10), "dog"), truth) is False


def test_multilabel_oracle():
    truth = GroundTruth(boxes=[("cat", PixelBox(0, 0, 3, 3)), ("dog", PixelBox(7, 7, 10, 10))])
    q = MultiLabel("i", IMG, PixelBox(0, 0, 5, 5), ("cat", "dog"))
    assert oracle_answer(q, truth) == {"cat"}
    assert oracle_answer(MultiLabel("i", IMG, PixelBox(4, 4, 6, 6), ("cat", "dog")), truth) == frozenset()


def test_pair_order_depth():
    a, b = halves()
    depth = np.where(a, 3.0, 1.0)
    truth = GroundTruth(depth=FloatRaster(depth))
    assert oracle_answer(PairOrder("i", IMG, a, b), truth) == "greater"
    assert oracle_answer(PairOrder("i", IMG, b, a), truth) == "less"


def test_pair_order_ternary_equality():
    a, b = halves()
    a[0], b[0] = False, False
    values = np.where(a, 1.0, 1.04)
    values[0, 0], values[0, 9] = 0.0, 2.0  # range 2, so the tolerance is 0.1
    truth = GroundTruth(normals=[FloatRaster(values)] * 3)
    q = PairOrder("i", IMG, a, b, "x", TERNARY_RELATIONS, "normal_pair")
    assert oracle_answer(q, truth) == "equal"
    assert oracle_answer(q, truth, equal_fraction=0.0) == "less"
    truth = GroundTruth(normals=[FloatRaster(np.where(a, 1.0, 1.2))] * 3)
    truth.normals[0].values[0, 0], truth.normals[0].values[0, 9] = 0.0, 2.0
    assert oracle_answer(q, truth) == "less"


def test_constant_field_is_equal():
    a, b = halves()
    truth = GroundTruth(normals=[FloatRaster(np.ones((10, 10)))] * 3)
    assert oracle_answer(PairOrder("i", IMG, a, b, "y", TERNARY_RELATIONS), truth) == "equal"


def test_multichoice_majority_and_label():
    sem = np.zeros((10, 10), int)
    sem[:, 2:] = 1  # the left half holds 2 cat columns and 3 dog columns
    sem[0, :] = 255
    truth = GroundTruth(label="dog", semantic=IndexMask(sem), class_names=("cat", "dog"))
    a, _ = halves()
    q = MultiChoice((ChoiceItem("i", IMG, a), ChoiceItem("i", IMG)), ("cat", "dog"))
    assert oracle_answer(q, truth) == ("dog", "dog")
    only_ignore = np.zeros((10, 10), bool)
    only_ignore[0, :] = True
    assert oracle_answer(MultiChoice((ChoiceItem("i", IMG, only_ignore),), ("cat", "dog")), truth) == ("cat",)


def test_same_object_majority():
    inst = np.zeros((10, 10), bool)
    inst[:, :6] = True
    a, b = halves()
    q = SameObject("i", IMG, (a, b), a)
    assert oracle_answer(q, GroundTruth(instance=inst)) == (True, False)


def test_missing_truth():
    with pytest.raises(MissingGroundTruth):
        OracleBackend({}).structured(Presence("nope", IMG, PixelBox(0, 0, 2, 2), "cat"))
    with pytest.raises(MissingGroundTruth):
        oracle_answer(PairOrder("i", IMG, *halves()), GroundTruth())


def test_oracle_splits_multi_image_batches():
    backend = OracleBackend({"a": GroundTruth(label="cat"), "b": GroundTruth(label="dog")})
    q = MultiChoice((ChoiceItem("a", IMG), ChoiceItem("b", IMG)), ("cat", "dog"))
    assert backend.structured(q) == ("cat", "dog")
    assert q.parse(backend.respond(q, None).text) == ("cat", "dog")


def _presence_queries(n):
    rng = np.random.default_rng(0)
    for _ in range(n):
        x, y = rng.integers(0, 9, 2)
        yield Presence("i", IMG, PixelBox(int(x), int(y), int(x) + 1, int(y) + 1), "cat")


def test_scripted_zero_noise_is_oracle():
    truths = {"i": GroundTruth(boxes=[("cat", PixelBox(0, 0, 5, 5))])}
    oracle, scripted = OracleBackend(truths), ScriptedBackend(truths, 0.0, seed=3)
    for q in _presence_queries(200):
        assert scripted.respond(q, None).text == oracle.respond(q, None).text


def test_scripted_full_noise_always_wrong():
    truths = {"i": GroundTruth(boxes=[("cat", PixelBox(0, 0, 5, 5))])}
    oracle, scripted = OracleBackend(truths), ScriptedBackend(truths, 1.0)
    for q in _presence_queries(200):
        assert scripted.respond(q, None).text != oracle.respond(q, None).text


def test_scripted_error_rate():
    truths = {f"i{n}": GroundTruth(boxes=[("cat", PixelBox(0, 0, 5, 5))]) for n in range(10_000)}
    scripted = ScriptedBackend(truths, 0.3, seed=9)
    wrong = 0
    for n in range(10_000):
        q = Presence(f"i{n}", IMG, PixelBox(0, 0, 2, 2), "cat")
        wrong += q.parse(scripted.respond(q, None).text) is False
    assert abs(wrong / 10_000 - 0.3) < 0.02


def test_scripted_reproducible_and_order_free():
    truths = {"i": GroundTruth(depth=FloatRaster(np.arange(100.0).reshape(10, 10)))}
    a, b = halves()
    queries = [PairOrder("i", IMG, np.roll(a, s, 1), b) for s in range(1, 5)]
    one = [ScriptedBackend(truths, 0.5, seed=4).respond(q, None).text for q in queries]
    backend = ScriptedBackend(truths, 0.5, seed=4)
    two = [backend.respond(q, None).text for q in reversed(queries)]
    assert one == two[::-1]


def test_scripted_kind_scope_and_add_mode():
    truths = {"i": GroundTruth(boxes=[("cat", PixelBox(0, 0, 5, 5))])}
    scoped = ScriptedBackend(truths, 1.0, kinds=["multi_label"])
    q = Presence("i", IMG, PixelBox(0, 0, 2, 2), "cat")
    assert scoped.respond(q, None).text == "yes"
    add = ScriptedBackend(truths, 1.0, multilabel_mode="add")
    ml = MultiLabel("i", IMG, PixelBox(0, 0, 2, 2), ("cat", "dog"))
    assert add.structured(ml) | {"dog"} == add.perturb(ml, add.structured(ml))


def test_random_backend_answers_are_valid():
    rb = RandomBackend(seed=1)
    a, b = halves()
    votes = []
    for s in range(400):
        q = PairOrder(f"img{s}", IMG, a, b, relations=BINARY_RELATIONS)
        votes.append(q.parse(rb.respond(q, None).text))
    assert set(votes) == {"greater", "less"}
    assert abs(votes.count("greater") / 400 - 0.5) < 0.1
