import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from chainlens.core import ValidationError
from chainlens.estimators import (
    ChainClassifier,
    ChainSegmenter,
    DepthChainEstimator,
    RankGlobalizer,
    ScaleShiftRegressor,
    SuperpixelTransformer,
)
from chainlens.globalize import Comparison
from chainlens.harness.synthetic import generate
from conftest import make_session


def test_scale_shift_regressor():
    x = np.array([1.0, 2.0, 3.0])
    reg = ScaleShiftRegressor().fit(x, 2 * x + 1)
    assert (reg.scale_, reg.shift_, reg.degenerate_) == pytest.approx((2.0, 1.0, False))
    assert reg.predict([10.0]) == pytest.approx([21.0])
    assert reg.score(x, 2 * x + 1) == pytest.approx(1.0)
    with pytest.raises(NotFittedError):
        ScaleShiftRegressor().predict(x)


def test_rank_globalizer_codes_equal_comparisons():
    rows = np.array([[0, 1, 1], [1, 2, 1], [2, 3, 0]])
    comps = [Comparison(0, 1, "greater"), Comparison(1, 2, "greater"), Comparison(2, 3, "equal")]
    a = RankGlobalizer(n_segments=4).fit_transform(rows)
    b = RankGlobalizer(n_segments=4).fit(comps).values_
    assert np.allclose(a, b)
    assert a[0] > a[1] > a[2]
    with pytest.raises(ValidationError, match="unknown relation code"):
        RankGlobalizer().fit(np.array([[0, 1, 5]]))


def test_params_roundtrip():
    est = RankGlobalizer(smooth=0.5)
    assert clone(est).get_params()["smooth"] == 0.5
    assert set(DepthChainEstimator().get_params()) == {"session", "k", "n_pairs", "smooth", "seed"}


def test_superpixel_transformer():
    imgs = [np.zeros((16, 16, 3), np.uint8)] * 2
    out = SuperpixelTransformer(k_target=4).fit_transform(imgs)
    assert len(out) == 2 and out[0].shape == (16, 16)


def test_chain_estimators_need_session():
    with pytest.raises(ValidationError, match="needs a session"):
        ChainClassifier().fit()


def test_chain_classifier_and_segmenter():
    ds = generate("classification", 10, seed=0)
    ids = [s.image_id for s in ds]
    clf = ChainClassifier(make_session(truths=ds.truths()), ds.vocab).fit()
    assert clf.predict([s.image for s in ds], ids) == [s.label for s in ds]
    with pytest.raises(ValidationError):
        clf.predict([s.image for s in ds], ids[:3])

    seg = generate("segmentation", 1, seed=0)
    s = seg.samples[0]
    masks = ChainSegmenter(make_session(truths={"img00000": s.ground_truth(seg.vocab)}), seg.vocab, k=20).predict([s.image])
    assert masks[0].shape == s.image.shape[:2]
