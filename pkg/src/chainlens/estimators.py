"""scikit-learn style wrappers, for use in pipelines and parameter sweeps.

The chains query a backend per image and learn nothing, so their ``fit`` only
validates settings. The two numeric steps with real fitted state
(rank globalization and scale/shift alignment) carry trailing-underscore
attributes like any sklearn estimator.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_consistent_length, check_is_fitted

from chainlens.backend import Session
from chainlens.chains import GridParams, classify_batch, detect, estimate_depth_ranks, estimate_normal_ranks, segment_image
from chainlens.core import ClassVocabulary, ValidationError
from chainlens.globalize import Comparison, Weights, globalize, scale_shift_fit
from chainlens.superpixel import AdjacencyGraph, slic

_RELATION_CODES = {1: "greater", -1: "less", 0: "equal"}


class ScaleShiftRegressor(RegressorMixin, BaseEstimator):
    """Least-squares ``y ~ scale * x + shift`` on a single feature."""

    def fit(self, X, y):
        X = check_array(X, ensure_2d=False, dtype=float, ensure_all_finite=False).reshape(-1)
        y = check_array(y, ensure_2d=False, dtype=float, ensure_all_finite=False).reshape(-1)
        check_consistent_length(X, y)
        fit = scale_shift_fit(X, y)
        self.scale_, self.shift_, self.degenerate_ = fit.scale, fit.shift, fit.degenerate
        self.n_features_in_ = 1
        return self

    def predict(self, X):
        check_is_fitted(self, "scale_")
        X = check_array(X, ensure_2d=False, dtype=float, ensure_all_finite=False).reshape(-1)
        return self.scale_ * X + self.shift_


class RankGlobalizer(BaseEstimator):
    """Per-segment scalars from pairwise relations.

    ``X`` is a sequence of ``Comparison`` or an (n, 3) integer array of
    (i, j, code) rows with code 1 = greater, -1 = less, 0 = equal.
    """

    def __init__(self, n_segments: int | None = None, smooth: float = 1.0, greater: float = 1.0, less: float = 1.0, equal: float = 1.0):
        self.n_segments = n_segments
        self.smooth = smooth
        self.greater = greater
        self.less = less
        self.equal = equal

    @staticmethod
    def _comparisons(X) -> list[Comparison]:
        if len(X) and isinstance(X[0], Comparison):
            return list(X)
        arr = check_array(X, dtype=np.int64)
        if arr.shape[1] != 3:
            raise ValidationError("expected (n, 3) rows of (i, j, relation code)")
        try:
            return [Comparison(int(i), int(j), _RELATION_CODES[int(c)]) for i, j, c in arr]
        except KeyError as exc:
            raise ValidationError(f"unknown relation code {exc.args[0]}") from None

    def fit(self, X, y=None, adjacency: AdjacencyGraph | None = None):
        comps = self._comparisons(X)
        k = self.n_segments
        if k is None:
            k = adjacency.k if adjacency is not None else 1 + max(max(c.i, c.j) for c in comps)
        field = globalize(comps, adjacency, Weights(self.greater, self.less, self.equal, self.smooth), k=k)
        self.values_, self.components_, self.n_iter_ = field.values, field.components, field.iterations
        return self

    def fit_transform(self, X, y=None, adjacency: AdjacencyGraph | None = None):
        return self.fit(X, y, adjacency).values_


class SuperpixelTransformer(TransformerMixin, BaseEstimator):
    """Images to superpixel label rasters."""

    def __init__(self, k_target: int = 100, compactness: float = 10.0, iterations: int = 10):
        self.k_target = k_target
        self.compactness = compactness
        self.iterations = iterations

    def fit(self, X=None, y=None):
        if self.k_target < 1:
            raise ValidationError("k_target must be at least 1")
        return self

    def transform(self, X) -> list[np.ndarray]:
        return [slic(img, self.k_target, self.compactness, self.iterations).labels for img in X]


class _ChainEstimator(BaseEstimator):
    """Shared plumbing: ``predict(images, image_ids)`` runs the chain per image."""

    def fit(self, X=None, y=None):
        if self.session is None:
            raise ValidationError(f"{type(self).__name__} needs a session")
        return self

    @staticmethod
    def _ids(X, image_ids):
        if image_ids is None:
            image_ids = [f"img{i:05d}" for i in range(len(X))]
        if len(image_ids) != len(X):
            raise ValidationError("images and image_ids differ in length")
        return list(image_ids)


class ChainClassifier(_ChainEstimator):
    def __init__(self, session: Session | None = None, vocab: ClassVocabulary | None = None, batch_size: int = 100):
        self.session = session
        self.vocab = vocab
        self.batch_size = batch_size

    def predict(self, X, image_ids: Sequence[str] | None = None) -> list[str]:
        return classify_batch(list(X), self._ids(X, image_ids), self.vocab, self.session, self.batch_size)


class ChainDetector(_ChainEstimator):
    def __init__(self, session: Session | None = None, vocab: ClassVocabulary | None = None, strategy: str = "regions", grid: GridParams = GridParams()):
        self.session = session
        self.vocab = vocab
        self.strategy = strategy
        self.grid = grid

    def predict(self, X, image_ids: Sequence[str] | None = None):
        return [detect(img, iid, self.vocab, self.session, self.strategy, self.grid).boxes for img, iid in zip(X, self._ids(X, image_ids))]


class ChainSegmenter(_ChainEstimator):
    def __init__(self, session: Session | None = None, vocab: ClassVocabulary | None = None, k: int = 100, batch_size: int = 16, use_history: bool = True):
        self.session = session
        self.vocab = vocab
        self.k = k
        self.batch_size = batch_size
        self.use_history = use_history

    def predict(self, X, image_ids: Sequence[str] | None = None) -> list[np.ndarray]:
        return [
            segment_image(img, iid, self.vocab, self.session, self.k, self.batch_size, self.use_history).mask.labels
            for img, iid in zip(X, self._ids(X, image_ids))
        ]


class DepthChainEstimator(_ChainEstimator):
    def __init__(self, session: Session | None = None, k: int = 100, n_pairs: int = 200, smooth: float = 1.0, seed: int = 0):
        self.session = session
        self.k = k
        self.n_pairs = n_pairs
        self.smooth = smooth
        self.seed = seed

    def predict(self, X, image_ids: Sequence[str] | None = None) -> list[np.ndarray]:
        return [
            estimate_depth_ranks(img, iid, self.session, self.k, self.n_pairs, self.smooth, self.seed).raster.values
            for img, iid in zip(X, self._ids(X, image_ids))
        ]


class NormalChainEstimator(_ChainEstimator):
    def __init__(self, session: Session | None = None, k: int = 100, n_pairs: int = 200, smooth: float = 1.0, seed: int = 0):
        self.session = session
        self.k = k
        self.n_pairs = n_pairs
        self.smooth = smooth
        self.seed = seed

    def predict(self, X, image_ids: Sequence[str] | None = None) -> list[np.ndarray]:
        """Per image, an (H, W, 3) stack of the x, y and z rank rasters."""
        out = []
        for img, iid in zip(X, self._ids(X, image_ids)):
            res = estimate_normal_ranks(img, iid, self.session, self.k, self.n_pairs, self.smooth, self.seed)
            out.append(np.stack([r.values for r in res.rasters], axis=-1))
        return out
