"""Globalize pairwise relations into per-segment scalar fields.

Every relation contributes a squared-difference term over two segments:

    greater(i, j)  ->  lam_gt * (x_i - x_j - 1)^2
    less(i, j)     ->  lam_lt * (x_j - x_i - 1)^2
    equal(i, j)    ->  lam_eq * (x_i - x_j)^2
    edge (i, j)    ->  lam_s  * (x_i - x_j)^2      (adjacent segments)

The sum is a PSD quadratic whose null space is constant per connected
component; we solve it by conjugate gradient and pin the gauge by making each
component mean-zero.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from chainlens.core import ValidationError
from chainlens.raster_io import FloatRaster
from chainlens.superpixel import AdjacencyGraph, SuperpixelMap

RELATIONS = ("greater", "less", "equal")


@dataclass(frozen=True)
class Comparison:
    i: int
    j: int
    relation: str

    def __post_init__(self):
        if self.i == self.j:
            raise ValidationError("comparison needs two distinct segments")
        if self.relation not in RELATIONS:
            raise ValidationError(f"unknown relation {self.relation!r}")


@dataclass(frozen=True)
class ComparisonSet:
    comparisons: tuple[Comparison, ...]
    axis: str = "depth"

    def __len__(self) -> int:
        return len(self.comparisons)

    def __iter__(self):
        return iter(self.comparisons)

    @classmethod
    def from_tuples(cls, items: Iterable[tuple[int, int, str]], axis: str = "depth") -> "ComparisonSet":
        return cls(tuple(Comparison(int(i), int(j), r) for i, j, r in items), axis)


@dataclass(frozen=True)
class Weights:
    greater: float = 1.0
    less: float = 1.0
    equal: float = 1.0
    smooth: float = 1.0

    def __post_init__(self):
        for name in ("greater", "less", "equal", "smooth"):
            if getattr(self, name) < 0:
                raise ValidationError(f"weight {name} must be non-negative")


@dataclass(eq=False)
class QuadraticObjective:
    """f(x) = x^T A x - 2 b^T x + c; the minimizers solve A x = b."""

    matrix: sp.csr_matrix
    linear: np.ndarray
    constant: float
    k: int

    def value(self, x: np.ndarray) -> float:
        x = np.asarray(x, dtype=float)
        return float(x @ (self.matrix @ x) - 2.0 * self.linear @ x + self.constant)

    def components(self) -> np.ndarray:
        """Connected components of the coupling graph (edges with non-zero weight)."""
        coupling = self.matrix.copy()
        coupling.setdiag(0)
        coupling.eliminate_zeros()
        _, labels = connected_components(coupling, directed=False)
        return labels


@dataclass(eq=False)
class RankField:
    values: np.ndarray
    components: np.ndarray
    iterations: int = 0

    @property
    def k(self) -> int:
        return int(self.values.size)


def assemble_objective(
    comparisons: ComparisonSet | Sequence[Comparison],
    adjacency: AdjacencyGraph | None,
    weights: Weights = Weights(),
    k: int | None = None,
) -> QuadraticObjective:
    if k is None:
        if adjacency is None:
            raise ValidationError("k is required when no adjacency graph is given")
        k = adjacency.k
    if adjacency is not None and adjacency.k != k:
        raise ValidationError(f"adjacency has {adjacency.k} nodes, expected {k}")

    rows, cols, w, offsets = [], [], [], []
    for c in comparisons:
        if not (0 <= c.i < k and 0 <= c.j < k):
            raise ValidationError(f"comparison ({c.i}, {c.j}) references a segment outside 0..{k - 1}")
        if c.relation == "greater":
            rows.append(c.i), cols.append(c.j), w.append(weights.greater), offsets.append(1.0)
        elif c.relation == "less":
            rows.append(c.i), cols.append(c.j), w.append(weights.less), offsets.append(-1.0)
        else:
            rows.append(c.i), cols.append(c.j), w.append(weights.equal), offsets.append(0.0)
    if adjacency is not None and weights.smooth > 0:
        for i, j in adjacency.edges:
            rows.append(i), cols.append(j), w.append(weights.smooth), offsets.append(0.0)

    i = np.asarray(rows, dtype=np.int64)
    j = np.asarray(cols, dtype=np.int64)
    wt = np.asarray(w, dtype=float)
    off = np.asarray(offsets, dtype=float)
    keep = wt > 0
    i, j, wt, off = i[keep], j[keep], wt[keep], off[keep]

    # each term wt * (x_i - x_j - off)^2 adds wt * e_ij e_ij^T to A and wt*off*e_ij to b
    data = np.concatenate([wt, wt, -wt, -wt])
    r = np.concatenate([i, j, i, j])
    c = np.concatenate([i, j, j, i])
    matrix = sp.csr_matrix((data, (r, c)), shape=(k, k))
    linear = np.bincount(i, wt * off, minlength=k) - np.bincount(j, wt * off, minlength=k)
    constant = float(np.sum(wt * off * off))
    return QuadraticObjective(matrix, linear.astype(float), constant, k)


def _center(x: np.ndarray, components: np.ndarray) -> np.ndarray:
    n = components.max() + 1 if components.size else 0
    sums = np.bincount(components, x, n)
    counts = np.bincount(components, minlength=n)
    return x - (sums / counts)[components]


def solve_ranks(objective: QuadraticObjective, tol: float = 1e-10, max_iter: int | None = None) -> RankField:
    """Minimize the objective by conjugate gradient, gauge-fixed to per-component mean zero.

    The right-hand side sums to zero on every component, so CG started at zero
    stays orthogonal to the null space; the iterates are re-centered anyway to
    keep rounding from drifting along it.
    """
    k = objective.k
    comps = objective.components()
    if k == 0:
        return RankField(np.zeros(0), comps)
    A = objective.matrix
    b = _center(objective.linear, comps)
    max_iter = 10 * k if max_iter is None else max_iter
    x = np.zeros(k)
    r = b.copy()
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return RankField(x, comps)
    p = r.copy()
    rs = r @ r
    it = 0
    while it < max_iter and np.sqrt(rs) > tol * bnorm:
        Ap = A @ p
        alpha = rs / (p @ Ap)
        x += alpha * p
        r -= alpha * Ap
        r = _center(r, comps)
        rs_new = r @ r
        p = r + (rs_new / rs) * p
        rs = rs_new
        it += 1
    return RankField(_center(x, comps), comps, it)


def globalize(
    comparisons: ComparisonSet | Sequence[Comparison],
    adjacency: AdjacencyGraph | None,
    weights: Weights = Weights(),
    k: int | None = None,
) -> RankField:
    return solve_ranks(assemble_objective(comparisons, adjacency, weights, k))


@dataclass(frozen=True)
class ScaleShift:
    scale: float
    shift: float
    degenerate: bool = False

    def apply(self, values: np.ndarray) -> np.ndarray:
        return self.scale * np.asarray(values, dtype=float) + self.shift


def _as_array(x) -> np.ndarray:
    return np.asarray(x.values if isinstance(x, FloatRaster) else x, dtype=float)


def scale_shift_fit(relative, gt, valid: np.ndarray | None = None) -> ScaleShift:
    """Least-squares (s, t) minimizing sum (s * d + t - d*)^2 over valid pixels."""
    d = _as_array(relative)
    g = _as_array(gt)
    if d.shape != g.shape:
        raise ValidationError(f"shape mismatch: relative {d.shape} vs gt {g.shape}")
    mask = np.isfinite(d) & np.isfinite(g)
    if isinstance(gt, FloatRaster):
        mask &= gt.valid_mask()
    if valid is not None:
        mask &= np.asarray(valid, dtype=bool)
    d, g = d[mask], g[mask]
    if d.size < 2:
        raise ValidationError("scale/shift fit needs at least two valid pixels")
    d_mean, g_mean = d.mean(), g.mean()
    dc = d - d_mean
    var = dc @ dc
    # the min/max test catches constants whose mean rounds away from the value
    if d.min() == d.max() or var == 0.0:
        return ScaleShift(0.0, float(g_mean), degenerate=True)
    s = float(dc @ (g - g_mean) / var)
    return ScaleShift(s, float(g_mean - s * d_mean))


def floodfill_ranks(spmap: SuperpixelMap, field: RankField | np.ndarray) -> FloatRaster:
    values = np.asarray(field.values if isinstance(field, RankField) else field, dtype=float)
    if values.size != spmap.k:
        raise ValidationError(f"field has {values.size} values for {spmap.k} segments")
    return FloatRaster(values[spmap.labels])


def sphere_vectors(fields: Sequence[FloatRaster | np.ndarray]) -> np.ndarray:
    """Per-axis min-max normalize, map to [-1, 1] and renormalize to unit vectors.

    A constant axis contributes 0. Pixels whose three axes are all constant
    stay at the zero vector.
    """
    if len(fields) != 3:
        raise ValidationError("expected three axis rasters")
    arrays = [_as_array(f) for f in fields]
    if len({a.shape for a in arrays}) != 1:
        raise ValidationError("axis rasters differ in shape")
    channels = []
    for a in arrays:
        lo, hi = np.nanmin(a), np.nanmax(a)
        channels.append(np.zeros_like(a) if hi == lo else 2.0 * (a - lo) / (hi - lo) - 1.0)
    vec = np.stack(channels, axis=-1)
    norm = np.linalg.norm(vec, axis=-1, keepdims=True)
    return np.divide(vec, norm, out=np.zeros_like(vec), where=norm > 0)


def normalize_and_sphere(fields: Sequence[FloatRaster | np.ndarray]) -> np.ndarray:
    """RGB visualization of three per-axis rank rasters."""
    vec = sphere_vectors(fields)
    return np.round((vec + 1.0) * 127.5).astype(np.uint8)
