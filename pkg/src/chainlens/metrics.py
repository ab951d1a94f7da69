"""Task metrics: detection AP, segmentation IoU, depth errors, rank correlations."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy import stats

from chainlens.core import LabeledBox, ValidationError, box_iou
from chainlens.globalize import ComparisonSet
from chainlens.raster_io import DEFAULT_IGNORE_INDEX, FloatRaster, IndexMask
from chainlens.superpixel import SuperpixelMap

COCO_IOU_THRESHOLDS = tuple(np.round(np.linspace(0.5, 0.95, 10), 2))
RECALL_POINTS = np.linspace(0.0, 1.0, 101)
DEPTH_FLOOR = 1e-3


class UndefinedCorrelation(ValueError):
    """Correlation requested on constant input."""


class SubsetSelectionError(RuntimeError):
    pass


@dataclass
class MetricReport:
    task: str
    values: dict[str, float]
    count: int
    extra: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"task": self.task, "values": self.values, "count": self.count, **self.extra}


# -- detection ---------------------------------------------------------------


def _class_ap(
    preds: Sequence[Sequence[LabeledBox]], gts: Sequence[Sequence[LabeledBox]], cls: int, thr: float
) -> float:
    dets = []
    for img, boxes in enumerate(preds):
        dets.extend((d.score, img, d) for d in boxes if d.class_id == cls)
    gt_by_img = [[g for g in boxes if g.class_id == cls] for boxes in gts]
    npos = sum(len(g) for g in gt_by_img)
    if npos == 0:
        return float("nan")
    if not dets:
        return 0.0
    # stable sort keeps input order among equal scores
    dets.sort(key=lambda t: -t[0])
    matched = [np.zeros(len(g), dtype=bool) for g in gt_by_img]
    tp = np.zeros(len(dets))
    for n, (_, img, d) in enumerate(dets):
        best, best_iou = -1, thr
        for gi, g in enumerate(gt_by_img[img]):
            if matched[img][gi]:
                continue
            iou = box_iou(d.box, g.box)
            if iou >= best_iou:
                best, best_iou = gi, iou
        if best >= 0:
            matched[img][best] = True
            tp[n] = 1
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1 - tp)
    recall = ctp / npos
    precision = ctp / (ctp + cfp)
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    q = np.where(idx < len(precision), precision[np.minimum(idx, len(precision) - 1)], 0.0)
    return float(q.mean())


def average_precision(
    preds: Sequence[Sequence[LabeledBox]],
    gts: Sequence[Sequence[LabeledBox]],
    iou_thresholds: Sequence[float] = COCO_IOU_THRESHOLDS,
) -> dict[str, float]:
    """COCO-style AP with 101-point interpolated precision.

    ``preds`` and ``gts`` are per-image lists. Classes without any ground truth
    are skipped, as in the COCO evaluator. With no ground truth at all the
    result is 1.0 when there are also no predictions and 0.0 otherwise.
    """
    if len(preds) != len(gts):
        raise ValidationError(f"{len(preds)} prediction lists for {len(gts)} images")
    thresholds = [float(t) for t in iou_thresholds]
    classes = sorted({g.class_id for boxes in gts for g in boxes})
    if not classes:
        value = 1.0 if not any(preds) else 0.0
        out = {"AP": value}
        if 0.5 in thresholds:
            out["AP50"] = value
        if 0.75 in thresholds:
            out["AP75"] = value
        return out
    table = np.array([[_class_ap(preds, gts, c, t) for c in classes] for t in thresholds])
    out = {"AP": float(table.mean())}
    for name, t in (("AP50", 0.5), ("AP75", 0.75)):
        if t in thresholds:
            out[name] = float(table[thresholds.index(t)].mean())
    return out


def matched_iou(pred: Sequence[LabeledBox], gt: Sequence[LabeledBox]) -> list[float]:
    """Best same-class IoU for every ground-truth box (0 when the class was missed)."""
    return [max((box_iou(p.box, g.box) for p in pred if p.class_id == g.class_id), default=0.0) for g in gt]


# -- segmentation ------------------------------------------------------------


def _labels(mask) -> tuple[np.ndarray, int]:
    if isinstance(mask, IndexMask):
        return mask.labels.astype(np.int64), mask.ignore_index
    return np.asarray(mask, dtype=np.int64), DEFAULT_IGNORE_INDEX


def confusion_counts(pred, gt) -> dict[tuple[int, int], int]:
    """Sparse (gt class, predicted label) pixel counts over non-ignored ground truth."""
    p, _ = _labels(pred)
    g, ignore = _labels(gt)
    if p.shape != g.shape:
        raise ValidationError(f"mask size mismatch: pred {p.shape} vs gt {g.shape}")
    keep = g != ignore
    pairs, counts = np.unique(np.stack([g[keep], p[keep]]), axis=1, return_counts=True)
    return {(int(a), int(b)): int(n) for (a, b), n in zip(pairs.T, counts)}


def metrics_from_confusion(
    counts: Mapping[tuple[int, int], int], ignore_index: int = DEFAULT_IGNORE_INDEX
) -> dict[str, float]:
    """mIoU over classes present in gt or pred, plus pixel accuracy.

    A predicted ``ignore_index`` (a failed answer) counts as wrong but is not a class.
    """
    total = sum(counts.values())
    if total == 0:
        raise ValidationError("no labeled pixels to score")
    correct = sum(n for (g, p), n in counts.items() if g == p)
    classes = {g for g, _ in counts} | {p for _, p in counts if p != ignore_index}
    ious = []
    for c in sorted(classes):
        tp = counts.get((c, c), 0)
        fn = sum(n for (g, p), n in counts.items() if g == c and p != c)
        fp = sum(n for (g, p), n in counts.items() if p == c and g != c)
        ious.append(tp / (tp + fp + fn))
    return {"mIoU": float(np.mean(ious)), "pixel_acc": correct / total}


def seg_metrics(pred, gt) -> dict[str, float]:
    _, ignore = _labels(gt)
    return metrics_from_confusion(confusion_counts(pred, gt), ignore)


def superpixel_upper_bound(spmap: SuperpixelMap, gt) -> dict[str, float]:
    """Score of the best per-superpixel labeling, straight from the segment/class histogram."""
    g, ignore = _labels(gt)
    if g.shape != spmap.labels.shape:
        raise ValidationError("superpixel map and gt differ in size")
    keep = g != ignore
    seg = spmap.labels[keep].astype(np.int64)
    cls = g[keep]
    n_cls = int(cls.max()) + 1 if cls.size else 1
    hist = np.bincount(seg * n_cls + cls, minlength=spmap.k * n_cls).reshape(spmap.k, n_cls)
    majority = np.argmax(hist, axis=1)
    counts: dict[tuple[int, int], int] = {}
    for s in range(spmap.k):
        for c in np.flatnonzero(hist[s]):
            key = (int(c), int(majority[s]))
            counts[key] = counts.get(key, 0) + int(hist[s, c])
    return metrics_from_confusion(counts, ignore)


def mask_iou(pred: np.ndarray, gt: np.ndarray) -> float:
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ValidationError("mask size mismatch")
    union = np.logical_or(pred, gt).sum()
    return 1.0 if union == 0 else float(np.logical_and(pred, gt).sum() / union)


# -- depth -------------------------------------------------------------------


def _float(x) -> np.ndarray:
    return np.asarray(x.values if isinstance(x, FloatRaster) else x, dtype=float)


def depth_metrics(pred, gt, valid: np.ndarray | None = None) -> dict[str, float]:
    p = _float(pred)
    g = _float(gt)
    if p.shape != g.shape:
        raise ValidationError(f"shape mismatch: pred {p.shape} vs gt {g.shape}")
    mask = np.isfinite(p) & np.isfinite(g) & (g > 0)
    if isinstance(gt, FloatRaster):
        mask &= gt.valid_mask()
    if valid is not None:
        mask &= np.asarray(valid, dtype=bool)
    if not mask.any():
        raise ValidationError("no valid pixels to score")
    p = np.maximum(p[mask], DEPTH_FLOOR)
    g = g[mask]
    ratio = np.maximum(p / g, g / p)
    out = {f"delta{i}": float(np.mean(ratio < 1.25**i)) for i in (1, 2, 3)}
    out["AbsRel"] = float(np.mean(np.abs(p - g) / g))
    return out


# -- rank correlation --------------------------------------------------------


def spearman(a, b) -> float:
    """Pearson correlation of average-tie ranks."""
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if a.size != b.size:
        raise ValidationError(f"length mismatch: {a.size} vs {b.size}")
    if a.size < 2:
        raise ValidationError("spearman needs at least two values")
    ra = stats.rankdata(a)
    rb = stats.rankdata(b)
    ra -= ra.mean()
    rb -= rb.mean()
    denom = np.sqrt((ra @ ra) * (rb @ rb))
    if denom == 0:
        raise UndefinedCorrelation("spearman is undefined for constant input")
    return float(np.clip(ra @ rb / denom, -1.0, 1.0))


def kendall_tau(a, b) -> float:
    """Kendall tau-b."""
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if a.size != b.size:
        raise ValidationError(f"length mismatch: {a.size} vs {b.size}")
    if a.size < 2:
        raise ValidationError("kendall tau needs at least two values")
    if np.all(a == a[0]) or np.all(b == b[0]):
        raise UndefinedCorrelation("kendall tau is undefined for constant input")
    return float(stats.kendalltau(a, b, variant="b").statistic)


def oracle_relation(va: float, vb: float, equal_tolerance: float | None = None) -> str:
    if equal_tolerance is not None and (abs(va - vb) < equal_tolerance or va == vb):
        return "equal"
    return "greater" if va > vb else "less"


def pairwise_accuracy(relations: ComparisonSet, gt_values, equal_tolerance: float | None = None) -> float:
    """Percentage of relations that agree with the relation implied by ``gt_values``."""
    gt_values = np.asarray(gt_values, dtype=float)
    if len(relations) == 0:
        raise ValidationError("no relations to score")
    hits = sum(oracle_relation(gt_values[c.i], gt_values[c.j], equal_tolerance) == c.relation for c in relations)
    return 100.0 * hits / len(relations)


def subsample_indices(n: int, max_samples: int, seed: int) -> np.ndarray:
    if n <= max_samples:
        return np.arange(n)
    return np.sort(np.random.default_rng(seed).choice(n, size=max_samples, replace=False))


def normal_axis_rho(pred_rank, gt_alignment, valid: np.ndarray | None = None, max_samples: int = 10_000, seed: int = 0) -> float:
    """Spearman rho between a rank raster and the per-pixel normal component along one axis."""
    p = _float(pred_rank)
    g = _float(gt_alignment)
    if p.shape != g.shape:
        raise ValidationError("rank and alignment rasters differ in shape")
    mask = np.isfinite(p) & np.isfinite(g)
    if isinstance(gt_alignment, FloatRaster):
        mask &= gt_alignment.valid_mask()
    if valid is not None:
        mask &= np.asarray(valid, dtype=bool)
    p, g = p[mask], g[mask]
    idx = subsample_indices(p.size, max_samples, seed)
    return spearman(p[idx], g[idx])


# -- representative subsets --------------------------------------------------


def _tau_or_degenerate(a: np.ndarray, b: np.ndarray) -> float:
    a_const = np.all(a == a[0])
    b_const = np.all(b == b[0])
    if a_const or b_const:
        return 1.0 if a_const and b_const else 0.0
    return kendall_tau(a, b)


@dataclass
class SubsetSelection:
    size: int
    indices: np.ndarray
    mean_tau: float
    taus_by_size: dict[int, float]


def select_subset(
    scores,
    candidate_sizes: Sequence[int],
    tau_threshold: float,
    bootstraps: int = 100,
    seed: int = 0,
) -> SubsetSelection:
    """Smallest sample-subset size whose bootstrap model ranking tracks the full ranking.

    ``scores`` is (n_models, n_samples). For each candidate size, ascending,
    ``bootstraps`` random subsets are drawn without replacement; the mean
    Kendall tau between subset and full-data model means must reach the
    threshold. The returned subset is the best-scoring draw at that size.
    """
    scores = np.asarray(scores, dtype=float)
    if scores.ndim != 2 or scores.shape[0] < 2:
        raise ValidationError("scores must be (n_models >= 2, n_samples)")
    n_samples = scores.shape[1]
    full = scores.mean(axis=1)
    rng = np.random.default_rng(seed)
    taus_by_size: dict[int, float] = {}
    for size in sorted(set(int(s) for s in candidate_sizes)):
        if not 1 <= size <= n_samples:
            raise ValidationError(f"candidate size {size} outside 1..{n_samples}")
        best_tau, best_idx, taus = -np.inf, None, []
        for _ in range(bootstraps):
            idx = np.sort(rng.choice(n_samples, size=size, replace=False))
            tau = _tau_or_degenerate(scores[:, idx].mean(axis=1), full)
            taus.append(tau)
            if tau > best_tau:
                best_tau, best_idx = tau, idx
        mean_tau = float(np.mean(taus))
        taus_by_size[size] = mean_tau
        if mean_tau >= tau_threshold:
            return SubsetSelection(size, best_idx, mean_tau, taus_by_size)
    best = max(taus_by_size.values(), default=float("nan"))
    raise SubsetSelectionError(
        f"no candidate size reached tau >= {tau_threshold}; best mean tau was {best:.4f} ({taus_by_size})"
    )
