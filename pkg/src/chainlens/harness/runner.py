"""Executing a manifest: one record per image, resumable, then a summary recomputed from the records."""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Callable

import numpy as np

from chainlens.backend import (
    Backend,
    CostLedger,
    HttpBackend,
    InvalidAnswer,
    MissingGroundTruth,
    OracleBackend,
    ProviderError,
    RandomBackend,
    ScriptedBackend,
    Session,
    TemplateRegistry,
    Transcript,
    TransportError,
    UnknownModelError,
    load_prices,
    record_cost,
)
from chainlens.chains import (
    NotFound,
    blind_variant,
    classify_batch,
    detect,
    estimate_depth_ranks,
    estimate_normal_ranks,
    group_point,
    segment_image,
)
from chainlens.core import LabeledBox, PixelBox, ValidationError
from chainlens.globalize import scale_shift_fit
from chainlens.metrics import (
    UndefinedCorrelation,
    average_precision,
    confusion_counts,
    depth_metrics,
    mask_iou,
    matched_iou,
    metrics_from_confusion,
    normal_axis_rho,
    pairwise_accuracy,
    spearman,
)
from chainlens.raster_io import FloatRaster, write_binary_png, write_mask_png, write_pfm

from .dataset import Dataset, Sample, load_dataset
from .manifest import RunManifest

log = logging.getLogger(__name__)

RECORDS = "records.jsonl"
SUMMARY = "summary.json"
TRANSCRIPTS = "transcripts.jsonl"
DEFAULT_BATCH = {"classification": 100, "segmentation": 16, "grouping": 8}
# recoverable per-image failures; anything else is a bug and propagates
IMAGE_ERRORS = (InvalidAnswer, TransportError, ProviderError, MissingGroundTruth, NotFound)


class SpecialistBackend(OracleBackend):
    """Answers from a vision specialist's predictions laid out like ground truth."""

    backend_id = "specialist"

    def __init__(self, truths, name: str, equal_fraction: float = 0.05):
        super().__init__(truths, equal_fraction)
        self.model_id = f"specialist-{name}"


def load_inputs(manifest: RunManifest) -> Dataset:
    ds = load_dataset(manifest.dataset, manifest.task, manifest.vocab)
    if manifest.limit is not None:
        ds = ds.subset(range(min(manifest.limit, len(ds))))
    return ds


def build_backend(manifest: RunManifest, dataset: Dataset) -> Backend:
    cfg = manifest.backend
    if manifest.role == "specialist":
        predictions = load_dataset(
            manifest.specialist, manifest.task, manifest.vocab or manifest.dataset / "vocab.txt",
            ids=[s.image_id for s in dataset], images=False,
        )
        return SpecialistBackend(predictions.truths(), manifest.specialist.name)
    if cfg.kind == "oracle":
        return OracleBackend(dataset.truths())
    if cfg.kind == "scripted":
        return ScriptedBackend(dataset.truths(), cfg.error_rate, cfg.seed, kinds=cfg.kinds, multilabel_mode=cfg.multilabel_mode)
    if cfg.kind == "random":
        return RandomBackend(cfg.seed)
    return HttpBackend(cfg.kind, cfg.model, max_tokens=cfg.max_tokens, base_url=cfg.base_url)


def build_session(manifest: RunManifest, backend: Backend) -> Session:
    templates = (
        TemplateRegistry.from_directory(manifest.template_dir, manifest.template_pins)
        if manifest.template_dir
        else TemplateRegistry.default(manifest.template_pins)
    )
    return Session(
        backend,
        templates=templates,
        render=manifest.render.options(),
        cache=manifest.cache_dir,
        max_retries=manifest.session.max_retries,
        max_in_flight=manifest.session.max_in_flight,
        template_overrides=manifest.templates,
    )


def _batch(manifest: RunManifest) -> int:
    if not manifest.backend.batching:
        return 1
    return manifest.chain.batch_size or DEFAULT_BATCH.get(manifest.task, 1)


def _maybe(fn: Callable[[], float]) -> float | None:
    try:
        return float(fn())
    except UndefinedCorrelation:
        return None


# -- per-image chains and metrics ----------------------------------------------


def _segment_means(labels: np.ndarray, k: int, raster: FloatRaster) -> np.ndarray:
    valid = raster.valid_mask()
    sums = np.bincount(labels[valid], raster.values[valid].astype(float), minlength=k)
    counts = np.bincount(labels[valid], minlength=k)
    return np.divide(sums, counts, out=np.full(k, np.nan), where=counts > 0)


def _rank_accuracy(comparisons, spmap, raster: FloatRaster, ternary: bool) -> float | None:
    means = _segment_means(spmap.labels, spmap.k, raster)
    scored = [c for c in comparisons if np.isfinite(means[c.i]) and np.isfinite(means[c.j])]
    if not scored:
        return None
    vals = raster.values[raster.valid_mask()]
    tol = 0.05 * float(vals.max() - vals.min()) if ternary else None
    return pairwise_accuracy(scored, means, tol)


def process_image(manifest: RunManifest, dataset: Dataset, sample: Sample, session: Session, out_dir: Path) -> dict:
    """Run the task chain on one image; returns the prediction and metric fields of its record."""
    task, chain = manifest.task, manifest.chain
    wrap = blind_variant if manifest.role == "blind" else (lambda f: f)
    pred_dir = out_dir / "predictions"
    seed = manifest.seed

    if task == "detection":
        outcome = wrap(detect)(sample.image, sample.image_id, dataset.vocab, session, chain.strategy, chain.grid())
        gts = [LabeledBox(b, dataset.vocab.id_of(c)) for c, b in sample.boxes]
        return {
            "prediction": {
                "boxes": [
                    {"class": dataset.vocab.name_of(b.class_id), "box": list(b.box.as_tuple()), "score": b.score}
                    for b in outcome.boxes
                ],
                "not_found": outcome.not_found,
            },
            "metrics": {"ious": matched_iou(outcome.boxes, gts)},
        }
    if task == "segmentation":
        outcome = wrap(segment_image)(
            sample.image, sample.image_id, dataset.vocab, session, chain.k, _batch(manifest), chain.use_history,
            dataset.ignore_index,
        )
        rel = f"predictions/{sample.image_id}.png"
        pred_dir.mkdir(parents=True, exist_ok=True)
        write_mask_png(outcome.mask, out_dir / rel)
        counts = confusion_counts(outcome.mask, sample.semantic)
        return {
            "prediction": {"mask": rel, "superpixels": outcome.superpixels.k},
            "metrics": {"confusion": [[g, p, n] for (g, p), n in sorted(counts.items())]},
        }
    if task == "grouping":
        outcome = wrap(group_point)(
            sample.image, sample.image_id, sample.point, session, chain.k, _batch(manifest), None, chain.group_template
        )
        rel = f"predictions/{sample.image_id}.png"
        pred_dir.mkdir(parents=True, exist_ok=True)
        write_binary_png(outcome.mask, out_dir / rel)
        return {
            "prediction": {"mask": rel, "accepted": outcome.accepted, "rounds": outcome.rounds},
            "metrics": {"iou": mask_iou(outcome.mask, sample.instance)},
        }
    if task == "depth":
        relations = tuple(chain.relations) if chain.relations else ("greater", "less")
        outcome = wrap(estimate_depth_ranks)(
            sample.image, sample.image_id, session, chain.k, chain.n_pairs, chain.smooth, seed, relations
        )
        rel = f"predictions/{sample.image_id}.pfm"
        pred_dir.mkdir(parents=True, exist_ok=True)
        write_pfm(outcome.raster, out_dir / rel)
        gt = sample.depth
        valid = gt.valid_mask()
        metrics: dict[str, Any] = {
            "rho": _maybe(lambda: spearman(outcome.raster.values[valid], gt.values[valid])),
            "accuracy": _rank_accuracy(outcome.comparisons, outcome.superpixels, gt, "equal" in relations),
        }
        fit = scale_shift_fit(outcome.raster, gt)
        metrics.update(depth_metrics(fit.apply(outcome.raster.values), gt))
        return {
            "prediction": {"ranks": rel, "scale": fit.scale, "shift": fit.shift, "degenerate": fit.degenerate},
            "metrics": metrics,
        }
    if task == "normals":
        relations = tuple(chain.relations) if chain.relations else ("greater", "less", "equal")
        outcome = wrap(estimate_normal_ranks)(
            sample.image, sample.image_id, session, chain.k, chain.n_pairs, chain.smooth, seed, relations
        )
        pred_dir.mkdir(parents=True, exist_ok=True)
        prediction, metrics = {}, {}
        for i, axis in enumerate("xyz"):
            rel = f"predictions/{sample.image_id}_{axis}.pfm"
            write_pfm(outcome.axes[axis].raster, out_dir / rel)
            prediction[f"ranks_{axis}"] = rel
            metrics[f"rho_{axis}"] = _maybe(lambda: normal_axis_rho(outcome.axes[axis].raster, sample.normals[i], seed=seed))
        return {"prediction": prediction, "metrics": metrics}
    raise ValidationError(f"task {task!r} is not processed per image")


# -- records -------------------------------------------------------------------


def read_records(path: Path, repair: bool = False) -> list[dict]:
    """Complete records in ``path``. With ``repair`` a torn final line is cut off the file."""
    if not path.exists():
        return []
    data = path.read_bytes()
    end = data.rfind(b"\n") + 1
    if end < len(data) and repair:
        with open(path, "r+b") as fh:
            fh.truncate(end)
    return [json.loads(line) for line in data[:end].decode("utf-8").splitlines() if line.strip()]


class RecordWriter:
    def __init__(self, path: Path):
        self.path = path

    def append(self, record: dict) -> None:
        line = json.dumps(record, sort_keys=True) + "\n"
        with open(self.path, "a", encoding="utf-8") as fh:
            fh.write(line)
            fh.flush()
            os.fsync(fh.fileno())


def _cost(transcript, prices) -> float:
    ledger = CostLedger(prices)
    try:
        return record_cost(transcript, ledger).total
    except UnknownModelError:
        return 0.0  # offline backends are free


def _base_record(sample_id: str, transcript, prices) -> dict:
    return {
        "id": sample_id,
        "transcript_digest": transcript.digest(),
        "queries": len(transcript),
        "input_tokens": transcript.input_tokens,
        "output_tokens": transcript.output_tokens,
        "cost": _cost(transcript, prices),
    }


def _append_transcript(out_dir: Path, image_ids: list[str], transcript) -> None:
    with open(out_dir / TRANSCRIPTS, "a", encoding="utf-8") as fh:
        for entry in transcript:
            row = {"images": image_ids, **entry.__dict__}
            fh.write(json.dumps(row, sort_keys=True) + "\n")


@dataclass
class RunResult:
    summary: dict
    records: list[dict]
    session: Session

    @property
    def ok(self) -> bool:
        return self.summary["failed"] == 0 and self.summary["complete"]


def run(manifest: RunManifest, stop_after: int | None = None, backend: Backend | None = None) -> RunResult:
    """Execute ``manifest``, resuming from any records already on disk.

    ``stop_after`` ends the run after that many new records; it exists to
    exercise interruption and resume.
    """
    dataset = load_inputs(manifest)
    prices = load_prices(manifest.prices)
    if manifest.backend.kind not in ("oracle", "scripted", "random") and manifest.role != "specialist":
        if manifest.backend.model not in prices:
            raise UnknownModelError(f"no price for model {manifest.backend.model!r}; add it to the price table")
    backend = backend or build_backend(manifest, dataset)
    session = build_session(manifest, backend)

    out_dir = manifest.output
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "manifest.json").write_text(json.dumps(manifest.to_dict(), sort_keys=True, indent=2) + "\n", encoding="utf-8")
    records_path = out_dir / RECORDS
    existing = read_records(records_path, repair=True)
    done = {r["id"] for r in existing}
    writer = RecordWriter(records_path)
    written = 0

    def budget_left() -> bool:
        return stop_after is None or written < stop_after

    if manifest.task == "classification":
        size = _batch(manifest)
        samples = dataset.samples
        for start in range(0, len(samples), size):
            batch = samples[start : start + size]
            if all(s.image_id in done for s in batch) or not budget_left():
                continue
            images = [s.image for s in batch]
            ids = [s.image_id for s in batch]
            chain = blind_variant(classify_batch) if manifest.role == "blind" else classify_batch
            with session.recording() as transcript:
                try:
                    labels, error = chain(images, ids, dataset.vocab, session, size), None
                except IMAGE_ERRORS as exc:
                    labels, error = None, f"{type(exc).__name__}: {exc}"
            _append_transcript(out_dir, ids, transcript)
            for n, s in enumerate(batch):
                if s.image_id in done or not budget_left():
                    continue
                # the batch's spend is attributed to its first image only
                rec = _base_record(s.image_id, transcript if n == 0 else Transcript(), prices)
                if error is None:
                    rec.update(status="ok", prediction={"label": labels[n]}, metrics={"correct": labels[n] == s.label})
                else:
                    rec.update(status="error", error=error)
                writer.append(rec)
                written += 1
    else:
        for s in dataset:
            if s.image_id in done:
                continue
            if not budget_left():
                break
            with session.recording() as transcript:
                try:
                    fields, error = process_image(manifest, dataset, s, session, out_dir), None
                except IMAGE_ERRORS as exc:
                    fields, error = None, f"{type(exc).__name__}: {exc}"
            _append_transcript(out_dir, [s.image_id], transcript)
            rec = _base_record(s.image_id, transcript, prices)
            if error is None:
                rec.update(status="ok", **fields)
            else:
                log.warning("image %s failed: %s", s.image_id, error)
                rec.update(status="error", error=error)
            writer.append(rec)
            written += 1

    records = read_records(records_path)
    summary = summarize(manifest, dataset, records)
    (out_dir / SUMMARY).write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return RunResult(summary, records, session)


# -- summary -------------------------------------------------------------------


def _mean(values) -> float | None:
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def task_metrics(task: str, dataset: Dataset, ok: list[dict]) -> dict[str, Any]:
    """Aggregate metrics of the successful records; every value is recomputed, never read from a cache."""
    if not ok:
        return {}
    if task == "classification":
        return {"accuracy": 100.0 * float(np.mean([r["metrics"]["correct"] for r in ok]))}
    if task == "detection":
        by_id = {s.image_id: s for s in dataset}
        vocab = dataset.vocab
        preds = [
            [LabeledBox(PixelBox(*b["box"]), vocab.id_of(b["class"]), b["score"]) for b in r["prediction"]["boxes"]] for r in ok
        ]
        gts = [[LabeledBox(b, vocab.id_of(c)) for c, b in by_id[r["id"]].boxes] for r in ok]
        out = average_precision(preds, gts)
        out["mean_iou"] = _mean([x for r in ok for x in r["metrics"]["ious"]])
        return out
    if task == "segmentation":
        counts: dict[tuple[int, int], int] = {}
        for r in ok:
            for g, p, n in r["metrics"]["confusion"]:
                counts[(g, p)] = counts.get((g, p), 0) + n
        return metrics_from_confusion(counts, dataset.ignore_index)
    if task == "grouping":
        return {"mIoU": _mean([r["metrics"]["iou"] for r in ok])}
    if task == "depth":
        keys = ("rho", "accuracy", "delta1", "delta2", "delta3", "AbsRel")
        return {k: _mean([r["metrics"][k] for r in ok]) for k in keys}
    if task == "normals":
        out = {f"rho_{a}": _mean([r["metrics"][f"rho_{a}"] for r in ok]) for a in "xyz"}
        out["rho_mean"] = _mean([out[f"rho_{a}"] for a in "xyz"])
        return out
    raise ValidationError(f"unknown task {task!r}")


def summarize(manifest: RunManifest, dataset: Dataset, records: list[dict]) -> dict:
    ok = [r for r in records if r["status"] == "ok"]
    return {
        "task": manifest.task,
        "role": manifest.role,
        "backend": manifest.backend.kind if manifest.role != "specialist" else "specialist",
        "model": manifest.backend.model or manifest.backend.kind,
        "images": len(dataset),
        "records": len(records),
        "failed": len(records) - len(ok),
        "complete": len(records) == len(dataset),
        "metrics": task_metrics(manifest.task, dataset, ok),
        "input_tokens": sum(r["input_tokens"] for r in records),
        "output_tokens": sum(r["output_tokens"] for r in records),
        "cost": float(sum(r["cost"] for r in records)),
    }


def run_specialist_chain(manifest: RunManifest, specialist_predictions: str | Path, **kwargs) -> RunResult:
    """Run ``manifest`` with answers taken from a specialist's predictions instead of ground truth."""
    spec = replace(manifest, role="specialist", specialist=Path(specialist_predictions)).validate()
    return run(spec, **kwargs)
