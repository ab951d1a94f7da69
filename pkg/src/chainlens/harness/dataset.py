"""On-disk dataset layout and its in-memory form."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from chainlens.backend import GroundTruth
from chainlens.core import ClassVocabulary, PixelBox, Point, ValidationError
from chainlens.raster_io import (
    DEFAULT_IGNORE_INDEX,
    FloatRaster,
    IndexMask,
    read_binary_png,
    read_image,
    read_mask_png,
    read_pfm,
    write_binary_png,
    write_image,
    write_mask_png,
    write_pfm,
)

TASKS = ("classification", "detection", "segmentation", "grouping", "depth", "normals")
NORMAL_DIRS = ("normals_x", "normals_y", "normals_z")
IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg")


@dataclass(eq=False)
class Sample:
    image_id: str
    image: np.ndarray | None
    label: str | None = None
    boxes: list[tuple[str, PixelBox]] = field(default_factory=list)
    semantic: IndexMask | None = None
    instance: np.ndarray | None = None
    point: Point | None = None
    depth: FloatRaster | None = None
    normals: tuple[FloatRaster, FloatRaster, FloatRaster] | None = None

    def ground_truth(self, vocab: ClassVocabulary | None) -> GroundTruth:
        return GroundTruth(
            label=self.label,
            boxes=list(self.boxes),
            semantic=self.semantic,
            class_names=tuple(vocab) if vocab is not None else (),
            instance=self.instance,
            depth=self.depth,
            normals=self.normals,
        )


@dataclass(eq=False)
class Dataset:
    task: str
    vocab: ClassVocabulary | None
    samples: list[Sample]
    ignore_index: int = DEFAULT_IGNORE_INDEX

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValidationError(f"unknown task {self.task!r}; expected one of {TASKS}")
        ids = [s.image_id for s in self.samples]
        if len(set(ids)) != len(ids):
            raise ValidationError("duplicate image ids in dataset")

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self) -> Iterator[Sample]:
        return iter(self.samples)

    def truths(self) -> dict[str, GroundTruth]:
        return {s.image_id: s.ground_truth(self.vocab) for s in self.samples}

    def subset(self, indices) -> "Dataset":
        return Dataset(self.task, self.vocab, [self.samples[i] for i in indices], self.ignore_index)


def _jsonl(path: Path) -> list[dict]:
    if not path.exists():
        return []
    return [json.loads(line) for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]


def _write_jsonl(path: Path, rows: list[dict]) -> None:
    path.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in rows), encoding="utf-8")


def _box_fields(box: PixelBox) -> dict[str, int]:
    return {"x_min": box.x_min, "y_min": box.y_min, "x_max": box.x_max, "y_max": box.y_max}


def _image_path(root: Path, image_id: str) -> Path:
    for ext in IMAGE_EXTENSIONS:
        path = root / "images" / f"{image_id}{ext}"
        if path.exists():
            return path
    raise FileNotFoundError(f"{root / 'images'} has no image for {image_id!r}")


def save_dataset(ds: Dataset, root: str | Path) -> Path:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    meta = {"task": ds.task, "ignore_index": ds.ignore_index, "ids": [s.image_id for s in ds.samples]}
    (root / "dataset.json").write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    if ds.vocab is not None:
        ds.vocab.save(root / "vocab.txt")
    for s in ds.samples:
        write_image(s.image, root / "images" / f"{s.image_id}.png")
    if ds.task == "classification":
        _write_jsonl(root / "labels.jsonl", [{"id": s.image_id, "label": s.label} for s in ds.samples])
    if ds.task == "detection":
        _write_jsonl(
            root / "boxes.jsonl",
            [{"id": s.image_id, "boxes": [{"class": c, **_box_fields(b)} for c, b in s.boxes]} for s in ds.samples],
        )
    if ds.task == "segmentation":
        (root / "masks").mkdir(exist_ok=True)
        for s in ds.samples:
            write_mask_png(s.semantic, root / "masks" / f"{s.image_id}.png")
    if ds.task == "grouping":
        (root / "instances").mkdir(exist_ok=True)
        rows = []
        for s in ds.samples:
            rel = f"instances/{s.image_id}.png"
            write_binary_png(s.instance, root / rel)
            rows.append({"id": s.image_id, "x": s.point.x, "y": s.point.y, "mask": rel})
        _write_jsonl(root / "points.jsonl", rows)
    if ds.task == "depth":
        (root / "depth").mkdir(exist_ok=True)
        for s in ds.samples:
            write_pfm(s.depth, root / "depth" / f"{s.image_id}.pfm")
    if ds.task == "normals":
        for d in NORMAL_DIRS:
            (root / d).mkdir(exist_ok=True)
        for s in ds.samples:
            for d, raster in zip(NORMAL_DIRS, s.normals):
                write_pfm(raster, root / d / f"{s.image_id}.pfm")
    return root


def load_dataset(
    root: str | Path,
    task: str | None = None,
    vocab_path: str | Path | None = None,
    ids: list[str] | None = None,
    images: bool = True,
) -> Dataset:
    """Read a dataset directory. With ``images=False`` only annotations are read (specialist outputs)."""
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset directory {root} does not exist")
    meta_path = root / "dataset.json"
    meta = json.loads(meta_path.read_text(encoding="utf-8")) if meta_path.exists() else {}
    task = task or meta.get("task")
    if task is None:
        raise ValidationError(f"{root}: task not given and no dataset.json present")
    ignore = int(meta.get("ignore_index", DEFAULT_IGNORE_INDEX))
    vpath = Path(vocab_path) if vocab_path else root / "vocab.txt"
    vocab = ClassVocabulary.load(vpath) if vpath.exists() else None
    if task in ("classification", "detection", "segmentation") and vocab is None:
        raise ValidationError(f"{root}: task {task} needs a vocabulary at {vpath}")
    if ids is None:
        ids = meta.get("ids") or sorted({p.stem for p in (root / "images").iterdir() if p.suffix.lower() in IMAGE_EXTENSIONS})

    labels = {r["id"]: r["label"] for r in _jsonl(root / "labels.jsonl")}
    boxes = {
        r["id"]: [(b["class"], PixelBox(b["x_min"], b["y_min"], b["x_max"], b["y_max"])) for b in r["boxes"]]
        for r in _jsonl(root / "boxes.jsonl")
    }
    points = {r["id"]: r for r in _jsonl(root / "points.jsonl")}

    samples = []
    for iid in ids:
        s = Sample(iid, read_image(_image_path(root, iid)) if images else None)
        if task == "classification":
            if iid not in labels:
                raise ValidationError(f"{root}: no label for image {iid!r}")
            s.label = labels[iid]
            if s.label not in vocab:
                raise ValidationError(f"{root}: label {s.label!r} of {iid!r} is not in the vocabulary")
        elif task == "detection":
            s.boxes = boxes.get(iid, [])
            for name, _ in s.boxes:
                if name not in vocab:
                    raise ValidationError(f"{root}: box class {name!r} of {iid!r} is not in the vocabulary")
        elif task == "segmentation":
            s.semantic = read_mask_png(root / "masks" / f"{iid}.png", vocab, ignore)
        elif task == "grouping":
            if iid not in points:
                raise ValidationError(f"{root}: no point record for image {iid!r}")
            p = points[iid]
            s.point = Point(int(p["x"]), int(p["y"]))
            s.instance = read_binary_png(root / p["mask"])
        elif task == "depth":
            s.depth = read_pfm(root / "depth" / f"{iid}.pfm")
        elif task == "normals":
            s.normals = tuple(read_pfm(root / d / f"{iid}.pfm") for d in NORMAL_DIRS)
        samples.append(s)
    return Dataset(task, vocab, samples, ignore)
