"""Cross-run report: metric tables, anchor-normalized scores and a cost table."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

from chainlens.core import LOWER_IS_BETTER, ValidationError, normalize_axis

from .dataset import TASKS
from .runner import SUMMARY

log = logging.getLogger(__name__)

# headline metric per task, used for the normalized score
PRIMARY_METRIC = {
    "classification": "accuracy",
    "detection": "AP",
    "segmentation": "mIoU",
    "grouping": "mIoU",
    "depth": "rho",
    "normals": "rho_mean",
}
METRIC_ORDER = {
    "classification": ["accuracy"],
    "detection": ["AP50", "AP75", "AP", "mean_iou"],
    "segmentation": ["mIoU", "pixel_acc"],
    "grouping": ["mIoU"],
    "depth": ["rho", "accuracy", "delta1", "delta2", "delta3", "AbsRel"],
    "normals": ["rho_x", "rho_y", "rho_z", "rho_mean"],
}


@dataclass
class RunSummary:
    path: Path
    summary: dict

    @property
    def name(self) -> str:
        return self.path.name

    @property
    def task(self) -> str:
        return self.summary["task"]

    @property
    def role(self) -> str:
        return self.summary["role"]


def load_run(path: str | Path) -> RunSummary:
    path = Path(path)
    try:
        summary = json.loads((path / SUMMARY).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ValidationError(f"{path} has no {SUMMARY}; run it first") from None
    if summary.get("task") not in TASKS:
        raise ValidationError(f"{path / SUMMARY} names an unknown task")
    return RunSummary(path, summary)


def _fmt(value) -> str:
    if value is None:
        return "n/a"
    if isinstance(value, float):
        return f"{value:.4f}"
    return str(value)


def build_report(run_dirs) -> tuple[str, dict]:
    """Markdown text and the JSON document for a set of completed runs."""
    runs = [load_run(p) for p in run_dirs]
    if not runs:
        raise ValidationError("report needs at least one run directory")
    resolved = [r.path.resolve() for r in runs]
    if len(set(resolved)) != len(resolved):
        raise ValidationError("the same run directory was given twice; normalization anchors must be distinct runs")

    doc: dict = {"tasks": {}, "costs": [], "warnings": []}
    lines = ["# Results", ""]
    for task in TASKS:
        task_runs = sorted((r for r in runs if r.task == task), key=lambda r: r.name)
        if not task_runs:
            continue
        blind = [r for r in task_runs if r.role == "blind"]
        specialist = [r for r in task_runs if r.role == "specialist"]
        metric = PRIMARY_METRIC[task]
        anchors = None
        if blind and specialist:
            if len(blind) > 1 or len(specialist) > 1:
                doc["warnings"].append(f"{task}: several anchor runs; using {blind[0].name} and {specialist[0].name}")
            b = blind[0].summary["metrics"].get(metric)
            s = specialist[0].summary["metrics"].get(metric)
            anchors = (b, s)
        else:
            doc["warnings"].append(f"{task}: blind and specialist runs are both needed to normalize; reporting raw values")

        order = METRIC_ORDER[task]
        header = ["run", "role", "model", "images", "failed"] + order + ["normalized"]
        lines += [f"## {task}", "", "| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
        rows = []
        for r in task_runs:
            m = r.summary["metrics"]
            norm = None
            if anchors is not None and None not in anchors and m.get(metric) is not None:
                try:
                    norm = normalize_axis(m[metric], anchors[0], anchors[1], metric in LOWER_IS_BETTER)
                except ValidationError:
                    norm = None  # equal anchors leave this axis undefined
            row = {
                "run": r.name,
                "role": r.role,
                "model": r.summary.get("model"),
                "images": r.summary.get("images"),
                "failed": r.summary.get("failed"),
                "metrics": {k: m.get(k) for k in order},
                "normalized": norm,
            }
            rows.append(row)
            cells = [row["run"], row["role"], str(row["model"]), str(row["images"]), str(row["failed"])]
            cells += [_fmt(m.get(k)) for k in order] + [_fmt(norm)]
            lines.append("| " + " | ".join(cells) + " |")
        lines.append("")
        doc["tasks"][task] = {"primary_metric": metric, "anchors": anchors, "runs": rows}

    lines += ["## Cost", "", "| run | model | input tokens | output tokens | cost (USD) |", "|---|---|---|---|---|"]
    for r in sorted(runs, key=lambda r: (r.task, r.name)):
        s = r.summary
        doc["costs"].append(
            {"run": r.name, "model": s.get("model"), "input_tokens": s["input_tokens"], "output_tokens": s["output_tokens"], "cost": s["cost"]}
        )
        lines.append(f"| {r.name} | {s.get('model')} | {s['input_tokens']} | {s['output_tokens']} | {s['cost']:.4f} |")
    if doc["warnings"]:
        lines += ["", "## Warnings", ""] + [f"- {w}" for w in doc["warnings"]]
    for w in doc["warnings"]:
        log.warning(w)
    return "\n".join(lines) + "\n", doc


def write_report(run_dirs, out_dir: str | Path) -> Path:
    text, doc = build_report(run_dirs)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.md").write_text(text, encoding="utf-8")
    (out / "report.json").write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return out / "report.md"
