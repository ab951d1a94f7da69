"""Command-line entry point."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from chainlens.core import ValidationError


def _cmd_run(args) -> int:
    from chainlens.harness.manifest import load_manifest
    from chainlens.harness.runner import run

    result = run(load_manifest(args.manifest), stop_after=args.stop_after)
    s = result.summary
    print(json.dumps({k: s[k] for k in ("task", "role", "images", "records", "failed", "metrics", "cost")}, sort_keys=True, indent=2))
    return 0 if result.ok else 1


def _cmd_report(args) -> int:
    from chainlens.harness.report import write_report

    path = write_report(args.runs, args.out)
    print(path.read_text(encoding="utf-8"), end="")
    return 0


def _cmd_gen(args) -> int:
    from chainlens.harness.dataset import save_dataset
    from chainlens.harness.synthetic import DEFAULT_COUNTS, generate

    out = Path(args.out)
    tasks = [args.task] if args.task else list(DEFAULT_COUNTS)
    for task in tasks:
        n = args.n or DEFAULT_COUNTS[task]
        target = out if args.task else out / task
        save_dataset(generate(task, n, args.seed, args.size), target)
        print(f"{task}: {n} images -> {target}")
    return 0


def _cmd_select(args) -> int:
    import numpy as np

    from chainlens.metrics import select_subset

    doc = json.loads(Path(args.scores).read_text(encoding="utf-8"))
    table = doc["scores"] if isinstance(doc, dict) else doc
    names = sorted(table) if isinstance(table, dict) else [str(i) for i in range(len(table))]
    matrix = np.array([table[n] for n in names] if isinstance(table, dict) else table, dtype=float)
    sizes = args.sizes or sorted({max(1, matrix.shape[1] * p // 100) for p in (5, 10, 20, 30, 50, 75, 100)})
    sel = select_subset(matrix, sizes, args.tau, args.bootstraps, args.seed)
    out = {
        "size": sel.size,
        "indices": [int(i) for i in sel.indices],
        "mean_tau": sel.mean_tau,
        "taus_by_size": {str(k): v for k, v in sel.taus_by_size.items()},
        "models": names,
    }
    print(json.dumps(out, sort_keys=True, indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="chainlens", description="Evaluate multimodal models on vision tasks through prompt chains.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress and warnings")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="execute a run manifest (resumes if records exist)")
    p.add_argument("manifest", type=Path)
    p.add_argument("--stop-after", type=int, default=None, metavar="N", help="stop after N new records")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("report", help="tabulate completed runs")
    p.add_argument("runs", nargs="+", type=Path)
    p.add_argument("--out", type=Path, default=Path("."), help="directory for report.md and report.json")
    p.set_defaults(func=_cmd_report)

    p = sub.add_parser("gen-synthetic", help="write synthetic datasets")
    p.add_argument("out", type=Path)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--task", choices=["classification", "detection", "segmentation", "grouping", "depth", "normals"])
    p.add_argument("--n", type=int, default=None, help="images per task")
    p.add_argument("--size", type=int, default=96, help="image side in pixels")
    p.set_defaults(func=_cmd_gen)

    p = sub.add_parser("select-subset", help="smallest subset whose model ranking matches the full set")
    p.add_argument("scores", type=Path, help='JSON {"scores": {model: [per-sample score, ...]}}')
    p.add_argument("--sizes", type=int, nargs="+", default=None)
    p.add_argument("--tau", type=float, default=0.9)
    p.add_argument("--bootstraps", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_select)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ValidationError, ValueError, FileNotFoundError, KeyError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
