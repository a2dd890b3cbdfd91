"""Text artifacts: affinity grids, feature exports and run tables."""
from __future__ import annotations

import csv
import json
import statistics
from collections import defaultdict
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np
import torch

from .affinity import agreement, build_affinity

GRID_MAGIC = "# ila-da affinity grid v1"
GRID_KINDS = ("computed_unfiltered", "computed_filtered", "ground_truth", "ground_truth_filtered")


# ---------------------------------------------------------------------------
# affinity grids
# ---------------------------------------------------------------------------

def write_grid(path: Union[str, Path], grid, *, kind: str, iteration: int, task: str) -> None:
    grid = np.asarray(grid, dtype=np.int64)
    if not np.isin(grid, (-1, 0, 1)).all():
        raise ValueError("affinity grids hold only -1, 0 and 1")
    lines = [GRID_MAGIC, f"# kind: {kind}", f"# shape: {grid.shape[0]} {grid.shape[1]}",
             f"# iteration: {iteration}", f"# task: {task}"]
    lines += [" ".join(str(v) for v in row) for row in grid]
    Path(path).write_text("\n".join(lines) + "\n")


def read_grid(path: Union[str, Path]) -> tuple[dict, np.ndarray]:
    """Parse a grid file into (header, int8 matrix), checking the declared shape."""
    header: dict = {}
    rows = []
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != GRID_MAGIC:
        raise ValueError(f"{path}: not an affinity grid")
    for line in lines[1:]:
        if line.startswith("#"):
            key, _, value = line[1:].partition(":")
            header[key.strip()] = value.strip()
        elif line.strip():
            rows.append([int(v) for v in line.split()])
    shape = tuple(int(v) for v in header["shape"].split())
    header["shape"] = shape
    header["iteration"] = int(header["iteration"])
    grid = np.asarray(rows, dtype=np.int8).reshape(shape) if rows else np.zeros(shape, dtype=np.int8)
    if grid.shape != shape:
        raise ValueError(f"{path}: payload shape {grid.shape} disagrees with header {shape}")
    return header, grid


def _class_order(labels: torch.Tensor) -> torch.Tensor:
    return torch.sort(labels.to(torch.long), stable=True).indices


def export_affinity(step: dict, out_dir: Union[str, Path], *, iteration: int, task: str,
                    target_labels: Optional[torch.Tensor] = None) -> dict:
    """Write computed (and, with labels, ground-truth) affinity grids for one batch.

    ``step`` carries ``filtered``, ``unfiltered``, ``record`` and
    ``source_labels`` as produced by a training iteration.  Rows are grouped by
    source class; columns by true target class when labels are given, else by
    pseudo-label.  Returns the agreement summary (also saved as JSON).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    y_s = step["source_labels"]
    record = step["record"]
    rows = _class_order(y_s)
    cols = _class_order(target_labels if target_labels is not None else record.y_hat)
    grids = {
        "computed_unfiltered": step["unfiltered"],
        "computed_filtered": step["filtered"],
    }
    summary = {"iteration": iteration, "task": task, "kept": int(record.kept.sum()),
               "n_target": int(record.kept.numel())}
    if target_labels is not None:
        truth = build_affinity(y_s, target_labels)
        grids["ground_truth"] = truth
        grids["ground_truth_filtered"] = torch.where(record.kept.unsqueeze(0), truth, torch.zeros_like(truth))
        summary["agreement_unfiltered"] = agreement(step["unfiltered"], truth)
        summary["agreement_filtered"] = agreement(step["filtered"], truth)
    for kind, grid in grids.items():
        ordered = grid[rows][:, cols]
        write_grid(out_dir / f"{kind}.txt", ordered.numpy(), kind=kind, iteration=iteration, task=task)
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    return summary


# ---------------------------------------------------------------------------
# feature exports
# ---------------------------------------------------------------------------

def export_embeddings(model, datasets: Sequence[tuple[str, object]], out_path: Union[str, Path],
                      batch_size: int = 1000) -> int:
    """Write eval-mode features as CSV rows ``domain,label,f0..f{d-1}``.

    ``datasets`` pairs a domain tag with a dataset; the label column is empty
    when the dataset carries no labels.  Returns the number of rows written.
    """
    n_rows = 0
    with open(out_path, "w", newline="") as fh:
        writer = None
        for tag, ds in datasets:
            feats = model.features(ds.images, batch_size).numpy()
            labels = getattr(ds, "labels", None)
            if writer is None:
                writer = csv.writer(fh)
                writer.writerow(["domain", "label"] + [f"f{i}" for i in range(feats.shape[1])])
            for i, row in enumerate(feats):
                label = "" if labels is None else int(labels[i])
                writer.writerow([tag, label] + [repr(float(v)) for v in row])
                n_rows += 1
    return n_rows


def read_embeddings(path: Union[str, Path]) -> tuple[list[str], np.ndarray, np.ndarray]:
    """Inverse of :func:`export_embeddings`; unknown labels come back as -1."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[:2] != ["domain", "label"]:
            raise ValueError(f"{path}: not an embedding export")
        domains, labels, feats = [], [], []
        for row in reader:
            domains.append(row[0])
            labels.append(int(row[1]) if row[1] != "" else -1)
            feats.append([float(v) for v in row[2:]])
    d = len(header) - 2
    return domains, np.asarray(labels, dtype=np.int64), np.asarray(feats, dtype=np.float64).reshape(-1, d)


# ---------------------------------------------------------------------------
# run aggregation
# ---------------------------------------------------------------------------

def load_reports(run_root: Union[str, Path]):
    from .trainer import RunReport

    reports = []
    for path in sorted(Path(run_root).rglob("report.json")):
        try:
            reports.append(RunReport.load(path))
        except (ValueError, KeyError, TypeError):
            continue
    return reports


def _mean_std(values: Sequence[float]) -> tuple[float, float]:
    if not values:
        return float("nan"), float("nan")
    return statistics.fmean(values), statistics.pstdev(values) if len(values) > 1 else 0.0


def accuracy_table(reports: Iterable, metric: str = "final_accuracy") -> dict:
    """{variant: {task: (mean %, std %, n_seeds)}} over completed runs."""
    cells: dict = defaultdict(lambda: defaultdict(list))
    for rep in reports:
        if rep.status != "completed":
            continue
        cells[rep.variant][rep.task].append(100.0 * getattr(rep, metric))
    return {variant: {task: (*_mean_std(vals), len(vals)) for task, vals in sorted(tasks.items())}
            for variant, tasks in sorted(cells.items())}


def render_markdown(table: dict) -> str:
    tasks = sorted({task for row in table.values() for task in row})
    lines = ["| method | " + " | ".join(tasks) + " |", "|---|" + "---|" * len(tasks)]
    for variant, row in table.items():
        cells = []
        for task in tasks:
            if task in row:
                mean, std, n = row[task]
                cells.append(f"{mean:.2f} ± {std:.2f} (n={n})")
            else:
                cells.append("-")
        lines.append(f"| {variant} | " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


ABLATION_KEYS = ("task", "method", "instance_loss", "pseudo_mode", "k", "mu", "ratio_cap")


def ablation_table(reports: Iterable, keys: Sequence[str] = ABLATION_KEYS) -> list[dict]:
    """Group completed runs by ``keys`` (seed averaged out)."""
    groups: dict = defaultdict(list)
    for rep in reports:
        if rep.status != "completed":
            continue
        groups[tuple(rep.config.get(k) for k in keys)].append(100.0 * rep.final_accuracy)
    rows = []
    for key, vals in sorted(groups.items(), key=lambda kv: tuple(str(v) for v in kv[0])):
        mean, std = _mean_std(vals)
        rows.append({**dict(zip(keys, key)), "mean": mean, "std": std, "n": len(vals)})
    return rows


def render_ablation(rows: list[dict], keys: Sequence[str] = ABLATION_KEYS) -> str:
    lines = ["| " + " | ".join(keys) + " | accuracy % |", "|" + "---|" * (len(keys) + 1)]
    for row in rows:
        lines.append("| " + " | ".join(str(row[k]) for k in keys)
                     + f" | {row['mean']:.2f} ± {row['std']:.2f} (n={row['n']}) |")
    return "\n".join(lines) + "\n"
