"""Confusion-matrix evaluation and result emission.

Metrics follow the usual segmentation conventions: a single confusion
matrix accumulated over all evaluated pixels (rows are ground truth,
columns are predictions), per-class IoU = TP / (TP + FP + FN), and mean
IoU over class subsets. Classes whose union is empty on the eval set are
excluded from means and reported alongside. Grouped summaries cover the
initial classes, the incrementally added classes (both without
background), and all classes (background included by default).

Emission writes a machine-readable CSV and an aligned text table. The CSV
is byte-stable for a fixed set of reports: floats are written with repr so
parsing them back is lossless, and nothing time- or host-dependent is
written.
"""

from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass, field

import numpy as np


def confusion_matrix(truths: np.ndarray, preds: np.ndarray, num_classes: int) -> np.ndarray:
    """Accumulate an int64 (num_classes, num_classes) matrix; entry [t, p]
    counts pixels of truth t predicted as p."""
    truths = np.asarray(truths).reshape(-1)
    preds = np.asarray(preds).reshape(-1)
    if truths.shape != preds.shape:
        raise ValueError("truth and prediction shapes disagree")
    if num_classes < 1:
        raise ValueError("num_classes must be >= 1")
    if truths.min() < 0 or truths.max() >= num_classes or preds.min() < 0 or preds.max() >= num_classes:
        raise ValueError("labels outside 0..num_classes-1")
    flat = num_classes * truths.astype(np.int64) + preds.astype(np.int64)
    return np.bincount(flat, minlength=num_classes * num_classes).reshape(num_classes, num_classes)


def per_class_iou(matrix: np.ndarray) -> np.ndarray:
    """IoU per class id; classes with an empty union come back as NaN."""
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
        raise ValueError("confusion matrix must be square")
    tp = np.diag(matrix)
    union = matrix.sum(axis=0) + matrix.sum(axis=1) - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, tp / union, np.nan)


def mean_iou(matrix: np.ndarray, class_ids) -> tuple[float, tuple[int, ...]]:
    """Mean IoU over the given class ids.

    Returns (mean, excluded) where excluded lists ids dropped for having an
    empty union. All ids empty is an error rather than a silent NaN.
    """
    ious = per_class_iou(matrix)
    ids = sorted(set(int(c) for c in class_ids))
    if not ids:
        raise ValueError("need at least one class id")
    if max(ids) >= matrix.shape[0] or min(ids) < 0:
        raise ValueError("class id outside the confusion matrix")
    vals = ious[ids]
    ok = ~np.isnan(vals)
    excluded = tuple(c for c, good in zip(ids, ok) if not good)
    if not np.any(ok):
        raise ValueError("every requested class has an empty union")
    return float(vals[ok].mean()), excluded


def forgetting_delta(joint_all_miou: float, incremental_all_miou: float) -> float:
    """How far an incremental method lands below joint training, in mIoU."""
    for v in (joint_all_miou, incremental_all_miou):
        if not (0.0 <= v <= 1.0):
            raise ValueError("mIoU values must lie in [0, 1]")
    return joint_all_miou - incremental_all_miou


@dataclass
class MetricsReport:
    """Complete evaluation record for one run."""

    method: str
    protocol: str
    mode: str
    seed: int
    group_miou: dict[str, float]  # keys: initial, incremental, all
    class_iou: dict[int, float]
    excluded_classes: tuple[int, ...] = ()
    delta: float | None = None
    per_step: list[dict] = field(default_factory=list)
    include_background: bool = True
    config_fingerprint: str = ""
    runtime_seconds: float | None = None  # never emitted, reruns must match byte-for-byte


GROUP_ORDER = ("initial", "incremental", "all")


def fill_deltas(reports: list[MetricsReport]) -> list[MetricsReport]:
    """Set delta on every report that has a joint counterpart with the same
    protocol, mode and seed."""
    joints = {}
    for r in reports:
        if r.method == "joint":
            joints[(r.protocol, r.mode, r.seed)] = r.group_miou["all"]
    for r in reports:
        key = (r.protocol, r.mode, r.seed)
        if r.method != "joint" and key in joints:
            r.delta = forgetting_delta(joints[key], r.group_miou["all"])
        elif r.method == "joint":
            r.delta = 0.0
    return reports


def _sorted_reports(reports):
    return sorted(reports, key=lambda r: (r.protocol, r.mode, r.method, r.seed))


def render_csv(reports: list[MetricsReport]) -> str:
    """CSV text: one row per report group plus one per class IoU."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["method", "protocol", "mode", "seed", "group", "miou", "delta", "excluded", "fingerprint"])
    for r in _sorted_reports(reports):
        excluded = " ".join(str(c) for c in r.excluded_classes)
        for g in GROUP_ORDER:
            delta = repr(float(r.delta)) if (g == "all" and r.delta is not None) else ""
            writer.writerow([r.method, r.protocol, r.mode, r.seed, g, repr(float(r.group_miou[g])), delta, excluded, r.config_fingerprint])
        for c in sorted(r.class_iou):
            writer.writerow([r.method, r.protocol, r.mode, r.seed, f"class_{c}", repr(float(r.class_iou[c])), "", excluded, r.config_fingerprint])
    return buf.getvalue()


def parse_csv(text: str) -> list[dict]:
    """Rows with miou/delta parsed back to floats (repr round trip)."""
    rows = []
    for row in csv.DictReader(io.StringIO(text)):
        row = dict(row)
        row["miou"] = float(row["miou"])
        row["delta"] = float(row["delta"]) if row["delta"] else None
        row["seed"] = int(row["seed"])
        rows.append(row)
    return rows


def render_table(reports: list[MetricsReport]) -> str:
    """Aligned text table of grouped mIoU (percent) with the joint gap."""
    header = ["method", "protocol", "mode", "seed", "initial", "incremental", "all", "gap_vs_joint"]
    rows = [header]
    for r in _sorted_reports(reports):
        rows.append(
            [
                r.method,
                r.protocol,
                r.mode,
                str(r.seed),
                f"{100 * r.group_miou['initial']:.1f}",
                f"{100 * r.group_miou['incremental']:.1f}",
                f"{100 * r.group_miou['all']:.1f}",
                f"{100 * r.delta:.1f}" if r.delta is not None else "-",
            ]
        )
    widths = [max(len(row[i]) for row in rows) for i in range(len(header))]
    lines = []
    for i, row in enumerate(rows):
        lines.append("  ".join(cell.rjust(w) for cell, w in zip(row, widths)))
        if i == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def emit_report(reports: list[MetricsReport], out_dir: str, basename: str = "results") -> tuple[str, str]:
    """Write CSV and text table; returns their paths."""
    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, f"{basename}.csv")
    table_path = os.path.join(out_dir, f"{basename}.txt")
    with open(csv_path, "w", newline="") as f:
        f.write(render_csv(reports))
    with open(table_path, "w") as f:
        f.write(render_table(reports))
    return csv_path, table_path


def read_report_csv(path: str) -> list[dict]:
    with open(path, newline="") as f:
        return parse_csv(f.read())


def reports_from_rows(rows: list[dict]) -> list[MetricsReport]:
    """Rebuild MetricsReport objects from parsed CSV rows (for merging)."""
    grouped: dict[tuple, dict] = {}
    for row in rows:
        key = (row["method"], row["protocol"], row["mode"], row["seed"])
        entry = grouped.setdefault(key, {"groups": {}, "classes": {}, "excluded": "", "fingerprint": "", "delta": None})
        if row["group"] in GROUP_ORDER:
            entry["groups"][row["group"]] = row["miou"]
            if row["group"] == "all":
                entry["delta"] = row["delta"]
        elif row["group"].startswith("class_"):
            entry["classes"][int(row["group"][6:])] = row["miou"]
        entry["excluded"] = row["excluded"]
        entry["fingerprint"] = row["fingerprint"]
    out = []
    for (method, protocol, mode, seed), entry in grouped.items():
        missing = [g for g in GROUP_ORDER if g not in entry["groups"]]
        if missing:
            raise ValueError(f"rows for {method}/{protocol}/{mode}/{seed} lack groups {missing}")
        out.append(
            MetricsReport(
                method=method,
                protocol=protocol,
                mode=mode,
                seed=seed,
                group_miou=entry["groups"],
                class_iou=entry["classes"],
                excluded_classes=tuple(int(t) for t in entry["excluded"].split()) if entry["excluded"] else (),
                delta=entry["delta"],
                config_fingerprint=entry["fingerprint"],
            )
        )
    return out
