"""Full metric suite: top-k accuracy, confusion matrix, per-class
precision/recall, honey-bee leakage, and the metric-vs-training-count
series, plus JSON/markdown report rendering."""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .dataset import ClassCatalog
from .probabilities import CompositeScores, ProbabilityMatrix

REPORT_SCHEMA_VERSION = 1


class EvalError(ValueError):
    pass


@dataclass(frozen=True)
class ConfusionMatrix:
    """counts[actual][predicted], indices following the catalog order."""

    catalog: ClassCatalog
    counts: np.ndarray

    def __post_init__(self):
        counts = np.asarray(self.counts, dtype=np.int64)
        object.__setattr__(self, "counts", counts)
        c = len(self.catalog)
        if counts.shape != (c, c):
            raise EvalError(f"counts shape {counts.shape}, expected ({c},{c})")
        if (counts < 0).any():
            raise EvalError("negative confusion counts")

    @property
    def total(self) -> int:
        return int(self.counts.sum())


@dataclass
class MetricsReport:
    top_k_accuracy: dict[int, float]
    per_class: dict[str, dict]
    leakage: dict | None
    confusion: ConfusionMatrix
    provenance: dict = field(default_factory=dict)

    @property
    def top1_accuracy(self) -> float | None:
        return self.top_k_accuracy.get(1)

    @property
    def top3_accuracy(self) -> float | None:
        return self.top_k_accuracy.get(3)


def top_k_accuracy(scores: CompositeScores | ProbabilityMatrix,
                   truth: dict[str, str], k: int) -> float:
    """Fraction of images whose true label is in their top-k prediction."""
    c = len(scores.catalog)
    if not 1 <= k <= c:
        raise EvalError(f"k={k} outside [1, {c}]")
    if len(scores.image_ids) == 0:
        raise EvalError("no scored images")
    hits = 0
    for img_id, row in zip(scores.image_ids, scores.rows):
        if img_id not in truth:
            raise EvalError(f"no truth label for image {img_id!r}")
        true_idx = scores.catalog.index_of(truth[img_id])
        order = np.argsort(-row, kind="stable")[:k]
        if true_idx in order:
            hits += 1
    return hits / len(scores.image_ids)


def confusion(predictions: dict[str, str], truth: dict[str, str],
              catalog: ClassCatalog) -> ConfusionMatrix:
    """Count table: rows = actual class, columns = predicted class."""
    if set(predictions) != set(truth):
        raise EvalError("prediction and truth image ids differ")
    c = len(catalog)
    counts = np.zeros((c, c), dtype=np.int64)
    for img_id in predictions:
        counts[catalog.index_of(truth[img_id]),
               catalog.index_of(predictions[img_id])] += 1
    return ConfusionMatrix(catalog, counts)


def precision_recall(cm: ConfusionMatrix) -> dict[str, dict]:
    """Per-class precision/recall. Zero denominators give 0.0 with the
    corresponding ``*_defined`` flag false."""
    out = {}
    counts = cm.counts
    for i, label in enumerate(cm.catalog.labels):
        row_sum = int(counts[i, :].sum())
        col_sum = int(counts[:, i].sum())
        diag = int(counts[i, i])
        out[label] = {
            "precision": diag / col_sum if col_sum else 0.0,
            "precision_defined": col_sum > 0,
            "recall": diag / row_sum if row_sum else 0.0,
            "recall_defined": row_sum > 0,
            "support": row_sum,
        }
    return out


def leakage(cm: ConfusionMatrix, negative_label: str) -> dict:
    """Target-class images predicted as the negative (honey bee) class.

    The negative class's own row is excluded from the denominator: leakage
    measures target -> negative confusion only.
    """
    if negative_label not in cm.catalog.labels:
        raise EvalError(f"negative label {negative_label!r} not in catalog")
    neg = cm.catalog.index_of(negative_label)
    target_rows = [i for i in range(len(cm.catalog)) if i != neg]
    count = int(cm.counts[target_rows, neg].sum())
    denom = int(cm.counts[target_rows, :].sum())
    return {"count": count, "fraction": count / denom if denom else 0.0}


def count_correlation_series(cm: ConfusionMatrix,
                             train_counts: dict[str, int],
                             threshold: int = 150) -> dict:
    """Per-class (train_count, value) points for false positives, recall and
    precision, plus a below/above-threshold false-positive summary."""
    for label in cm.catalog.labels:
        if label not in train_counts:
            raise EvalError(f"missing train count for {label!r}")
    pr = precision_recall(cm)
    fp_points, recall_points, precision_points = [], [], []
    below, above = [], []
    below_fp = above_fp = 0
    for i, label in enumerate(cm.catalog.labels):
        fp = int(cm.counts[:, i].sum() - cm.counts[i, i])
        tc = train_counts[label]
        fp_points.append((label, tc, fp))
        recall_points.append((label, tc, pr[label]["recall"]))
        precision_points.append((label, tc, pr[label]["precision"]))
        if tc < threshold:
            below.append(label)
            below_fp += fp
        else:
            above.append(label)
            above_fp += fp
    return {
        "false_positives": fp_points,
        "recall": recall_points,
        "precision": precision_points,
        "threshold_summary": {
            "threshold": threshold,
            "below": {"classes": below, "false_positives": below_fp},
            "above": {"classes": above, "false_positives": above_fp},
        },
    }


def compute_report(scores: CompositeScores | ProbabilityMatrix,
                   truth: dict[str, str], k_values=(1, 3),
                   train_counts: dict[str, int] | None = None,
                   provenance: dict | None = None) -> MetricsReport:
    """Run the full metric suite over one score matrix."""
    from .ensemble import top_k  # local import avoids a module cycle

    accs = {k: top_k_accuracy(scores, truth, k) for k in k_values}
    top1 = {p.image_id: p.ranked_labels[0] for p in top_k(scores, 1)}
    cm = confusion(top1, truth, scores.catalog)
    per_class = precision_recall(cm)
    if train_counts is not None:
        series = count_correlation_series(cm, train_counts)
        for label, tc, fp in series["false_positives"]:
            per_class[label]["train_count"] = tc
            per_class[label]["false_positives"] = fp
    leak = (leakage(cm, scores.catalog.negative_label)
            if scores.catalog.negative_label else None)
    return MetricsReport(accs, per_class, leak, cm, provenance or {})


def _pct(value: float, defined: bool = True) -> str:
    text = f"{100.0 * value:.1f}%"
    return text if defined else f"{text} (undefined)"


def report_to_json(report: MetricsReport) -> str:
    doc = {
        "schema_version": REPORT_SCHEMA_VERSION,
        "top_k_accuracy": {str(k): v for k, v in
                           sorted(report.top_k_accuracy.items())},
        "per_class": report.per_class,
        "leakage": report.leakage,
        "confusion": {
            "labels": list(report.confusion.catalog.labels),
            "counts": report.confusion.counts.tolist(),
        },
        "provenance": report.provenance,
    }
    return json.dumps(doc, indent=2, sort_keys=True)


def report_from_json(text: str) -> MetricsReport:
    doc = json.loads(text)
    if doc.get("schema_version") != REPORT_SCHEMA_VERSION:
        raise EvalError(f"unsupported report schema {doc.get('schema_version')}")
    cm = ConfusionMatrix(
        ClassCatalog(tuple(doc["confusion"]["labels"])),
        np.array(doc["confusion"]["counts"], dtype=np.int64),
    )
    return MetricsReport(
        {int(k): v for k, v in doc["top_k_accuracy"].items()},
        doc["per_class"], doc["leakage"], cm, doc.get("provenance", {}),
    )


def report_to_markdown(report: MetricsReport) -> str:
    lines = ["# Evaluation report", "", "## Accuracy", "",
             "| Metric | Value |", "| --- | --- |"]
    for k, v in sorted(report.top_k_accuracy.items()):
        lines.append(f"| Top-{k} accuracy | {_pct(v)} |")
    if report.leakage is not None:
        lines.append(
            f"| Leakage (target predicted as negative) | "
            f"{_pct(report.leakage['fraction'])} "
            f"({report.leakage['count']} images) |"
        )
    lines += ["", "## Per-class precision and recall", "",
              "| Class | Recall | Precision | Support |",
              "| --- | --- | --- | --- |"]
    for label in report.confusion.catalog.labels:
        stats = report.per_class[label]
        lines.append(
            f"| {label} | {_pct(stats['recall'], stats['recall_defined'])} "
            f"| {_pct(stats['precision'], stats['precision_defined'])} "
            f"| {stats['support']} |"
        )
    lines += ["", "## Confusion matrix (rows = actual, columns = predicted)", ""]
    labels = report.confusion.catalog.labels
    lines.append("| | " + " | ".join(labels) + " |")
    lines.append("| --- |" + " --- |" * len(labels))
    for label, row in zip(labels, report.confusion.counts):
        lines.append(f"| {label} | " + " | ".join(str(int(v)) for v in row) + " |")
    return "\n".join(lines) + "\n"


def render_report(report: MetricsReport, format: str) -> str:
    if format == "json":
        return report_to_json(report)
    if format == "markdown":
        return report_to_markdown(report)
    raise EvalError(f"unknown report format {format!r}")


def write_series_csvs(report: MetricsReport, train_counts: dict[str, int],
                      out_dir: str, threshold: int = 150) -> list[str]:
    """Write fp_vs_count.csv, recall_vs_count.csv, precision_vs_count.csv."""
    series = count_correlation_series(report.confusion, train_counts, threshold)
    names = {
        "false_positives": "fp_vs_count.csv",
        "recall": "recall_vs_count.csv",
        "precision": "precision_vs_count.csv",
    }
    os.makedirs(out_dir, exist_ok=True)
    written = []
    for key, filename in names.items():
        path = os.path.join(out_dir, filename)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["label", "train_count", "value"])
            for label, tc, value in series[key]:
                writer.writerow([label, tc, value])
        written.append(path)
    return written
