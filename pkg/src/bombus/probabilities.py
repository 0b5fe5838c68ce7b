"""Per-image class-probability matrices, the interchange unit between models,
ensembles, and evaluation.

Interchange file format: CSV with header ``image_id,<label_1>,...,<label_C>``,
one row per image. The catalog order in the header is authoritative.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .dataset import ClassCatalog

ROW_SUM_TOL = 1e-5


class MatrixError(ValueError):
    pass


@dataclass(frozen=True)
class ProbabilityMatrix:
    """N x C softmax outputs; each row sums to 1 within 1e-5."""

    image_ids: tuple[str, ...]
    catalog: ClassCatalog
    rows: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "image_ids", tuple(self.image_ids))
        rows = np.asarray(self.rows, dtype=np.float64)
        object.__setattr__(self, "rows", rows)
        n, c = rows.shape
        if n != len(self.image_ids):
            raise MatrixError(f"{n} rows but {len(self.image_ids)} image ids")
        if c != len(self.catalog):
            raise MatrixError(f"{c} columns but {len(self.catalog)} labels")
        if len(set(self.image_ids)) != n:
            raise MatrixError("duplicate image ids")
        if rows.size:
            if rows.min() < 0:
                raise MatrixError("negative probability")
            sums = rows.sum(axis=1)
            bad = np.abs(sums - 1.0) > ROW_SUM_TOL
            if bad.any():
                i = int(np.argmax(bad))
                raise MatrixError(
                    f"row for {self.image_ids[i]!r} sums to {sums[i]!r}"
                )


@dataclass(frozen=True)
class CompositeScores:
    """N x C summed softmax scores from M member models (not renormalized)."""

    image_ids: tuple[str, ...]
    catalog: ClassCatalog
    rows: np.ndarray
    members: int = 1

    def __post_init__(self):
        object.__setattr__(self, "image_ids", tuple(self.image_ids))
        rows = np.asarray(self.rows, dtype=np.float64)
        object.__setattr__(self, "rows", rows)
        n, c = rows.shape
        if n != len(self.image_ids):
            raise MatrixError(f"{n} rows but {len(self.image_ids)} image ids")
        if c != len(self.catalog):
            raise MatrixError(f"{c} columns but {len(self.catalog)} labels")
        if rows.size:
            sums = rows.sum(axis=1)
            if np.abs(sums - self.members).max() > 1e-4 * self.members:
                raise MatrixError(
                    f"rows should each sum to {self.members} (member count)"
                )


@dataclass(frozen=True)
class TopKPrediction:
    image_id: str
    ranked_labels: tuple[str, ...]
    scores: tuple[float, ...]

    def __post_init__(self):
        if len(self.ranked_labels) != len(set(self.ranked_labels)):
            raise MatrixError("ranked labels must be distinct")
        if any(a < b for a, b in zip(self.scores, self.scores[1:])):
            raise MatrixError("scores must be non-increasing")


def _write_rows(path, image_ids, catalog, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["image_id", *catalog.labels])
        for img_id, row in zip(image_ids, rows):
            writer.writerow([img_id, *(repr(float(v)) for v in row)])


def write_matrix_csv(matrix: ProbabilityMatrix | CompositeScores,
                     path: str) -> None:
    _write_rows(path, matrix.image_ids, matrix.catalog, matrix.rows)


def _read_rows(path):
    with open(path, "r", newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise MatrixError(f"{path}: empty file") from None
        if not header or header[0] != "image_id":
            raise MatrixError(f"{path}: header must start with 'image_id'")
        labels = header[1:]
        ids, rows = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(labels) + 1:
                raise MatrixError(f"{path}:{lineno}: wrong column count")
            ids.append(row[0])
            try:
                rows.append([float(v) for v in row[1:]])
            except ValueError as exc:
                raise MatrixError(f"{path}:{lineno}: {exc}") from exc
    return labels, ids, np.array(rows, dtype=np.float64).reshape(len(ids), len(labels))


def read_matrix_csv(path: str,
                    negative_label: str | None = None) -> ProbabilityMatrix:
    labels, ids, rows = _read_rows(path)
    return ProbabilityMatrix(tuple(ids), ClassCatalog(tuple(labels), negative_label), rows)


def read_scores_csv(path: str, members: int,
                    negative_label: str | None = None) -> CompositeScores:
    labels, ids, rows = _read_rows(path)
    return CompositeScores(
        tuple(ids), ClassCatalog(tuple(labels), negative_label), rows,
        members=members,
    )
