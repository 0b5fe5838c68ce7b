"""Dataset manifests, image standardization, and train/validation splitting.

A manifest is a JSON Lines file: line 1 is a header object with the class
catalog (``labels``, ``negative_label``, ``seed``), every following line is
one image record. Record paths are relative to the manifest's directory.
"""

from __future__ import annotations

import io
import json
import os
from collections import Counter
from dataclasses import dataclass, field, replace

import cv2
import numpy as np
from PIL import Image, UnidentifiedImageError

SPLITS = ("train", "validation", "test", "unassigned")
SOURCES = ("target", "negative", "augmented")


class ManifestError(ValueError):
    """Raised for malformed or inconsistent manifests."""


class ImageError(ValueError):
    """Raised for undecodable or degenerate image inputs."""


@dataclass(frozen=True)
class ClassCatalog:
    """Ordered, immutable list of class labels; index <-> label is a bijection."""

    labels: tuple[str, ...]
    negative_label: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "labels", tuple(self.labels))
        if not self.labels:
            raise ManifestError("catalog has no labels")
        if any(not lbl for lbl in self.labels):
            raise ManifestError("catalog labels must be non-empty strings")
        if len(set(self.labels)) != len(self.labels):
            dupes = [l for l, n in Counter(self.labels).items() if n > 1]
            raise ManifestError(f"duplicate catalog labels: {dupes}")
        if self.negative_label is not None and self.negative_label not in self.labels:
            raise ManifestError(
                f"negative_label {self.negative_label!r} not in catalog"
            )

    def __len__(self):
        return len(self.labels)

    def index_of(self, label: str) -> int:
        try:
            return self.labels.index(label)
        except ValueError:
            raise ManifestError(f"label {label!r} not in catalog") from None


@dataclass(frozen=True)
class ImageRecord:
    id: str
    path: str
    label: str
    split: str = "unassigned"
    source: str = "target"
    parent_id: str | None = None

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ManifestError(f"record {self.id!r}: bad split {self.split!r}")
        if self.source not in SOURCES:
            raise ManifestError(f"record {self.id!r}: bad source {self.source!r}")
        if self.source == "augmented" and not self.parent_id:
            raise ManifestError(f"augmented record {self.id!r} lacks parent_id")


@dataclass(frozen=True)
class DatasetManifest:
    catalog: ClassCatalog
    records: tuple[ImageRecord, ...]
    seed: int = 0
    # directory record paths are resolved against; not serialized
    base_dir: str | None = field(default=None, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        seen: set[str] = set()
        non_aug = set()
        for rec in self.records:
            if rec.id in seen:
                raise ManifestError(f"duplicate record id {rec.id!r}")
            seen.add(rec.id)
            if rec.label not in self.catalog.labels:
                raise ManifestError(
                    f"record {rec.id!r}: label {rec.label!r} not in catalog"
                )
            if rec.source != "augmented":
                non_aug.add(rec.id)
        for rec in self.records:
            if rec.source == "augmented" and rec.parent_id not in non_aug:
                raise ManifestError(
                    f"augmented record {rec.id!r}: parent {rec.parent_id!r} "
                    "is not a non-augmented record in this manifest"
                )

    def resolve_path(self, rec: ImageRecord) -> str:
        if self.base_dir is None:
            return rec.path
        return os.path.join(self.base_dir, rec.path)

    def subset(self, split: str) -> tuple[ImageRecord, ...]:
        return tuple(r for r in self.records if r.split == split)


def load_manifest(path: str) -> DatasetManifest:
    """Read and validate a JSONL manifest; raises ManifestError with context."""
    if not os.path.exists(path):
        raise ManifestError(f"manifest not found: {path}")
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ManifestError(f"{path}: empty manifest file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}:1: bad header: {exc}") from exc
    if "labels" not in header:
        raise ManifestError(f"{path}:1: header missing 'labels'")
    catalog = ClassCatalog(tuple(header["labels"]), header.get("negative_label"))
    records = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"{path}:{lineno}: bad record: {exc}") from exc
        try:
            records.append(
                ImageRecord(
                    id=obj["id"],
                    path=obj["path"],
                    label=obj["label"],
                    split=obj.get("split", "unassigned"),
                    source=obj.get("source", "target"),
                    parent_id=obj.get("parent_id"),
                )
            )
        except KeyError as exc:
            raise ManifestError(f"{path}:{lineno}: record missing key {exc}") from exc
        except ManifestError as exc:
            raise ManifestError(f"{path}:{lineno}: {exc}") from exc
    try:
        return DatasetManifest(
            catalog, tuple(records), seed=int(header.get("seed", 0)),
            base_dir=os.path.dirname(os.path.abspath(path)),
        )
    except ManifestError as exc:
        raise ManifestError(f"{path}: {exc}") from exc


def save_manifest(manifest: DatasetManifest, path: str) -> None:
    header = {
        "labels": list(manifest.catalog.labels),
        "negative_label": manifest.catalog.negative_label,
        "seed": manifest.seed,
    }
    # record paths are relative to the manifest file; keep them resolvable
    # when saving into a different directory than they were loaded from
    dest_dir = os.path.dirname(os.path.abspath(path))
    if manifest.base_dir and os.path.abspath(manifest.base_dir) != dest_dir:
        manifest = replace(
            manifest,
            records=tuple(
                replace(r, path=os.path.relpath(
                    os.path.join(manifest.base_dir, r.path), dest_dir))
                for r in manifest.records
            ),
        )
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header) + "\n")
        for rec in manifest.records:
            fh.write(
                json.dumps(
                    {
                        "id": rec.id,
                        "path": rec.path,
                        "label": rec.label,
                        "split": rec.split,
                        "source": rec.source,
                        "parent_id": rec.parent_id,
                    }
                )
                + "\n"
            )


def class_distribution(manifest: DatasetManifest) -> dict[str, int]:
    """Per-label record counts; every catalog label is a key (possibly 0)."""
    counts = {label: 0 for label in manifest.catalog.labels}
    for rec in manifest.records:
        counts[rec.label] += 1
    return counts


def _to_float_rgb(arr: np.ndarray) -> np.ndarray:
    """Normalize channel layout to HxWx3 float32 in [0,1]."""
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise ImageError(f"expected 2D or 3D image array, got shape {arr.shape}")
    if arr.shape[0] == 0 or arr.shape[1] == 0:
        raise ImageError("zero-dimension image")
    if arr.shape[2] == 4:
        arr = arr[:, :, :3]  # drop alpha
    if arr.shape[2] == 1:
        arr = np.repeat(arr, 3, axis=2)
    if arr.shape[2] != 3:
        raise ImageError(f"unsupported channel count {arr.shape[2]}")
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float32) / 255.0
    else:
        arr = arr.astype(np.float32)
        if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
            raise ImageError("float image values must lie in [0,1]")
    return arr


def standardize(image, target: tuple[int, int]) -> np.ndarray:
    """Decode and resize to exactly ``target`` (height, width), 3 channels, [0,1].

    Accepts raw PNG/JPEG bytes, a PIL image, or an HxWxC array (uint8 or
    float in [0,1]). Aspect ratio is not preserved: the image is stretched or
    shrunk to fit. Idempotent: re-standardizing an output is a no-op.
    """
    th, tw = target
    if th < 1 or tw < 1:
        raise ImageError(f"bad target geometry {target}")
    if isinstance(image, (bytes, bytearray)):
        try:
            pil = Image.open(io.BytesIO(image))
            pil.load()
        except (UnidentifiedImageError, OSError) as exc:
            raise ImageError(f"undecodable image bytes: {exc}") from exc
        arr = np.asarray(pil)
    elif isinstance(image, Image.Image):
        arr = np.asarray(image)
    else:
        arr = np.asarray(image)
    arr = _to_float_rgb(arr)
    if arr.shape[:2] != (th, tw):
        arr = cv2.resize(arr, (tw, th), interpolation=cv2.INTER_LINEAR)
        arr = np.clip(arr, 0.0, 1.0)
    return np.ascontiguousarray(arr, dtype=np.float32)


def load_standardized(manifest: DatasetManifest, rec: ImageRecord,
                      target: tuple[int, int]) -> np.ndarray:
    with open(manifest.resolve_path(rec), "rb") as fh:
        return standardize(fh.read(), target)


def split(manifest: DatasetManifest, train_fraction: float,
          seed: int) -> DatasetManifest:
    """Assign train/validation splits, stratified per class.

    Deterministic in (record ids, fraction, seed). Records already marked
    ``test`` are untouched and never eligible. Per class, the train count is
    round(fraction * eligible) so small classes keep validation coverage.
    """
    if not 0.0 <= train_fraction <= 1.0:
        raise ManifestError(f"train_fraction {train_fraction} outside [0,1]")
    for rec in manifest.records:
        if rec.split in ("train", "validation"):
            raise ManifestError(
                f"record {rec.id!r} already assigned to {rec.split!r}"
            )
    rng = np.random.default_rng(seed)
    assignment: dict[str, str] = {}
    for label in manifest.catalog.labels:
        ids = sorted(
            r.id for r in manifest.records
            if r.label == label and r.split == "unassigned"
        )
        order = rng.permutation(len(ids))
        n_train = int(np.floor(train_fraction * len(ids) + 0.5))
        for rank, idx in enumerate(order):
            assignment[ids[idx]] = "train" if rank < n_train else "validation"
    new_records = tuple(
        replace(r, split=assignment[r.id]) if r.id in assignment else r
        for r in manifest.records
    )
    return replace(manifest, records=new_records)


def inject_negative_class(manifest: DatasetManifest,
                          negatives: list[ImageRecord]) -> DatasetManifest:
    """Merge honey-bee (negative) records into the manifest.

    Every negative must carry the catalog's negative label; records are
    flagged source="negative". The catalog itself is unchanged.
    """
    neg_label = manifest.catalog.negative_label
    if neg_label is None:
        raise ManifestError("catalog has no negative_label")
    merged = list(manifest.records)
    for rec in negatives:
        if rec.label != neg_label:
            raise ManifestError(
                f"negative record {rec.id!r} carries label {rec.label!r}, "
                f"expected {neg_label!r}"
            )
        merged.append(replace(rec, source="negative"))
    return replace(manifest, records=tuple(merged))
