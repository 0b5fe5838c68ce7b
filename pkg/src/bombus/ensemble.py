"""Composite models: softmax-sum combination, top-k selection, and the
alternate encoder composite that trains a new head on concatenated
penultimate features of frozen member models."""

from __future__ import annotations

import numpy as np
import torch

from .dataset import DatasetManifest, load_standardized
from .model import (HeadConfig, OptimizerConfig, TrainConfig, TrainedModel,
                    TrainingHistory, extract_features, fit_on_tensors,
                    make_head)
from .probabilities import (CompositeScores, MatrixError, ProbabilityMatrix,
                            TopKPrediction)

__all__ = [
    "ProbabilityMatrix", "CompositeScores", "TopKPrediction",
    "sum_softmax", "top_k", "align", "EncoderComposite",
    "build_encoder_composite",
]


def _check_aligned(matrices):
    first = matrices[0]
    for m in matrices[1:]:
        if m.catalog.labels != first.catalog.labels:
            raise MatrixError(
                "catalog mismatch between member matrices (labels or order "
                "differ); use align() or fix the inputs, no silent reindexing"
            )
        if m.image_ids != first.image_ids:
            raise MatrixError("image id mismatch between member matrices")


def sum_softmax(matrices: list[ProbabilityMatrix]) -> CompositeScores:
    """Element-wise sum of member softmax outputs; not renormalized."""
    if not matrices:
        raise MatrixError("no member matrices")
    _check_aligned(matrices)
    total = np.sum([m.rows for m in matrices], axis=0)
    first = matrices[0]
    return CompositeScores(first.image_ids, first.catalog, total,
                           members=len(matrices))


def align(matrices: list[ProbabilityMatrix],
          id_order: tuple[str, ...] | None = None) -> list[ProbabilityMatrix]:
    """Reorder every matrix's rows to a common image-id order (default: the
    first matrix's order). Ids must be the same set; catalogs must match."""
    if not matrices:
        raise MatrixError("no matrices to align")
    if id_order is None:
        id_order = matrices[0].image_ids
    out = []
    for m in matrices:
        if m.catalog.labels != matrices[0].catalog.labels:
            raise MatrixError("catalog mismatch; align only reorders rows")
        if set(m.image_ids) != set(id_order):
            raise MatrixError("image id sets differ; cannot align")
        pos = {img_id: i for i, img_id in enumerate(m.image_ids)}
        idx = [pos[i] for i in id_order]
        out.append(ProbabilityMatrix(tuple(id_order), m.catalog, m.rows[idx]))
    return out


def top_k(scores: CompositeScores | ProbabilityMatrix,
          k: int) -> list[TopKPrediction]:
    """Per image, the k highest-scoring labels in descending order.

    Ties break toward the lower catalog index so results are deterministic.
    """
    c = len(scores.catalog)
    if not 1 <= k <= c:
        raise MatrixError(f"k={k} outside [1, {c}]")
    preds = []
    for img_id, row in zip(scores.image_ids, scores.rows):
        # stable sort on negated scores keeps ascending-index order for ties
        order = np.argsort(-row, kind="stable")[:k]
        preds.append(TopKPrediction(
            image_id=img_id,
            ranked_labels=tuple(scores.catalog.labels[i] for i in order),
            scores=tuple(float(row[i]) for i in order),
        ))
    return preds


class EncoderComposite:
    """New head trained on the concatenation of frozen members' penultimate
    features. Members preprocess images independently (their geometries may
    differ); training runs on cached feature matrices."""

    def __init__(self, members: list[TrainedModel], head: HeadConfig):
        if len(members) < 2:
            raise MatrixError("encoder composite requires >= 2 member models")
        catalog = members[0].catalog
        for m in members[1:]:
            if m.catalog != catalog:
                raise MatrixError("members must share one class catalog")
        if head.output_classes != len(catalog):
            raise MatrixError(
                f"head has {head.output_classes} outputs for a "
                f"{len(catalog)}-class catalog"
            )
        self.members = list(members)
        self.catalog = catalog
        self.head_cfg = head
        self.input_dim = sum(self._member_width(m) for m in members)
        self.head = make_head(self.input_dim, head)
        self.history: TrainingHistory = ()

    @staticmethod
    def _member_width(m: TrainedModel) -> int:
        if m.head.hidden_layers:
            return m.head.nodes_per_layer[-1]
        return m.module.feature_dim

    def _features_for_records(self, manifest: DatasetManifest, records):
        per_member = []
        for m in self.members:
            geometry = m.backbone.input_geometry
            imgs = [load_standardized(manifest, r, geometry) for r in records]
            per_member.append(extract_features(m, imgs))
        return np.concatenate(per_member, axis=1)

    def concat_features(self, images_per_member: list[list]) -> np.ndarray:
        """Concatenate member features for pre-standardized per-member images."""
        feats = [extract_features(m, imgs)
                 for m, imgs in zip(self.members, images_per_member)]
        return np.concatenate(feats, axis=1)

    def train(self, manifest: DatasetManifest, tc: TrainConfig,
              oc: OptimizerConfig) -> TrainingHistory:
        train_recs = [r for r in manifest.subset("train")
                      if tc.use_augmented or r.source != "augmented"]
        val_recs = list(manifest.subset("validation"))
        x_train = torch.from_numpy(
            self._features_for_records(manifest, train_recs)).float()
        x_val = (torch.from_numpy(
            self._features_for_records(manifest, val_recs)).float()
            if val_recs else torch.zeros((0, self.input_dim)))
        y_train = torch.tensor(
            [self.catalog.index_of(r.label) for r in train_recs])
        y_val = torch.tensor([self.catalog.index_of(r.label) for r in val_recs])
        torch.manual_seed(tc.seed)
        self.head = make_head(self.input_dim, self.head_cfg)
        self.history = fit_on_tensors(
            self.head, x_train, y_train, x_val, y_val, tc, oc)
        return self.history

    def predict_probs(self, manifest: DatasetManifest,
                      records) -> ProbabilityMatrix:
        feats = torch.from_numpy(
            self._features_for_records(manifest, records)).float()
        self.head.eval()
        with torch.no_grad():
            probs = torch.softmax(self.head(feats), dim=1)
        return ProbabilityMatrix(tuple(r.id for r in records), self.catalog,
                                 probs.double().numpy())


def build_encoder_composite(models: list[TrainedModel],
                            head: HeadConfig) -> EncoderComposite:
    return EncoderComposite(models, head)
