"""The four augmentation operators and the seeded policy applying them.

Operators: rotation, contrast manipulation, salt-and-pepper noise, and
occluding blocks (zeroing a box of pixels). A policy augments roughly a
configurable fraction of the training images (default 25%) with a random
combination of the operators. Everything is a pure function of its explicit
seeds so augmented sets are bit-reproducible.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, field, replace

import numpy as np
from PIL import Image
from scipy import ndimage

from .dataset import DatasetManifest, ImageRecord, load_standardized

OP_KINDS = ("rotation", "contrast", "salt_pepper", "occlusion")


class AugmentError(ValueError):
    pass


@dataclass(frozen=True)
class AugmentationOpSpec:
    """One operator plus the interval(s) its parameters are sampled from."""

    kind: str
    # kind-specific (lo, hi) intervals:
    #   rotation: degrees; contrast: factor; salt_pepper: flip probability;
    #   occlusion: box height/width as fractions of the image side
    degrees: tuple[float, float] | None = None
    factor: tuple[float, float] | None = None
    prob: tuple[float, float] | None = None
    box_height: tuple[float, float] | None = None
    box_width: tuple[float, float] | None = None

    def __post_init__(self):
        if self.kind not in OP_KINDS:
            raise AugmentError(f"unknown operator kind {self.kind!r}")
        needed = {
            "rotation": ("degrees",),
            "contrast": ("factor",),
            "salt_pepper": ("prob",),
            "occlusion": ("box_height", "box_width"),
        }[self.kind]
        for name in needed:
            iv = getattr(self, name)
            if iv is None:
                raise AugmentError(f"{self.kind}: missing interval {name!r}")
            lo, hi = iv
            if lo > hi:
                raise AugmentError(f"{self.kind}: empty interval {name}={iv}")
            if name in ("prob", "box_height", "box_width") and not (
                0.0 <= lo and hi <= 1.0
            ):
                raise AugmentError(f"{self.kind}: {name}={iv} outside [0,1]")
            if name == "factor" and lo < 0.0:
                raise AugmentError(f"contrast factor interval {iv} negative")


def default_ops() -> tuple[AugmentationOpSpec, ...]:
    return (
        AugmentationOpSpec("rotation", degrees=(-45.0, 45.0)),
        AugmentationOpSpec("contrast", factor=(0.5, 1.5)),
        AugmentationOpSpec("salt_pepper", prob=(0.01, 0.05)),
        AugmentationOpSpec("occlusion", box_height=(0.1, 0.4), box_width=(0.1, 0.4)),
    )


@dataclass(frozen=True)
class AugmentationPolicy:
    ops: tuple[AugmentationOpSpec, ...] = field(default_factory=default_ops)
    augment_rate: float = 0.25
    min_ops: int = 1
    max_ops: int | None = None  # None = all ops
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "ops", tuple(self.ops))
        if self.max_ops is None:
            object.__setattr__(self, "max_ops", len(self.ops))
        if not 0.0 <= self.augment_rate <= 1.0:
            raise AugmentError(f"augment_rate {self.augment_rate} outside [0,1]")
        if not 1 <= self.min_ops <= self.max_ops <= len(self.ops):
            raise AugmentError(
                f"need 1 <= min_ops ({self.min_ops}) <= max_ops "
                f"({self.max_ops}) <= {len(self.ops)} ops"
            )


def rotate(image: np.ndarray, degrees: float) -> np.ndarray:
    """Rotate about the image center; out-of-frame regions filled black.

    Multiples of 90 degrees are exact index permutations; anything else uses
    bilinear interpolation.
    """
    deg = float(degrees) % 360.0
    if deg == 0.0:
        return image.copy()
    if deg % 90.0 == 0.0:
        k = int(deg // 90)
        out = np.rot90(image, k=k, axes=(0, 1))
        if out.shape != image.shape:
            # non-square image rotated an odd multiple of 90: fall through
            # to interpolation so the geometry contract holds
            pass
        else:
            return np.ascontiguousarray(out)
    out = ndimage.rotate(
        image, deg, axes=(1, 0), reshape=False, order=1,
        mode="constant", cval=0.0, prefilter=False,
    )
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def contrast(image: np.ndarray, factor: float) -> np.ndarray:
    """out = clamp(mean + factor * (in - mean), 0, 1), mean per channel."""
    if factor < 0:
        raise AugmentError(f"contrast factor must be >= 0, got {factor}")
    mean = image.mean(axis=(0, 1), keepdims=True)
    return np.clip(mean + factor * (image - mean), 0.0, 1.0).astype(np.float32)


def salt_pepper(image: np.ndarray, p: float, seed: int) -> np.ndarray:
    """Each pixel independently set to 0.0 or 1.0 (equal odds) with probability p."""
    if not 0.0 <= p <= 1.0:
        raise AugmentError(f"salt-pepper probability {p} outside [0,1]")
    rng = np.random.default_rng(seed)
    h, w = image.shape[:2]
    flip = rng.random((h, w)) < p
    salt = rng.random((h, w)) < 0.5
    out = image.copy()
    out[flip] = 0.0
    out[flip & salt] = 1.0
    return out


def occlude(image: np.ndarray, box: tuple[int, int, int, int]) -> np.ndarray:
    """Zero a (row, col, height, width) box, clipped to the image bounds."""
    r, c, h, w = box
    h0, w0 = image.shape[:2]
    r1, c1 = max(r, 0), max(c, 0)
    r2, c2 = min(r + h, h0), min(c + w, w0)
    out = image.copy()
    if r2 > r1 and c2 > c1:
        out[r1:r2, c1:c2, :] = 0.0
    return out


def apply_policy(image: np.ndarray, policy: AugmentationPolicy,
                 draw_seed: int) -> tuple[np.ndarray, list[str]]:
    """Apply a seeded random combination of the policy's operators.

    Samples k in [min_ops, max_ops] distinct operators, then each operator's
    parameters from its intervals, and applies them in the policy's listed
    order. Fully determined by (image, policy, draw_seed).
    """
    rng = np.random.default_rng([policy.seed, draw_seed])
    k = int(rng.integers(policy.min_ops, policy.max_ops + 1))
    chosen = sorted(rng.choice(len(policy.ops), size=k, replace=False).tolist())
    out = image
    applied = []
    h, w = image.shape[:2]
    for idx in chosen:
        op = policy.ops[idx]
        if op.kind == "rotation":
            out = rotate(out, rng.uniform(*op.degrees))
        elif op.kind == "contrast":
            out = contrast(out, rng.uniform(*op.factor))
        elif op.kind == "salt_pepper":
            out = salt_pepper(out, rng.uniform(*op.prob),
                              int(rng.integers(0, 2**31)))
        elif op.kind == "occlusion":
            bh = int(round(rng.uniform(*op.box_height) * h))
            bw = int(round(rng.uniform(*op.box_width) * w))
            r = int(rng.integers(0, h))
            c = int(rng.integers(0, w))
            out = occlude(out, (r, c, bh, bw))
        applied.append(op.kind)
    return out, applied


def _record_rng(policy_seed: int, record_id: str) -> np.random.Generator:
    digest = hashlib.sha256(record_id.encode("utf-8")).digest()
    return np.random.default_rng(
        [policy_seed, int.from_bytes(digest[:8], "big")]
    )


def select_for_augmentation(manifest: DatasetManifest,
                            policy: AugmentationPolicy) -> list[str]:
    """Ids of train records selected for augmentation (independent Bernoulli)."""
    selected = []
    for rec in manifest.records:
        if rec.split != "train" or rec.source == "augmented":
            continue
        if _record_rng(policy.seed, rec.id).random() < policy.augment_rate:
            selected.append(rec.id)
    return selected


def build_augmented_set(manifest: DatasetManifest, policy: AugmentationPolicy,
                        geometry: tuple[int, int] = (224, 224)) -> DatasetManifest:
    """Add one augmented sibling for each selected train record.

    Augmented images are written as PNG next to their originals with an
    ``.aug0`` suffix. Validation and test records are never augmented.
    """
    selected = set(select_for_augmentation(manifest, policy))
    by_id = {r.id: r for r in manifest.records}
    new_records = list(manifest.records)
    for rec_id in sorted(selected):
        rec = by_id[rec_id]
        rng = _record_rng(policy.seed, rec.id)
        rng.random()  # selection draw, consumed again for alignment
        draw_seed = int(rng.integers(0, 2**31))
        img = load_standardized(manifest, rec, geometry)
        aug, _ = apply_policy(img, policy, draw_seed)
        stem, _ = os.path.splitext(rec.path)
        aug_rel = f"{stem}.aug0.png"
        aug_abs = (os.path.join(manifest.base_dir, aug_rel)
                   if manifest.base_dir else aug_rel)
        Image.fromarray(
            np.round(aug * 255.0).astype(np.uint8)
        ).save(aug_abs, format="PNG")
        new_records.append(
            ImageRecord(
                id=f"{rec.id}.aug0", path=aug_rel, label=rec.label,
                split="train", source="augmented", parent_id=rec.id,
            )
        )
    return replace(manifest, records=tuple(new_records))
