"""Adapters over the four pretrained CNN backbones.

Each adapter exposes the convolutional trunk (everything up to, but not
including, the original classifier), its required input geometry, and the
feature dimensionality under the chosen pooling. Pretrained ImageNet weights
are resolved from a local weight store first (``BOMBUS_WEIGHTS_DIR``, files
named ``<backbone>.pt`` holding a trunk state dict), falling back to
torchvision's own download/cache mechanism.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import torch
from torch import nn
from torchvision import models

BACKBONE_NAMES = ("vgg16", "vgg19", "resnet50", "inception_v3")

_INPUT_GEOMETRY = {
    "vgg16": (224, 224),
    "vgg19": (224, 224),
    "resnet50": (224, 224),
    "inception_v3": (299, 299),
}
_FEATURE_CHANNELS = {
    "vgg16": 512,
    "vgg19": 512,
    "resnet50": 2048,
    "inception_v3": 2048,
}
_FEATURE_SPATIAL = {
    "vgg16": (7, 7),
    "vgg19": (7, 7),
    "resnet50": (7, 7),
    "inception_v3": (8, 8),
}

# ImageNet channel statistics used by all four torchvision models
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


class BackboneError(ValueError):
    pass


class PretrainedWeightsUnavailable(RuntimeError):
    """No local weight store entry and torchvision could not fetch weights."""


@dataclass(frozen=True)
class BackboneSpec:
    name: str
    weight_source: str = "pretrained"

    def __post_init__(self):
        if self.name not in BACKBONE_NAMES:
            raise BackboneError(f"unknown backbone {self.name!r}")
        if self.weight_source not in ("pretrained", "random"):
            raise BackboneError(f"bad weight_source {self.weight_source!r}")

    @property
    def input_geometry(self) -> tuple[int, int]:
        return _INPUT_GEOMETRY[self.name]

    @property
    def feature_channels(self) -> int:
        return _FEATURE_CHANNELS[self.name]

    def feature_dim(self, global_average_pooling: bool) -> int:
        if global_average_pooling:
            return self.feature_channels
        h, w = _FEATURE_SPATIAL[self.name]
        return self.feature_channels * h * w


def _build_trunk(name: str) -> nn.Module:
    if name == "vgg16":
        return models.vgg16(weights=None).features
    if name == "vgg19":
        return models.vgg19(weights=None).features
    if name == "resnet50":
        m = models.resnet50(weights=None)
        return nn.Sequential(
            m.conv1, m.bn1, m.relu, m.maxpool,
            m.layer1, m.layer2, m.layer3, m.layer4,
        )
    if name == "inception_v3":
        m = models.inception_v3(
            weights=None, aux_logits=False, transform_input=False,
            init_weights=True,
        )
        return nn.Sequential(
            m.Conv2d_1a_3x3, m.Conv2d_2a_3x3, m.Conv2d_2b_3x3, m.maxpool1,
            m.Conv2d_3b_1x1, m.Conv2d_4a_3x3, m.maxpool2,
            m.Mixed_5b, m.Mixed_5c, m.Mixed_5d,
            m.Mixed_6a, m.Mixed_6b, m.Mixed_6c, m.Mixed_6d, m.Mixed_6e,
            m.Mixed_7a, m.Mixed_7b, m.Mixed_7c,
        )
    raise BackboneError(f"unknown backbone {name!r}")


def weight_store_path(name: str) -> str:
    root = os.environ.get(
        "BOMBUS_WEIGHTS_DIR",
        os.path.join(os.path.expanduser("~"), ".cache", "bombus", "weights"),
    )
    return os.path.join(root, f"{name}.pt")


def _torchvision_pretrained_trunk(name: str) -> nn.Module:
    enum = {
        "vgg16": models.VGG16_Weights.IMAGENET1K_V1,
        "vgg19": models.VGG19_Weights.IMAGENET1K_V1,
        "resnet50": models.ResNet50_Weights.IMAGENET1K_V1,
        "inception_v3": models.Inception_V3_Weights.IMAGENET1K_V1,
    }[name]
    if name in ("vgg16", "vgg19"):
        return getattr(models, name)(weights=enum).features
    if name == "resnet50":
        m = models.resnet50(weights=enum)
        return nn.Sequential(
            m.conv1, m.bn1, m.relu, m.maxpool,
            m.layer1, m.layer2, m.layer3, m.layer4,
        )
    m = models.inception_v3(weights=enum, transform_input=False)
    return nn.Sequential(
        m.Conv2d_1a_3x3, m.Conv2d_2a_3x3, m.Conv2d_2b_3x3, m.maxpool1,
        m.Conv2d_3b_1x1, m.Conv2d_4a_3x3, m.maxpool2,
        m.Mixed_5b, m.Mixed_5c, m.Mixed_5d,
        m.Mixed_6a, m.Mixed_6b, m.Mixed_6c, m.Mixed_6d, m.Mixed_6e,
        m.Mixed_7a, m.Mixed_7b, m.Mixed_7c,
    )


def build_trunk(spec: BackboneSpec, seed: int = 0) -> nn.Module:
    """Construct the backbone trunk with the requested weights.

    pretrained: local weight store first, then torchvision's cache/download.
    random: architecture's own initialization, seeded for reproducibility.
    """
    if spec.weight_source == "random":
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            return _build_trunk(spec.name)
    store = weight_store_path(spec.name)
    if os.path.exists(store):
        trunk = _build_trunk(spec.name)
        trunk.load_state_dict(torch.load(store, map_location="cpu"))
        return trunk
    try:
        return _torchvision_pretrained_trunk(spec.name)
    except Exception as exc:
        raise PretrainedWeightsUnavailable(
            f"no pretrained weights for {spec.name!r}: not in weight store "
            f"({store}) and torchvision fetch failed ({exc}). Place a trunk "
            f"state dict at that path or set BOMBUS_WEIGHTS_DIR."
        ) from exc


def export_trunk_weights(trunk: nn.Module, name: str) -> str:
    """Save a trunk state dict into the weight store; returns the file path."""
    path = weight_store_path(name)
    os.makedirs(os.path.dirname(path), exist_ok=True)
    torch.save(trunk.state_dict(), path)
    return path


def preprocess(batch: torch.Tensor) -> torch.Tensor:
    """ImageNet channel normalization; expects NCHW float in [0,1]."""
    mean = torch.tensor(IMAGENET_MEAN, dtype=batch.dtype).view(1, 3, 1, 1)
    std = torch.tensor(IMAGENET_STD, dtype=batch.dtype).view(1, 3, 1, 1)
    return (batch - mean) / std
