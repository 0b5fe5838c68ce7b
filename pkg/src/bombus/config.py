"""Experiment configuration: a single JSON file binding dataset, augmentation,
model, ensemble, and evaluation settings into a reproducible run.

Unknown keys are errors, not warnings, so typos cannot silently change an
experiment. Parsing materializes every default (including seeds) and the
resolved config re-serializes canonically.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

from .augment import AugmentationOpSpec, AugmentationPolicy
from .backbones import BackboneSpec
from .model import DecaySpec, HeadConfig, OptimizerConfig, TrainConfig


class ConfigError(ValueError):
    pass


# Best-performing recipe per backbone. VGG heads sit on flattened backbone
# features (the original VGG classifier layout); Inception and ResNet heads
# sit on globally averaged features.
PRESETS: dict[str, dict] = {
    "vgg19-best": {
        "backbone": {"name": "vgg19", "weight_source": "pretrained"},
        "head": {
            "hidden_layers": 2,
            "nodes_per_layer": [2048, 2048],
            "dropout": 0.5,
            "batch_norm": False,
            "global_average_pooling": False,
            "output_classes": 30,
        },
        "optimizer": {
            "kind": "adam",
            "learning_rate": 1e-5,
            "decay": {"rate": 0.96, "interval": 100, "unit": "steps"},
            "weight_decay": None,
            "momentum": None,
        },
        "train": {
            "epochs": 10,
            "batch_size": 64,
            "train_fraction": 0.85,
            "seed": 0,
            "use_augmented": False,
            "overfit_patience": None,
        },
    },
    "vgg16-best": {
        "backbone": {"name": "vgg16", "weight_source": "pretrained"},
        "head": {
            "hidden_layers": 3,
            "nodes_per_layer": [2048, 2048, 2048],
            "dropout": 0.3,
            "batch_norm": False,
            "global_average_pooling": False,
            "output_classes": 30,
        },
        "optimizer": {
            "kind": "adam",
            "learning_rate": 1e-4,
            "decay": None,
            "weight_decay": None,
            "momentum": None,
        },
        "train": {
            "epochs": 20,
            "batch_size": 64,
            "train_fraction": 0.85,
            "seed": 0,
            "use_augmented": False,
            "overfit_patience": None,
        },
    },
    "resnet50-final": {
        "backbone": {"name": "resnet50", "weight_source": "random"},
        "head": {
            "hidden_layers": 0,
            "nodes_per_layer": [],
            "dropout": 0.0,
            "batch_norm": False,
            "global_average_pooling": True,
            "output_classes": 30,
        },
        "optimizer": {
            "kind": "adam",
            "learning_rate": 5e-4,
            "decay": None,
            "weight_decay": None,
            "momentum": None,
        },
        "train": {
            "epochs": 15,
            "batch_size": 64,
            "train_fraction": 0.80,
            "seed": 0,
            "use_augmented": False,
            "overfit_patience": None,
        },
    },
    "inception-best": {
        "backbone": {"name": "inception_v3", "weight_source": "pretrained"},
        "head": {
            "hidden_layers": 2,
            "nodes_per_layer": [1536, 1536],
            "dropout": 0.5,
            "batch_norm": False,
            "global_average_pooling": True,
            "output_classes": 30,
        },
        "optimizer": {
            "kind": "adam",
            "learning_rate": 5e-5,
            "decay": None,
            "weight_decay": None,
            "momentum": None,
        },
        "train": {
            "epochs": 21,
            "batch_size": 12,
            "train_fraction": 0.85,
            "seed": 0,
            "use_augmented": False,
            "overfit_patience": None,
        },
    },
}


def _check_keys(obj: dict, allowed: set[str], where: str):
    unknown = set(obj) - allowed
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {sorted(unknown)}")


def _merged(defaults: dict, given: dict, where: str) -> dict:
    _check_keys(given, set(defaults), where)
    out = dict(defaults)
    out.update(given)
    return out


_DATASET_DEFAULTS = {
    "manifest": None,
    "images_dir": None,
    "train_fraction": 0.85,
    "seed": 0,
    "negatives_manifest": None,
}

_AUGMENT_DEFAULTS = {
    "enabled": True,
    "augment_rate": 0.25,
    "min_ops": 1,
    "max_ops": 4,
    "seed": 0,
    "rotation_degrees": [-45.0, 45.0],
    "contrast_factor": [0.5, 1.5],
    "salt_pepper_prob": [0.01, 0.05],
    "occlusion_box": [0.1, 0.4],
}

_EVAL_DEFAULTS = {"k": [1, 3], "threshold": 150}

_ENSEMBLE_DEFAULTS = {"members": [], "mode": "softmax_sum"}


def resolve_preset(name: str) -> dict:
    if name not in PRESETS:
        raise ConfigError(
            f"unknown preset {name!r}; known: {sorted(PRESETS)}"
        )
    return json.loads(json.dumps(PRESETS[name]))  # deep copy


def _resolve_model(section: dict) -> dict:
    if "preset" in section:
        _check_keys(section, {"preset", "train", "head"}, "model")
        resolved = resolve_preset(section["preset"])
        # train/head overrides on top of a preset (e.g. seeds, class count)
        if "train" in section:
            resolved["train"] = _merged(resolved["train"], section["train"],
                                        "model.train")
        if "head" in section:
            resolved["head"] = _merged(resolved["head"], section["head"],
                                       "model.head")
        resolved["preset"] = section["preset"]
        return resolved
    _check_keys(section, {"backbone", "head", "optimizer", "train"}, "model")
    for key in ("backbone", "head", "optimizer", "train"):
        if key not in section:
            raise ConfigError(f"model: missing section {key!r}")
    backbone = _merged({"name": None, "weight_source": "pretrained"},
                       section["backbone"], "model.backbone")
    head = _merged(
        {
            "hidden_layers": 0, "nodes_per_layer": [], "dropout": 0.0,
            "batch_norm": False, "global_average_pooling": True,
            "output_classes": None,
        },
        section["head"], "model.head")
    optimizer = _merged(
        {"kind": "adam", "learning_rate": 1e-4, "decay": None,
         "weight_decay": None, "momentum": None},
        section["optimizer"], "model.optimizer")
    if optimizer["decay"] is not None:
        optimizer["decay"] = _merged(
            {"rate": 0.96, "interval": 100, "unit": "steps"},
            optimizer["decay"], "model.optimizer.decay")
    train = _merged(
        {"epochs": None, "batch_size": 64, "train_fraction": 0.85, "seed": 0,
         "use_augmented": False, "overfit_patience": None},
        section["train"], "model.train")
    return {"backbone": backbone, "head": head, "optimizer": optimizer,
            "train": train}


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: dict
    augmentation: dict
    model: dict | None
    ensemble: dict | None
    eval: dict
    output: str

    def to_json(self) -> str:
        return json.dumps(
            {
                "dataset": self.dataset,
                "augmentation": self.augmentation,
                "model": self.model,
                "ensemble": self.ensemble,
                "eval": self.eval,
                "output": self.output,
            },
            indent=2, sort_keys=True,
        )

    # --- converters to module-level objects ---

    def policy(self) -> AugmentationPolicy:
        a = self.augmentation
        return AugmentationPolicy(
            ops=(
                AugmentationOpSpec("rotation", degrees=tuple(a["rotation_degrees"])),
                AugmentationOpSpec("contrast", factor=tuple(a["contrast_factor"])),
                AugmentationOpSpec("salt_pepper", prob=tuple(a["salt_pepper_prob"])),
                AugmentationOpSpec(
                    "occlusion",
                    box_height=tuple(a["occlusion_box"]),
                    box_width=tuple(a["occlusion_box"]),
                ),
            ),
            augment_rate=a["augment_rate"],
            min_ops=a["min_ops"],
            max_ops=a["max_ops"],
            seed=a["seed"],
        )

    def backbone_spec(self) -> BackboneSpec:
        b = self.model["backbone"]
        return BackboneSpec(b["name"], b["weight_source"])

    def head_config(self) -> HeadConfig:
        h = self.model["head"]
        return HeadConfig(
            output_classes=h["output_classes"],
            hidden_layers=h["hidden_layers"],
            nodes_per_layer=tuple(h["nodes_per_layer"]),
            dropout=h["dropout"],
            batch_norm=h["batch_norm"],
            global_average_pooling=h["global_average_pooling"],
        )

    def optimizer_config(self) -> OptimizerConfig:
        o = self.model["optimizer"]
        decay = DecaySpec(**o["decay"]) if o["decay"] else None
        return OptimizerConfig(
            kind=o["kind"], learning_rate=o["learning_rate"], decay=decay,
            weight_decay=o["weight_decay"], momentum=o["momentum"],
        )

    def train_config(self) -> TrainConfig:
        t = self.model["train"]
        return TrainConfig(
            epochs=t["epochs"], batch_size=t["batch_size"],
            train_fraction=t["train_fraction"], seed=t["seed"],
            use_augmented=t["use_augmented"],
            overfit_patience=t["overfit_patience"],
        )


def resolve_config(raw: dict) -> ExperimentConfig:
    _check_keys(raw, {"dataset", "augmentation", "model", "ensemble",
                      "eval", "output"}, "config")
    dataset = _merged(_DATASET_DEFAULTS, raw.get("dataset", {}), "dataset")
    augmentation = _merged(_AUGMENT_DEFAULTS, raw.get("augmentation", {}),
                           "augmentation")
    model = _resolve_model(raw["model"]) if raw.get("model") else None
    ensemble = (_merged(_ENSEMBLE_DEFAULTS, raw["ensemble"], "ensemble")
                if raw.get("ensemble") else None)
    if ensemble and ensemble["mode"] not in ("softmax_sum", "encoder_composite"):
        raise ConfigError(f"ensemble.mode {ensemble['mode']!r} unknown")
    eval_cfg = _merged(_EVAL_DEFAULTS, raw.get("eval", {}), "eval")
    output = raw.get("output", "bombus-out")
    cfg = ExperimentConfig(dataset, augmentation, model, ensemble,
                           eval_cfg, output)
    # fail fast on invalid ranges by exercising the module validators
    cfg.policy()
    if cfg.model:
        cfg.head_config()
        cfg.optimizer_config()
        cfg.train_config()
        cfg.backbone_spec()
    return cfg


def parse_config(path: str) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    return resolve_config(raw)
