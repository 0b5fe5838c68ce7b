import os

import numpy as np
import pytest
import torch
from PIL import Image, ImageDraw
from torch import nn

from bombus import backbones
from bombus import dataset as ds
from bombus import model as mdl
from bombus.backbones import BackboneSpec

TOY_LABELS = ("circle", "square", "triangle")


def pytest_runtest_makereport(item, call):
    # one pass/fail line per acceptance criterion
    if call.when == "call" and "test_acceptance" in str(item.fspath):
        outcome = "PASS" if call.excinfo is None else "FAIL"
        print(f"\nACCEPTANCE {item.name}: {outcome}")


def make_shape_image(cls: int, rng: np.random.Generator,
                     size: int = 96) -> Image.Image:
    img = Image.new("RGB", (size, size), (int(rng.integers(0, 60)),) * 3)
    draw = ImageDraw.Draw(img)
    x, y = (int(v) for v in rng.integers(size // 10, size // 2 - 5, 2))
    s = int(rng.integers(size // 3, size // 2))
    color = [(220, 40, 40), (40, 220, 40), (40, 40, 220)][cls]
    if cls == 0:
        draw.ellipse([x, y, x + s, y + s], fill=color)
    elif cls == 1:
        draw.rectangle([x, y, x + s, y + s], fill=color)
    else:
        draw.polygon([(x, y + s), (x + s, y + s), (x + s // 2, y)], fill=color)
    return img


def write_toy_images(root: str, per_class: int = 20,
                     seed: int = 5) -> list[ds.ImageRecord]:
    os.makedirs(root, exist_ok=True)
    rng = np.random.default_rng(seed)
    records = []
    for cls, label in enumerate(TOY_LABELS):
        for i in range(per_class):
            name = f"{label}_{i}.png"
            make_shape_image(cls, rng).save(os.path.join(root, name))
            records.append(ds.ImageRecord(f"{label}_{i}", name, label))
    return records


def build_toy_manifest(root: str, per_class: int = 20,
                       split_fraction: float = 0.85) -> ds.DatasetManifest:
    records = write_toy_images(root, per_class)
    manifest = ds.DatasetManifest(
        ds.ClassCatalog(TOY_LABELS), tuple(records), seed=0, base_dir=root
    )
    return ds.split(manifest, split_fraction, seed=0)


@pytest.fixture(scope="session")
def weight_store(tmp_path_factory):
    """Seeded stand-in 'pretrained' weights for vgg16 in a local weight store.

    Genuine ImageNet weights are not downloadable in the test environment;
    these deterministic weights exercise the identical pretrained code path
    (weight-store resolution, frozen trunk, head-only training). Convs get an
    identity-like passthrough tap so low-level image statistics survive depth,
    mimicking the feature usefulness of actually pretrained filters.
    """
    store = tmp_path_factory.mktemp("weights")
    old = os.environ.get("BOMBUS_WEIGHTS_DIR")
    os.environ["BOMBUS_WEIGHTS_DIR"] = str(store)
    torch.manual_seed(1234)
    trunk = backbones._build_trunk("vgg16")
    with torch.no_grad():
        for m in trunk.modules():
            if isinstance(m, nn.Conv2d):
                cout, cin, kh, kw = m.weight.shape
                for o in range(cout):
                    m.weight[o, o % cin, kh // 2, kw // 2] += 0.35
    backbones.export_trunk_weights(trunk, "vgg16")
    yield str(store)
    if old is None:
        os.environ.pop("BOMBUS_WEIGHTS_DIR", None)
    else:
        os.environ["BOMBUS_WEIGHTS_DIR"] = old


@pytest.fixture(scope="session")
def toy_manifest(tmp_path_factory):
    root = tmp_path_factory.mktemp("toyset")
    return build_toy_manifest(str(root))


@pytest.fixture(scope="session")
def toy_model(weight_store, toy_manifest):
    spec = BackboneSpec("vgg16", "pretrained")
    head = mdl.HeadConfig(output_classes=3, hidden_layers=1,
                          nodes_per_layer=(256,),
                          global_average_pooling=True)
    model = mdl.build_model(spec, head, seed=0)
    tc = mdl.TrainConfig(epochs=12, batch_size=16, seed=0)
    oc = mdl.OptimizerConfig("adam", 1e-3)
    return mdl.train(model, toy_manifest, tc, oc)


@pytest.fixture(scope="session")
def toy_artifact(toy_model, tmp_path_factory):
    path = tmp_path_factory.mktemp("artifact") / "model"
    mdl.save_model(toy_model, str(path))
    return str(path)


@pytest.fixture(scope="session")
def toy_val_images(toy_manifest, toy_model):
    geometry = toy_model.backbone.input_geometry
    records = toy_manifest.subset("validation")
    imgs = [ds.load_standardized(toy_manifest, r, geometry) for r in records]
    return records, imgs
