"""Command-line surface binding the pipeline stages into reproducible runs.

Every subcommand writes its artifacts under the config's output directory
together with the resolved config snapshot that produced them. Errors exit
nonzero with a single machine-parsable line on stderr.
"""

from __future__ import annotations

import csv
import json
import os
import sys

import click

from . import augment as aug
from . import dataset as ds
from . import ensemble as ens
from . import evaluation as ev
from . import model as mdl
from .config import ConfigError, ExperimentConfig, parse_config
from .probabilities import read_matrix_csv, write_matrix_csv


def _fail(message: str):
    line = " ".join(str(message).split())
    click.echo(f"error: {line}", err=True)
    sys.exit(1)


def _snapshot(cfg: ExperimentConfig, command: str):
    os.makedirs(cfg.output, exist_ok=True)
    with open(os.path.join(cfg.output, f"{command}.config.json"), "w",
              encoding="utf-8") as fh:
        fh.write(cfg.to_json())


def _load_config(path: str) -> ExperimentConfig:
    try:
        return parse_config(path)
    except ConfigError as exc:
        _fail(exc)


def _read_truth(path: str) -> dict[str, str]:
    truth = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[:2] != ["image_id", "label"]:
            raise ev.EvalError(f"{path}: expected header image_id,label")
        for row in reader:
            if row:
                truth[row[0]] = row[1]
    return truth


def _read_counts(path: str) -> dict[str, int]:
    counts = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        next(reader)  # header
        for row in reader:
            if row:
                counts[row[0]] = int(row[1])
    return counts


@click.group()
def main():
    """Bumble bee species identification pipeline."""


@main.group("dataset")
def dataset_group():
    """Dataset preparation commands."""


@dataset_group.command("build")
@click.option("--config", "config_path", required=True, type=click.Path())
def dataset_build(config_path):
    """Validate, inject the negative class, and split the manifest."""
    cfg = _load_config(config_path)
    try:
        manifest = ds.load_manifest(cfg.dataset["manifest"])
        if cfg.dataset["negatives_manifest"]:
            negatives = ds.load_manifest(cfg.dataset["negatives_manifest"])
            manifest = ds.inject_negative_class(manifest,
                                                list(negatives.records))
        manifest = ds.split(manifest, cfg.dataset["train_fraction"],
                            cfg.dataset["seed"])
        _snapshot(cfg, "dataset-build")
        out_manifest = os.path.join(cfg.output, "manifest.jsonl")
        ds.save_manifest(manifest, out_manifest)
        train_counts = {label: 0 for label in manifest.catalog.labels}
        for rec in manifest.subset("train"):
            train_counts[rec.label] += 1
        with open(os.path.join(cfg.output, "train_counts.csv"), "w",
                  newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["label", "count"])
            for label, count in train_counts.items():
                writer.writerow([label, count])
        click.echo(out_manifest)
    except (ds.ManifestError, ds.ImageError, OSError) as exc:
        _fail(exc)


@main.command("augment")
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--manifest", "manifest_path", default=None, type=click.Path(),
              help="Manifest to augment (default: <output>/manifest.jsonl).")
def augment_cmd(config_path, manifest_path):
    """Write augmented siblings for ~25% of the training images."""
    cfg = _load_config(config_path)
    if not cfg.augmentation["enabled"]:
        _fail("augmentation disabled in config")
    manifest_path = manifest_path or os.path.join(cfg.output, "manifest.jsonl")
    try:
        manifest = ds.load_manifest(manifest_path)
        out = aug.build_augmented_set(manifest, cfg.policy())
        _snapshot(cfg, "augment")
        # record paths are relative to the manifest's directory, so the
        # augmented manifest lives next to the source manifest
        out_path = os.path.join(out.base_dir or cfg.output,
                                "manifest.augmented.jsonl")
        ds.save_manifest(out, out_path)
        click.echo(out_path)
    except (ds.ManifestError, ds.ImageError, aug.AugmentError, OSError) as exc:
        _fail(exc)


@main.command("train")
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--manifest", "manifest_path", default=None, type=click.Path())
def train_cmd(config_path, manifest_path):
    """Train the configured model and save its artifact."""
    cfg = _load_config(config_path)
    if cfg.model is None:
        _fail("config has no model section")
    manifest_path = manifest_path or cfg.dataset["manifest"]
    try:
        manifest = ds.load_manifest(manifest_path)
        tc = cfg.train_config()
        if not manifest.subset("train"):
            manifest = ds.split(manifest, tc.train_fraction,
                                cfg.dataset["seed"])
        model = mdl.build_model(cfg.backbone_spec(), cfg.head_config(),
                                seed=tc.seed)
        trained = mdl.train(model, manifest, tc, cfg.optimizer_config())
        _snapshot(cfg, "train")
        artifact_dir = os.path.join(cfg.output, "model")
        mdl.save_model(trained, artifact_dir)
        with open(os.path.join(cfg.output, "history.json"), "w",
                  encoding="utf-8") as fh:
            json.dump([r.__dict__ for r in trained.history], fh, indent=2)
        click.echo(artifact_dir)
    except (ds.ManifestError, ds.ImageError, mdl.ModelConfigError,
            mdl.TrainingError, mdl.ArtifactError, OSError) as exc:
        _fail(exc)


@main.command("predict")
@click.option("--model", "model_dirs", multiple=True, required=True,
              type=click.Path())
@click.option("--image", "images", multiple=True, type=click.Path())
@click.option("--manifest", "manifest_path", default=None, type=click.Path(),
              help="Predict over a manifest split instead of loose images.")
@click.option("--split", "split_name", default="validation", show_default=True)
@click.option("--k", default=3, show_default=True)
@click.option("--matrix-out", "matrix_out", default=None, type=click.Path(),
              help="Also write the full probability matrix as CSV "
                   "(single model only).")
@click.option("--out", "out_path", default=None, type=click.Path())
def predict_cmd(model_dirs, images, manifest_path, split_name, k, matrix_out,
                out_path):
    """Top-k predictions for images or a manifest split (summed over models)."""
    try:
        models = [mdl.load_model(d) for d in model_dirs]
        if bool(images) == bool(manifest_path):
            _fail("pass either --image(s) or --manifest, not both")
        if manifest_path:
            manifest = ds.load_manifest(manifest_path)
            records = manifest.subset(split_name)
            if not records:
                _fail(f"manifest has no {split_name!r} records")
            ids = tuple(r.id for r in records)
            sources = [("record", r) for r in records]
        else:
            ids = tuple(os.path.basename(p) for p in images)
            sources = [("file", p) for p in images]
        matrices = []
        for m in models:
            geometry = m.backbone.input_geometry
            arrs = []
            for kind, src in sources:
                if kind == "record":
                    arrs.append(ds.load_standardized(manifest, src, geometry))
                else:
                    with open(src, "rb") as fh:
                        arrs.append(ds.standardize(fh.read(), geometry))
            matrices.append(mdl.predict_probs(m, arrs, image_ids=ids))
        if matrix_out:
            if len(matrices) != 1:
                _fail("--matrix-out requires exactly one --model")
            write_matrix_csv(matrices[0], matrix_out)
        scores = ens.sum_softmax(matrices)
        preds = ens.top_k(scores, k)
        doc = [
            {
                "image_id": p.image_id,
                "predictions": [
                    {"label": lbl, "score": score}
                    for lbl, score in zip(p.ranked_labels, p.scores)
                ],
            }
            for p in preds
        ]
        text = json.dumps(doc, indent=2)
        if out_path:
            with open(out_path, "w", encoding="utf-8") as fh:
                fh.write(text)
        click.echo(text)
    except (ds.ImageError, ds.ManifestError, mdl.ArtifactError,
            mdl.ModelConfigError, ens.MatrixError, OSError) as exc:
        _fail(exc)


@main.command("ensemble")
@click.option("--members", "member_paths", multiple=True, required=True,
              type=click.Path())
@click.option("--out", "out_path", required=True, type=click.Path())
def ensemble_cmd(member_paths, out_path):
    """Sum member probability matrices into a composite score matrix."""
    try:
        matrices = [read_matrix_csv(p) for p in member_paths]
        scores = ens.sum_softmax(matrices)
        write_matrix_csv(scores, out_path)
        click.echo(out_path)
    except (ens.MatrixError, ds.ManifestError, OSError) as exc:
        _fail(exc)


@main.command("evaluate")
@click.option("--matrix", "matrix_path", required=True, type=click.Path())
@click.option("--truth", "truth_path", required=True, type=click.Path())
@click.option("--k", "k_values", multiple=True, type=int, default=(1, 3),
              show_default=True)
@click.option("--members", default=1, show_default=True,
              help="Member count if the matrix holds composite scores.")
@click.option("--train-counts", "counts_path", default=None, type=click.Path())
@click.option("--negative-label", default=None)
@click.option("--out", "out_path", required=True, type=click.Path())
def evaluate_cmd(matrix_path, truth_path, k_values, members, counts_path,
                 negative_label, out_path):
    """Score a probability/score matrix against truth labels."""
    try:
        from .probabilities import read_scores_csv

        if members > 1:
            scores = read_scores_csv(matrix_path, members, negative_label)
        else:
            scores = read_matrix_csv(matrix_path, negative_label)
        truth = _read_truth(truth_path)
        counts = _read_counts(counts_path) if counts_path else None
        report = ev.compute_report(
            scores, truth, k_values=tuple(k_values), train_counts=counts,
            provenance={"matrix": os.path.basename(matrix_path)},
        )
        with open(out_path, "w", encoding="utf-8") as fh:
            fh.write(ev.report_to_json(report))
        click.echo(out_path)
    except (ev.EvalError, ens.MatrixError, ds.ManifestError, OSError) as exc:
        _fail(exc)


@main.command("report")
@click.option("--report", "report_path", required=True, type=click.Path())
@click.option("--train-counts", "counts_path", default=None, type=click.Path())
@click.option("--out-dir", required=True, type=click.Path())
def report_cmd(report_path, counts_path, out_dir):
    """Render a report JSON to markdown plus plot-ready CSV series."""
    try:
        with open(report_path, encoding="utf-8") as fh:
            report = ev.report_from_json(fh.read())
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "report.md"), "w",
                  encoding="utf-8") as fh:
            fh.write(ev.report_to_markdown(report))
        if counts_path:
            counts = _read_counts(counts_path)
        elif all("train_count" in v for v in report.per_class.values()):
            counts = {lbl: v["train_count"]
                      for lbl, v in report.per_class.items()}
        else:
            raise ev.EvalError(
                "no train counts: pass --train-counts or evaluate with them"
            )
        ev.write_series_csvs(report, counts, out_dir)
        click.echo(out_dir)
    except (ev.EvalError, OSError, json.JSONDecodeError) as exc:
        _fail(exc)


@main.command("serve")
@click.option("--model", "model_dirs", multiple=True, type=click.Path())
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8000, show_default=True)
def serve_cmd(model_dirs, host, port):
    """Serve top-3 predictions over HTTP (POST /predict)."""
    import uvicorn

    from .server import ModelService, create_app

    dirs = list(model_dirs)
    if not dirs:
        env_dir = os.environ.get("BOMBUS_MODEL_DIR")
        if env_dir:
            dirs = [env_dir]
    if not dirs:
        _fail("no model: pass --model or set BOMBUS_MODEL_DIR")
    service = ModelService(dirs)
    app = create_app(service)
    service.load()
    uvicorn.run(app, host=host, port=port)


if __name__ == "__main__":
    main()
