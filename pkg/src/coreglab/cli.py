"""Command-line surface for the training lab.

Exit codes: 0 success, 1 config error, 2 data error, 3 training divergence.
Relative output paths resolve under the COREGLAB_OUTPUT_ROOT environment
variable when it is set.
"""

import functools
import sys
from dataclasses import replace
from pathlib import Path

import click
import numpy as np

from . import datasets, experiment, noiselab, trainer
from . import models as mdl


def _fail(exc, code: int):
    click.echo(f"error: {exc}", err=True)
    sys.exit(code)


def _guarded(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except experiment.ConfigError as exc:
            _fail(exc, 1)
        except (datasets.DataError, FileNotFoundError) as exc:
            _fail(exc, 2)
        except trainer.TrainingDiverged as exc:
            _fail(exc, 3)

    return wrapper


@click.group()
def main():
    """Train noise-robust classifiers with multi-model co-regularization,
    run denoising baselines, and analyze label noise."""


@main.command()
@click.argument("config_path", type=click.Path())
@_guarded
def train(config_path):
    """Run the experiment described by a config file."""
    config = experiment.load_config(config_path)
    manifest = experiment.run_experiment(config)
    run_dir = experiment.resolve_output_dir(config.output_dir)
    click.echo(f"run directory: {run_dir}")
    for row in manifest.metric_rows:
        if row["seed"] == "median":
            click.echo(f"median {row['split']} {row['metric']}: "
                       f"{repr(float(row['value']))}")


@main.command("analyze-noise")
@click.argument("config_path", type=click.Path())
@_guarded
def analyze_noise(config_path):
    """Run the noise-overfit protocol over the configured gamma grid."""
    config = experiment.load_config(config_path)
    curves = experiment.run_noise_analysis(config)
    click.echo(f"curves: {curves}")


@main.command("audit-labels")
@click.argument("config_path", type=click.Path())
@_guarded
def audit_labels(config_path):
    """Rank training instances by how strongly the models dispute their
    labels; scores the ranking against injected flips when noise is on."""
    config = experiment.load_config(config_path)
    report, score = experiment.run_audit(config)
    click.echo(f"report: {report}")
    click.echo("auroc: n/a" if score is None else f"auroc: {repr(score)}")


@main.command("export-curves")
@click.argument("run_dir", type=click.Path())
@click.option("--out", "out_path", type=click.Path(), default=None,
              help="Destination CSV (default: <run_dir>/curves.csv).")
@_guarded
def export_curves(run_dir, out_path):
    """Bundle a run's epoch logs into one long-format CSV."""
    target = experiment.export_curves(run_dir, out_path)
    click.echo(f"curves: {target}")


@main.command("gen-synthetic")
@click.option("--task", type=click.Choice(["synthetic", "tagging"]),
              default="synthetic", show_default=True)
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--seed", default=0, show_default=True)
@click.option("--train-size", default=2000, show_default=True)
@click.option("--dev-size", default=500, show_default=True)
@click.option("--test-size", default=500, show_default=True)
@click.option("--num-classes", default=4, show_default=True)
@click.option("--num-features", default=2, show_default=True)
@click.option("--class-sep", default=2.5, show_default=True)
@click.option("--scale", default=1.0, show_default=True)
@click.option("--sentences", default=200, show_default=True,
              help="Corpus size for the tagging task.")
@_guarded
def gen_synthetic(task, out_dir, seed, train_size, dev_size, test_size,
                  num_classes, num_features, class_sep, scale, sentences):
    """Generate a synthetic dataset: a Gaussian-mixture classification task
    or a templated tagging corpus."""
    out = experiment.resolve_output_dir(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if task == "synthetic":
        train_set, held_out = datasets.gen_gaussian_mixture(
            num_train=train_size, num_test=dev_size + test_size,
            num_classes=num_classes, num_features=num_features, seed=seed,
            class_sep=class_sep, scale=scale)
        splits = {"train": train_set,
                  "dev": held_out.subset(np.arange(dev_size)),
                  "test": held_out.subset(np.arange(dev_size,
                                                    dev_size + test_size))}
        for name, split in splits.items():
            datasets.write_feature_jsonl(out / f"{name}.jsonl", split)
            click.echo(f"wrote {out / f'{name}.jsonl'} ({len(split)} instances)")
        return
    instances, scheme = datasets.gen_tagging_corpus(sentences, seed)
    datasets.save_tag_scheme(scheme, out / "schema.json")
    n_eval = max(1, len(instances) // 10)
    splits = {"train": instances[:len(instances) - 2 * n_eval],
              "dev": instances[len(instances) - 2 * n_eval:len(instances) - n_eval],
              "test": instances[len(instances) - n_eval:]}
    for name, part in splits.items():
        datasets.write_conll(out / f"{name}.conll", part, scheme)
        click.echo(f"wrote {out / f'{name}.conll'} ({len(part)} sentences)")
    click.echo(f"wrote {out / 'schema.json'}")


@main.command("inject-noise")
@click.option("--task", type=click.Choice(list(experiment.TASKS)),
              default="synthetic", show_default=True)
@click.option("--input", "input_path", required=True, type=click.Path())
@click.option("--output", "output_path", required=True, type=click.Path())
@click.option("--mask-out", "mask_path", type=click.Path(), default=None,
              help="Flip-mask CSV (default: <output>.flips.csv).")
@click.option("--rate", required=True, type=float)
@click.option("--scheme", type=click.Choice(list(noiselab.NOISE_SCHEMES)),
              default="uniform_flip", show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--schema", "schema_path", type=click.Path(), default=None)
@_guarded
def inject_noise_cmd(task, input_path, output_path, mask_path, rate, scheme,
                     seed, schema_path):
    """Flip a seeded fraction of labels in a dataset file and record which."""
    try:
        spec = noiselab.NoiseSpec(rate=rate, seed=seed, scheme=scheme)
    except ValueError as exc:
        raise experiment.ConfigError(str(exc)) from exc
    if task == "synthetic":
        dataset = datasets.read_feature_jsonl(input_path)
        noisy, mask = noiselab.inject_noise(dataset, spec)
        datasets.write_feature_jsonl(output_path, noisy)
    elif task == "relation":
        if schema_path is None:
            raise experiment.ConfigError("relation noise requires --schema")
        rel_schema = datasets.RelationSchema.load(schema_path)
        instances = datasets.read_relation_jsonl(input_path, rel_schema)
        pseudo = datasets.LabeledDataset(
            np.zeros((len(instances), 1)),
            np.array([inst.label for inst in instances], dtype=np.int64),
            len(rel_schema.relations))
        noisy, mask = noiselab.inject_noise(pseudo, spec)
        flipped = [replace(inst, label=int(lab))
                   for inst, lab in zip(instances, noisy.labels)]
        datasets.write_relation_jsonl(output_path, flipped, rel_schema)
    else:
        if schema_path is None:
            raise experiment.ConfigError("tagging noise requires --schema")
        tag_scheme = datasets.load_tag_scheme(schema_path)
        instances = datasets.read_conll(input_path, tag_scheme)
        flat = np.array([t for inst in instances for t in inst.tags],
                        dtype=np.int64)
        pseudo = datasets.LabeledDataset(np.zeros((len(flat), 1)), flat,
                                         len(tag_scheme))
        noisy, mask = noiselab.inject_noise(pseudo, spec)
        offset = 0
        flipped = []
        for inst in instances:
            tags = [int(t) for t in noisy.labels[offset:offset + len(inst.tokens)]]
            offset += len(inst.tokens)
            flipped.append(mdl.TaggingInstance(inst.tokens, tags, uid=inst.uid))
        datasets.write_conll(output_path, flipped, tag_scheme)
    mask_target = mask_path if mask_path is not None else f"{output_path}.flips.csv"
    mask.save_csv(mask_target)
    click.echo(f"flipped {len(mask)} of {mask.num_instances} labels")
    click.echo(f"wrote {output_path}")
    click.echo(f"mask: {mask_target}")


@main.command()
@click.option("--model", "model_path", required=True, type=click.Path())
@click.option("--task", type=click.Choice(list(experiment.TASKS)),
              default="synthetic", show_default=True)
@click.option("--data", "data_path", required=True, type=click.Path())
@click.option("--schema", "schema_path", type=click.Path(), default=None)
@click.option("--vocab", "vocab_path", type=click.Path(), default=None)
@click.option("--window", default=1, show_default=True)
@click.option("--num-classes", default=None, type=int)
@_guarded
def evaluate(model_path, task, data_path, schema_path, vocab_path, window,
             num_classes):
    """Score a saved model on a dataset file."""
    model = mdl.load_model(model_path)
    if task == "synthetic":
        dataset = datasets.read_feature_jsonl(data_path, num_classes)
        name, fn = datasets.make_metric("synthetic")
    elif task == "relation":
        if schema_path is None or vocab_path is None:
            raise experiment.ConfigError(
                "relation evaluation requires --schema and --vocab")
        rel_schema = datasets.RelationSchema.load(schema_path)
        vocab = datasets.load_vocab(vocab_path)
        instances = datasets.read_relation_jsonl(data_path, rel_schema)
        dataset, _ = datasets.build_relation_dataset(instances, rel_schema, vocab)
        name, fn = datasets.make_metric("relation", schema=rel_schema)
    else:
        if schema_path is None or vocab_path is None:
            raise experiment.ConfigError(
                "tagging evaluation requires --schema and --vocab")
        tag_scheme = datasets.load_tag_scheme(schema_path)
        vocab = datasets.load_vocab(vocab_path)
        instances = datasets.read_conll(data_path, tag_scheme)
        dataset, _ = datasets.build_tagging_dataset(instances, tag_scheme,
                                                    vocab, window=window)
        name, fn = datasets.make_metric("tagging", scheme=tag_scheme)
    try:
        preds = mdl.predict(model, dataset.features)
    except ValueError as exc:
        raise datasets.DataError(f"model/data mismatch: {exc}") from exc
    click.echo(f"{name}: {repr(float(fn(dataset, preds)))}")


if __name__ == "__main__":
    main()
