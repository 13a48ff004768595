"""Experiment plumbing: structured run configs, the per-seed experiment
runner with CSV/manifest emission, the noise-analysis protocol driver, the
label audit, and the long-format curve exporter.

Run directory layout:
  config.yaml                  canonical config snapshot (hashed in manifest)
  manifest.json                config hash, metric rows, wall clock, artifacts
  metrics.csv                  final metric per seed per split + median rows
  seed_<s>/epoch_log.csv       per-epoch metrics (one row per model + "selected")
  seed_<s>/model.npz           selected model at its best checkpoint
  seed_<s>/flips.csv           injected-noise mask (when noise is configured)
  gamma_<g>/seed_<s>/...       noise-analysis runs, one subtree per gamma
"""

import csv
import hashlib
import json
import math
import os
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import yaml

from . import baselines, datasets, noiselab, trainer
from . import models as mdl
from . import rng as rngmod

TASKS = ("synthetic", "relation", "tagging")
METHODS = ("coreg", "plain", "small_loss", "relabel", "crossweigh")
OUTPUT_ROOT_ENV = "COREGLAB_OUTPUT_ROOT"

EPOCH_LOG_HEADER = ["model", "epoch", "split", "metric", "value"]
METRICS_HEADER = ["seed", "split", "metric", "value"]
CURVES_HEADER = ["method", "gamma", "seed", "epoch", "split", "metric", "value"]


class ConfigError(Exception):
    """The run configuration is missing, malformed, or inconsistent."""


_TOP_KEYS = {"task", "method", "seeds", "output_dir", "epochs", "data", "noise",
             "train", "baseline", "analysis"}
_TRAIN_KEYS = {"num_models", "total_steps", "warmup_pct", "gamma", "kl_eps",
               "batch_size", "base_lr", "aggregate_mode", "soft_target_gradient",
               "selection_policy", "hidden_sizes", "dropout"}
_DATA_KEYS = {"train_path", "dev_path", "test_path", "schema_path", "train_size",
              "dev_size", "test_size", "num_classes", "num_features", "class_sep",
              "scale", "data_seed", "window"}
_NOISE_KEYS = {"rate", "scheme", "seed", "confusion"}
_BASELINE_KEYS = {"delta_max", "folds", "iterations", "base_weight"}
_ANALYSIS_KEYS = {"gammas", "pool_size", "pool_noise_rate", "epochs"}


def _check_keys(mapping, allowed, where):
    unknown = sorted(set(mapping) - allowed)
    if unknown:
        raise ConfigError(f"unknown {where} keys: {', '.join(unknown)}")


@dataclass
class ExperimentConfig:
    """Everything a run needs; ``raw`` keeps the parsed mapping so the run
    directory snapshot reflects the config as given."""

    task: str
    method: str
    seeds: tuple[int, ...]
    output_dir: str
    train: trainer.TrainConfig
    epochs: int | None
    data: dict
    noise: dict | None
    baseline: dict
    analysis: dict
    raw: dict

    @classmethod
    def from_mapping(cls, raw: dict) -> "ExperimentConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config must be a mapping")
        _check_keys(raw, _TOP_KEYS, "config")
        task = raw.get("task", "synthetic")
        if task not in TASKS:
            raise ConfigError(f"unknown task {task!r}")
        method = raw.get("method", "coreg")
        if method not in METHODS:
            raise ConfigError(f"unknown method {method!r}")
        seeds = tuple(int(s) for s in raw.get("seeds", ()))
        if not seeds:
            raise ConfigError("seeds must be a non-empty list")
        if len(set(seeds)) != len(seeds):
            raise ConfigError("seeds must be distinct")
        output_dir = raw.get("output_dir")
        if not output_dir:
            raise ConfigError("output_dir is required")
        train_raw = dict(raw.get("train", {}))
        _check_keys(train_raw, _TRAIN_KEYS, "train")
        if "hidden_sizes" in train_raw:
            train_raw["hidden_sizes"] = tuple(int(h) for h in train_raw["hidden_sizes"])
        try:
            tcfg = trainer.TrainConfig(**train_raw)
            tcfg.validate(min_models=1)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad train settings: {exc}") from exc
        if method == "coreg" and tcfg.num_models < 2:
            raise ConfigError("coreg requires num_models >= 2")
        epochs = raw.get("epochs")
        if epochs is not None and int(epochs) < 1:
            raise ConfigError("epochs must be >= 1")
        data = dict(raw.get("data", {}))
        _check_keys(data, _DATA_KEYS, "data")
        noise = raw.get("noise")
        if noise is not None:
            noise = dict(noise)
            _check_keys(noise, _NOISE_KEYS, "noise")
            if "rate" not in noise:
                raise ConfigError("noise requires a rate")
        baseline = dict(raw.get("baseline", {}))
        _check_keys(baseline, _BASELINE_KEYS, "baseline")
        analysis = dict(raw.get("analysis", {}))
        _check_keys(analysis, _ANALYSIS_KEYS, "analysis")
        return cls(task, method, seeds, str(output_dir), tcfg,
                   None if epochs is None else int(epochs),
                   data, noise, baseline, analysis, raw)


def load_config(path) -> ExperimentConfig:
    try:
        with open(path) as fh:
            raw = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    return ExperimentConfig.from_mapping(raw)


def resolve_output_dir(output_dir: str) -> Path:
    """Relative output directories land under the output-root environment
    variable (default: current directory)."""
    path = Path(output_dir)
    if path.is_absolute():
        return path
    return Path(os.environ.get(OUTPUT_ROOT_ENV, ".")) / path


@dataclass
class TaskData:
    train: datasets.LabeledDataset
    dev: datasets.LabeledDataset
    test: datasets.LabeledDataset
    metric_name: str
    metric_fn: object
    vocab: object = None


def build_task_data(config: ExperimentConfig) -> TaskData:
    data = config.data
    if config.task == "synthetic":
        dev_size = int(data.get("dev_size", 500))
        test_size = int(data.get("test_size", 500))
        train, held_out = datasets.gen_gaussian_mixture(
            num_train=int(data.get("train_size", 2000)),
            num_test=dev_size + test_size,
            num_classes=int(data.get("num_classes", 4)),
            num_features=int(data.get("num_features", 2)),
            seed=int(data.get("data_seed", 20250401)),
            class_sep=float(data.get("class_sep", 2.5)),
            scale=float(data.get("scale", 1.0)))
        dev = held_out.subset(np.arange(dev_size))
        test = held_out.subset(np.arange(dev_size, dev_size + test_size))
        name, fn = datasets.make_metric("synthetic")
        return TaskData(train, dev, test, name, fn)
    for key in ("train_path", "dev_path", "test_path", "schema_path"):
        if key not in data:
            raise ConfigError(f"{config.task} task requires data.{key}")
    if config.task == "relation":
        schema = datasets.RelationSchema.load(data["schema_path"])
        splits = {}
        vocab = None
        for split in ("train", "dev", "test"):
            instances = datasets.read_relation_jsonl(data[f"{split}_path"], schema)
            splits[split], vocab = datasets.build_relation_dataset(
                instances, schema, vocab)
        name, fn = datasets.make_metric("relation", schema=schema)
        return TaskData(splits["train"], splits["dev"], splits["test"], name, fn,
                        vocab=vocab)
    scheme = datasets.load_tag_scheme(data["schema_path"])
    window = int(data.get("window", 1))
    splits = {}
    vocab = None
    for split in ("train", "dev", "test"):
        instances = datasets.read_conll(data[f"{split}_path"], scheme)
        splits[split], vocab = datasets.build_tagging_dataset(
            instances, scheme, vocab, window=window)
    name, fn = datasets.make_metric("tagging", scheme=scheme)
    return TaskData(splits["train"], splits["dev"], splits["test"], name, fn,
                    vocab=vocab)


def _steps_per_epoch(n: int, batch_size: int) -> int:
    return max(1, math.ceil(n / batch_size))


def _resolved_train_config(config: ExperimentConfig, seed: int,
                           n_train: int) -> trainer.TrainConfig:
    tcfg = replace(config.train, master_seed=seed)
    if tcfg.total_steps == 0:
        epochs = config.epochs if config.epochs is not None else 30
        tcfg = replace(tcfg, total_steps=epochs
                       * _steps_per_epoch(n_train, tcfg.batch_size))
    return tcfg


def _noise_spec(config: ExperimentConfig, seed: int) -> noiselab.NoiseSpec | None:
    if config.noise is None:
        return None
    noise_seed = config.noise.get("seed")
    if noise_seed is None:
        noise_seed = rngmod.substream_seed(seed, "noise")
    confusion = config.noise.get("confusion")
    return noiselab.NoiseSpec(
        rate=float(config.noise["rate"]), seed=int(noise_seed),
        scheme=config.noise.get("scheme", "uniform_flip"),
        confusion=None if confusion is None else np.asarray(confusion, float))


def _write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def _write_epoch_log(path, epoch_rows) -> None:
    formatted = [(model, epoch, split, metric, repr(float(value)))
                 for model, epoch, split, metric, value in epoch_rows]
    _write_csv(path, EPOCH_LOG_HEADER, formatted)


def _snapshot_config(config: ExperimentConfig, run_dir: Path) -> str:
    text = yaml.safe_dump(config.raw, sort_keys=True)
    (run_dir / "config.yaml").write_text(text)
    return hashlib.sha256(text.encode()).hexdigest()


def _run_method(config: ExperimentConfig, tcfg: trainer.TrainConfig,
                train_set, dev_set, task: TaskData, seed_dir: Path):
    """Dispatch one seed's training according to the configured method."""
    common = dict(eval_metric=task.metric_fn, metric_name=task.metric_name)
    if config.method == "coreg":
        return trainer.train(train_set, dev_set, tcfg, **common)
    if config.method == "plain":
        return baselines.train_plain(train_set, dev_set, tcfg, **common)
    if config.method in ("small_loss", "relabel"):
        sched = baselines.PruneSchedule(
            float(config.baseline.get("delta_max", 5.0)), tcfg.total_steps)
        hook = (baselines.make_small_loss_hook(sched)
                if config.method == "small_loss"
                else baselines.make_relabel_hook(sched))
        return trainer.train(train_set, dev_set, replace(tcfg, gamma=0.0),
                             batch_hook=hook, **common)
    folds = int(config.baseline.get("folds", 5))
    iterations = int(config.baseline.get("iterations", 2))
    base_weight = float(config.baseline.get("base_weight",
                                            baselines.DEFAULT_DOWNWEIGHT))
    n = len(train_set)
    fold_train = n - math.ceil(n / folds)
    epochs = config.epochs if config.epochs is not None else 30
    fold_steps = max(1, epochs * _steps_per_epoch(fold_train, tcfg.batch_size))
    weights = baselines.crossweigh_weights(
        train_set, folds, iterations, replace(tcfg, total_steps=fold_steps),
        base_weight)
    weights.save_csv(seed_dir / "weights.csv")
    return baselines.train_plain(train_set, dev_set, tcfg, weights=weights, **common)


@dataclass
class RunManifest:
    config_hash: str
    metric_rows: list
    wall_clock_sec: float
    artifacts: list
    failure: str | None = None

    def save(self, path) -> None:
        payload = {"config_hash": self.config_hash,
                   "metric_rows": self.metric_rows,
                   "wall_clock_sec": self.wall_clock_sec,
                   "artifacts": sorted(self.artifacts),
                   "failure": self.failure}
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")


def run_experiment(config: ExperimentConfig) -> RunManifest:
    """Per seed: build data, optionally inject noise, train the configured
    method, log per-epoch metrics, and score the selected model on dev and
    test; finally write metrics.csv (with median rows) and the manifest."""
    started = time.monotonic()
    run_dir = resolve_output_dir(config.output_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    config_hash = _snapshot_config(config, run_dir)
    manifest = RunManifest(config_hash, [], 0.0, ["config.yaml", "metrics.csv"])
    try:
        task = build_task_data(config)
        if task.vocab is not None:
            datasets.save_vocab(task.vocab, run_dir / "vocab.json")
            manifest.artifacts.append("vocab.json")
        per_split: dict[str, list[float]] = {"dev": [], "test": []}
        for seed in config.seeds:
            seed_dir = run_dir / f"seed_{seed}"
            seed_dir.mkdir(parents=True, exist_ok=True)
            train_set = task.train
            dev_set = task.dev
            spec = _noise_spec(config, seed)
            if spec is not None:
                train_set, mask = noiselab.inject_noise(train_set, spec)
                mask.save_csv(seed_dir / "flips.csv")
                manifest.artifacts.append(f"seed_{seed}/flips.csv")
                # Checkpoint selection must not peek at clean labels: the
                # dev split is drawn from the same noisy labeling process.
                dev_spec = replace(spec,
                                   seed=rngmod.substream_seed(spec.seed, "dev"))
                dev_set, _ = noiselab.inject_noise(dev_set, dev_spec)
            tcfg = _resolved_train_config(config, seed, len(train_set))
            result = _run_method(config, tcfg, train_set, dev_set, task,
                                 seed_dir)
            _write_epoch_log(seed_dir / "epoch_log.csv", result.epoch_rows)
            manifest.artifacts.append(f"seed_{seed}/epoch_log.csv")
            if config.method == "crossweigh":
                manifest.artifacts.append(f"seed_{seed}/weights.csv")
            chosen = trainer.select_index(result.best_dev_per_model(),
                                          tcfg.selection_policy,
                                          result.ensemble.num_models)
            model = result.model_with_best_params(chosen)
            mdl.save_model(model, seed_dir / "model.npz")
            manifest.artifacts.append(f"seed_{seed}/model.npz")
            for split, split_set in (("dev", dev_set), ("test", task.test)):
                value = float(task.metric_fn(split_set,
                                             mdl.predict(model, split_set.features)))
                per_split[split].append(value)
                manifest.metric_rows.append(
                    {"seed": seed, "split": split, "metric": task.metric_name,
                     "value": value})
        csv_rows = [(row["seed"], row["split"], row["metric"], repr(row["value"]))
                    for row in manifest.metric_rows]
        for split in ("dev", "test"):
            median = float(np.median(per_split[split]))
            manifest.metric_rows.append(
                {"seed": "median", "split": split, "metric": task.metric_name,
                 "value": median})
            csv_rows.append(("median", split, task.metric_name, repr(median)))
        _write_csv(run_dir / "metrics.csv", METRICS_HEADER, csv_rows)
    except Exception as exc:
        manifest.failure = f"{type(exc).__name__}: {exc}"
        manifest.wall_clock_sec = time.monotonic() - started
        manifest.save(run_dir / "manifest.json")
        raise
    manifest.wall_clock_sec = time.monotonic() - started
    manifest.artifacts.append("manifest.json")
    manifest.save(run_dir / "manifest.json")
    return manifest


def run_noise_analysis(config: ExperimentConfig) -> Path:
    """Noise-overfit protocol over a gamma grid: per seed, build a paired
    noisy/clean pool, train on train + noisy for each gamma, and log the
    clean-set metric per epoch. Emits curves.csv in the long format."""
    run_dir = resolve_output_dir(config.output_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    _snapshot_config(config, run_dir)
    if config.task != "synthetic":
        raise ConfigError("analyze-noise supports the synthetic task")
    task = build_task_data(config)
    gammas = [float(g) for g in config.analysis.get("gammas", (0.0, 1.0, 5.0, 20.0))]
    pool_size = int(config.analysis.get("pool_size", 600))
    pool_rate = float(config.analysis.get("pool_noise_rate", 0.5))
    epochs = int(config.analysis.get(
        "epochs", config.epochs if config.epochs is not None else 30))
    data = config.data
    pool, _ = datasets.gen_gaussian_mixture(
        num_train=pool_size, num_test=1,
        num_classes=int(data.get("num_classes", 4)),
        num_features=int(data.get("num_features", 2)),
        seed=int(data.get("data_seed", 20250401)) + 1,
        class_sep=float(data.get("class_sep", 2.5)),
        scale=float(data.get("scale", 1.0)))
    for seed in config.seeds:
        train_set = task.train
        spec = _noise_spec(config, seed)
        if spec is not None:
            train_set, _ = noiselab.inject_noise(train_set, spec)
        pool_spec = noiselab.NoiseSpec(
            rate=pool_rate, seed=rngmod.substream_seed(seed, "noise"))
        noisy_pool, _ = noiselab.inject_noise(pool, pool_spec)
        split = noiselab.split_noisy_clean(noisy_pool.labels, pool.labels)
        noisy_set = datasets.LabeledDataset(
            pool.features[split.indices], split.noisy_labels, pool.num_classes)
        clean_set = datasets.LabeledDataset(
            pool.features[split.indices], split.clean_labels, pool.num_classes)
        union_n = len(train_set) + len(noisy_set)
        base = replace(config.train, master_seed=seed,
                       total_steps=epochs * _steps_per_epoch(
                           union_n, config.train.batch_size))
        for gamma in gammas:
            rows = noiselab.noise_overfit_eval(
                train_set, noisy_set, clean_set, [gamma], base,
                eval_metric=task.metric_fn, metric_name=task.metric_name)
            seed_dir = run_dir / f"gamma_{repr(gamma)}" / f"seed_{seed}"
            seed_dir.mkdir(parents=True, exist_ok=True)
            _write_epoch_log(
                seed_dir / "epoch_log.csv",
                [("selected", epoch, "clean", task.metric_name, value)
                 for _, epoch, value in rows])
    return export_curves(run_dir)


def run_audit(config: ExperimentConfig):
    """Train on the (noise-injected) training set with the first seed, rank
    instances by the suspect-label report, and score how well the ranking
    recovers the injected flips. Returns (report path, AUROC or None)."""
    run_dir = resolve_output_dir(config.output_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    _snapshot_config(config, run_dir)
    task = build_task_data(config)
    seed = config.seeds[0]
    train_set = task.train
    mask = None
    spec = _noise_spec(config, seed)
    if spec is not None:
        train_set, mask = noiselab.inject_noise(train_set, spec)
        mask.save_csv(run_dir / "flips.csv")
    tcfg = _resolved_train_config(config, seed, len(train_set))
    result = trainer.train(train_set, task.dev, tcfg,
                           eval_metric=task.metric_fn,
                           metric_name=task.metric_name)
    rows = noiselab.disagreement_report(result.ensemble, train_set, tcfg)
    report_path = run_dir / "audit.csv"
    noiselab.save_suspect_csv(rows, report_path)
    score = None
    if mask is not None and 0 < len(mask) < len(train_set):
        sup = np.array([r.sup_loss for r in rows])
        ids = np.array([r.instance_id for r in rows])
        flags = mask.flags()[ids]
        score = noiselab.auroc(sup, flags)
    return report_path, score


def export_curves(run_dir, out_path=None) -> Path:
    """Assemble every epoch log under a run directory into one long-format
    CSV: method,gamma,seed,epoch,split,metric,value. Only the "selected"
    rows are exported; per-model curves stay in the per-seed logs."""
    run = Path(run_dir)
    snapshot = run / "config.yaml"
    if not snapshot.exists():
        raise datasets.DataError(f"{run}: missing config snapshot")
    raw = yaml.safe_load(snapshot.read_text()) or {}
    method = raw.get("method", "coreg")
    base_gamma = float(raw.get("train", {}).get(
        "gamma", trainer.TrainConfig.gamma))
    logs = []
    for log in run.glob("seed_*/epoch_log.csv"):
        logs.append((base_gamma, int(log.parent.name.split("_", 1)[1]), log))
    for log in run.glob("gamma_*/seed_*/epoch_log.csv"):
        gamma = float(log.parent.parent.name.split("_", 1)[1])
        logs.append((gamma, int(log.parent.name.split("_", 1)[1]), log))
    if not logs:
        raise datasets.DataError(f"{run}: no epoch logs found")
    logs.sort(key=lambda item: (item[0], item[1]))
    out_rows = []
    for gamma, seed, log in logs:
        with open(log, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != EPOCH_LOG_HEADER:
                raise datasets.DataError(f"{log}: unexpected header {header!r}")
            for model, epoch, split, metric, value in reader:
                if model == "selected":
                    out_rows.append((method, repr(gamma), seed, epoch, split,
                                     metric, value))
    target = Path(out_path) if out_path is not None else run / "curves.csv"
    _write_csv(target, CURVES_HEADER, out_rows)
    return target
