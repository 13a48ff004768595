"""Label-noise experiment machinery: seeded noise injection, paired
noisy/clean evaluation sets, the noise-overfit protocol (train on the union
with the noisy labels, watch accuracy on the corrected labels per epoch),
forgetting-event statistics, and suspect-label reports.
"""

import csv
import math
import warnings
from dataclasses import dataclass, replace
from typing import NamedTuple

import numpy as np

from . import datasets as ds
from . import models as mdl
from . import trainer
from .numeric import PROB_FLOOR, softmax

NOISE_SCHEMES = ("uniform_flip", "class_conditional")
FLIP_CSV_HEADER = ["id", "original_label", "noisy_label"]
SUSPECT_CSV_HEADER = ["id", "label", "prediction", "flagged", "agreement_kl", "sup_loss"]


@dataclass(frozen=True)
class NoiseSpec:
    """How to corrupt labels: fraction of instances, flip scheme, seed.

    class_conditional requires ``confusion``, a row-stochastic table whose
    row y gives the distribution the new label of a class-y instance is
    drawn from.
    """

    rate: float
    seed: int
    scheme: str = "uniform_flip"
    confusion: np.ndarray | None = None

    def __post_init__(self):
        if not 0.0 <= self.rate < 1.0:
            raise ValueError("noise rate must be in [0, 1)")
        if self.scheme not in NOISE_SCHEMES:
            raise ValueError(f"unknown noise scheme {self.scheme!r}")
        if self.scheme == "class_conditional":
            if self.confusion is None:
                raise ValueError("class_conditional requires a confusion table")
            table = np.asarray(self.confusion, dtype=np.float64)
            if table.ndim != 2 or table.shape[0] != table.shape[1]:
                raise ValueError("confusion table must be square")
            if np.any(table < 0) or np.any(np.abs(table.sum(axis=1) - 1.0) > 1e-9):
                raise ValueError("confusion table rows must be distributions")
            object.__setattr__(self, "confusion", table)


@dataclass(frozen=True)
class FlipMask:
    """Which instances were flipped, with their original and noisy labels."""

    indices: np.ndarray
    original_labels: np.ndarray
    noisy_labels: np.ndarray
    num_instances: int

    def __post_init__(self):
        if not (len(self.indices) == len(self.original_labels)
                == len(self.noisy_labels)):
            raise ValueError("mask arrays must align")
        if np.any(self.original_labels == self.noisy_labels):
            raise ValueError("a flipped label must differ from the original")

    def __len__(self) -> int:
        return len(self.indices)

    def flags(self) -> np.ndarray:
        out = np.zeros(self.num_instances, dtype=bool)
        out[self.indices] = True
        return out

    def save_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(FLIP_CSV_HEADER)
            for i, o, v in zip(self.indices, self.original_labels, self.noisy_labels):
                writer.writerow([int(i), int(o), int(v)])

    @classmethod
    def load_csv(cls, path, num_instances: int) -> "FlipMask":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != FLIP_CSV_HEADER:
                raise ValueError(f"unexpected flip file header: {header!r}")
            rows = [(int(r[0]), int(r[1]), int(r[2])) for r in reader]
        idx = np.array([r[0] for r in rows], dtype=np.int64)
        orig = np.array([r[1] for r in rows], dtype=np.int64)
        noisy = np.array([r[2] for r in rows], dtype=np.int64)
        return cls(idx, orig, noisy, num_instances)


def inject_noise(dataset, spec: NoiseSpec):
    """Corrupt exactly floor(rate*N) seeded-drawn labels.

    uniform_flip draws the new label uniformly from the other classes, so
    every selected instance changes. class_conditional resamples from the
    confusion row of the old class; draws that land on the old label leave
    the instance unchanged and out of the mask. Flips are applied in
    ascending instance order for determinism. Returns the corrupted dataset
    (original labels preserved as its hidden true labels) and the mask.
    """
    if dataset.num_classes < 2:
        raise ValueError("need at least 2 classes to flip labels")
    n = len(dataset)
    count = math.floor(spec.rate * n)
    rng = np.random.default_rng(spec.seed)
    labels = dataset.labels.copy()
    if count == 0:
        if spec.rate > 0.0:
            warnings.warn("noise rate too small to flip any instance")
        mask = FlipMask(np.empty(0, np.int64), np.empty(0, np.int64),
                        np.empty(0, np.int64), n)
        return dataset.with_labels(labels), mask
    chosen = np.sort(rng.choice(n, size=count, replace=False))
    originals = labels[chosen].copy()
    if spec.scheme == "uniform_flip":
        draws = rng.integers(0, dataset.num_classes - 1, size=count)
        new = draws + (draws >= originals)
    else:
        new = np.empty(count, dtype=np.int64)
        for j, old in enumerate(originals):
            new[j] = rng.choice(dataset.num_classes, p=spec.confusion[old])
    labels[chosen] = new
    changed = new != originals
    mask = FlipMask(chosen[changed], originals[changed], new[changed], n)
    return dataset.with_labels(labels), mask


class NoisyCleanSplit(NamedTuple):
    """Paired index/label views of the instances whose relabels disagree."""

    indices: np.ndarray
    noisy_labels: np.ndarray
    clean_labels: np.ndarray


def split_noisy_clean(original_labels, relabels) -> NoisyCleanSplit:
    """Instances whose relabel disagrees with the original label, paired:
    the noisy side keeps the original labels, the clean side the relabels."""
    orig = np.asarray(original_labels, dtype=np.int64)
    fixed = np.asarray(relabels, dtype=np.int64)
    if orig.shape != fixed.shape:
        raise ValueError("label sequences must have equal length")
    idx = np.flatnonzero(orig != fixed)
    return NoisyCleanSplit(idx, orig[idx], fixed[idx])


def _feature_keys(dataset) -> set:
    rows = np.ascontiguousarray(dataset.features)
    return {rows[i].tobytes() for i in range(len(dataset))}


def noise_overfit_eval(train_set, noisy_set, clean_set, gammas, config,
                       *, eval_metric=None, metric_name: str = "accuracy"):
    """The noise-overfit protocol: for each agreement weight, train on the
    union of the training set and the noisy set, score the clean set at
    every epoch, and return (gamma, epoch, value) rows.

    The first model's curve is reported, so the gamma grid is comparable
    point for point.
    """
    if len(noisy_set) != len(clean_set):
        raise ValueError("noisy and clean sets must pair up")
    if _feature_keys(train_set) & _feature_keys(noisy_set):
        raise ValueError("training set and noisy set overlap")
    metric = eval_metric if eval_metric is not None else trainer._default_metric
    union = ds.concat_datasets(train_set, noisy_set)
    rows = []
    for gamma in gammas:
        run_cfg = replace(config, gamma=float(gamma), selection_policy="first")
        result = trainer.train(
            union, None, run_cfg,
            extra_eval=(("clean", clean_set, metric_name, metric),))
        for model, epoch, split, metric_label, value in result.epoch_rows:
            if model == "selected" and split == "clean":
                rows.append((float(gamma), int(epoch), float(value)))
    return rows


@dataclass(frozen=True)
class ForgettingStats:
    """Per-instance training-dynamics summary over an epoch-by-instance
    correctness matrix: the first epoch predicted correctly (-1 if never),
    the number of correct-to-incorrect transitions, and a never-learned flag."""

    first_learned: np.ndarray
    forgetting_count: np.ndarray
    never_learned: np.ndarray


def forgetting_stats(trajectories) -> ForgettingStats:
    traj = np.asarray(trajectories, dtype=bool)
    if traj.ndim != 2 or traj.shape[0] < 1:
        raise ValueError("trajectories must be a non-empty (epochs, instances) matrix")
    learned = traj.any(axis=0)
    first = np.where(learned, np.argmax(traj, axis=0), -1).astype(np.int64)
    if traj.shape[0] >= 2:
        forgets = np.sum(traj[:-1] & ~traj[1:], axis=0).astype(np.int64)
    else:
        forgets = np.zeros(traj.shape[1], dtype=np.int64)
    return ForgettingStats(first, forgets, ~learned)


def first_learned_means(stats: ForgettingStats, flagged, horizon: int):
    """Mean first-learned epoch for flagged vs. unflagged instances;
    never-learned instances count as ``horizon`` (censoring at the end of
    training). Returns (flagged_mean, unflagged_mean)."""
    flags = np.asarray(flagged, dtype=bool)
    if flags.shape != stats.first_learned.shape:
        raise ValueError("flag vector must align with the stats")
    censored = np.where(stats.never_learned, horizon, stats.first_learned)
    censored = censored.astype(np.float64)
    flagged_mean = float(np.mean(censored[flags])) if flags.any() else math.nan
    rest = ~flags
    unflagged_mean = float(np.mean(censored[rest])) if rest.any() else math.nan
    return flagged_mean, unflagged_mean


@dataclass(frozen=True)
class SuspectRow:
    """One instance in the suspect-label report."""

    instance_id: int
    label: int
    prediction: int
    flagged: bool
    agreement_kl: float
    sup_loss: float


def disagreement_report(ensemble, dataset, config) -> list[SuspectRow]:
    """Rank instances by how strongly the trained models dispute the given
    label: rows are flagged when the soft target's argmax differs from the
    label, and sorted by mean supervision loss, largest first."""
    X = dataset.features
    y = dataset.labels
    logits = np.stack([mdl.forward(m, X)[0] for m in ensemble.models])
    probs = softmax(logits)
    picked = np.maximum(probs[:, np.arange(len(y)), y], PROB_FLOOR)
    inst_losses = -np.log(picked)
    q = trainer.aggregate_targets(probs, logits, inst_losses, config.aggregate_mode)
    eps = config.kl_eps
    per_kl = np.mean(
        np.sum(q[None, :, :] * np.log((q[None, :, :] + eps) / (probs + eps)), axis=2),
        axis=0)
    sup = np.mean(inst_losses, axis=0)
    preds = np.argmax(q, axis=1)
    rows = [SuspectRow(int(dataset.ids[i]), int(y[i]), int(preds[i]),
                       bool(preds[i] != y[i]), float(per_kl[i]), float(sup[i]))
            for i in range(len(y))]
    order = np.argsort(-sup, kind="stable")
    return [rows[i] for i in order]


def save_suspect_csv(rows: list[SuspectRow], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SUSPECT_CSV_HEADER)
        for r in rows:
            writer.writerow([r.instance_id, r.label, r.prediction,
                             int(r.flagged), repr(r.agreement_kl), repr(r.sup_loss)])


def auroc(scores, positives) -> float:
    """Area under the ROC curve by rank statistics, ties averaged to the
    midpoint rank. Higher score must mean more likely positive."""
    s = np.asarray(scores, dtype=np.float64)
    pos = np.asarray(positives, dtype=bool)
    if s.shape != pos.shape or s.ndim != 1:
        raise ValueError("scores and positives must be aligned vectors")
    n_pos = int(pos.sum())
    n_neg = len(pos) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUROC needs at least one positive and one negative")
    _, inverse, counts = np.unique(s, return_inverse=True, return_counts=True)
    cum = np.cumsum(counts)
    avg_rank = cum - (counts - 1) / 2.0
    ranks = avg_rank[inverse]
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))
