"""Co-regularization trainer: several identically structured models trained
jointly on an averaged supervision loss, then additionally pulled toward an
aggregated soft target by a KL agreement loss after a warm-up phase.

The same engine also drives the single-model and pruning/relabeling
baselines through the ``weights`` and ``batch_hook`` parameters, so every
method shares one data pipeline and seeding scheme.
"""

import math
from dataclasses import dataclass, field, replace
from fractions import Fraction

import numpy as np

from . import models as mdl
from . import rng as rngmod
from .numeric import PROB_FLOOR, AdamState, LrSchedule, adam_step, lr_at, softmax

AGGREGATE_MODES = ("avg_prob", "avg_logit", "min_prob")
SELECTION_POLICIES = ("first", "best_dev")


class TrainingDiverged(RuntimeError):
    """Raised when a step produces a non-finite loss."""


@dataclass
class TrainConfig:
    """All training hyperparameters.

    The co-regularization method requires num_models >= 2; the engine itself
    also accepts num_models == 1, which is how the plain baseline runs the
    identical pipeline.
    """

    num_models: int = 2
    total_steps: int = 0
    warmup_pct: float = 30.0
    gamma: float = 1.0
    kl_eps: float = 1e-12
    batch_size: int = 64
    base_lr: float = 0.01
    aggregate_mode: str = "avg_prob"
    soft_target_gradient: bool = False
    selection_policy: str = "first"
    master_seed: int = 0
    hidden_sizes: tuple[int, ...] = (32,)
    dropout: float = 0.1

    def validate(self, min_models: int = 2) -> None:
        if self.num_models < min_models:
            raise ValueError(f"num_models must be >= {min_models}")
        if not 0.0 <= self.warmup_pct <= 100.0:
            raise ValueError("warmup_pct must be in [0, 100]")
        if self.gamma < 0.0:
            raise ValueError("gamma must be >= 0")
        if self.kl_eps <= 0.0:
            raise ValueError("kl_eps must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.total_steps < 0:
            raise ValueError("total_steps must be >= 0")
        if self.aggregate_mode not in AGGREGATE_MODES:
            raise ValueError(f"unknown aggregate mode {self.aggregate_mode!r}")
        if self.selection_policy not in SELECTION_POLICIES:
            raise ValueError(f"unknown selection policy {self.selection_policy!r}")


def warmup_steps(config: TrainConfig) -> int:
    """Number of warm-up steps: ceil(warmup_pct/100 * total_steps).

    Computed in exact rational arithmetic so grid values like 30% of 10 steps
    never round up through float noise.
    """
    return math.ceil(Fraction(config.warmup_pct) * config.total_steps / 100)


@dataclass
class ModelEnsemble:
    """The jointly trained model copies with their optimizer and RNG state."""

    models: list[mdl.MlpModel]
    opt_states: list[AdamState]
    dropout_rngs: list[np.random.Generator]

    @property
    def num_models(self) -> int:
        return len(self.models)


def init_ensemble(config: TrainConfig, input_dim: int, num_classes: int) -> ModelEnsemble:
    """Build num_models copies of the architecture with distinct init seeds
    and private dropout streams, all derived from the master seed."""
    layer_sizes = (input_dim, *config.hidden_sizes, num_classes)
    seeds = [rngmod.substream_seed(config.master_seed, f"init.{k}")
             for k in range(config.num_models)]
    if len(set(seeds)) != len(seeds):
        raise RuntimeError("derived init seeds collide")
    models = [mdl.init_model(layer_sizes, config.dropout, seed) for seed in seeds]
    states = [AdamState.fresh(mdl.param_count(layer_sizes))
              for _ in range(config.num_models)]
    rngs = [rngmod.substream(config.master_seed, f"dropout.{k}")
            for k in range(config.num_models)]
    return ModelEnsemble(models, states, rngs)


@dataclass(frozen=True)
class LossReport:
    """Losses observed at one training step.

    joint_loss is always task_loss + gamma * agreement_loss; during warm-up
    the agreement term is recorded but does not drive the update.
    """

    step: int
    per_model_sup: tuple[float, ...]
    task_loss: float
    agreement_loss: float
    joint_loss: float
    warmup: bool


def _per_instance_nll(probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    picked = np.maximum(probs[np.arange(len(labels)), labels], PROB_FLOOR)
    return -np.log(picked)


def aggregate_targets(probs: np.ndarray, logits: np.ndarray,
                      inst_losses: np.ndarray, mode: str) -> np.ndarray:
    """Batched soft target: probs/logits are (models, batch, classes) and
    inst_losses (models, batch); returns one distribution per instance."""
    if mode == "avg_prob":
        return np.mean(probs, axis=0)
    if mode == "avg_logit":
        return softmax(np.mean(logits, axis=0))
    if mode == "min_prob":
        worst = np.argmax(inst_losses, axis=0)  # ties -> lowest model index
        return probs[worst, np.arange(probs.shape[1])]
    raise ValueError(f"unknown aggregate mode {mode!r}")


def aggregate_soft_target(preds, logits, sup_losses, mode: str) -> np.ndarray:
    """Single-instance soft target from the M models' predictions."""
    probs = np.asarray(preds, dtype=np.float64)[:, None, :]
    logit_arr = np.asarray(logits, dtype=np.float64)[:, None, :]
    losses = np.asarray(sup_losses, dtype=np.float64)[:, None]
    return aggregate_targets(probs, logit_arr, losses, mode)[0]


def agreement_loss(q: np.ndarray, preds: np.ndarray, eps: float) -> float:
    """Mean smoothed KL from the soft target to each model's prediction,
    averaged over models and instances."""
    qa = np.asarray(q, dtype=np.float64)
    pa = np.asarray(preds, dtype=np.float64)
    if qa.ndim == 1:
        qa = qa[None, :]
    if pa.ndim == 2:
        pa = pa[:, None, :]
    if pa.ndim != 3 or qa.shape != pa.shape[1:]:
        raise ValueError("prediction shapes do not match the soft target")
    num_models, batch, _ = pa.shape
    terms = qa[None, :, :] * np.log((qa[None, :, :] + eps) / (pa + eps))
    return float(np.sum(terms) / (num_models * batch))


def _softmax_vjp(probs: np.ndarray, dprobs: np.ndarray) -> np.ndarray:
    """Row-wise gradient through softmax: from dL/dp to dL/dlogits."""
    inner = np.sum(dprobs * probs, axis=1, keepdims=True)
    return probs * (dprobs - inner)


def _agreement_dlogits(probs: np.ndarray, logits: np.ndarray, q: np.ndarray,
                       inst_losses: np.ndarray, config: TrainConfig) -> np.ndarray:
    """Gradient of the agreement loss w.r.t. each model's logits,
    shape (models, batch, classes).

    With soft_target_gradient off (default) the target q is treated as a
    constant of the step; otherwise the gradient also flows through the
    aggregation that produced q.
    """
    num_models, batch, _ = probs.shape
    eps = config.kl_eps
    scale = 1.0 / (num_models * batch)
    # Direct path: d/dp of q*log((q+eps)/(p+eps)) summed over models.
    dprobs = -scale * q[None, :, :] / (probs + eps)
    if config.soft_target_gradient:
        dq = scale * np.sum(np.log((q[None, :, :] + eps) / (probs + eps)), axis=0)
        dq += num_models * scale * q / (q + eps)
        if config.aggregate_mode == "avg_prob":
            dprobs = dprobs + dq[None, :, :] / num_models
        elif config.aggregate_mode == "min_prob":
            worst = np.argmax(inst_losses, axis=0)
            add = np.zeros_like(dprobs)
            add[worst, np.arange(batch)] = dq
            dprobs = dprobs + add
        # avg_logit: q's path bypasses the per-model probabilities and is
        # added in logit space below.
    dlogits = np.stack([_softmax_vjp(probs[k], dprobs[k])
                        for k in range(num_models)])
    if config.soft_target_gradient and config.aggregate_mode == "avg_logit":
        dq = scale * np.sum(np.log((q[None, :, :] + eps) / (probs + eps)), axis=0)
        dq += num_models * scale * q / (q + eps)
        dmean_logits = _softmax_vjp(q, dq)
        dlogits = dlogits + dmean_logits[None, :, :] / num_models
    return dlogits


def compute_step_gradients(features: np.ndarray, labels: np.ndarray,
                           ensemble: ModelEnsemble, t: int, config: TrainConfig,
                           *, weights: np.ndarray | None = None,
                           batch_hook=None):
    """Losses and per-model flat parameter gradients for one batch, without
    touching optimizer state.

    The gradients are those of the phase's objective: the averaged
    supervision loss during warm-up, the joint loss afterwards (with the
    soft target treated as a constant unless soft_target_gradient is on).
    Returns (LossReport, list of gradient vectors); the gradient list is
    empty when a hook prunes the whole batch.
    """
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if X.shape[0] == 0:
        raise ValueError("empty batch")
    n_rows = X.shape[0]
    num_models = ensemble.num_models
    w = np.ones(n_rows) if weights is None else np.asarray(weights, dtype=np.float64)

    outs, caches = [], []
    for k, model in enumerate(ensemble.models):
        out, cache = mdl.forward(model, X, train_mode=True, rng=ensemble.dropout_rngs[k])
        outs.append(out)
        caches.append(cache)
    logits = np.stack(outs)
    if not np.all(np.isfinite(logits)):
        raise TrainingDiverged(f"non-finite logits at step {t}")
    probs = softmax(logits)

    inst_losses = np.stack([_per_instance_nll(probs[k], y) for k in range(num_models)])

    keep = np.arange(n_rows)
    if batch_hook is not None:
        keep, y = batch_hook(t, y, np.mean(inst_losses, axis=0), np.mean(probs, axis=0))
        keep = np.asarray(keep, dtype=np.int64)
        y = np.asarray(y, dtype=np.int64)
        inst_losses = np.stack(
            [_per_instance_nll(probs[k], y) for k in range(num_models)])

    warmup = t < warmup_steps(config)
    n_kept = len(keep)
    if n_kept == 0:
        # Nothing left to learn from this batch.
        return LossReport(t, (0.0,) * num_models, 0.0, 0.0, 0.0, warmup), []

    kept_w = w[keep]
    kept_probs = probs[:, keep, :]
    kept_logits = logits[:, keep, :]
    kept_losses = inst_losses[:, keep]
    kept_y = y[keep]

    per_model_sup = np.array(
        [float(np.sum(kept_w * kept_losses[k]) / n_kept) for k in range(num_models)])
    task_loss = float(np.mean(per_model_sup))

    q = aggregate_targets(kept_probs, kept_logits, kept_losses, config.aggregate_mode)
    agg_loss = agreement_loss(q, kept_probs, config.kl_eps)

    joint_loss = task_loss + config.gamma * agg_loss
    if not (math.isfinite(task_loss) and math.isfinite(agg_loss)):
        raise TrainingDiverged(
            f"non-finite loss at step {t}: task={task_loss} agreement={agg_loss}")

    # Supervision gradient w.r.t. logits; rows where the probability floor is
    # active contribute no gradient (the clamped loss is locally constant).
    onehot = np.zeros_like(kept_probs[0])
    onehot[np.arange(n_kept), kept_y] = 1.0
    active = (kept_probs[:, np.arange(n_kept), kept_y] > PROB_FLOOR).astype(np.float64)
    sup_dlogits = (kept_probs - onehot[None, :, :])
    sup_dlogits *= (kept_w * active)[:, :, None] / n_kept

    if warmup or config.gamma == 0.0:
        agg_dlogits = None
    else:
        agg_dlogits = _agreement_dlogits(kept_probs, kept_logits, q,
                                         kept_losses, config)

    grads = []
    for k, model in enumerate(ensemble.models):
        d_kept = sup_dlogits[k] / num_models
        if agg_dlogits is not None:
            d_kept = d_kept + config.gamma * agg_dlogits[k]
        dlogits = np.zeros((n_rows, kept_probs.shape[2]))
        dlogits[keep] = d_kept
        grads.append(mdl.backward(model, caches[k], dlogits))

    report = LossReport(t, tuple(per_model_sup), task_loss, agg_loss, joint_loss,
                        warmup)
    return report, grads


def train_step(features: np.ndarray, labels: np.ndarray, ensemble: ModelEnsemble,
               t: int, config: TrainConfig, *, weights: np.ndarray | None = None,
               batch_hook=None) -> LossReport:
    """One training step on one batch, updating every model in place.

    During warm-up (t < ceil(warmup_pct/100 * total_steps)) each model is
    updated w.r.t. the averaged supervision loss alone; afterwards the
    agreement term, weighted by gamma, joins the update. The agreement loss
    is computed and reported in both phases.
    """
    report, grads = compute_step_gradients(features, labels, ensemble, t, config,
                                           weights=weights, batch_hook=batch_hook)
    if not grads:
        return report
    lr = lr_at(LrSchedule(config.base_lr, config.total_steps), t)
    for k, model in enumerate(ensemble.models):
        new_params, ensemble.opt_states[k] = adam_step(
            mdl.params_flat(model), grads[k], ensemble.opt_states[k], lr)
        mdl.set_params_flat(model, new_params)
    return report


@dataclass
class Checkpoint:
    epoch: int
    score: float
    params: np.ndarray


@dataclass
class TrainResult:
    ensemble: ModelEnsemble
    config: TrainConfig
    reports: list[LossReport] = field(default_factory=list)
    # (model, epoch, split, metric, value); model is a model index as a
    # string, or "selected" for the selection policy's pick at that epoch.
    epoch_rows: list[tuple] = field(default_factory=list)
    dev_scores: list[list[float]] = field(default_factory=list)
    best: list[Checkpoint] | None = None
    trajectories: np.ndarray | None = None  # (epochs, train rows) bool
    num_epochs: int = 0

    def best_dev_per_model(self) -> list[float] | None:
        if self.best is None:
            return None
        return [c.score for c in self.best]

    def model_with_best_params(self, index: int) -> mdl.MlpModel:
        """Copy of model ``index`` restored to its best dev checkpoint,
        or its final parameters when no dev set was used."""
        source = self.ensemble.models[index]
        clone = mdl.init_model(source.layer_sizes, source.dropout, source.seed)
        params = (self.best[index].params if self.best is not None
                  else mdl.params_flat(source))
        mdl.set_params_flat(clone, params)
        return clone


def _default_metric(dataset, preds) -> float:
    return float(np.mean(preds == dataset.labels))


def select_index(dev_metrics, policy: str, num_models: int) -> int:
    """Model index under the selection policy; best_dev breaks ties low."""
    if policy == "first":
        return 0
    if policy == "best_dev":
        if dev_metrics is None or len(dev_metrics) != num_models:
            raise ValueError("best_dev selection requires one dev metric per model")
        return int(np.argmax(dev_metrics))
    raise ValueError(f"unknown selection policy {policy!r}")


def select_model(ensemble: ModelEnsemble, dev_metrics, policy: str) -> mdl.MlpModel:
    """The model the policy designates for inference."""
    return ensemble.models[select_index(dev_metrics, policy, ensemble.num_models)]


def train(dataset, dev_set, config: TrainConfig, *, eval_metric=None,
          metric_name: str = "accuracy", extra_eval=(), weights=None,
          batch_hook=None, track_trajectories: bool = False) -> TrainResult:
    """Run the full training loop for total_steps steps.

    Batches are drawn with a seeded per-epoch shuffle from the shared data
    stream, so all model copies see identical batches. At every epoch
    boundary each model is scored on the dev set (when given) and on any
    ``extra_eval`` entries of the form (split, dataset, metric_name, fn);
    the best per-model dev checkpoint is retained.
    """
    config.validate(min_models=1)
    metric = eval_metric if eval_metric is not None else _default_metric
    if config.selection_policy == "best_dev" and (dev_set is None or len(dev_set) == 0):
        raise ValueError("best_dev selection requires a non-empty dev set")
    if weights is not None:
        weights = np.asarray(weights, dtype=np.float64)
        if weights.shape[0] != len(dataset):
            raise ValueError("weights length does not match the dataset")

    ensemble = init_ensemble(config, dataset.num_features, dataset.num_classes)
    result = TrainResult(ensemble, config)
    if dev_set is not None:
        result.best = [Checkpoint(-1, -math.inf, mdl.params_flat(m))
                       for m in ensemble.models]
    if config.total_steps == 0:
        return result

    data_rng = rngmod.substream(config.master_seed, "data_order")
    n = len(dataset)
    traj = [] if track_trajectories else None

    t = 0
    epoch = 0
    while t < config.total_steps:
        order = data_rng.permutation(n)
        for start in range(0, n, config.batch_size):
            if t >= config.total_steps:
                break
            idx = order[start:start + config.batch_size]
            batch_w = None if weights is None else weights[idx]
            report = train_step(dataset.features[idx], dataset.labels[idx],
                                ensemble, t, config, weights=batch_w,
                                batch_hook=batch_hook)
            result.reports.append(report)
            t += 1

        scores = _evaluate_epoch(result, dataset, dev_set, extra_eval, metric,
                                 metric_name, epoch)
        if traj is not None:
            preds = mdl.predict(ensemble.models[0], dataset.features)
            traj.append(preds == dataset.labels)
        if dev_set is not None:
            for k, score in enumerate(scores):
                if score > result.best[k].score:
                    result.best[k] = Checkpoint(
                        epoch, score, mdl.params_flat(ensemble.models[k]))
        epoch += 1

    result.num_epochs = epoch
    if traj is not None:
        result.trajectories = np.array(traj, dtype=bool)
    return result


def _evaluate_epoch(result, dataset, dev_set, extra_eval, metric, metric_name,
                    epoch) -> list[float]:
    """Score every model (and the policy's pick) on dev and extra splits."""
    ensemble = result.ensemble
    config = result.config
    dev_scores = []
    split_values = {}
    splits = []
    if dev_set is not None:
        splits.append(("dev", dev_set, metric_name, metric))
    splits.extend(extra_eval)
    for split, split_set, split_metric, fn in splits:
        values = []
        for k, model in enumerate(ensemble.models):
            preds = mdl.predict(model, split_set.features)
            value = float(fn(split_set, preds))
            values.append(value)
            result.epoch_rows.append((str(k), epoch, split, split_metric, value))
        split_values[split] = (split_metric, values)
        if split == "dev":
            dev_scores = values
    if config.selection_policy == "best_dev" and dev_scores:
        chosen = int(np.argmax(dev_scores))
    else:
        chosen = 0
    for split, (split_metric, values) in split_values.items():
        result.epoch_rows.append(
            ("selected", epoch, split, split_metric, values[chosen]))
    if dev_set is not None:
        result.dev_scores.append(dev_scores)
    return dev_scores


def make_plain_config(config: TrainConfig) -> TrainConfig:
    """The same configuration reduced to one model and no agreement loss."""
    return replace(config, num_models=1, gamma=0.0)
