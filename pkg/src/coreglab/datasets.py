"""Dataset containers, file formats, and synthetic task generators.

File formats:
- CoNLL column files: blank-line-separated sentences, one token per line,
  first column the token, last column the BIO tag symbol.
- Relation records: one JSON object per line with tokens, inclusive
  subject/object spans plus entity types, and a relation label name.
- Feature records: one JSON object per line with a dense feature vector,
  an integer label, and optionally the hidden true label; used by the
  synthetic classification task.
- Schema files: JSON naming the label vocabulary (for relation data also
  the negative label and the entity types; for tagging the entity types).
"""

import json
from dataclasses import dataclass, field

import numpy as np

from . import metrics
from . import models as mdl


class DataError(Exception):
    """A dataset file is missing, malformed, or inconsistent."""


@dataclass
class LabeledDataset:
    """Dense feature matrix with integer labels.

    true_labels, when present, carry the uncorrupted labels for noise
    experiments; groups map each row to a sentence for span-level scoring
    of tagging tasks.
    """

    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    ids: np.ndarray | None = None
    true_labels: np.ndarray | None = None
    groups: np.ndarray | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise ValueError("features must be a 2-D matrix")
        n = self.features.shape[0]
        if self.labels.shape != (n,):
            raise ValueError("labels must align with feature rows")
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("label out of range")
        if self.ids is None:
            self.ids = np.arange(n, dtype=np.int64)
        else:
            self.ids = np.asarray(self.ids, dtype=np.int64)
            if self.ids.shape != (n,):
                raise ValueError("ids must align with feature rows")
        for name in ("true_labels", "groups"):
            value = getattr(self, name)
            if value is not None:
                value = np.asarray(value, dtype=np.int64)
                if value.shape != (n,):
                    raise ValueError(f"{name} must align with feature rows")
                setattr(self, name, value)

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def num_features(self) -> int:
        return self.features.shape[1]

    def subset(self, indices) -> "LabeledDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(
            self.features[idx], self.labels[idx], self.num_classes,
            ids=self.ids[idx],
            true_labels=None if self.true_labels is None else self.true_labels[idx],
            groups=None if self.groups is None else self.groups[idx])

    def with_labels(self, labels, *, keep_true: bool = True) -> "LabeledDataset":
        """Copy with replaced labels; the current labels become the hidden
        true labels unless some are already recorded."""
        if keep_true:
            true = self.true_labels if self.true_labels is not None else self.labels.copy()
        else:
            true = self.true_labels
        return LabeledDataset(self.features.copy(), labels, self.num_classes,
                              ids=self.ids.copy(), true_labels=true,
                              groups=None if self.groups is None else self.groups.copy())


def concat_datasets(first: LabeledDataset, second: LabeledDataset) -> LabeledDataset:
    """Row-wise concatenation; ids are renumbered to stay unique."""
    if first.num_classes != second.num_classes:
        raise ValueError("datasets disagree on the class count")
    if first.num_features != second.num_features:
        raise ValueError("datasets disagree on the feature width")
    both_true = first.true_labels is not None and second.true_labels is not None
    return LabeledDataset(
        np.vstack([first.features, second.features]),
        np.concatenate([first.labels, second.labels]),
        first.num_classes,
        true_labels=(np.concatenate([first.true_labels, second.true_labels])
                     if both_true else None))


@dataclass(frozen=True)
class RelationSchema:
    """Relation label vocabulary with its designated negative label, plus
    the entity types legal in subject/object positions."""

    relations: tuple[str, ...]
    negative: str
    entity_types: tuple[str, ...]
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if len(set(self.relations)) != len(self.relations):
            raise ValueError("duplicate relation labels")
        if self.negative not in self.relations:
            raise ValueError("negative label must be one of the relations")
        object.__setattr__(self, "_index",
                           {name: i for i, name in enumerate(self.relations)})

    def label_index(self, name: str) -> int:
        if name not in self._index:
            raise ValueError(f"unknown relation label {name!r}")
        return self._index[name]

    @property
    def negative_index(self) -> int:
        return self._index[self.negative]

    @classmethod
    def load(cls, path) -> "RelationSchema":
        with open(path) as fh:
            raw = json.load(fh)
        try:
            return cls(tuple(raw["relations"]), raw["negative"],
                       tuple(raw["entity_types"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"{path}: bad relation schema: {exc}") from exc

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump({"relations": list(self.relations), "negative": self.negative,
                       "entity_types": list(self.entity_types)}, fh, indent=2,
                      sort_keys=True)
            fh.write("\n")


def save_vocab(vocab: mdl.Vocab, path) -> None:
    with open(path, "w") as fh:
        json.dump({"tokens": vocab.tokens()}, fh, indent=2)
        fh.write("\n")


def load_vocab(path) -> mdl.Vocab:
    with open(path) as fh:
        raw = json.load(fh)
    try:
        return mdl.Vocab(list(raw["tokens"]))
    except (KeyError, TypeError) as exc:
        raise DataError(f"{path}: bad vocabulary file: {exc}") from exc


def load_tag_scheme(path) -> metrics.TagScheme:
    with open(path) as fh:
        raw = json.load(fh)
    try:
        return metrics.TagScheme(list(raw["entity_types"]))
    except (KeyError, TypeError) as exc:
        raise DataError(f"{path}: bad tagging schema: {exc}") from exc


def save_tag_scheme(scheme: metrics.TagScheme, path) -> None:
    with open(path, "w") as fh:
        json.dump({"entity_types": scheme.entity_types}, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_conll(path, scheme: metrics.TagScheme) -> list[mdl.TaggingInstance]:
    """Parse a CoNLL column file into tagging instances, preserving order."""
    instances: list[mdl.TaggingInstance] = []
    tokens: list[str] = []
    tags: list[int] = []

    def flush():
        if tokens:
            instances.append(mdl.TaggingInstance(list(tokens), list(tags),
                                                 uid=len(instances)))
            tokens.clear()
            tags.clear()

    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line.strip():
                flush()
                continue
            cols = line.split()
            if len(cols) < 2:
                raise DataError(f"{path}:{lineno}: expected token and tag columns")
            try:
                tag = scheme.index(cols[-1])
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
            tokens.append(cols[0])
            tags.append(tag)
    flush()
    return instances


def write_conll(path, instances, scheme: metrics.TagScheme) -> None:
    with open(path, "w") as fh:
        for s, inst in enumerate(instances):
            if s:
                fh.write("\n")
            for token, tag in zip(inst.tokens, inst.tags):
                fh.write(f"{token} {scheme.symbol(tag)}\n")


_RELATION_KEYS = ("tokens", "subj", "subj_type", "obj", "obj_type", "label")


def read_relation_jsonl(path, schema: RelationSchema) -> list[mdl.SentenceInstance]:
    """Parse line-delimited relation records; every error names the line."""
    instances = []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: invalid record: {exc}") from exc
            missing = [k for k in _RELATION_KEYS if k not in rec]
            if missing:
                raise DataError(f"{path}:{lineno}: missing fields {missing}")
            tokens = list(rec["tokens"])
            try:
                label = schema.label_index(rec["label"])
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
            for role in ("subj", "obj"):
                span = rec[role]
                if (len(span) != 2 or not 0 <= span[0] <= span[1]
                        or span[1] >= len(tokens)):
                    raise DataError(f"{path}:{lineno}: {role} span out of range")
                if rec[f"{role}_type"] not in schema.entity_types:
                    raise DataError(
                        f"{path}:{lineno}: unknown entity type {rec[f'{role}_type']!r}")
            instances.append(mdl.SentenceInstance(
                tokens, tuple(rec["subj"]), rec["subj_type"],
                tuple(rec["obj"]), rec["obj_type"], label,
                uid=int(rec.get("id", len(instances)))))
    return instances


def write_relation_jsonl(path, instances, schema: RelationSchema) -> None:
    with open(path, "w") as fh:
        for inst in instances:
            rec = {"id": int(inst.uid), "tokens": list(inst.tokens),
                   "subj": list(inst.subj_span), "subj_type": inst.subj_type,
                   "obj": list(inst.obj_span), "obj_type": inst.obj_type,
                   "label": schema.relations[inst.label]}
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_feature_jsonl(path, num_classes: int | None = None) -> LabeledDataset:
    """Parse line-delimited dense feature records into a dataset."""
    feats, labels, ids, trues = [], [], [], []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                feats.append([float(v) for v in rec["features"]])
                labels.append(int(rec["label"]))
                ids.append(int(rec.get("id", len(ids))))
                trues.append(rec.get("true_label"))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DataError(f"{path}:{lineno}: invalid record: {exc}") from exc
            if len(feats[-1]) != len(feats[0]):
                raise DataError(f"{path}:{lineno}: inconsistent feature width")
    if not feats:
        return LabeledDataset(np.empty((0, 0)), np.empty(0, np.int64),
                              num_classes or 1)
    have_true = all(t is not None for t in trues)
    top = max(labels + [t for t in trues if t is not None], default=-1)
    if num_classes is None:
        num_classes = top + 1
    elif top >= num_classes:
        raise DataError(f"{path}: label {top} outside {num_classes} classes")
    return LabeledDataset(np.array(feats), np.array(labels), num_classes,
                          ids=np.array(ids),
                          true_labels=np.array(trues) if have_true else None)


def write_feature_jsonl(path, dataset: LabeledDataset) -> None:
    with open(path, "w") as fh:
        for i in range(len(dataset)):
            rec = {"id": int(dataset.ids[i]),
                   "features": [float(v) for v in dataset.features[i]],
                   "label": int(dataset.labels[i])}
            if dataset.true_labels is not None:
                rec["true_label"] = int(dataset.true_labels[i])
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def build_relation_dataset(instances, schema: RelationSchema,
                           vocab: mdl.Vocab | None = None):
    """Mask entities, featurize sentences, and stack them into a dataset.
    Builds the vocabulary from the masked corpus when none is given."""
    masked = [mdl.entity_mask(inst) for inst in instances]
    if vocab is None:
        vocab = mdl.Vocab(sorted({tok for sent in masked for tok in sent}))
    features = np.stack([mdl.featurize_sentence(sent, vocab) for sent in masked])
    labels = np.array([inst.label for inst in instances], dtype=np.int64)
    ids = np.array([inst.uid for inst in instances], dtype=np.int64)
    return LabeledDataset(features, labels, len(schema.relations), ids=ids), vocab


def build_tagging_dataset(instances, scheme: metrics.TagScheme,
                          vocab: mdl.Vocab | None = None, window: int = 1):
    """One row per token: windowed one-hot features with the BIO tag index
    as the label; groups record the source sentence."""
    if vocab is None:
        vocab = mdl.Vocab(sorted({tok for inst in instances for tok in inst.tokens}))
    rows, labels, groups = [], [], []
    for s, inst in enumerate(instances):
        for pos in range(len(inst.tokens)):
            rows.append(mdl.featurize_token_window(inst, pos, window, vocab))
            labels.append(inst.tags[pos])
            groups.append(s)
    if not rows:
        width = (2 * window + 1) * len(vocab)
        empty = np.empty((0, width))
        return LabeledDataset(empty, np.empty(0, np.int64), len(scheme)), vocab
    return LabeledDataset(np.stack(rows), np.array(labels, dtype=np.int64),
                          len(scheme), groups=np.array(groups)), vocab


def make_metric(task: str, *, scheme: metrics.TagScheme | None = None,
                schema: RelationSchema | None = None):
    """(metric name, scorer) for a task; scorers map (dataset, preds) to a
    float so training can evaluate any split uniformly."""
    if task == "synthetic":
        return "accuracy", lambda dataset, preds: metrics.accuracy(dataset.labels, preds)
    if task == "relation":
        if schema is None:
            raise ValueError("relation metric needs the schema")
        neg = schema.negative_index

        def rel_fn(dataset, preds):
            return metrics.relation_micro_f1(dataset.labels, preds, neg).f1

        return "f1", rel_fn
    if task == "tagging":
        if scheme is None:
            raise ValueError("tagging metric needs the tag scheme")

        def tag_fn(dataset, preds):
            if dataset.groups is None:
                raise ValueError("tagging dataset lacks sentence groups")
            golds, predicted = [], []
            for g in np.unique(dataset.groups):
                rows = np.flatnonzero(dataset.groups == g)
                golds.append(metrics.bio_decode(scheme.symbols(dataset.labels[rows])))
                predicted.append(metrics.bio_decode(
                    scheme.symbols(np.asarray(preds)[rows])))
            return metrics.span_f1(golds, predicted).f1

        return "f1", tag_fn
    raise ValueError(f"unknown task {task!r}")


def gen_gaussian_mixture(num_train: int = 2000, num_test: int = 500,
                         num_classes: int = 4, num_features: int = 2,
                         seed: int = 0, class_sep: float = 2.5,
                         scale: float = 1.0):
    """Synthetic classification task: class means spaced on a circle of
    radius class_sep, unit-scaled Gaussian clouds, balanced labels.
    Returns (train, test) with clean labels recorded as true labels."""
    if num_classes < 2 or num_features < 2:
        raise ValueError("need at least 2 classes and 2 features")
    rng = np.random.default_rng(seed)
    angles = 2.0 * np.pi * np.arange(num_classes) / num_classes
    means = np.zeros((num_classes, num_features))
    means[:, 0] = class_sep * np.cos(angles)
    means[:, 1] = class_sep * np.sin(angles)

    def draw(n):
        labels = (np.arange(n) % num_classes)[rng.permutation(n)]
        feats = means[labels] + scale * rng.standard_normal((n, num_features))
        return LabeledDataset(feats, labels, num_classes,
                              true_labels=labels.copy())

    return draw(num_train), draw(num_test)


TAGGING_ENTITY_TYPES = ("PER", "ORG", "LOC")


def gen_tagging_corpus(num_sentences: int = 200, seed: int = 0):
    """Synthetic tagging task: templated sentences over a 50-token
    vocabulary (32 filler words plus 6 names for each of 3 entity types).
    Returns (instances, scheme)."""
    scheme = metrics.TagScheme(TAGGING_ENTITY_TYPES)
    fillers = [f"w{i:02d}" for i in range(32)]
    names = {etype: [f"{etype.lower()}{i}" for i in range(6)]
             for etype in TAGGING_ENTITY_TYPES}
    rng = np.random.default_rng(seed)
    instances = []
    for s in range(num_sentences):
        tokens: list[str] = []
        tags: list[int] = []

        def add_fillers(count):
            for tok in rng.choice(fillers, size=count):
                tokens.append(str(tok))
                tags.append(scheme.index("O"))

        add_fillers(int(rng.integers(2, 5)))
        for _ in range(int(rng.integers(1, 3))):
            etype = TAGGING_ENTITY_TYPES[int(rng.integers(len(TAGGING_ENTITY_TYPES)))]
            span_len = int(rng.integers(1, 3))
            mention = rng.choice(names[etype], size=span_len, replace=False)
            tokens.append(str(mention[0]))
            tags.append(scheme.index(f"B-{etype}"))
            for tok in mention[1:]:
                tokens.append(str(tok))
                tags.append(scheme.index(f"I-{etype}"))
            add_fillers(int(rng.integers(1, 4)))
        instances.append(mdl.TaggingInstance(tokens, tags, uid=s))
    return instances, scheme
