"""Desk-scale task models: vocab, featurizers, entity masking, and an MLP
with exact manual forward/backward.

The classifier is a plain feed-forward ReLU network over explicit features
(bag of tokens for sentence classification, one-hot windows for token
tagging). It stands in for any larger backbone: the training framework only
needs forward logits and parameter gradients.
"""

from dataclasses import dataclass, field

import numpy as np

from .numeric import dropout_mask

UNK_TOKEN = "<unk>"
PAD_TOKEN = "<pad>"


class Vocab:
    """Dense token -> index map with <unk>/<pad> and any extra specials first."""

    def __init__(self, tokens, extra_specials=()):
        self._index = {}
        for tok in (PAD_TOKEN, UNK_TOKEN, *extra_specials):
            if tok not in self._index:
                self._index[tok] = len(self._index)
        for tok in tokens:
            if tok not in self._index:
                self._index[tok] = len(self._index)

    def __len__(self) -> int:
        return len(self._index)

    def __contains__(self, token: str) -> bool:
        return token in self._index

    def index(self, token: str) -> int:
        return self._index.get(token, self._index[UNK_TOKEN])

    @property
    def pad_index(self) -> int:
        return self._index[PAD_TOKEN]

    @property
    def unk_index(self) -> int:
        return self._index[UNK_TOKEN]

    def tokens(self) -> list[str]:
        return list(self._index)


def subj_mask_token(entity_type: str) -> str:
    return f"[SUBJ-{entity_type}]"


def obj_mask_token(entity_type: str) -> str:
    return f"[OBJ-{entity_type}]"


@dataclass
class SentenceInstance:
    """One relation-classification example: a sentence with subject and
    object entity spans (inclusive indices) and a relation label index."""

    tokens: list[str]
    subj_span: tuple[int, int]
    subj_type: str
    obj_span: tuple[int, int]
    obj_type: str
    label: int
    uid: int = -1


@dataclass
class TaggingInstance:
    """One tagging example: tokens with one tag index per token."""

    tokens: list[str]
    tags: list[int]
    uid: int = -1

    def __post_init__(self):
        if len(self.tokens) != len(self.tags):
            raise ValueError("tokens and tags must have the same length")


def _check_span(span, n_tokens, name):
    start, end = span
    if not (0 <= start <= end < n_tokens):
        raise ValueError(f"{name} span {span} out of range for {n_tokens} tokens")


def entity_mask(instance: SentenceInstance) -> list[str]:
    """Replace the subject span with [SUBJ-TYPE] and the object span with
    [OBJ-TYPE], each collapsed to a single token; other tokens unchanged."""
    n = len(instance.tokens)
    _check_span(instance.subj_span, n, "subject")
    _check_span(instance.obj_span, n, "object")
    s0, s1 = instance.subj_span
    o0, o1 = instance.obj_span
    if s0 <= o1 and o0 <= s1:
        raise ValueError("subject and object spans overlap")
    spans = sorted(
        [(s0, s1, subj_mask_token(instance.subj_type)),
         (o0, o1, obj_mask_token(instance.obj_type))]
    )
    out = []
    cursor = 0
    for start, end, mask in spans:
        out.extend(instance.tokens[cursor:start])
        out.append(mask)
        cursor = end + 1
    out.extend(instance.tokens[cursor:])
    return out


def featurize_sentence(tokens: list[str], vocab: Vocab) -> np.ndarray:
    """Normalized bag-of-tokens vector: counts divided by token count."""
    if len(tokens) == 0:
        raise ValueError("cannot featurize an empty token list")
    vec = np.zeros(len(vocab))
    for tok in tokens:
        vec[vocab.index(tok)] += 1.0
    return vec / len(tokens)


def featurize_token_window(instance: TaggingInstance, position: int, window: int,
                           vocab: Vocab) -> np.ndarray:
    """Concatenated one-hot vectors for tokens in [position-window,
    position+window], with <pad> one-hots outside the sentence."""
    n = len(instance.tokens)
    if not 0 <= position < n:
        raise ValueError(f"position {position} out of range")
    size = len(vocab)
    vec = np.zeros((2 * window + 1) * size)
    for slot, pos in enumerate(range(position - window, position + window + 1)):
        if 0 <= pos < n:
            idx = vocab.index(instance.tokens[pos])
        else:
            idx = vocab.pad_index
        vec[slot * size + idx] = 1.0
    return vec


@dataclass
class MlpModel:
    """Feed-forward ReLU classifier; weights[i] is (fan_in, fan_out)."""

    layer_sizes: tuple[int, ...]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    dropout: float
    seed: int


@dataclass
class ForwardCache:
    model: MlpModel
    inputs: np.ndarray
    layer_inputs: list[np.ndarray] = field(default_factory=list)
    relu_masks: list[np.ndarray] = field(default_factory=list)
    drop_masks: list = field(default_factory=list)


def param_count(layer_sizes) -> int:
    return sum((a + 1) * b for a, b in zip(layer_sizes[:-1], layer_sizes[1:]))


def init_model(layer_sizes, dropout: float, seed: int) -> MlpModel:
    """He-uniform initialized MLP; the same seed reproduces the same weights."""
    sizes = tuple(int(s) for s in layer_sizes)
    if len(sizes) < 2:
        raise ValueError("need at least input and output layer sizes")
    if any(s <= 0 for s in sizes):
        raise ValueError("layer sizes must be positive")
    if not 0.0 <= dropout < 1.0:
        raise ValueError("dropout rate must be in [0, 1)")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        limit = np.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return MlpModel(sizes, weights, biases, dropout, seed)


def forward(model: MlpModel, features: np.ndarray, train_mode: bool = False,
            rng: np.random.Generator | None = None):
    """Compute logits and a cache for backward.

    Accepts a single feature vector or a (batch, features) matrix. Dropout is
    applied to hidden activations only when train_mode is on and the model's
    rate is nonzero; evaluation consumes no RNG state.
    """
    x = np.asarray(features, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.shape[1] != model.layer_sizes[0]:
        raise ValueError(
            f"feature length {x.shape[1]} != input size {model.layer_sizes[0]}")
    cache = ForwardCache(model, x)
    h = x
    n_layers = len(model.weights)
    for i in range(n_layers - 1):
        cache.layer_inputs.append(h)
        z = h @ model.weights[i] + model.biases[i]
        a = np.maximum(z, 0.0)
        cache.relu_masks.append(z > 0.0)
        if train_mode and model.dropout > 0.0:
            if rng is None:
                raise ValueError("train_mode with dropout requires an rng")
            mask = dropout_mask(a.size, model.dropout, rng).reshape(a.shape)
            a = a * mask
            cache.drop_masks.append(mask)
        else:
            cache.drop_masks.append(None)
        h = a
    cache.layer_inputs.append(h)
    logits = h @ model.weights[-1] + model.biases[-1]
    if single:
        return logits[0], cache
    return logits, cache


def backward(model: MlpModel, cache: ForwardCache, dlogits: np.ndarray) -> np.ndarray:
    """Gradient of sum(logits * dlogits) w.r.t. all parameters, flattened
    layer by layer (weights then bias), matching params_flat."""
    if cache.model is not model:
        raise ValueError("stale cache: it was produced by a different model")
    d = np.asarray(dlogits, dtype=np.float64)
    if d.ndim == 1:
        d = d[None, :]
    if d.shape != (cache.inputs.shape[0], model.layer_sizes[-1]):
        raise ValueError("dlogits shape does not match the cached forward")
    grads_w = [None] * len(model.weights)
    grads_b = [None] * len(model.biases)
    dz = d
    for i in range(len(model.weights) - 1, -1, -1):
        grads_w[i] = cache.layer_inputs[i].T @ dz
        grads_b[i] = np.sum(dz, axis=0)
        if i == 0:
            break
        da = dz @ model.weights[i].T
        if cache.drop_masks[i - 1] is not None:
            da = da * cache.drop_masks[i - 1]
        dz = da * cache.relu_masks[i - 1]
    return np.concatenate(
        [np.concatenate([w.ravel(), b]) for w, b in zip(grads_w, grads_b)])


def params_flat(model: MlpModel) -> np.ndarray:
    return np.concatenate(
        [np.concatenate([w.ravel(), b]) for w, b in zip(model.weights, model.biases)])


def set_params_flat(model: MlpModel, flat: np.ndarray) -> None:
    flat = np.asarray(flat, dtype=np.float64)
    if flat.size != param_count(model.layer_sizes):
        raise ValueError("flat parameter vector has the wrong length")
    offset = 0
    for i, (fan_in, fan_out) in enumerate(
            zip(model.layer_sizes[:-1], model.layer_sizes[1:])):
        n_w = fan_in * fan_out
        model.weights[i] = flat[offset:offset + n_w].reshape(fan_in, fan_out).copy()
        offset += n_w
        model.biases[i] = flat[offset:offset + fan_out].copy()
        offset += fan_out


def predict(model: MlpModel, features: np.ndarray) -> np.ndarray:
    """Argmax class per row, evaluation mode (no dropout)."""
    logits, _ = forward(model, np.atleast_2d(np.asarray(features, dtype=np.float64)))
    return np.argmax(logits, axis=1)


def save_model(model: MlpModel, path) -> None:
    np.savez(path, layer_sizes=np.array(model.layer_sizes, dtype=np.int64),
             dropout=model.dropout, seed=model.seed, params=params_flat(model))


def load_model(path) -> MlpModel:
    with np.load(path) as blob:
        model = init_model(tuple(int(s) for s in blob["layer_sizes"]),
                           float(blob["dropout"]), int(blob["seed"]))
        set_params_flat(model, blob["params"])
    return model
