"""Toy neural tagger.

One self-attention layer stands in for the pretrained encoder. On top of it
sit the optional add-ons: a lexicon adapter, one GCN per lexicon graph with
softmax-weighted fusion, shared/private feature extractors with a
gradient-reversed language discriminator, and an R-Drop consistency loss.

A batch is flattened: the tokens of all its sentences are stacked into one
matrix and attention is kept inside each sentence by an additive block mask.
Graph nodes follow the same idea, with all character nodes of the batch
first and all matched-word nodes after them.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import compute as C
from .corpus import DEFAULT_CLASSES, Dataset, PredictionSet, macro_f1, repair_bio
from .lexgraph import GRAPH_KINDS, build_graphs, normalize_adjacency
from .lexicon import Lexicon, cap_matches_per_char, match_spans

logger = logging.getLogger(__name__)

UNK = "<unk>"
MASK_NEG = -1e9

# Hyperparameter scopes explored for the full-size system; values outside
# them are legal here but logged.
SCOPES = {
    "rdrop_alpha": (0.01, 0.5),
    "warmup_proportion": (0.06, 0.1),
    "batch_size": (8, 32),
}


class ModelError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class ModelConfig:
    chars: list = field(default_factory=lambda: [UNK])
    labels: list = field(default_factory=lambda: ["O"])
    languages: list = field(default_factory=list)
    hidden: int = 64
    word_dim: int = 0
    adapter: bool = False
    max_words: int = 5
    gcn: bool = False
    graphs: tuple = GRAPH_KINDS
    gcn_layers: int = 2
    word_transitions: bool = True
    pfe_sfe: bool = False
    pfe_lambda: float = 0.1
    rdrop_alpha: float = 0.1
    dropout: float = 0.2
    max_positions: int = 512
    positions: bool = True
    ln_eps: float = 1e-5
    init_seed: int = 42

    def __post_init__(self):
        self.graphs = tuple(self.graphs)
        if self.hidden <= 0:
            raise ModelError("hidden size must be positive")
        if not set(self.graphs) <= set(GRAPH_KINDS):
            raise ModelError(f"graphs must be a subset of {GRAPH_KINDS}")
        if self.rdrop_alpha < 0:
            raise ModelError("rdrop_alpha must be >= 0")
        if not 0.0 <= self.dropout < 1.0:
            raise ModelError("dropout must lie in [0, 1)")
        if self.gcn_layers < 1 or self.max_words < 1:
            raise ModelError("gcn_layers and max_words must be >= 1")
        if (self.adapter or self.gcn) and self.word_dim <= 0:
            raise ModelError("adapter/gcn need word_dim > 0 (load a lexicon)")
        if self.labels[0] != "O":
            raise ModelError("label vocabulary must start with 'O'")

    @property
    def active_graphs(self):
        return self.graphs if self.gcn else ()

    @property
    def uses_lexicon(self):
        return self.adapter or bool(self.active_graphs)

    @property
    def feature_dim(self):
        return 2 * self.hidden if self.pfe_sfe else self.hidden

    def to_json(self) -> str:
        d = asdict(self)
        d["graphs"] = list(self.graphs)
        return json.dumps(d, indent=1, sort_keys=True, ensure_ascii=False) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ModelError(f"unknown model config keys {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        return cls.from_dict(json.loads(text))


def build_vocab(datasets, classes=DEFAULT_CLASSES, **overrides) -> ModelConfig:
    """A config whose vocabularies cover ``datasets``."""
    chars, langs, seen_classes = set(), set(), []
    for d in datasets:
        for s in d:
            chars.update(s.tokens)
            langs.add(s.language)
            for lab in s.labels:
                c = lab[2:] if lab != "O" else None
                if c and c not in classes and c not in seen_classes:
                    seen_classes.append(c)
    labels = ["O"]
    for c in list(classes) + sorted(seen_classes):
        labels += ["B-" + c, "I-" + c]
    return ModelConfig(chars=[UNK] + sorted(chars), labels=labels, languages=sorted(langs), **overrides)


# --------------------------------------------------------------------------- #
# Parameters


def _glorot(rng, rows, cols):
    lim = math.sqrt(6.0 / (rows + cols))
    return rng.uniform(-lim, lim, size=(rows, cols))


def init_params(cfg: ModelConfig) -> dict:
    """Seeded initialisation; each component draws from its own stream so
    switching an add-on on or off leaves the other tensors unchanged."""

    def stream(k):
        return np.random.default_rng([cfg.init_seed, k])

    d = cfg.hidden
    p = {}

    def add(name, values):
        p[name] = C.Tensor(values, requires_grad=True, name=name)

    rng = stream(0)
    add("char_emb", rng.normal(0.0, 1.0, size=(len(cfg.chars), d)))
    if cfg.positions:
        add("pos_emb", rng.normal(0.0, 0.1, size=(cfg.max_positions, d)))
    for n in ("att_q", "att_k", "att_v", "att_o", "ff_w1", "ff_w2"):
        add(n, _glorot(rng, d, d))
    add("ff_b1", np.zeros((1, d)))
    add("ff_b2", np.zeros((1, d)))
    for n in ("ln1", "ln2"):
        add(n + "_g", np.ones((1, d)))
        add(n + "_b", np.zeros((1, d)))
    if cfg.adapter:
        rng = stream(1)
        add("ad_w1", _glorot(rng, cfg.word_dim, d))
        add("ad_b1", np.zeros((1, d)))
        add("ad_w2", _glorot(rng, d, d))
        add("ad_b2", np.zeros((1, d)))
        add("ad_attn", _glorot(rng, d, d))
        add("ad_ln_g", np.ones((1, d)))
        add("ad_ln_b", np.zeros((1, d)))
    if cfg.active_graphs:
        rng = stream(2)
        add("word_proj", _glorot(rng, cfg.word_dim, d))
        add("word_proj_b", np.zeros((1, d)))
        for g in cfg.active_graphs:
            for layer in range(cfg.gcn_layers):
                add(f"gcn_{g}_{layer}", _glorot(rng, d, d))
        add("fusion_logits", np.zeros((1, 1 + len(cfg.active_graphs))))
    if cfg.pfe_sfe:
        if not cfg.languages:
            raise ModelError("pfe_sfe needs at least one language")
        rng = stream(3)
        add("sfe_w", _glorot(rng, d, d))
        add("sfe_b", np.zeros((1, d)))
        for lang in cfg.languages:
            add(f"pfe_{lang}_w", _glorot(rng, d, d))
            add(f"pfe_{lang}_b", np.zeros((1, d)))
        add("disc_w1", _glorot(rng, d, d))
        add("disc_b1", np.zeros((1, d)))
        add("disc_w2", _glorot(rng, d, len(cfg.languages)))
        add("disc_b2", np.zeros((1, len(cfg.languages))))
    rng = stream(4)
    add("out_w", _glorot(rng, cfg.feature_dim, len(cfg.labels)))
    add("out_b", np.zeros((1, len(cfg.labels))))
    return p


def warm_start(params: dict, source: dict) -> list[str]:
    """Copy every same-named, same-shaped tensor from ``source``; returns the names copied."""
    copied = []
    for k, t in params.items():
        s = source.get(k)
        if s is not None and s.shape == t.shape:
            t.values = s.values.copy()
            copied.append(k)
    return copied


def copy_params(params: dict) -> dict:
    return {k: C.Tensor(t.values.copy(), requires_grad=True, name=k) for k, t in params.items()}


# --------------------------------------------------------------------------- #
# Batches


@dataclass
class SentenceFeatures:
    char_ids: np.ndarray
    label_ids: np.ndarray | None
    lang_id: int
    matches: list
    adapter_slots: list  # per char: indices into matches (capped, longest first)
    graphs: object | None


def sentence_features(s, cfg: ModelConfig, lexicon: Lexicon | None = None, with_labels=True):
    char_index = {c: i for i, c in enumerate(cfg.chars)}
    ids = np.array([char_index.get(t, 0) for t in s.tokens], dtype=np.int64)
    labels = None
    if with_labels:
        label_index = {lab: i for i, lab in enumerate(cfg.labels)}
        try:
            labels = np.array([label_index[lab] for lab in s.labels], dtype=np.int64)
        except KeyError as e:
            raise ModelError(f"sentence {s.id!r}: label {e.args[0]!r} not in the label vocabulary") from None
    lang = cfg.languages.index(s.language) if s.language in cfg.languages else -1
    matches, slots, graphs = [], [[] for _ in s.tokens], None
    if cfg.uses_lexicon:
        if lexicon is None:
            raise ModelError("this model needs a lexicon")
        if lexicon.dim != cfg.word_dim:
            raise ModelError(f"lexicon dim {lexicon.dim} != model word_dim {cfg.word_dim}")
        matches = match_spans(lexicon, s.tokens)
        slots = cap_matches_per_char(matches, len(s), cfg.max_words)
        if cfg.active_graphs:
            graphs = build_graphs(matches, len(s), cfg.word_transitions)
    return SentenceFeatures(ids, labels, lang, matches, slots, graphs)


@dataclass
class Batch:
    n: int
    lengths: list
    char_ids: np.ndarray
    pos_ids: np.ndarray
    label_ids: np.ndarray | None
    lang_ids: np.ndarray  # per token
    attn_mask: np.ndarray
    word_vecs: np.ndarray  # one row per matched-word occurrence
    pair_char: np.ndarray
    pair_word: np.ndarray
    adjacency: dict


def make_batch(feats: list[SentenceFeatures], cfg: ModelConfig, lexicon: Lexicon | None = None) -> Batch:
    lengths = [len(f.char_ids) for f in feats]
    n = sum(lengths)
    offsets = np.cumsum([0] + lengths)
    char_ids = np.concatenate([f.char_ids for f in feats])
    pos_ids = np.concatenate([np.minimum(np.arange(k), cfg.max_positions - 1) for k in lengths])
    label_ids = None
    if all(f.label_ids is not None for f in feats):
        label_ids = np.concatenate([f.label_ids for f in feats])
    lang_ids = np.concatenate([np.full(k, f.lang_id) for k, f in zip(lengths, feats)])
    mask = np.full((n, n), MASK_NEG)
    for lo, hi in zip(offsets[:-1], offsets[1:]):
        mask[lo:hi, lo:hi] = 0.0

    word_rows, pair_char, pair_word = [], [], []
    word_offsets = [0]
    for f, lo in zip(feats, offsets[:-1]):
        base = word_offsets[-1]
        for m in f.matches:
            word_rows.append(lexicon.vectors[m.word_id])
        for pos, slot in enumerate(f.adapter_slots):
            for k in slot:
                pair_char.append(lo + pos)
                pair_word.append(base + k)
        word_offsets.append(base + len(f.matches))
    n_words = word_offsets[-1]
    word_vecs = np.array(word_rows, dtype=np.float64).reshape(n_words, cfg.word_dim)

    adjacency = {}
    if cfg.active_graphs:
        size = n + n_words
        for kind in cfg.active_graphs:
            a = np.zeros((size, size))
            for f, lo, wlo in zip(feats, offsets[:-1], word_offsets[:-1]):
                k = len(f.char_ids)
                idx = np.concatenate([np.arange(lo, lo + k), n + wlo + np.arange(len(f.matches))])
                a[np.ix_(idx, idx)] = f.graphs.adjacency(kind)
            adjacency[kind] = normalize_adjacency(a)
    return Batch(n, lengths, char_ids, pos_ids, label_ids, lang_ids, mask, word_vecs,
                 np.array(pair_char, dtype=np.int64), np.array(pair_word, dtype=np.int64), adjacency)


def batch_sentences(sentences, cfg, lexicon=None, with_labels=True) -> Batch:
    feats = [sentence_features(s, cfg, lexicon, with_labels) for s in sentences]
    return make_batch(feats, cfg, lexicon)


# --------------------------------------------------------------------------- #
# Forward pieces


def embed(params, batch: Batch) -> C.Tensor:
    x = C.gather_rows(params["char_emb"], batch.char_ids)
    if "pos_emb" in params:
        x = C.add(x, C.gather_rows(params["pos_emb"], batch.pos_ids))
    return x


def encode(params, batch: Batch, x: C.Tensor, mask=None, eps=1e-5) -> C.Tensor:
    """Self-attention block over an embedding-layer output ``x``."""
    x = C.dropout(x, mask)
    d = x.cols
    q = C.matmul(x, params["att_q"])
    k = C.matmul(x, params["att_k"])
    v = C.matmul(x, params["att_v"])
    scores = C.add(C.scale(C.matmul(q, C.transpose(k)), 1.0 / math.sqrt(d)), C.Tensor(batch.attn_mask))
    ctx = C.matmul(C.matmul(C.softmax(scores), v), params["att_o"])
    h1 = C.layer_norm(C.add(x, ctx), params["ln1_g"], params["ln1_b"], eps)
    ff = C.tanh(C.add(C.matmul(h1, params["ff_w1"]), params["ff_b1"]))
    ff = C.add(C.matmul(ff, params["ff_w2"]), params["ff_b2"])
    return C.layer_norm(C.add(h1, ff), params["ln2_g"], params["ln2_b"], eps)


def lexicon_adapter(h: C.Tensor, word_vecs: C.Tensor, pair_char, pair_word, params, eps=1e-5) -> C.Tensor:
    """Inject matched-word vectors into character states.

    Each word vector is projected to the hidden size, scored against its
    character through a bilinear form, softmax-weighted among the words of
    that character and added to it before layer normalisation.
    """
    if word_vecs.rows and word_vecs.cols != params["ad_w1"].rows:
        raise ModelError(f"word vector dim {word_vecs.cols} != adapter input {params['ad_w1'].rows}")
    if len(pair_char) == 0:
        return C.layer_norm(h, params["ad_ln_g"], params["ad_ln_b"], eps)
    v = C.tanh(C.add(C.matmul(word_vecs, params["ad_w1"]), params["ad_b1"]))
    v = C.add(C.matmul(v, params["ad_w2"]), params["ad_b2"])
    v = C.gather_rows(v, pair_word)
    hp = C.matmul(C.gather_rows(h, pair_char), params["ad_attn"])
    att = C.segment_softmax(C.sum_rows(C.mul(hp, v)), pair_char, h.rows)
    z = C.scatter_rows(C.mul(att, v), pair_char, h.rows)
    return C.layer_norm(C.add(h, z), params["ad_ln_g"], params["ad_ln_b"], eps)


def gcn_forward(states: C.Tensor, a_hat, weights, n_out=None) -> C.Tensor:
    """``H <- relu(A_hat H W)`` per layer; returns the first ``n_out`` rows."""
    a_hat = a_hat if isinstance(a_hat, C.Tensor) else C.Tensor(a_hat)
    if a_hat.rows != states.rows:
        raise ModelError(f"adjacency size {a_hat.rows} != node count {states.rows}")
    h = states
    for w in weights:
        h = C.relu(C.matmul(a_hat, C.matmul(h, w)))
    if n_out is None or n_out == h.rows:
        return h
    return C.gather_rows(h, np.arange(n_out))


def fuse(paths, logits: C.Tensor) -> C.Tensor:
    """Convex combination of same-shaped paths with weights ``softmax(logits)``."""
    if logits.cols != len(paths):
        raise ModelError("one fusion logit per path")
    w = C.softmax(logits)
    out = None
    for k, path in enumerate(paths):
        pick = np.zeros((len(paths), 1))
        pick[k, 0] = 1.0
        term = C.mul(C.matmul(w, C.Tensor(pick)), path)
        out = term if out is None else C.add(out, term)
    return out


def pfe_sfe(h: C.Tensor, lang_ids, params, languages, strength: float):
    """Shared and per-language private features plus discriminator logits.

    ``lang_ids`` gives one language index per row of ``h``. The discriminator
    sees the shared features through a gradient reversal of ``strength``.
    """
    lang_ids = np.asarray(lang_ids)
    if len(lang_ids) and (lang_ids.min() < 0 or lang_ids.max() >= len(languages)):
        raise ModelError("unknown language id for the private feature extractor")
    shared = C.tanh(C.add(C.matmul(h, params["sfe_w"]), params["sfe_b"]))
    private = None
    for li, lang in enumerate(languages):
        rows = np.nonzero(lang_ids == li)[0]
        if len(rows) == 0:
            continue
        part = C.tanh(C.add(C.matmul(C.gather_rows(h, rows), params[f"pfe_{lang}_w"]),
                            params[f"pfe_{lang}_b"]))
        part = C.scatter_rows(part, rows, h.rows)
        private = part if private is None else C.add(private, part)
    features = C.concat_cols([shared, private])
    rev = C.reverse_gradient(shared, strength)
    disc = C.tanh(C.add(C.matmul(rev, params["disc_w1"]), params["disc_b1"]))
    disc = C.add(C.matmul(disc, params["disc_w2"]), params["disc_b2"])
    return features, disc


@dataclass
class Forward:
    logits: C.Tensor
    disc_logits: C.Tensor | None
    features: C.Tensor


def forward_from_embedding(params, cfg: ModelConfig, batch: Batch, x: C.Tensor, masks=None) -> Forward:
    masks = masks or {}
    h = encode(params, batch, x, masks.get("embed"), cfg.ln_eps)
    word_vecs = C.Tensor(batch.word_vecs)
    if cfg.adapter:
        h = lexicon_adapter(h, word_vecs, batch.pair_char, batch.pair_word, params, cfg.ln_eps)
    if cfg.active_graphs:
        nodes = h
        if word_vecs.rows:
            words = C.add(C.matmul(word_vecs, params["word_proj"]), params["word_proj_b"])
            nodes = C.concat_rows([h, words])
        paths = [h]
        for g in cfg.active_graphs:
            weights = [params[f"gcn_{g}_{k}"] for k in range(cfg.gcn_layers)]
            paths.append(gcn_forward(nodes, batch.adjacency[g], weights, batch.n))
        h = fuse(paths, params["fusion_logits"])
    disc = None
    if cfg.pfe_sfe:
        h, disc = pfe_sfe(h, batch.lang_ids, params, cfg.languages, cfg.pfe_lambda)
    feats = C.dropout(h, masks.get("features"))
    logits = C.add(C.matmul(feats, params["out_w"]), params["out_b"])
    return Forward(logits, disc, h)


def forward(params, cfg, batch, masks=None, delta=None) -> Forward:
    x = embed(params, batch)
    if delta is not None:
        x = C.add(x, delta)
    return forward_from_embedding(params, cfg, batch, x, masks)


def tagging_loss(fwd: Forward, batch: Batch) -> C.Tensor:
    """Token-mean cross-entropy, plus the discriminator term when present."""
    loss = C.cross_entropy(fwd.logits, batch.label_ids)
    if fwd.disc_logits is not None:
        loss = C.add(loss, C.cross_entropy(fwd.disc_logits, batch.lang_ids))
    return loss


def symmetric_kl(p1: C.Tensor, p2: C.Tensor) -> C.Tensor:
    return C.scale(C.add(C.kl_divergence(p1, p2), C.kl_divergence(p2, p1)), 0.5)


def make_masks(cfg: ModelConfig, n: int, rng) -> dict:
    if cfg.dropout <= 0:
        return {}
    return {
        "embed": C.dropout_mask(rng, (n, cfg.hidden), cfg.dropout),
        "features": C.dropout_mask(rng, (n, cfg.feature_dim), cfg.dropout),
    }


@dataclass
class LossResult:
    loss: C.Tensor
    embedding: C.Tensor
    parts: dict


def compute_loss(params, cfg: ModelConfig, batch: Batch, masks: list, delta=None, rdrop=False) -> LossResult:
    """Training objective for one batch.

    ``masks`` holds one dropout-mask dict per forward pass; R-Drop uses two
    passes over the same embedding output and adds ``alpha`` times their
    symmetric KL.
    """
    x = embed(params, batch)
    xin = x if delta is None else C.add(x, delta)
    if not rdrop:
        fwd = forward_from_embedding(params, cfg, batch, xin, masks[0] if masks else None)
        loss = tagging_loss(fwd, batch)
        return LossResult(loss, x, {"ce": loss.item()})
    f1 = forward_from_embedding(params, cfg, batch, xin, masks[0])
    f2 = forward_from_embedding(params, cfg, batch, xin, masks[1])
    ce1, ce2 = tagging_loss(f1, batch), tagging_loss(f2, batch)
    ce = C.scale(C.add(ce1, ce2), 0.5)
    kl = symmetric_kl(C.softmax(f1.logits), C.softmax(f2.logits))
    loss = C.add(ce, C.scale(kl, cfg.rdrop_alpha))
    return LossResult(loss, x, {"ce": ce.item(), "kl": kl.item()})


def rdrop_loss(params, cfg, batch, seed: int) -> C.Tensor:
    rng = np.random.default_rng(seed)
    masks = [make_masks(cfg, batch.n, rng), make_masks(cfg, batch.n, rng)]
    return compute_loss(params, cfg, batch, masks, rdrop=True).loss


# --------------------------------------------------------------------------- #
# Training


@dataclass
class TrainConfig:
    lr: float = 0.01
    warmup_proportion: float = 0.06
    batch_size: int = 32
    epochs: int = 30
    seed: int = 42
    rdrop: bool = False
    adversarial: dict | None = None
    augment: list = field(default_factory=list)
    eval_batch_size: int = 64

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 1:
            raise ModelError("lr > 0, batch_size >= 1 and epochs >= 1 are required")
        if not 0.0 <= self.warmup_proportion < 1.0:
            raise ModelError("warmup_proportion must lie in [0, 1)")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ModelError(f"unknown training config keys {sorted(unknown)}")
        return cls(**d)


def scope_warnings(cfg: ModelConfig, tc: TrainConfig) -> list[str]:
    out = []
    values = {"rdrop_alpha": cfg.rdrop_alpha, "warmup_proportion": tc.warmup_proportion,
              "batch_size": tc.batch_size}
    if not tc.rdrop:
        del values["rdrop_alpha"]
    for key, value in values.items():
        lo, hi = SCOPES[key]
        if not lo <= value <= hi:
            out.append(f"{key}={value} is outside the explored range [{lo}, {hi}]")
    return out


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    dev_macro_f1: float


@dataclass
class TrainResult:
    params: dict
    history: list
    best_epoch: int

    def metrics_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "dev_macro_f1"])
        for r in self.history:
            w.writerow([r.epoch, repr(r.train_loss), repr(r.dev_macro_f1)])
        return buf.getvalue()


def expand_training_data(train: Dataset, augment) -> Dataset:
    """Original sentences plus the output of every configured augmentation.

    Concatenation modes contribute only their genuinely concatenated
    sentences, the single pass-throughs already being in the original set.
    """
    from .augment import CONCAT_MODES, AugmentConfig, augment_dataset

    out = list(train)
    original = {s.id for s in train}
    for spec in augment:
        acfg = spec if isinstance(spec, AugmentConfig) else AugmentConfig.from_dict(dict(spec))
        for s in augment_dataset(train, acfg):
            if acfg.mode in CONCAT_MODES and s.id in original:
                continue
            out.append(s)
    return Dataset(out, train.name)


def train(train_data: Dataset, cfg: ModelConfig, tc: TrainConfig | None = None, dev: Dataset | None = None,
          lexicon: Lexicon | None = None, init: dict | None = None) -> TrainResult:
    """Fit a tagger; returns the checkpoint of the best dev epoch.

    Without ``dev`` the final epoch is returned and dev scores are NaN.
    """
    from .adversarial import AdvConfig, adv_train_step

    tc = tc or TrainConfig()
    if len(train_data) == 0:
        raise ModelError("training data is empty")
    for msg in scope_warnings(cfg, tc):
        logger.info(msg)
    data = expand_training_data(train_data, tc.augment) if tc.augment else train_data
    feats = [sentence_features(s, cfg, lexicon) for s in data]
    params = init_params(cfg)
    if init is not None:
        warm_start(params, init)
    adv = None
    if tc.adversarial:
        adv = tc.adversarial if isinstance(tc.adversarial, AdvConfig) else AdvConfig.from_dict(tc.adversarial)
    n_batches = math.ceil(len(feats) / tc.batch_size)
    opt = C.Adam(params, lr=tc.lr, total_steps=n_batches * tc.epochs, warmup_proportion=tc.warmup_proportion)
    order_rng = np.random.default_rng([tc.seed, 0])
    mask_rng = np.random.default_rng([tc.seed, 1])
    adv_rng = np.random.default_rng([tc.seed, 2])
    history = []
    best = (-1.0, 0, None)
    for epoch in range(1, tc.epochs + 1):
        order = order_rng.permutation(len(feats))
        total = 0.0
        for b in range(n_batches):
            idx = order[b * tc.batch_size:(b + 1) * tc.batch_size]
            batch = make_batch([feats[i] for i in idx], cfg, lexicon)
            n_pass = 2 if tc.rdrop else 1
            masks = [make_masks(cfg, batch.n, mask_rng) for _ in range(n_pass)]
            opt.zero_grad()

            def loss_fn(delta=None, batch=batch, masks=masks):
                return compute_loss(params, cfg, batch, masks, delta, tc.rdrop)

            if adv is None:
                with C.Tape() as tape:
                    res = loss_fn()
                    tape.backward(res.loss)
                value = res.loss.item()
            else:
                value = adv_train_step(params, loss_fn, adv, adv_rng).clean_loss
            if not math.isfinite(value):
                raise TrainingDiverged(f"loss became {value} at epoch {epoch}, batch {b}")
            opt.step()
            total += value * len(idx)
        train_loss = total / len(feats)
        dev_f1 = float("nan")
        if dev is not None and len(dev):
            dev_f1 = macro_f1(dev, predict(params, cfg, dev, lexicon, tc.eval_batch_size)).macro_f1
            if dev_f1 > best[0]:
                best = (dev_f1, epoch, copy_params(params))
        history.append(EpochRecord(epoch, train_loss, dev_f1))
        logger.debug("epoch %d loss %.6f dev %.4f", epoch, train_loss, dev_f1)
    if best[2] is None:
        return TrainResult(params, history, tc.epochs)
    return TrainResult(best[2], history, best[1])


def best_epoch(history) -> int:
    """Epoch with the highest dev macro-F1 (earliest on ties)."""
    scored = [r for r in history if not math.isnan(r.dev_macro_f1)]
    if not scored:
        return history[-1].epoch
    return max(scored, key=lambda r: (r.dev_macro_f1, -r.epoch)).epoch


# --------------------------------------------------------------------------- #
# Inference


def predict_proba(params, cfg, sentences, lexicon=None):
    """Per-token label distributions for ``sentences`` and the batch used."""
    batch = batch_sentences(sentences, cfg, lexicon, with_labels=False)
    fwd = forward(params, cfg, batch)
    return C._softmax_values(fwd.logits.values), batch


def predict(params, cfg: ModelConfig, dataset: Dataset, lexicon=None, batch_size=64,
            model_id="model", dev_macro_f1=0.0) -> PredictionSet:
    """Argmax decoding with BIO repair; dropout is off."""
    labels, scores = [], []
    sents = list(dataset)
    for lo in range(0, len(sents), batch_size):
        chunk = sents[lo:lo + batch_size]
        probs, batch = predict_proba(params, cfg, chunk, lexicon)
        best = probs.argmax(axis=1)
        top = probs.max(axis=1)
        pos = 0
        for k in batch.lengths:
            raw = [cfg.labels[i] for i in best[pos:pos + k]]
            labels.append(tuple(repair_bio(raw)))
            scores.append(tuple(float(v) for v in top[pos:pos + k]))
            pos += k
    return PredictionSet([s.id for s in sents], labels, scores, model_id, dev_macro_f1)


def token_accuracy(params, cfg, dataset, lexicon=None) -> float:
    pred = predict(params, cfg, dataset, lexicon)
    hits = total = 0
    for s, lab in zip(dataset, pred.labels):
        hits += sum(a == b for a, b in zip(s.labels, lab))
        total += len(s)
    return hits / total


# --------------------------------------------------------------------------- #
# Persistence


def save_model(directory, params, cfg: ModelConfig, result: TrainResult | None = None):
    from pathlib import Path

    path = Path(directory)
    path.mkdir(parents=True, exist_ok=True)
    (path / "params.json").write_text(C.params_to_json(params), encoding="utf-8")
    (path / "config.json").write_text(cfg.to_json(), encoding="utf-8")
    if result is not None:
        (path / "metrics.csv").write_text(result.metrics_csv(), encoding="utf-8")


def load_model(directory):
    from pathlib import Path

    path = Path(directory)
    cfg = ModelConfig.from_json((path / "config.json").read_text(encoding="utf-8"))
    params = C.params_from_json((path / "params.json").read_text(encoding="utf-8"))
    expected = init_params(cfg)
    if set(expected) != set(params):
        raise ModelError("checkpoint parameters do not match the model config")
    for k, t in expected.items():
        if params[k].shape != t.shape:
            raise ModelError(f"checkpoint tensor {k!r} has shape {params[k].shape}, expected {t.shape}")
    return params, cfg
