"""Label-preserving data augmentation for NER corpora.

Concatenation operators (bisent/mulsent, uni/mix) work on whole datasets.
Mention replacement and shuffle-within-segments work per sentence and
are lifted to datasets by :func:`augment_dataset`.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass

import numpy as np

from .corpus import Dataset, Sentence, extract_spans

logger = logging.getLogger(__name__)

CONCAT_MODES = ("bisent-uni", "bisent-mix", "mulsent-uni", "mulsent-mix")
SENTENCE_MODES = ("mention-replace", "shuffle-segments")
MODES = CONCAT_MODES + SENTENCE_MODES
MIX_LANGUAGE = "MIX"
MIX_RETRIES = 8


class AugmentError(ValueError):
    pass


@dataclass(frozen=True)
class AugmentConfig:
    mode: str = "mulsent-uni"
    max_len: int = 512
    rate: float = 1.0
    seed: int = 42

    def __post_init__(self):
        if self.mode not in MODES:
            raise AugmentError(f"unknown augmentation mode {self.mode!r}")
        if self.max_len < 2:
            raise AugmentError("max_len must be >= 2")
        if not 0.0 <= self.rate <= 1.0:
            raise AugmentError("rate must lie in [0, 1]")
        if self.seed < 0:
            raise AugmentError("seed must be non-negative")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentConfig":
        unknown = set(d) - {"mode", "max_len", "rate", "seed"}
        if unknown:
            raise AugmentError(f"unknown augmentation keys {sorted(unknown)}")
        return cls(**d)


def _rng(seed, *salt):
    return np.random.default_rng(np.random.SeedSequence([int(seed), *salt]))


# --------------------------------------------------------------------------- #
# Concatenation


def concat_pair(s1: Sentence, s2: Sentence) -> Sentence:
    return concat_many([s1, s2])


def concat_many(parts) -> Sentence:
    if len(parts) == 1:
        return parts[0]
    langs = {p.language for p in parts}
    return Sentence(
        "+".join(p.id for p in parts),
        tuple(t for p in parts for t in p.tokens),
        tuple(lab for p in parts for lab in p.labels),
        langs.pop() if len(langs) == 1 else MIX_LANGUAGE,
        parts[0].source,
    )


def _shuffled(items, rng):
    order = rng.permutation(len(items))
    return [items[i] for i in order]


def _groups(d: Dataset):
    groups = {}
    for s in d:
        groups.setdefault(s.language, []).append(s)
    return groups


def _pair_within(items):
    out = [concat_pair(items[i], items[i + 1]) for i in range(0, len(items) - 1, 2)]
    if len(items) % 2:
        out.append(items[-1])
    return out


def _pair_across(items, rng):
    pool = list(items)
    out = []
    while pool:
        a = pool.pop(0)
        partner = None
        for _ in range(MIX_RETRIES):
            if not pool:
                break
            j = int(rng.integers(len(pool)))
            if pool[j].language != a.language:
                partner = pool.pop(j)
                break
        out.append(a if partner is None else concat_pair(a, partner))
    return out


def _pack(items, max_len, compatible):
    """Greedily pack ``items`` in order into sentences of at most ``max_len`` tokens."""
    pool = list(items)
    out = []
    while pool:
        pack = [pool.pop(0)]
        total = len(pack[0])
        while True:
            j = next((k for k, s in enumerate(pool) if compatible(pack[-1], s)), None)
            if j is None or total + len(pool[j]) > max_len:
                break
            total += len(pool[j])
            pack.append(pool.pop(j))
        out.append(concat_many(pack))
    return out


def concat_augment(d: Dataset, cfg: AugmentConfig) -> Dataset:
    """Partition a seeded shuffle of ``d`` into concatenated sentences.

    Every source sentence lands in exactly one output sentence, so token and
    span counts are conserved.
    """
    if cfg.mode not in CONCAT_MODES:
        raise AugmentError(f"{cfg.mode!r} is not a concatenation mode")
    rng = _rng(cfg.seed)
    name = f"{d.name}+{cfg.mode}" if d.name else cfg.mode
    if cfg.mode.endswith("-uni"):
        out = []
        for lang, items in _groups(d).items():
            if len(items) < 2:
                logger.warning("language %s has a single sentence; passed through", lang)
                out.extend(items)
                continue
            items = _shuffled(items, rng)
            if cfg.mode == "bisent-uni":
                out.extend(_pair_within(items))
            else:
                out.extend(_pack(items, cfg.max_len, lambda a, b: True))
        return Dataset(out, name)

    if len(d.languages()) < 2:
        raise AugmentError(f"{cfg.mode} needs at least two languages")
    items = _shuffled(list(d), rng)
    if cfg.mode == "bisent-mix":
        return Dataset(_pair_across(items, rng), name)
    return Dataset(_pack(items, cfg.max_len, lambda a, b: a.language != b.language), name)


# --------------------------------------------------------------------------- #
# Mention replacement


def build_mention_pool(d: Dataset) -> dict[str, list[tuple[str, ...]]]:
    pool: dict[str, list[tuple[str, ...]]] = {}
    seen = set()
    for s in d:
        for sp in extract_spans(s.labels):
            mention = s.tokens[sp.start:sp.end]
            if (sp.cls, mention) in seen:
                continue
            seen.add((sp.cls, mention))
            pool.setdefault(sp.cls, []).append(mention)
    return pool


def mention_replace(s: Sentence, pool, rate: float = 1.0, seed: int = 0) -> Sentence:
    """Swap entity mentions for other same-class mentions from ``pool``.

    Each span is picked with probability ``rate``. The identical mention is
    excluded from the draw whenever it has alternatives. Classes missing
    from the pool leave their spans untouched.
    """
    rng = _rng(seed)
    tokens, labels = [], []
    pos = 0
    for sp in extract_spans(s.labels):
        tokens.extend(s.tokens[pos:sp.start])
        labels.extend(s.labels[pos:sp.start])
        original = s.tokens[sp.start:sp.end]
        replacement = original
        if rng.random() < rate and pool.get(sp.cls):
            candidates = [m for m in pool[sp.cls] if m != original] or list(pool[sp.cls])
            replacement = tuple(candidates[int(rng.integers(len(candidates)))])
        tokens.extend(replacement)
        labels.extend(["B-" + sp.cls] + ["I-" + sp.cls] * (len(replacement) - 1))
        pos = sp.end
    tokens.extend(s.tokens[pos:])
    labels.extend(s.labels[pos:])
    return Sentence(s.id, tokens, labels, s.language, s.source)


# --------------------------------------------------------------------------- #
# Shuffle within segments


def segments(labels) -> list[tuple[int, int, bool]]:
    """Maximal entity blocks and O-runs as ``(start, end, is_entity)``."""
    out = []
    start = 0
    for i in range(1, len(labels) + 1):
        if i == len(labels) or (labels[i] == "O") != (labels[start] == "O"):
            out.append((start, i, labels[start] != "O"))
            start = i
    return out


def shuffle_within_segments(s: Sentence, rate: float = 1.0, seed: int = 0) -> Sentence:
    rng = _rng(seed)
    tokens = list(s.tokens)
    for start, end, is_entity in segments(s.labels):
        if is_entity:
            continue
        if rng.random() < rate and end - start > 1:
            order = rng.permutation(end - start)
            run = s.tokens[start:end]
            tokens[start:end] = [run[k] for k in order]
    return Sentence(s.id, tokens, s.labels, s.language, s.source)


# --------------------------------------------------------------------------- #


def augment_dataset(d: Dataset, cfg: AugmentConfig, pool=None) -> Dataset:
    """Apply ``cfg.mode`` to a dataset.

    Per-sentence modes return one augmented copy per sentence with the id
    suffixed by ``~mr`` or ``~sis``; every sentence gets its own seed derived
    from ``cfg.seed`` and its position.
    """
    if cfg.mode in CONCAT_MODES:
        return concat_augment(d, cfg)
    out = []
    if cfg.mode == "mention-replace":
        pool = build_mention_pool(d) if pool is None else pool
        for i, s in enumerate(d):
            t = mention_replace(s, pool, cfg.rate, _sentence_seed(cfg.seed, i))
            out.append(Sentence(s.id + "~mr", t.tokens, t.labels, t.language, t.source))
    else:
        for i, s in enumerate(d):
            t = shuffle_within_segments(s, cfg.rate, _sentence_seed(cfg.seed, i))
            out.append(Sentence(s.id + "~sis", t.tokens, t.labels, t.language, t.source))
    return Dataset(out, f"{d.name}+{cfg.mode}" if d.name else cfg.mode)


def _sentence_seed(seed, index):
    return int(np.random.SeedSequence([int(seed), index]).generate_state(1)[0])
