"""Seeded synthetic corpora, lexicons and noisy predictions.

The generators give tests and demos data with known gold labels: English
and code-mixed sentences built from small word lists, Chinese sentences
built character by character so lexicon matching has something to find.
"""

from __future__ import annotations

import numpy as np

from .corpus import DEFAULT_CLASSES, Dataset, PredictionSet, Sentence, repair_bio
from .lexicon import Lexicon

EN_OTHER = ["the", "a", "in", "of", "visited", "met", "near", "with", "and", "said",
            "from", "to", "new", "old", "at", "by", "saw", "likes"]
DE_OTHER = ["der", "die", "und", "mit", "nach", "ist", "ein", "sehr", "auch"]
EN_ENTITIES = {
    "PER": ["tom", "anna", "maria", "john", "smith", "garcia", "lee"],
    "LOC": ["paris", "berlin", "london", "valley", "lake", "texas"],
    "PROD": ["iphone", "corolla", "kindle", "pixel"],
    "GRP": ["beatles", "nato", "unesco", "fifa"],
    "CORP": ["google", "toyota", "siemens", "nokia"],
    "CW": ["hamlet", "inception", "dune", "ulysses"],
}
DE_ENTITIES = {
    "PER": ["hans", "greta", "fritz"],
    "LOC": ["hamburg", "bayern", "rhein"],
    "CORP": ["bosch", "bayer"],
    "CW": ["faust"],
}
ZH_OTHER_WORDS = ["喜欢", "大学", "今天", "我们", "电影", "公司"]
ZH_OTHER_CHARS = list("的是在了和有我他去看到说从很")
ZH_ENTITIES = {
    "LOC": ["北京", "上海", "长江", "长江大桥", "广州", "南京"],
    "PER": ["张伟", "李娜", "王芳", "刘洋"],
    "CORP": ["华为", "腾讯", "阿里巴巴"],
    "PROD": ["手机", "电脑"],
    "GRP": ["联合国", "国足"],
    "CW": ["红楼梦", "西游记"],
}


def _mention(rng, lang, cls):
    if lang == "ZH":
        return list(ZH_ENTITIES[cls][rng.integers(len(ZH_ENTITIES[cls]))])
    table = EN_ENTITIES
    if lang == "MIX" and cls in DE_ENTITIES and rng.random() < 0.5:
        table = DE_ENTITIES
    n = 1 + int(rng.random() < 0.35)
    return [table[cls][rng.integers(len(table[cls]))] for _ in range(n)]


def _filler(rng, lang):
    if lang == "ZH":
        if rng.random() < 0.3:
            return list(ZH_OTHER_WORDS[rng.integers(len(ZH_OTHER_WORDS))])
        return [ZH_OTHER_CHARS[rng.integers(len(ZH_OTHER_CHARS))]]
    if lang == "MIX" and rng.random() < 0.5:
        return [DE_OTHER[rng.integers(len(DE_OTHER))]]
    return [EN_OTHER[rng.integers(len(EN_OTHER))]]


def synthetic_sentence(rng, lang="EN", sid="0", max_entities=2, max_filler=3, classes=DEFAULT_CLASSES):
    tokens, labels = [], []
    n_ent = int(rng.integers(1, max_entities + 1))
    for k in range(n_ent + 1):
        for _ in range(int(rng.integers(0 if k else 1, max_filler + 1))):
            piece = _filler(rng, lang)
            tokens += piece
            labels += ["O"] * len(piece)
        if k < n_ent:
            cls = classes[int(rng.integers(len(classes)))]
            piece = _mention(rng, lang, cls)
            tokens += piece
            labels += ["B-" + cls] + ["I-" + cls] * (len(piece) - 1)
    return Sentence(sid, tokens, labels, lang)


def synthetic_corpus(n, seed=0, languages=("EN",), name="synthetic", id_prefix="s", **kw) -> Dataset:
    """``n`` sentences cycling through ``languages``."""
    rng = np.random.default_rng(seed)
    out = [synthetic_sentence(rng, languages[i % len(languages)], f"{id_prefix}{i}", **kw)
           for i in range(n)]
    return Dataset(out, name)


def synthetic_lexicon(dim=8, seed=0) -> Lexicon:
    """Chinese entity and filler words with seeded random vectors."""
    words = sorted({w for ws in ZH_ENTITIES.values() for w in ws} | set(ZH_OTHER_WORDS)
                   | {"京上", "江大"})
    rng = np.random.default_rng(seed)
    return Lexicon(words, rng.normal(0.0, 1.0, size=(len(words), dim)), dim)


def random_labels(rng, n, classes=DEFAULT_CLASSES, p_entity=0.4):
    """A random valid BIO sequence of length ``n``."""
    out = []
    for i in range(n):
        r = rng.random()
        if r > p_entity:
            out.append("O")
        elif i > 0 and out[-1] != "O" and rng.random() < 0.5:
            out.append("I-" + out[-1][2:])
        else:
            out.append("B-" + classes[int(rng.integers(len(classes)))])
    return out


def random_corpus(rng, n_sent, languages=("EN", "DE", "ZH"), vocab=None, max_len=8, id_prefix="r"):
    """Arbitrary tokens with random valid BIO labels, for property tests."""
    vocab = vocab or [f"w{k}" for k in range(12)]
    out = []
    for i in range(n_sent):
        n = int(rng.integers(1, max_len + 1))
        tokens = [vocab[int(rng.integers(len(vocab)))] for _ in range(n)]
        lang = languages[int(rng.integers(len(languages)))]
        out.append(Sentence(f"{id_prefix}{i}", tokens, random_labels(rng, n), lang))
    return Dataset(out, "random")


def noisy_predictions(gold: Dataset, p, rng, label_set=None, model_id="noisy", dev_macro_f1=0.0) -> PredictionSet:
    """Copy of the gold labels with each token replaced by a random label
    with probability ``p``, then BIO-repaired."""
    if label_set is None:
        label_set = ["O"] + [f"{b}-{c}" for c in DEFAULT_CLASSES for b in "BI"]
    labels = []
    for s in gold:
        seq = [label_set[int(rng.integers(len(label_set)))] if rng.random() < p else lab
               for lab in s.labels]
        labels.append(repair_bio(seq))
    return PredictionSet([s.id for s in gold], labels, None, model_id, dev_macro_f1)


FIXTURE_LANGUAGES = ("ZH", "EN", "MIX")


def fixture_splits(per_language=20, seed=42, split=(12, 4, 4)):
    """The bundled tri-language corpus as ``(train, dev, test)`` datasets."""
    if sum(split) != per_language:
        raise ValueError("split sizes must add up to per_language")
    parts = {"train": [], "dev": [], "test": []}
    for k, lang in enumerate(FIXTURE_LANGUAGES):
        d = synthetic_corpus(per_language, seed=seed + k, languages=(lang,), id_prefix=f"{lang.lower()}-")
        bounds = np.cumsum((0,) + tuple(split))
        for name, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
            parts[name].extend(d.sentences[lo:hi])
    return tuple(Dataset(parts[name], name) for name in parts)
