from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from multiner.augment import (
    CONCAT_MODES,
    AugmentConfig,
    AugmentError,
    augment_dataset,
    build_mention_pool,
    concat_augment,
    concat_pair,
    mention_replace,
    segments,
    shuffle_within_segments,
)
from multiner.corpus import Dataset, Sentence, extract_spans, validate_bio
from multiner.synthetic import random_corpus, synthetic_corpus


def S(sid, tokens, labels, lang="EN"):
    return Sentence(sid, tokens, labels, lang)


def span_counts(d):
    return Counter(sp.cls for s in d for sp in extract_spans(s.labels))


def test_config_validation():
    with pytest.raises(AugmentError):
        AugmentConfig(mode="nope")
    with pytest.raises(AugmentError):
        AugmentConfig(max_len=1)
    with pytest.raises(AugmentError):
        AugmentConfig(rate=1.5)
    with pytest.raises(AugmentError):
        AugmentConfig.from_dict({"mode": "bisent-uni", "extra": 1})
    assert AugmentConfig.from_dict({"mode": "bisent-uni"}).max_len == 512


def test_concat_pair():
    a = S("a", ["tom"], ["B-PER"])
    b = S("b", ["left"], ["O"], "DE")
    c = concat_pair(a, b)
    assert c.labels == ("B-PER", "O") and c.id == "a+b" and c.language == "MIX"
    assert validate_bio(c) == []
    assert concat_pair(a, S("x", ["y"], ["O"])).language == "EN"


def test_concat_pair_spans_shift():
    a = S("a", ["x", "tom", "lee"], ["O", "B-PER", "I-PER"])
    b = S("b", ["paris", "y"], ["B-LOC", "O"])
    spans = {(sp.start, sp.end, sp.cls) for sp in extract_spans(concat_pair(a, b).labels)}
    assert spans == {(1, 3, "PER"), (3, 4, "LOC")}


def test_mulsent_single_sentence_passthrough():
    d = Dataset([S("0", ["a", "b", "c"], ["O"] * 3)])
    out = concat_augment(d, AugmentConfig("mulsent-uni"))
    assert list(out) == list(d)


def test_bisent_uni_four():
    d = synthetic_corpus(4, seed=1)
    out = concat_augment(d, AugmentConfig("bisent-uni"))
    assert len(out) == 2
    assert sum(map(len, out)) == sum(map(len, d))


def test_mulsent_greedy_overflow():
    d = Dataset([S(str(i), [f"t{k}" for k in range(300)], ["O"] * 300) for i in range(3)])
    out = concat_augment(d, AugmentConfig("mulsent-uni", max_len=512))
    assert [len(s) for s in out] == [300, 300, 300]


def test_mulsent_packs_up_to_budget():
    d = Dataset([S(str(i), ["w"] * 3, ["O"] * 3) for i in range(10)])
    out = concat_augment(d, AugmentConfig("mulsent-uni", max_len=9))
    assert sorted(len(s) for s in out) == [3, 9, 9, 9]


def test_mix_requires_two_languages():
    d = synthetic_corpus(6, seed=0, languages=("EN",))
    with pytest.raises(AugmentError):
        concat_augment(d, AugmentConfig("bisent-mix"))


def test_bisent_mix_pairs_differ_in_language():
    d = synthetic_corpus(20, seed=2, languages=("EN", "ZH"))
    out = concat_augment(d, AugmentConfig("bisent-mix", seed=5))
    for s in out:
        if "+" in s.id:
            assert s.language == "MIX"


def test_uni_singleton_group_passes_through(caplog):
    d = Dataset(list(synthetic_corpus(4, seed=1)) + [S("z", ["北"], ["B-LOC"], "ZH")])
    out = concat_augment(d, AugmentConfig("bisent-uni"))
    assert any(s.id == "z" for s in out)
    assert "single sentence" in caplog.text


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(CONCAT_MODES), st.integers(2, 30))
def test_concat_partition_property(seed, mode, max_len):
    rng = np.random.default_rng(seed)
    d = random_corpus(rng, int(rng.integers(2, 15)), languages=("EN", "ZH"))
    if len(d.languages()) < 2:
        d = Dataset(list(d) + [S("extra", ["x"], ["O"], "ZH" if "EN" in d.languages() else "EN")])
    cfg = AugmentConfig(mode, max_len=max_len, seed=seed)
    out = concat_augment(d, cfg)
    assert sorted(i for s in out for i in s.id.split("+")) == sorted(s.id for s in d)
    assert sum(map(len, out)) == sum(map(len, d))
    assert span_counts(out) == span_counts(d)
    assert all(validate_bio(s) == [] for s in out)
    assert out == concat_augment(d, cfg)
    if mode.startswith("mulsent"):
        assert all(len(s) <= max(max_len, max(map(len, d))) for s in out)
        assert all(len(s) <= max_len for s in out if "+" in s.id)


def test_pool():
    assert build_mention_pool(synthetic_corpus(0)) == {}
    assert build_mention_pool(Dataset([S("0", ["a"], ["O"])])) == {}
    d = Dataset([S("0", ["tom", "x"], ["B-PER", "O"]), S("1", ["y", "tom"], ["O", "B-PER"])])
    assert build_mention_pool(d) == {"PER": [("tom",)]}


def test_mention_replace_examples():
    s = S("0", ["tom"], ["B-PER"])
    out = mention_replace(s, {"PER": [("anna", "maria")]}, 1.0, 0)
    assert out.tokens == ("anna", "maria") and out.labels == ("B-PER", "I-PER")
    assert mention_replace(s, {"PER": [("anna",)]}, 0.0, 0) == s
    assert mention_replace(s, {"LOC": [("paris",)]}, 1.0, 0) == s


def test_mention_replace_excludes_identity():
    s = S("0", ["tom"], ["B-PER"])
    pool = {"PER": [("tom",), ("anna",)]}
    assert all(mention_replace(s, pool, 1.0, k).tokens == ("anna",) for k in range(20))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(0, 1))
def test_mention_replace_property(seed, rate):
    rng = np.random.default_rng(seed)
    d = random_corpus(rng, 8)
    pool = build_mention_pool(d)
    for i, s in enumerate(d):
        out = mention_replace(s, pool, rate, seed + i)
        assert validate_bio(out) == []
        assert span_counts([out]) == span_counts([s])
        assert out == mention_replace(s, pool, rate, seed + i)
        o_in = [t for t, lab in zip(s.tokens, s.labels) if lab == "O"]
        o_out = [t for t, lab in zip(out.tokens, out.labels) if lab == "O"]
        assert o_in == o_out


def test_segments():
    assert segments(["O", "O", "B-PER", "I-PER", "O"]) == [(0, 2, False), (2, 4, True), (4, 5, False)]
    assert segments(["B-PER", "B-LOC"]) == [(0, 2, True)]


def test_sis_examples():
    s = S("0", ["tom", "lee"], ["B-PER", "I-PER"])
    assert shuffle_within_segments(s, 1.0, 3) == s
    s = S("0", ["a", "b", "tom"], ["O", "O", "B-PER"])
    seen = set()
    for k in range(30):
        out = shuffle_within_segments(s, 1.0, k)
        assert out.tokens[2] == "tom" and out.labels == s.labels
        assert set(out.tokens[:2]) == {"a", "b"}
        seen.add(out.tokens)
    assert len(seen) == 2


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(0, 1))
def test_sis_property(seed, rate):
    s = random_corpus(np.random.default_rng(seed), 1, max_len=12)[0]
    out = shuffle_within_segments(s, rate, seed)
    assert out.labels == s.labels
    assert Counter(out.tokens) == Counter(s.tokens)
    for i, lab in enumerate(s.labels):
        if lab != "O":
            assert out.tokens[i] == s.tokens[i]
    assert out == shuffle_within_segments(s, rate, seed)


def test_augment_dataset_suffixes():
    d = synthetic_corpus(5, seed=0)
    mr = augment_dataset(d, AugmentConfig("mention-replace"))
    sis = augment_dataset(d, AugmentConfig("shuffle-segments"))
    assert [s.id for s in mr] == [s.id + "~mr" for s in d]
    assert [s.id for s in sis] == [s.id + "~sis" for s in d]
    assert mr == augment_dataset(d, AugmentConfig("mention-replace"))
