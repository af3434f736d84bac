import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from multiner.corpus import (
    BIOError,
    CorpusError,
    Dataset,
    EntitySpan,
    EvalReport,
    PredictionSet,
    Sentence,
    extract_spans,
    macro_f1,
    parse_conll,
    repair_bio,
    validate_bio,
    write_conll,
)
from multiner.synthetic import noisy_predictions, random_corpus, random_labels
from oracles import naive_macro_f1, naive_spans


def test_parse_empty():
    assert len(parse_conll("")) == 0


def test_parse_two_blocks():
    d = parse_conll("tom B-PER\nleft O\n\nparis B-LOC")
    assert [s.labels for s in d] == [("B-PER", "O"), ("B-LOC",)]
    assert [s.id for s in d] == ["0", "1"]


def test_parse_four_columns_and_header():
    text = "# id abc domain=zh\n北 _ _ B-LOC\n京 _ _ I-LOC\n"
    (s,) = parse_conll(text)
    assert s.id == "abc" and s.language == "ZH"
    assert s.tokens == ("北", "京")


@pytest.mark.parametrize(
    "text, line",
    [("tom B-PERSON", 1), ("a O\nb X-PER", 2), ("a O\nlonely", 2), ("a O\nb I-LOC", 2)],
)
def test_parse_errors_carry_line(text, line):
    with pytest.raises(CorpusError) as e:
        parse_conll(text)
    assert e.value.line == line


def test_extra_classes():
    with pytest.raises(CorpusError):
        parse_conll("x B-MED")
    assert parse_conll("x B-MED", extra_classes=["MED"])[0].labels == ("B-MED",)


def test_hash_token_is_not_a_header():
    d = Dataset([Sentence("0", ["#", "x"], ["O", "O"])])
    assert parse_conll(write_conll(d)) == d


def test_write_format():
    assert write_conll(Dataset()) == ""
    d = Dataset([Sentence("0", ["a"], ["O"])])
    assert write_conll(d) == "# id 0\na\tO\n"


def test_round_trip_fixture():
    d = random_corpus(np.random.default_rng(3), 100)
    text = write_conll(d)
    assert parse_conll(text, name="random") == d
    assert write_conll(parse_conll(text)) == text


token = st.text(alphabet=st.characters(blacklist_categories=("Cs", "Zs", "Zl", "Zp", "Cc")),
                min_size=1, max_size=4).filter(lambda t: not any(c.isspace() for c in t))


@st.composite
def sentences(draw, sid):
    n = draw(st.integers(1, 6))
    tokens = draw(st.lists(token, min_size=n, max_size=n))
    seed = draw(st.integers(0, 2**31))
    labels = random_labels(np.random.default_rng(seed), n)
    lang = draw(st.sampled_from(["UNK", "EN", "ZH", "MIX"]))
    return Sentence(str(sid), tokens, labels, lang)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 5).flatmap(lambda k: st.tuples(*[sentences(i) for i in range(k)])))
def test_round_trip_property(sents):
    d = Dataset(list(sents))
    assert parse_conll(write_conll(d)) == d


@pytest.mark.parametrize(
    "labels, expected",
    [(["O", "O", "O"], []), (["O", "I-PER"], [1]), (["B-PER", "I-LOC"], [1]), (["I-CW"], [0])],
)
def test_validate_bio(labels, expected):
    assert validate_bio(labels) == expected


def test_repair():
    assert repair_bio(["O", "I-PER"]) == ["O", "B-PER"]
    assert repair_bio(["B-PER", "I-LOC", "I-LOC"]) == ["B-PER", "B-LOC", "I-LOC"]


def test_extract_spans_examples():
    assert extract_spans(["O", "O"]) == []
    assert extract_spans(["B-PER", "I-PER", "O", "B-LOC"]) == [
        EntitySpan(0, 2, "PER"), EntitySpan(3, 4, "LOC")]
    assert extract_spans(["B-PER", "B-PER"]) == [EntitySpan(0, 1, "PER"), EntitySpan(1, 2, "PER")]
    with pytest.raises(BIOError):
        extract_spans(["O", "I-PER"])


def test_extract_spans_disjoint_sorted_and_match_oracle():
    rng = np.random.default_rng(0)
    for _ in range(300):
        labels = random_labels(rng, int(rng.integers(1, 15)))
        spans = extract_spans(labels)
        assert {(s.start, s.end, s.cls) for s in spans} == naive_spans(labels)
        for a, b in zip(spans, spans[1:]):
            assert a.end <= b.start


def _pred(labels_per_sentence):
    return PredictionSet([str(i) for i in range(len(labels_per_sentence))], labels_per_sentence)


def test_macro_half():
    gold = Dataset([Sentence("0", list("abcd"), ["B-PER", "I-PER", "O", "B-LOC"])])
    rep = macro_f1(gold, _pred([["B-PER", "I-PER", "O", "O"]]))
    assert rep.per_class["PER"].f1 == 1.0
    assert rep.per_class["LOC"].f1 == 0.0
    assert rep.macro_f1 == 0.5
    assert rep.per_class["LOC"].support == 1


def test_macro_identity_and_permutation():
    rng = np.random.default_rng(1)
    gold = random_corpus(rng, 30)
    assert macro_f1(gold, PredictionSet.from_dataset(gold)).macro_f1 == 1.0
    pred = noisy_predictions(gold, 0.3, rng)
    perm = rng.permutation(len(gold))
    g2 = Dataset([gold[i] for i in perm])
    p2 = PredictionSet([pred.ids[i] for i in perm], [pred.labels[i] for i in perm])
    assert macro_f1(gold, pred).macro_f1 == macro_f1(g2, p2).macro_f1


def test_macro_matches_naive_oracle():
    rng = np.random.default_rng(2)
    for _ in range(20):
        gold = random_corpus(rng, 20)
        pred = noisy_predictions(gold, 0.4, rng)
        rep = macro_f1(gold, pred)
        f1s, macro = naive_macro_f1([s.labels for s in gold], pred.labels)
        assert set(rep.per_class) == set(f1s)
        for c, v in f1s.items():
            assert rep.per_class[c].f1 == pytest.approx(v, abs=1e-15)
        assert rep.macro_f1 == pytest.approx(macro, abs=1e-15)


def test_misaligned():
    gold = Dataset([Sentence("0", ["a", "b"], ["O", "O"])])
    with pytest.raises(ValueError):
        macro_f1(gold, _pred([["O"]]))
    with pytest.raises(ValueError):
        macro_f1(gold, _pred([["O", "O"], ["O"]]))


def test_report_json():
    gold = Dataset([Sentence("0", list("abcd"), ["B-PER", "I-PER", "O", "B-LOC"])])
    rep = macro_f1(gold, _pred([["B-PER", "I-PER", "O", "O"]]))
    d = json.loads(rep.to_json())
    assert set(d) == {"per_class", "macro_f1"}
    assert d["macro_f1"] == 0.5
    assert EvalReport.from_dict(d).macro_f1 == 0.5


def test_duplicate_ids_rejected():
    with pytest.raises(CorpusError):
        parse_conll("# id x\na O\n\n# id x\nb O\n")
