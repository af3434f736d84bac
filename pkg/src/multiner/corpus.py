"""CoNLL corpus handling, BIO utilities and entity-level macro-F1."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from typing import Iterable, Sequence

DEFAULT_CLASSES = ("LOC", "PER", "PROD", "GRP", "CORP", "CW")
DEFAULT_LANGUAGE = "UNK"
DEFAULT_SOURCE = "gold"

_TAG_RE = re.compile(r"^(?:O|([BI])-([A-Za-z0-9_]+))$")
_HEADER_RE = re.compile(r"^#\s+id\s+(\S+)(.*)$")


class CorpusError(ValueError):
    """Raised for malformed corpora. Carries the 1-based line number when known."""

    def __init__(self, message, line=None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class BIOError(ValueError):
    pass


def tag_class(tag: str) -> str | None:
    return None if tag == "O" else tag[2:]


def is_tag(tag: str, classes: Iterable[str] | None = None) -> bool:
    m = _TAG_RE.match(tag)
    if m is None:
        return False
    if m.group(2) is not None and classes is not None:
        return m.group(2) in classes
    return True


@dataclass(frozen=True)
class Sentence:
    id: str
    tokens: tuple[str, ...]
    labels: tuple[str, ...]
    language: str = DEFAULT_LANGUAGE
    source: str = DEFAULT_SOURCE

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))
        object.__setattr__(self, "labels", tuple(self.labels))
        if not self.id or any(c.isspace() for c in self.id):
            raise CorpusError(f"invalid sentence id {self.id!r}")
        if len(self.tokens) == 0:
            raise CorpusError(f"sentence {self.id!r} has no tokens")
        if len(self.tokens) != len(self.labels):
            raise CorpusError(
                f"sentence {self.id!r}: {len(self.tokens)} tokens vs {len(self.labels)} labels"
            )
        for tok in self.tokens:
            if not tok or any(c.isspace() for c in tok):
                raise CorpusError(f"sentence {self.id!r}: invalid token {tok!r}")
        for tag in self.labels:
            if not is_tag(tag):
                raise CorpusError(f"sentence {self.id!r}: malformed tag {tag!r}")

    def __len__(self):
        return len(self.tokens)

    def with_labels(self, labels) -> "Sentence":
        return Sentence(self.id, self.tokens, tuple(labels), self.language, self.source)

    def spans(self) -> list["EntitySpan"]:
        return extract_spans(self.labels)


@dataclass(frozen=True)
class Dataset:
    sentences: tuple[Sentence, ...] = ()
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "sentences", tuple(self.sentences))
        seen = set()
        for s in self.sentences:
            if s.id in seen:
                raise CorpusError(f"duplicate sentence id {s.id!r} in dataset {self.name!r}")
            seen.add(s.id)

    def __len__(self):
        return len(self.sentences)

    def __iter__(self):
        return iter(self.sentences)

    def __getitem__(self, i):
        return self.sentences[i]

    def languages(self) -> list[str]:
        out = []
        for s in self.sentences:
            if s.language not in out:
                out.append(s.language)
        return out

    def filter(self, pred, name=None) -> "Dataset":
        return Dataset([s for s in self.sentences if pred(s)], name or self.name)


@dataclass(frozen=True, order=True)
class EntitySpan:
    start: int
    end: int
    cls: str


@dataclass(frozen=True)
class PredictionSet:
    """Per-sentence predicted labels aligned with a dataset.

    ``scores`` holds the probability of the winning class for every token.
    ``dev_macro_f1`` ranks ensemble members when votes tie.
    """

    ids: tuple[str, ...]
    labels: tuple[tuple[str, ...], ...]
    scores: tuple[tuple[float, ...], ...] | None = None
    model_id: str = "model"
    dev_macro_f1: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "ids", tuple(self.ids))
        object.__setattr__(self, "labels", tuple(tuple(x) for x in self.labels))
        if self.scores is not None:
            object.__setattr__(self, "scores", tuple(tuple(float(v) for v in x) for x in self.scores))
            if [len(x) for x in self.scores] != [len(x) for x in self.labels]:
                raise ValueError("scores are not aligned with labels")
        if len(self.ids) != len(self.labels):
            raise ValueError("ids and labels differ in length")

    def __len__(self):
        return len(self.labels)

    @property
    def lengths(self) -> tuple[int, ...]:
        return tuple(len(x) for x in self.labels)

    @classmethod
    def from_dataset(cls, d: Dataset, model_id="gold", dev_macro_f1=0.0) -> "PredictionSet":
        return cls(
            [s.id for s in d],
            [s.labels for s in d],
            [[1.0] * len(s) for s in d],
            model_id=model_id,
            dev_macro_f1=dev_macro_f1,
        )

    def to_dataset(self, reference: Dataset, name=None) -> Dataset:
        check_aligned(reference, self)
        return Dataset(
            [s.with_labels(lab) for s, lab in zip(reference, self.labels)],
            name if name is not None else self.model_id,
        )


# --------------------------------------------------------------------------- #
# Parsing and writing


def _parse_header(rest: str):
    language, source = DEFAULT_LANGUAGE, DEFAULT_SOURCE
    for item in rest.split():
        key, sep, value = item.partition("=")
        if not sep:
            continue
        if key in ("lang", "domain"):
            language = value.upper()
        elif key == "source":
            source = value
    return language, source


def parse_conll(text: str, name: str = "", classes: Iterable[str] | None = DEFAULT_CLASSES,
                extra_classes: Iterable[str] = (), language: str | None = None) -> Dataset:
    """Parse CoNLL text into a :class:`Dataset`.

    Blocks are separated by blank lines. A ``# id <id>`` header may open a
    block (``lang=``/``domain=`` and ``source=`` keys are read from it).
    Token lines carry the token in the first column and the tag in the last;
    any middle columns are ignored. ``classes=None`` accepts any class name.
    ``language`` overrides the language of every sentence without a header
    language.
    """
    allowed = None if classes is None else set(classes) | set(extra_classes)
    sentences = []
    block = _Block()

    def flush():
        if block.tokens:
            sid = block.id if block.id is not None else str(len(sentences))
            lang = block.language
            if lang == DEFAULT_LANGUAGE and language is not None:
                lang = language
            sent = Sentence(sid, block.tokens, block.labels, lang, block.source)
            bad = validate_bio(sent)
            if bad:
                raise CorpusError(
                    f"illegal BIO continuation {sent.labels[bad[0]]!r}", block.lines[bad[0]]
                )
            sentences.append(sent)
        elif block.id is not None:
            raise CorpusError("header without tokens", block.header_line)
        block.reset()

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            flush()
            continue
        if line.startswith("#") and not block.tokens:
            m = _HEADER_RE.match(line)
            cols = line.split()
            looks_like_token = len(cols) >= 2 and is_tag(cols[-1]) and m is None
            if not looks_like_token:
                if m is not None:
                    if block.id is not None:
                        raise CorpusError("second id header in one block", lineno)
                    block.id = m.group(1)
                    block.header_line = lineno
                    block.language, block.source = _parse_header(m.group(2))
                continue
        cols = line.split()
        if len(cols) < 2:
            raise CorpusError(f"expected at least 2 columns, got {len(cols)}", lineno)
        tag = cols[-1]
        if not is_tag(tag, allowed):
            raise CorpusError(f"malformed tag {tag!r}", lineno)
        block.tokens.append(cols[0])
        block.labels.append(tag)
        block.lines.append(lineno)
    flush()
    try:
        return Dataset(sentences, name)
    except CorpusError as e:
        raise CorpusError(str(e)) from None


class _Block:
    def __init__(self):
        self.reset()

    def reset(self):
        self.id = None
        self.header_line = None
        self.language = DEFAULT_LANGUAGE
        self.source = DEFAULT_SOURCE
        self.tokens = []
        self.labels = []
        self.lines = []


def write_conll(d: Dataset | Iterable[Sentence]) -> str:
    chunks = []
    for s in d:
        header = f"# id {s.id}"
        if s.language != DEFAULT_LANGUAGE:
            header += f" lang={s.language}"
        if s.source != DEFAULT_SOURCE:
            header += f" source={s.source}"
        lines = [header] + [f"{t}\t{lab}" for t, lab in zip(s.tokens, s.labels)]
        chunks.append("\n".join(lines) + "\n")
    return "\n".join(chunks)


def read_conll(path, **kwargs) -> Dataset:
    with open(path, encoding="utf-8") as f:
        return parse_conll(f.read(), **kwargs)


def save_conll(d: Dataset, path):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(write_conll(d))


# --------------------------------------------------------------------------- #
# BIO


def validate_bio(s: Sentence | Sequence[str]) -> list[int]:
    """Indices where an ``I-X`` tag does not continue an ``X`` entity."""
    labels = s.labels if isinstance(s, Sentence) else s
    bad = []
    prev = None
    for i, tag in enumerate(labels):
        if tag.startswith("I-") and prev != tag[2:]:
            bad.append(i)
        prev = tag_class(tag)
    return bad


def repair_bio(labels: Sequence[str]) -> list[str]:
    """Rewrite every illegal ``I-X`` to ``B-X``."""
    out = list(labels)
    prev = None
    for i, tag in enumerate(out):
        if tag.startswith("I-") and prev != tag[2:]:
            out[i] = "B-" + tag[2:]
        prev = tag_class(out[i])
    return out


def extract_spans(labels: Sequence[str]) -> list[EntitySpan]:
    bad = validate_bio(labels)
    if bad:
        raise BIOError(f"invalid BIO at positions {bad}")
    spans = []
    start = None
    cls = None
    for i, tag in enumerate(labels):
        if tag.startswith("I-"):
            continue
        if start is not None:
            spans.append(EntitySpan(start, i, cls))
            start = None
        if tag.startswith("B-"):
            start, cls = i, tag[2:]
    if start is not None:
        spans.append(EntitySpan(start, len(labels), cls))
    return spans


# --------------------------------------------------------------------------- #
# Evaluation


@dataclass
class ClassScore:
    precision: float
    recall: float
    f1: float
    support: int


@dataclass
class EvalReport:
    per_class: dict[str, ClassScore] = field(default_factory=dict)
    macro_f1: float = 0.0

    def to_dict(self) -> dict:
        return {
            "per_class": {
                c: {
                    "precision": round(v.precision, 6),
                    "recall": round(v.recall, 6),
                    "f1": round(v.f1, 6),
                    "support": v.support,
                }
                for c, v in sorted(self.per_class.items())
            },
            "macro_f1": round(self.macro_f1, 6),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        per = {
            c: ClassScore(v["precision"], v["recall"], v["f1"], int(v["support"]))
            for c, v in d["per_class"].items()
        }
        return cls(per, float(d["macro_f1"]))


def check_aligned(gold: Dataset, pred: PredictionSet):
    if len(gold) != len(pred):
        raise ValueError(f"prediction has {len(pred)} sentences, gold has {len(gold)}")
    for i, (s, lab) in enumerate(zip(gold, pred.labels)):
        if len(s) != len(lab):
            raise ValueError(
                f"sentence {i} ({s.id!r}): prediction length {len(lab)} != gold length {len(s)}"
            )


def score_label_sequences(gold_seqs, pred_seqs) -> EvalReport:
    """Exact-match span scoring over aligned label sequences."""
    tp, fp, fn = {}, {}, {}
    for g, p in zip(gold_seqs, pred_seqs):
        gs = set(extract_spans(g))
        ps = set(extract_spans(p))
        for sp in gs & ps:
            tp[sp.cls] = tp.get(sp.cls, 0) + 1
        for sp in ps - gs:
            fp[sp.cls] = fp.get(sp.cls, 0) + 1
        for sp in gs - ps:
            fn[sp.cls] = fn.get(sp.cls, 0) + 1
    classes = sorted(set(tp) | set(fp) | set(fn))
    per_class = {}
    for c in classes:
        t, f_p, f_n = tp.get(c, 0), fp.get(c, 0), fn.get(c, 0)
        prec = t / (t + f_p) if t + f_p else 0.0
        rec = t / (t + f_n) if t + f_n else 0.0
        f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
        per_class[c] = ClassScore(prec, rec, f1, t + f_n)
    macro = sum(v.f1 for v in per_class.values()) / len(per_class) if per_class else 0.0
    return EvalReport(per_class, macro)


def macro_f1(gold: Dataset, pred: PredictionSet | Dataset) -> EvalReport:
    if isinstance(pred, Dataset):
        pred = PredictionSet.from_dataset(pred)
    check_aligned(gold, pred)
    return score_label_sequences([s.labels for s in gold], pred.labels)


def token_accuracy(gold: Dataset, pred: PredictionSet) -> float:
    check_aligned(gold, pred)
    total = sum(len(s) for s in gold)
    hits = sum(a == b for s, lab in zip(gold, pred.labels) for a, b in zip(s.labels, lab))
    return hits / total if total else 0.0


def corpus_stats(d: Dataset) -> dict:
    per_lang = {}
    per_class = {}
    for s in d:
        per_lang[s.language] = per_lang.get(s.language, 0) + 1
        for sp in extract_spans(s.labels):
            per_class[sp.cls] = per_class.get(sp.cls, 0) + 1
    return {
        "sentences": len(d),
        "tokens": sum(len(s) for s in d),
        "languages": dict(sorted(per_lang.items())),
        "entities": dict(sorted(per_class.items())),
    }
