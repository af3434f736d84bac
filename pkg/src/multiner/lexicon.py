"""Word-embedding lexicon with a prefix trie for self-matched word lookup."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

MIN_MATCH_LEN = 2
# Word ends are stored under the empty-string key, which no character can
# collide with and which survives pickling.
_END = ""
_MISSING = object()


class LexiconError(ValueError):
    def __init__(self, message, line=None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class Trie:
    """Character trie; each node is a dict, a word end is marked by a sentinel key."""

    def __init__(self, words=()):
        self.root = {}
        self._size = 0
        for i, w in enumerate(words):
            self.insert(w, i)

    def insert(self, word: str, value) -> None:
        node = self.root
        for ch in word:
            node = node.setdefault(ch, {})
        if _END not in node:
            self._size += 1
        node[_END] = value

    def get(self, word: str, default=None):
        node = self.root
        for ch in word:
            node = node.get(ch)
            if node is None:
                return default
        return node.get(_END, default)

    def __contains__(self, word):
        return self.get(word, _MISSING) is not _MISSING

    def __len__(self):
        return self._size

    def words(self):
        stack = [("", self.root)]
        while stack:
            prefix, node = stack.pop()
            for key, child in node.items():
                if key == _END:
                    yield prefix
                else:
                    stack.append((prefix + key, child))


@dataclass(frozen=True)
class MatchedSpan:
    start: int
    end: int
    word_id: int

    def __len__(self):
        return self.end - self.start


class Lexicon:
    def __init__(self, words: Sequence[str], vectors, dim: int | None = None, oov_seed: int = 42):
        self.words = list(words)
        vectors = np.asarray(vectors, dtype=np.float64)
        if dim is None:
            dim = vectors.shape[1] if vectors.ndim == 2 and len(self.words) else 0
        self.dim = dim
        self.vectors = vectors.reshape(len(self.words), dim)
        self.index = {w: i for i, w in enumerate(self.words)}
        if len(self.index) != len(self.words):
            raise LexiconError("lexicon words must be unique")
        self.trie = Trie(self.words)
        self.oov_vector = np.random.default_rng(oov_seed).normal(0.0, 0.1, size=dim)

    def __len__(self):
        return len(self.words)

    def __contains__(self, word):
        return word in self.index

    def vector(self, word: str) -> np.ndarray:
        """Vector for ``word``; unknown words share one seeded random row."""
        i = self.index.get(word)
        return self.oov_vector if i is None else self.vectors[i]

    def subset(self, words) -> "Lexicon":
        wanted = set(words)
        keep = [w for w in self.words if w in wanted]
        rows = self.vectors[[self.index[w] for w in keep]] if keep else np.zeros((0, self.dim))
        return Lexicon(keep, rows, self.dim)


def load_embeddings(text: str) -> tuple[Lexicon, int]:
    """Parse word2vec-style text vectors.

    Returns the lexicon and the number of duplicate lines skipped (the first
    occurrence of a word wins).
    """
    lines = text.splitlines()
    words, rows = [], []
    seen = set()
    duplicates = 0
    dim = None
    start = 0
    if lines:
        head = lines[0].split()
        if len(head) == 2 and all(p.isdigit() for p in head):
            dim = int(head[1])
            start = 1
    for lineno in range(start, len(lines)):
        parts = lines[lineno].rstrip("\n").split(" ")
        parts = [p for p in parts if p != ""]
        if not parts:
            continue
        word, comps = parts[0], parts[1:]
        if dim is None:
            dim = len(comps)
        if len(comps) != dim or dim == 0:
            raise LexiconError(f"expected {dim} components, got {len(comps)}", lineno + 1)
        try:
            vec = [float(c) for c in comps]
        except ValueError:
            raise LexiconError("non-numeric vector component", lineno + 1) from None
        if not np.all(np.isfinite(vec)):
            raise LexiconError("non-finite vector component", lineno + 1)
        if word in seen:
            duplicates += 1
            continue
        seen.add(word)
        words.append(word)
        rows.append(vec)
    dim = dim or 0
    vectors = np.array(rows, dtype=np.float64).reshape(len(words), dim)
    return Lexicon(words, vectors, dim), duplicates


def read_embeddings(path) -> tuple[Lexicon, int]:
    with open(path, encoding="utf-8") as f:
        return load_embeddings(f.read())


def write_embeddings(lex: Lexicon) -> str:
    lines = [f"{len(lex)} {lex.dim}"]
    for w, v in zip(lex.words, lex.vectors):
        lines.append(w + " " + " ".join(repr(float(x)) for x in v))
    return "\n".join(lines) + "\n"


def match_spans(lex: Lexicon, chars: Sequence[str], min_len: int = MIN_MATCH_LEN) -> list[MatchedSpan]:
    """All lexicon words occurring as contiguous spans of ``chars``.

    ``chars`` may hold multi-character tokens; a word then matches when it
    equals the concatenation of whole tokens. Spans shorter than ``min_len``
    units are skipped. Output is sorted by ``(start, end)``.
    """
    out = []
    root = lex.trie.root
    n = len(chars)
    for i in range(n):
        node = root
        for j in range(i, n):
            for ch in chars[j]:
                node = node.get(ch)
                if node is None:
                    break
            if node is None:
                break
            if j + 1 - i >= min_len and _END in node:
                out.append(MatchedSpan(i, j + 1, node[_END]))
    return out


def char_word_index(matches: Sequence[MatchedSpan], n_chars: int) -> list[list[int]]:
    """For every position, the word ids of the matches covering it, in match order."""
    out = [[] for _ in range(n_chars)]
    for m in matches:
        for k in range(m.start, m.end):
            out[k].append(m.word_id)
    return out


def cap_matches_per_char(matches: Sequence[MatchedSpan], n_chars: int, max_words: int) -> list[list[int]]:
    """Like :func:`char_word_index` but keeps at most ``max_words`` match
    indices per position, longest spans first (ties by start)."""
    out = [[] for _ in range(n_chars)]
    order = sorted(range(len(matches)), key=lambda k: (-len(matches[k]), matches[k].start, k))
    for k in order:
        m = matches[k]
        for pos in range(m.start, m.end):
            if len(out[pos]) < max_words:
                out[pos].append(k)
    return out


def coverage(lex: Lexicon, sentences) -> dict:
    """How much of a corpus the lexicon reaches through self-matched words."""
    n_sent = n_tok = n_cov = n_match = 0
    hit_sent = 0
    for s in sentences:
        matches = match_spans(lex, s.tokens)
        covered = sum(1 for ids in char_word_index(matches, len(s)) if ids)
        n_sent += 1
        n_tok += len(s)
        n_cov += covered
        n_match += len(matches)
        hit_sent += bool(matches)
    return {
        "sentences": n_sent,
        "tokens": n_tok,
        "matched_words": n_match,
        "covered_tokens": n_cov,
        "token_coverage": round(n_cov / n_tok, 6) if n_tok else 0.0,
        "sentences_with_match": hit_sent,
    }
