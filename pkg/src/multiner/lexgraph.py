"""Containing / transition / lattice graphs over characters and matched words.

Node layout for a sentence of ``n`` characters and ``m`` matches: nodes
``0..n-1`` are the characters in order, node ``n + k`` is ``matches[k]``.
Matrices are dense, symmetric 0/1 with empty diagonal; self-loops are only
added by :func:`normalize_adjacency`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

GRAPH_KINDS = ("C", "T", "L")


def _empty(matches, n_chars):
    size = n_chars + len(matches)
    return np.zeros((size, size), dtype=np.float64)


def _link(a, i, j):
    a[i, j] = a[j, i] = 1.0


def _char_chain(a, n_chars):
    for k in range(n_chars - 1):
        _link(a, k, k + 1)


def build_c_graph(matches, n_chars):
    """Each word node is linked to every character it covers."""
    a = _empty(matches, n_chars)
    for w, m in enumerate(matches):
        for k in range(m.start, m.end):
            _link(a, n_chars + w, k)
    return a


def build_t_graph(matches, n_chars, word_transitions=True):
    """Character chain, word to its neighbouring characters, and optionally
    word to word where one match ends exactly where another starts."""
    a = _empty(matches, n_chars)
    _char_chain(a, n_chars)
    for w, m in enumerate(matches):
        if m.start > 0:
            _link(a, n_chars + w, m.start - 1)
        if m.end < n_chars:
            _link(a, n_chars + w, m.end)
    if word_transitions:
        by_start = {}
        for w, m in enumerate(matches):
            by_start.setdefault(m.start, []).append(w)
        for w, m in enumerate(matches):
            for v in by_start.get(m.end, ()):
                _link(a, n_chars + w, n_chars + v)
    return a


def build_l_graph(matches, n_chars):
    """Character chain plus a shortcut from each word to its first and last character."""
    a = _empty(matches, n_chars)
    _char_chain(a, n_chars)
    for w, m in enumerate(matches):
        _link(a, n_chars + w, m.start)
        _link(a, n_chars + w, m.end - 1)
    return a


def normalize_adjacency(a):
    """Symmetric GCN normalisation ``D^-1/2 (A + I) D^-1/2``."""
    a = np.asarray(a, dtype=np.float64)
    a_hat = a + np.eye(a.shape[0])
    d_inv_sqrt = 1.0 / np.sqrt(a_hat.sum(axis=1))
    return a_hat * d_inv_sqrt[:, None] * d_inv_sqrt[None, :]


@dataclass
class LexGraphSet:
    n_chars: int
    n_words: int
    adj_c: np.ndarray
    adj_t: np.ndarray
    adj_l: np.ndarray

    def adjacency(self, kind: str) -> np.ndarray:
        return {"C": self.adj_c, "T": self.adj_t, "L": self.adj_l}[kind]

    @property
    def size(self):
        return self.n_chars + self.n_words


def build_graphs(matches, n_chars, word_transitions=True) -> LexGraphSet:
    return LexGraphSet(
        n_chars,
        len(matches),
        build_c_graph(matches, n_chars),
        build_t_graph(matches, n_chars, word_transitions),
        build_l_graph(matches, n_chars),
    )


def edge_list(a):
    rows, cols = np.nonzero(np.triu(a))
    return [[int(i), int(j)] for i, j in zip(rows, cols)]


def dump_graphs(chars, matches, words, word_transitions=True) -> dict:
    """JSON-ready node and edge lists for inspecting one sentence."""
    g = build_graphs(matches, len(chars), word_transitions)
    nodes = [{"id": i, "kind": "char", "text": c} for i, c in enumerate(chars)]
    nodes += [
        {"id": len(chars) + k, "kind": "word", "text": words[m.word_id], "start": m.start, "end": m.end}
        for k, m in enumerate(matches)
    ]
    return {
        "nodes": nodes,
        "edges": {kind: edge_list(g.adjacency(kind)) for kind in GRAPH_KINDS},
    }
