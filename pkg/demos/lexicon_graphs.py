"""Match lexicon words inside a Chinese sentence and inspect the three word-character graphs."""

import numpy as np

from multiner.lexgraph import build_graphs, normalize_adjacency
from multiner.lexicon import Lexicon, match_spans

words = ["南京", "南京市", "市长", "长江", "长江大桥", "大桥"]
lex = Lexicon(words, np.random.default_rng(0).normal(size=(len(words), 4)), 4)
chars = list("南京市长江大桥")

matches = match_spans(lex, chars)
for m in matches:
    print(f"{words[m.word_id]:6s} chars {m.start}..{m.end - 1}")

graphs = build_graphs(matches, len(chars))
for kind in "CTL":
    a = graphs.adjacency(kind)
    print(f"\n{kind}-graph: {int(a.sum()) // 2} edges over {len(a)} nodes")
    a_hat = normalize_adjacency(a)
    print("row sums of the normalised matrix:", np.round(a_hat.sum(axis=1), 3))
