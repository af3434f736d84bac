"""Train the toy tagger plain, with each adversarial method and with R-Drop."""

import time

from multiner import model as M
from multiner.synthetic import synthetic_corpus, synthetic_lexicon

train = synthetic_corpus(60, seed=1, languages=("EN", "ZH"))
dev = synthetic_corpus(20, seed=2, languages=("EN", "ZH"))
lexicon = synthetic_lexicon(dim=8)

variants = {
    "plain": {},
    "FGM": {"adversarial": {"method": "FGM"}},
    "PGD": {"adversarial": {"method": "PGD"}},
    "FreeLB": {"adversarial": {"method": "FreeLB"}},
    "R-Drop": {"rdrop": True},
}
for name, extra in variants.items():
    cfg = M.build_vocab([train, dev], hidden=32, word_dim=lexicon.dim, adapter=True, gcn=True)
    t0 = time.perf_counter()
    res = M.train(train, cfg, M.TrainConfig(epochs=25, batch_size=8, **extra), dev=dev, lexicon=lexicon)
    acc = M.token_accuracy(res.params, cfg, dev, lexicon)
    best = max(r.dev_macro_f1 for r in res.history)
    print(f"{name:7s} dev macro-F1 {best:.3f}  dev token acc {acc:.3f}  ({time.perf_counter() - t0:.1f}s)")
