"""Vote over noisy taggers and keep the sentences they all agree on."""

import numpy as np

from multiner.corpus import macro_f1
from multiner.ensemble import merge_for_finetune, select_pseudo, vote
from multiner.synthetic import noisy_predictions, random_corpus

rng = np.random.default_rng(0)
gold = random_corpus(rng, 300, max_len=5)
members = [noisy_predictions(gold, 0.2, rng, model_id=f"m{i}", dev_macro_f1=0.5 + 0.1 * i) for i in range(5)]

for p in members:
    print(f"{p.model_id}: macro-F1 {macro_f1(gold, p).macro_f1:.3f}")
print(f"vote: macro-F1 {macro_f1(gold, vote(members)).macro_f1:.3f}")

pseudo = select_pseudo(members, gold)
truth = {s.id: s.labels for s in gold}
correct = sum(s.labels == truth[s.id] for s in pseudo)
print(f"\n{len(pseudo)} of {len(gold)} sentences are unanimous; {correct} of them are fully correct")

train = random_corpus(rng, 100, id_prefix="t")
merged = merge_for_finetune(train, pseudo, pseudo_fraction=0.5, seed=1)
print(f"fine-tuning set: {len(train)} gold + {len(merged) - len(train)} pseudo sentences")
