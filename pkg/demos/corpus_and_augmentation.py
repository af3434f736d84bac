"""Parse a small CoNLL corpus, score a prediction and run each augmentation operator."""

from multiner.augment import MODES, AugmentConfig, augment_dataset
from multiner.corpus import PredictionSet, corpus_stats, extract_spans, macro_f1, parse_conll

TEXT = """# id zh-1 lang=ZH
张\tB-PER
伟\tI-PER
在\tO
北\tB-LOC
京\tI-LOC

# id en-1 lang=EN
alice\tB-PER
visited\tO
paris\tB-LOC

# id en-2 lang=EN
bosch\tB-CORP
hired\tO
bob\tB-PER
"""

corpus = parse_conll(TEXT, name="demo")
print("stats:", corpus_stats(corpus))
print("spans of zh-1:", extract_spans(corpus[0].labels))

# a prediction that misses the Paris mention
labels = [list(s.labels) for s in corpus]
labels[1][2] = "O"
report = macro_f1(corpus, PredictionSet([s.id for s in corpus], labels))
print("macro-F1 with one miss:", report.macro_f1)

for mode in MODES:
    out = augment_dataset(corpus, AugmentConfig(mode, max_len=12, seed=7))
    print(f"\n{mode}: {len(out)} sentences")
    for s in out:
        print("  ", s.id, " ".join(f"{t}/{lab}" for t, lab in zip(s.tokens, s.labels)))
