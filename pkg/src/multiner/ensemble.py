"""Token-level voting across models and unanimous pseudo-label selection."""

from __future__ import annotations

import json
from collections import Counter

import numpy as np

from .corpus import CorpusError, Dataset, PredictionSet, Sentence, repair_bio

PSEUDO_PREFIX = "pseudo-"


class EnsembleError(ValueError):
    pass


def check_mutually_aligned(preds):
    if not preds:
        raise EnsembleError("need at least one prediction set")
    first = preds[0]
    for p in preds[1:]:
        if p.ids != first.ids or p.lengths != first.lengths:
            raise EnsembleError(f"prediction sets {first.model_id!r} and {p.model_id!r} are not aligned")


def by_priority(preds):
    """Highest dev macro-F1 first; input order breaks equal scores."""
    order = sorted(range(len(preds)), key=lambda i: (-preds[i].dev_macro_f1, i))
    return [preds[i] for i in order]


def vote(preds, model_id="vote") -> PredictionSet:
    """Per-token majority vote; ties go to the best-ranked model among the tied labels.

    The voted sequence is BIO-repaired. Each token's score is the fraction of
    models that agreed with the final label.
    """
    preds = list(preds)
    check_mutually_aligned(preds)
    ranked = by_priority(preds)
    labels, scores = [], []
    for s in range(len(preds[0])):
        seq = []
        for t in range(preds[0].lengths[s]):
            counts = Counter(p.labels[s][t] for p in ranked)
            top = max(counts.values())
            tied = {lab for lab, c in counts.items() if c == top}
            seq.append(next(p.labels[s][t] for p in ranked if p.labels[s][t] in tied))
        seq = repair_bio(seq)
        labels.append(tuple(seq))
        scores.append(tuple(sum(p.labels[s][t] == lab for p in preds) / len(preds)
                            for t, lab in enumerate(seq)))
    return PredictionSet(preds[0].ids, labels, scores, model_id,
                         max(p.dev_macro_f1 for p in preds))


def select_pseudo(preds, unlabeled: Dataset, name="pseudo") -> Dataset:
    """Sentences whose full label sequence is identical across every model."""
    preds = list(preds)
    if len(preds) < 2:
        raise EnsembleError("pseudo-label selection needs at least two prediction sets")
    check_mutually_aligned(preds)
    if tuple(s.id for s in unlabeled) != preds[0].ids:
        raise EnsembleError("predictions are not aligned with the unlabeled dataset")
    out = []
    for i, s in enumerate(unlabeled):
        first = preds[0].labels[i]
        if all(p.labels[i] == first for p in preds[1:]):
            out.append(Sentence(s.id, s.tokens, first, s.language, "pseudo"))
    return Dataset(out, name)


def merge_for_finetune(train: Dataset, pseudo: Dataset, pseudo_fraction: float = 1.0,
                       seed: int = 42, name=None) -> Dataset:
    """Train set followed by (a capped, seeded subsample of) the pseudo set.

    Pseudo ids get a ``pseudo-`` prefix unless they already carry it, and
    every pseudo sentence is tagged ``source=pseudo``.
    """
    if not 0.0 <= pseudo_fraction <= 1.0:
        raise EnsembleError("pseudo_fraction must lie in [0, 1]")
    items = list(pseudo)
    cap = min(len(items), int(np.floor(pseudo_fraction * len(train) + 1e-9)))
    if cap < len(items):
        keep = np.sort(np.random.default_rng(seed).choice(len(items), size=cap, replace=False))
        items = [items[i] for i in keep]
    tagged = []
    for s in items:
        sid = s.id if s.id.startswith(PSEUDO_PREFIX) else PSEUDO_PREFIX + s.id
        tagged.append(Sentence(sid, s.tokens, s.labels, s.language, "pseudo"))
    train_ids = {s.id for s in train}
    clash = [s.id for s in tagged if s.id in train_ids]
    if clash:
        raise EnsembleError(f"pseudo ids collide with training ids: {clash[:3]}")
    try:
        return Dataset(list(train) + tagged, name or train.name)
    except CorpusError as e:
        raise EnsembleError(str(e)) from None


# --------------------------------------------------------------------------- #
# Prediction files: CoNLL labels plus a JSON sidecar


def sidecar_json(pred: PredictionSet) -> str:
    return json.dumps({"model_id": pred.model_id, "dev_macro_f1": pred.dev_macro_f1},
                      sort_keys=True) + "\n"


def load_prediction(dataset: Dataset, sidecar: dict | None = None) -> PredictionSet:
    sidecar = sidecar or {}
    return PredictionSet(
        [s.id for s in dataset],
        [s.labels for s in dataset],
        None,
        sidecar.get("model_id", dataset.name or "model"),
        float(sidecar.get("dev_macro_f1", 0.0)),
    )
