"""Fixtures shared by the model, adversarial and acceptance tests."""

import numpy as np

from multiner import compute as C
from multiner import model as M
from multiner.corpus import Dataset
from multiner.lexicon import Lexicon
from multiner.synthetic import ZH_ENTITIES, synthetic_corpus
from oracles import central_differences, max_rel_error

SMALL_CLASSES = ("PER", "LOC")


def tiny_lexicon(dim=3, seed=0):
    words = sorted({w for c in SMALL_CLASSES for w in ZH_ENTITIES[c]})
    return Lexicon(words, np.random.default_rng(seed).normal(size=(len(words), dim)), dim)


def micro_batch(seed):
    """Three short sentences (two Chinese, one English) with lexicon matches."""
    d = synthetic_corpus(3, seed=seed, languages=("ZH", "EN", "ZH"), max_entities=1,
                         max_filler=1, classes=SMALL_CLASSES)
    return Dataset(list(d), "micro")


def full_config(data, **kw):
    base = dict(hidden=4, word_dim=3, adapter=True, gcn=True, gcn_layers=1, pfe_sfe=True,
                max_positions=8, dropout=0.2, rdrop_alpha=0.3, pfe_lambda=0.7)
    base.update(kw)
    return M.build_vocab([data], classes=SMALL_CLASSES, **base)


def full_model_grad_error(seed, eps=1e-5):
    """Max relative error of tape gradients for the full model with R-Drop.

    Gradient reversal makes the tape gradient differ from the derivative of
    the loss, so the numerical side differentiates the explicit equivalent:
    ``tag - lambda * disc`` for tensors upstream of the reversal and
    ``tag + disc`` for the discriminator's own tensors.
    """
    data = micro_batch(seed)
    lex = tiny_lexicon()
    cfg = full_config(data, init_seed=seed)
    params = M.init_params(cfg)
    rng = np.random.default_rng([seed, 99])
    for p in params.values():
        p.values += rng.normal(0.0, 0.1, size=p.shape)
    batch = M.batch_sentences(list(data), cfg, lex)
    mrng = np.random.default_rng(seed)
    masks = [M.make_masks(cfg, batch.n, mrng), M.make_masks(cfg, batch.n, mrng)]

    for p in params.values():
        p.zero_grad()
    with C.Tape() as tape:
        res = M.compute_loss(params, cfg, batch, masks, rdrop=True)
        tape.backward(res.loss)

    def parts():
        fs = [M.forward(params, cfg, batch, m) for m in masks]
        tag = sum(C.cross_entropy(f.logits, batch.label_ids).item() for f in fs) / 2
        disc = sum(C.cross_entropy(f.disc_logits, batch.lang_ids).item() for f in fs) / 2
        kl = M.symmetric_kl(C.softmax(fs[0].logits), C.softmax(fs[1].logits)).item()
        return tag + cfg.rdrop_alpha * kl, disc

    def upstream():
        tag, disc = parts()
        return tag - cfg.pfe_lambda * disc

    def downstream():
        tag, disc = parts()
        return tag + disc

    disc_names = [k for k in params if k.startswith("disc_")]
    other = [k for k in params if k not in disc_names]
    num = central_differences(upstream, [params[k].values for k in other], eps)
    num += central_differences(downstream, [params[k].values for k in disc_names], eps)
    ana = [params[k].grad for k in other + disc_names]
    return max_rel_error(ana, num)
