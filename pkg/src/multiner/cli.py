"""Command-line entry point: ``multiner <subcommand> ...``.

Exit codes: 0 on success, 1 on invalid input (bad flags, missing files,
malformed corpora or configs), 2 when a run fails at runtime.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from importlib import resources
from pathlib import Path

from .adversarial import AdversarialError
from .augment import AugmentConfig, AugmentError, augment_dataset
from .corpus import (
    DEFAULT_CLASSES,
    BIOError,
    CorpusError,
    corpus_stats,
    macro_f1,
    read_conll,
    save_conll,
)
from .ensemble import EnsembleError, load_prediction, merge_for_finetune, select_pseudo, vote
from .lexgraph import dump_graphs
from .lexicon import LexiconError, coverage, match_spans, read_embeddings
from .model import ModelError, TrainConfig, build_vocab, load_model, predict, save_model, train
from .pipeline import ConfigError, load_pipeline_config, read_predictions, run_pipeline, write_predictions

logger = logging.getLogger("multiner")

VALIDATION_ERRORS = (CorpusError, BIOError, LexiconError, AugmentError, ModelError, AdversarialError,
                     EnsembleError, ConfigError, FileNotFoundError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _emit(obj, out=None):
    text = json.dumps(obj, indent=1, sort_keys=True, ensure_ascii=False) + "\n"
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def load_json(path) -> dict:
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}:{e.lineno}: {e.msg}") from None


def _classes(args):
    return dict(classes=tuple(args.classes) if args.classes else DEFAULT_CLASSES)


def _read(path, args, name=None):
    try:
        return read_conll(path, name=name or Path(path).stem, **_classes(args))
    except (CorpusError, BIOError) as e:
        raise type(e)(f"{path}: {e}") from None


def _lexicon(args):
    if not getattr(args, "lexicon", None):
        return None
    lex, dup = read_embeddings(args.lexicon)
    if dup:
        logger.warning("%s: skipped %d duplicate words", args.lexicon, dup)
    return lex


# --------------------------------------------------------------------------- #
# Subcommands


def cmd_ingest(args):
    d = _read(args.corpus, args)
    _emit(corpus_stats(d), args.stats)
    if args.output:
        save_conll(d, args.output)


def cmd_augment(args):
    conf = load_json(args.config) if args.config else {}
    for key in ("mode", "max_len", "rate", "seed"):
        value = getattr(args, key)
        if value is not None:
            conf[key] = value
    cfg = AugmentConfig.from_dict(conf)
    out = augment_dataset(_read(args.corpus, args), cfg)
    save_conll(out, args.output)
    logger.info("%s: %d sentences written", args.output, len(out))


def cmd_lexicon(args):
    lex, dup = read_embeddings(args.lexicon)
    report = {"words": len(lex), "dim": lex.dim, "duplicates": dup}
    if args.corpus:
        report["coverage"] = coverage(lex, _read(args.corpus, args))
    _emit(report, args.output)


def cmd_graph(args):
    lex = _lexicon(args)
    if args.text is not None:
        chars = args.text.split() if " " in args.text.strip() else list(args.text.strip())
    else:
        d = _read(args.corpus, args)
        match = [s for s in d if s.id == args.id]
        if not match:
            raise ConfigError(f"no sentence with id {args.id!r} in {args.corpus}")
        chars = list(match[0].tokens)
    if not chars:
        raise ConfigError("graph dump needs a non-empty sentence")
    matches = match_spans(lex, chars)
    _emit(dump_graphs(chars, matches, lex.words, not args.no_word_transitions), args.output)


def _train_settings(args):
    conf = load_json(args.config) if args.config else {}
    extra = set(conf) - {"model", "train"}
    if extra:
        raise ConfigError(f"{args.config}: unknown keys {sorted(extra)} (expected 'model' and 'train')")
    model = dict(conf.get("model", {}))
    tc = dict(conf.get("train", {}))
    for flag, key in (("epochs", "epochs"), ("lr", "lr"), ("batch_size", "batch_size"), ("seed", "seed")):
        value = getattr(args, flag)
        if value is not None:
            tc[key] = value
    if args.rdrop:
        tc["rdrop"] = True
    if args.adversarial:
        tc["adversarial"] = dict(tc.get("adversarial") or {}, method=args.adversarial)
    if args.augment:
        tc["augment"] = list(tc.get("augment", [])) + [{"mode": m} for m in args.augment]
    for flag in ("adapter", "gcn", "pfe_sfe"):
        if getattr(args, flag):
            model[flag] = True
    if args.hidden is not None:
        model["hidden"] = args.hidden
    return model, tc


def cmd_train(args):
    model, tc = _train_settings(args)
    train_data = _read(args.train, args, "train")
    dev = _read(args.dev, args, "dev") if args.dev else None
    lex = _lexicon(args)
    if lex is not None:
        model.setdefault("word_dim", lex.dim)
    cfg = build_vocab([train_data] + ([dev] if dev is not None else []), **_classes(args), **model)
    init = load_model(args.init)[0] if args.init else None
    result = train(train_data, cfg, TrainConfig.from_dict(tc), dev=dev, lexicon=lex, init=init)
    save_model(args.output, result.params, cfg, result)
    logger.info("best epoch %d, checkpoint in %s", result.best_epoch, args.output)


def _best_dev(model_dir) -> float:
    metrics = Path(model_dir) / "metrics.csv"
    if not metrics.exists():
        return 0.0
    rows = metrics.read_text(encoding="utf-8").splitlines()[1:]
    scores = [float(r.split(",")[2]) for r in rows]
    scores = [s for s in scores if not math.isnan(s)]
    return max(scores) if scores else 0.0


def cmd_predict(args):
    params, cfg = load_model(args.model)
    d = _read(args.input, args)
    model_id = args.model_id or Path(args.model).name
    pred = predict(params, cfg, d, _lexicon(args), args.batch_size, model_id, _best_dev(args.model))
    write_predictions(args.output, pred, d)


def _prediction(path):
    path = Path(path)
    if path.is_dir():
        return read_predictions(path)
    return load_prediction(read_conll(path, name=path.stem))


def cmd_eval(args):
    gold = _read(args.gold, args)
    pred = _prediction(args.pred)
    _emit(macro_f1(gold, pred).to_dict(), args.output)


def cmd_vote(args):
    preds = [read_predictions(p) for p in args.predictions]
    reference = read_conll(Path(args.predictions[0]) / "predictions.conll")
    write_predictions(args.output, vote(preds, model_id=args.model_id), reference)


def cmd_pseudo(args):
    preds = [read_predictions(p) for p in args.predictions]
    unlabeled = _read(args.unlabeled, args)
    pseudo = select_pseudo(preds, unlabeled)
    save_conll(pseudo, args.output)
    logger.info("%d of %d sentences selected", len(pseudo), len(unlabeled))
    if args.merged:
        if not args.train:
            raise ConfigError("--merged needs --train")
        merged = merge_for_finetune(_read(args.train, args), pseudo, args.fraction, args.seed)
        save_conll(merged, args.merged)


def bundled_fixture() -> Path:
    return Path(str(resources.files("multiner") / "data"))


def cmd_pipeline(args):
    if bool(args.config) == bool(args.fixture):
        raise ConfigError("pipeline needs exactly one of --config or --fixture")
    path = bundled_fixture() / "pipeline.json" if args.fixture else Path(args.config)
    cfg = load_pipeline_config(path)
    records = run_pipeline(cfg, args.output)
    _emit({"stages": [{"name": r.name, "macro_f1": r.macro_f1, "directory": r.directory,
                       "skipped": r.skipped} for r in records]})


# --------------------------------------------------------------------------- #


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="multiner", description="Multilingual NER toolkit")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def command(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.set_defaults(func=fn)
        sp.add_argument("--classes", nargs="+", help="entity classes (default: the six standard ones)")
        return sp

    sp = command("ingest", cmd_ingest, "parse and validate a CoNLL corpus, print statistics")
    sp.add_argument("corpus")
    sp.add_argument("-o", "--output", help="write the normalised corpus here")
    sp.add_argument("--stats", help="write statistics JSON here instead of stdout")

    sp = command("augment", cmd_augment, "apply an augmentation operator")
    sp.add_argument("corpus")
    sp.add_argument("-o", "--output", required=True)
    sp.add_argument("--config", help="JSON with mode, max_len, rate, seed")
    sp.add_argument("--mode")
    sp.add_argument("--max-len", dest="max_len", type=int)
    sp.add_argument("--rate", type=float)
    sp.add_argument("--seed", type=int)

    sp = command("lexicon", cmd_lexicon, "load embeddings and report corpus coverage")
    sp.add_argument("--lexicon", required=True)
    sp.add_argument("corpus", nargs="?")
    sp.add_argument("-o", "--output")

    sp = command("graph", cmd_graph, "inspect lexicon graphs")
    sp.add_argument("action", choices=["dump"])
    sp.add_argument("--lexicon", required=True)
    src = sp.add_mutually_exclusive_group(required=True)
    src.add_argument("--text", help="a sentence; split into characters unless it has spaces")
    src.add_argument("--corpus", help="take the sentence from this corpus (with --id)")
    sp.add_argument("--id")
    sp.add_argument("--no-word-transitions", action="store_true")
    sp.add_argument("-o", "--output")

    sp = command("train", cmd_train, "train one model")
    sp.add_argument("--train", required=True)
    sp.add_argument("--dev")
    sp.add_argument("--lexicon")
    sp.add_argument("--config", help="JSON with 'model' and 'train' sections")
    sp.add_argument("--init", help="warm-start from this model directory")
    sp.add_argument("-o", "--output", required=True, help="model directory")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--batch-size", dest="batch_size", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--hidden", type=int)
    sp.add_argument("--rdrop", action="store_true")
    sp.add_argument("--adversarial", choices=["FGM", "PGD", "FreeLB"])
    sp.add_argument("--augment", action="append", metavar="MODE")
    sp.add_argument("--adapter", action="store_true")
    sp.add_argument("--gcn", action="store_true")
    sp.add_argument("--pfe-sfe", dest="pfe_sfe", action="store_true")

    sp = command("predict", cmd_predict, "tag a corpus with a trained model")
    sp.add_argument("--model", required=True)
    sp.add_argument("--input", required=True)
    sp.add_argument("--lexicon")
    sp.add_argument("-o", "--output", required=True, help="prediction directory")
    sp.add_argument("--model-id", dest="model_id")
    sp.add_argument("--batch-size", dest="batch_size", type=int, default=64)

    sp = command("eval", cmd_eval, "score predictions against gold")
    sp.add_argument("--gold", required=True)
    sp.add_argument("--pred", required=True, help="prediction directory or CoNLL file")
    sp.add_argument("-o", "--output")

    sp = command("vote", cmd_vote, "majority-vote several prediction directories")
    sp.add_argument("predictions", nargs="+")
    sp.add_argument("-o", "--output", required=True)
    sp.add_argument("--model-id", dest="model_id", default="vote")

    sp = command("pseudo", cmd_pseudo, "select unanimous pseudo-labelled sentences")
    sp.add_argument("predictions", nargs="+")
    sp.add_argument("--unlabeled", required=True)
    sp.add_argument("-o", "--output", required=True)
    sp.add_argument("--train", help="training corpus to merge the pseudo set into")
    sp.add_argument("--merged", help="write train + pseudo here")
    sp.add_argument("--fraction", type=float, default=1.0)
    sp.add_argument("--seed", type=int, default=42)

    sp = command("pipeline", cmd_pipeline, "run the staged training recipe")
    sp.add_argument("--config")
    sp.add_argument("--fixture", action="store_true", help="use the bundled fixture corpus and config")
    sp.add_argument("-o", "--output", help="output directory (overrides the config)")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except VALIDATION_ERRORS as e:
        if isinstance(e, FileNotFoundError):
            print(f"error: no such file: {e.filename}", file=sys.stderr)
        else:
            print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001
        logger.debug("runtime failure", exc_info=True)
        print(f"failed: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
