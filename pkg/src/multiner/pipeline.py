"""Four-stage training recipe with content-addressed, resumable stage outputs.

Stages run as sequential barriers:

1. ``full``: one model on all training data (optional).
2. ``track:<name>``: per track, fine-tune from the full model on the
   track's languages with track-specific add-ons.
3. ``ensemble:<name>``: the track model plus extra member variants, voted
   on the track's test sentences. Members train in a worker pool.
4. ``pseudo:<name>``: unanimous member predictions on unlabeled data are
   merged into the track's training set for a last fine-tune (optional).

Every stage writes into ``<output>/<stage>-<digest>`` where the digest
covers its resolved configuration and everything upstream of it, so a
rerun with unchanged inputs skips finished stages and a changed input
invalidates only what depends on it.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import shutil
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path

from . import __version__
from .corpus import Dataset, macro_f1, read_conll, save_conll, write_conll
from .ensemble import load_prediction, merge_for_finetune, select_pseudo, sidecar_json, vote
from .lexicon import read_embeddings
from .model import (
    ModelConfig,
    TrainConfig,
    build_vocab,
    load_model,
    predict,
    save_model,
    train,
)

logger = logging.getLogger(__name__)

WORKERS_ENV = "MULTINER_WORKERS"
STAGE_MARKER = "stage.json"


class ConfigError(ValueError):
    pass


@dataclass
class PipelineConfig:
    train: str
    dev: str
    test: str
    unlabeled: str | None = None
    lexicon: str | None = None
    classes: list | None = None
    model: dict = field(default_factory=dict)
    train_config: dict = field(default_factory=dict)
    full: dict | None = None
    tracks: list = field(default_factory=list)
    output: str = "runs"

    @classmethod
    def from_dict(cls, d: dict, base: Path | None = None) -> "PipelineConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown pipeline keys {sorted(unknown)}")
        missing = {"train", "dev", "test"} - set(d)
        if missing:
            raise ConfigError(f"pipeline config needs {sorted(missing)}")
        cfg = cls(**d)
        if base is not None:
            for name in ("train", "dev", "test", "unlabeled", "lexicon"):
                value = getattr(cfg, name)
                if value is not None and not Path(value).is_absolute():
                    setattr(cfg, name, str(base / value))
        names = [t.get("name") for t in cfg.tracks]
        if any(not n for n in names) or len(set(names)) != len(names):
            raise ConfigError("every track needs a unique name")
        for t in cfg.tracks:
            extra = set(t) - {"name", "languages", "model", "train", "members", "pseudo"}
            if extra:
                raise ConfigError(f"track {t['name']!r}: unknown keys {sorted(extra)}")
        return cfg


@dataclass
class StageRecord:
    name: str
    directory: str
    macro_f1: float
    skipped: bool


def load_pipeline_config(path) -> PipelineConfig:
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    try:
        d = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}:{e.lineno}: {e.msg}") from None
    return PipelineConfig.from_dict(d, base=path.parent)


def digest(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:12]


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


def worker_count() -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from None
    return max(1, n)


def _dataset_digest(d):
    return None if d is None else digest(write_conll(d))


def _merge(*dicts):
    out = {}
    for d in dicts:
        out.update(d or {})
    return out


def _write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def write_predictions(directory, pred, reference: Dataset):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_conll(pred.to_dataset(reference), directory / "predictions.conll")
    _write(directory / "predictions.json", sidecar_json(pred))


def read_predictions(directory):
    directory = Path(directory)
    d = read_conll(directory / "predictions.conll", name=directory.name)
    sidecar = directory / "predictions.json"
    meta = json.loads(sidecar.read_text(encoding="utf-8")) if sidecar.exists() else None
    return load_prediction(d, meta)


def stage_path(root: Path, name: str, key: dict) -> Path:
    return root / f"{name.replace(':', '-')}-{digest(key)}"


def _begin(directory: Path) -> Path:
    tmp = directory.with_name(directory.name + ".partial")
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir(parents=True)
    return tmp


def _commit(tmp: Path, directory: Path, name: str, key: dict):
    _write(tmp / STAGE_MARKER, json.dumps({"stage": name, "key": key}, sort_keys=True, indent=1) + "\n")
    if directory.exists():
        shutil.rmtree(directory)
    tmp.rename(directory)
    logger.info("stage %s: wrote %s", name, directory.name)


def run_stage(root: Path, name: str, key: dict, build) -> tuple[Path, bool]:
    """Run ``build(tmp_dir)`` unless the content-addressed stage already exists.

    Work happens in a ``.partial`` sibling that is renamed into place only
    once complete, so an interrupted run never leaves a stage looking done.
    """
    directory = stage_path(root, name, key)
    if (directory / STAGE_MARKER).exists():
        logger.info("stage %s: up to date in %s", name, directory.name)
        return directory, True
    tmp = _begin(directory)
    build(tmp)
    _commit(tmp, directory, name, key)
    return directory, False


# --------------------------------------------------------------------------- #
# Model runs


@dataclass
class RunSpec:
    """Everything one training run needs; picklable for the worker pool."""

    train: Dataset
    dev: Dataset
    test: Dataset
    unlabeled: Dataset | None
    model: dict
    train_config: dict
    lexicon_path: str | None
    init_dir: str | None
    model_id: str


def fit_and_predict(spec: RunSpec, out: Path):
    """Train, save the checkpoint, and write test (and unlabeled) predictions."""
    lexicon = read_embeddings(spec.lexicon_path)[0] if spec.lexicon_path else None
    cfg = ModelConfig.from_dict(spec.model)
    tc = TrainConfig.from_dict(spec.train_config)
    init = load_model(spec.init_dir)[0] if spec.init_dir else None
    result = train(spec.train, cfg, tc, dev=spec.dev, lexicon=lexicon, init=init)
    save_model(out / "model", result.params, cfg, result)
    scores = [r.dev_macro_f1 for r in result.history if not math.isnan(r.dev_macro_f1)]
    dev_f1 = max(scores) if scores else 0.0
    pred = predict(result.params, cfg, spec.test, lexicon, tc.eval_batch_size, spec.model_id, dev_f1)
    write_predictions(out / "predictions", pred, spec.test)
    report = macro_f1(spec.test, pred)
    _write(out / "report.json", report.to_json())
    if spec.unlabeled is not None and len(spec.unlabeled):
        upred = predict(result.params, cfg, spec.unlabeled, lexicon, tc.eval_batch_size, spec.model_id, dev_f1)
        write_predictions(out / "unlabeled", upred, spec.unlabeled)
    return report.macro_f1


def _member_job(args):
    spec, out = args
    fit_and_predict(spec, Path(out))
    return out


# --------------------------------------------------------------------------- #


class Pipeline:
    def __init__(self, cfg: PipelineConfig, output: str | None = None):
        self.cfg = cfg
        self.root = Path(output or cfg.output)
        classes = tuple(cfg.classes) if cfg.classes else None
        kw = {"classes": classes} if classes else {}
        self.train_data = read_conll(cfg.train, name="train", **kw)
        self.dev_data = read_conll(cfg.dev, name="dev", **kw)
        self.test_data = read_conll(cfg.test, name="test", **kw)
        self.unlabeled = read_conll(cfg.unlabeled, name="unlabeled", **kw) if cfg.unlabeled else self.test_data
        self.lexicon = read_embeddings(cfg.lexicon)[0] if cfg.lexicon else None
        self.inputs = {name: file_digest(getattr(cfg, name))
                       for name in ("train", "dev", "test", "unlabeled", "lexicon") if getattr(cfg, name)}
        model = dict(cfg.model)
        if self.lexicon is not None:
            model.setdefault("word_dim", self.lexicon.dim)
        vocab_kw = {"classes": classes} if classes else {}
        self.base_model = json.loads(build_vocab([self.train_data, self.dev_data], **vocab_kw, **model).to_json())
        self.records: list[StageRecord] = []

    # -- helpers

    def _spec(self, train_data, dev, test, model, tc, init_dir, model_id, unlabeled=None):
        return RunSpec(train_data, dev, test, unlabeled, model, tc, self.cfg.lexicon, init_dir, model_id)

    def _key(self, name, spec: RunSpec, upstream):
        return {
            "stage": name,
            "version": __version__,
            "inputs": self.inputs,
            "data": [_dataset_digest(d) for d in (spec.train, spec.dev, spec.test, spec.unlabeled)],
            "model": spec.model,
            "train": spec.train_config,
            "upstream": upstream,
        }

    def _record(self, name, directory, skipped):
        report = json.loads((directory / "report.json").read_text(encoding="utf-8"))
        self.records.append(StageRecord(name, directory.name, report["macro_f1"], skipped))

    def _fit_stage(self, name, spec, upstream, extra=None):
        key = self._key(name, spec, upstream)

        def build(tmp):
            fit_and_predict(spec, tmp)
            if extra is not None:
                extra(tmp)

        directory, skipped = run_stage(self.root, name, key, build)
        self._record(name, directory, skipped)
        return directory

    @staticmethod
    def _subset(d: Dataset, languages, name):
        if not languages:
            return Dataset(list(d), name)
        wanted = set(languages)
        return Dataset([s for s in d if s.language in wanted], name)

    # -- stages

    def run(self) -> list[StageRecord]:
        self.root.mkdir(parents=True, exist_ok=True)
        base_tc = _merge({"seed": 42}, self.cfg.train_config)
        full_dir = None
        if self.cfg.full is not None:
            extra = set(self.cfg.full) - {"model", "train"}
            if extra:
                raise ConfigError(f"full stage: unknown keys {sorted(extra)}")
            spec = self._spec(Dataset(list(self.train_data), "train"), self.dev_data, self.test_data,
                              _merge(self.base_model, self.cfg.full.get("model")),
                              _merge(base_tc, self.cfg.full.get("train")), None, "full")
            full_dir = self._fit_stage("full", spec, None)
        for track in self.cfg.tracks:
            self._run_track(track, base_tc, full_dir)
        summary = {"stages": [{"name": r.name, "directory": r.directory, "macro_f1": r.macro_f1}
                              for r in self.records]}
        _write(self.root / "summary.json", json.dumps(summary, indent=1, sort_keys=True) + "\n")
        return self.records

    def _run_track(self, track, base_tc, full_dir):
        name = track["name"]
        langs = track.get("languages")
        train_t = self._subset(self.train_data, langs, f"train-{name}")
        dev_t = self._subset(self.dev_data, langs, f"dev-{name}")
        test_t = self._subset(self.test_data, langs, f"test-{name}")
        unl_t = self._subset(self.unlabeled, langs, f"unlabeled-{name}")
        if not len(train_t) or not len(test_t):
            raise ConfigError(f"track {name!r} has no training or test sentences")
        pseudo_cfg = track.get("pseudo")
        model = _merge(self.base_model, track.get("model"))
        tc = _merge(base_tc, track.get("train"))
        upstream = full_dir.name if full_dir else None
        init = str(full_dir / "model") if full_dir else None
        spec = self._spec(train_t, dev_t, test_t, model, tc, init, f"{name}-0",
                          unl_t if pseudo_cfg is not None else None)
        track_dir = self._fit_stage(f"track:{name}", spec, upstream)

        member_dirs = [track_dir]
        jobs = []
        for k, member in enumerate(track.get("members", []), start=1):
            extra = set(member) - {"model", "train"}
            if extra:
                raise ConfigError(f"track {name!r} member {k}: unknown keys {sorted(extra)}")
            mspec = self._spec(train_t, dev_t, test_t, _merge(model, member.get("model")),
                               _merge(tc, member.get("train")), init, f"{name}-{k}",
                               unl_t if pseudo_cfg is not None else None)
            mname = f"member:{name}:{k}"
            key = self._key(mname, mspec, upstream)
            directory = stage_path(self.root, mname, key)
            member_dirs.append(directory)
            jobs.append((mname, mspec, key, directory))
        self._train_members(jobs)

        preds = [read_predictions(d / "predictions") for d in member_dirs]

        def build_vote(tmp):
            voted = vote(preds, model_id=f"vote-{name}")
            write_predictions(tmp / "predictions", voted, test_t)
            _write(tmp / "report.json", macro_f1(test_t, voted).to_json())

        vdir, skipped = run_stage(self.root, f"ensemble:{name}", {"members": [d.name for d in member_dirs]},
                                  build_vote)
        self._record(f"ensemble:{name}", vdir, skipped)

        if pseudo_cfg is None:
            return
        extra = set(pseudo_cfg) - {"fraction", "seed", "train"}
        if extra:
            raise ConfigError(f"track {name!r} pseudo: unknown keys {sorted(extra)}")
        if len(member_dirs) < 2:
            raise ConfigError(f"track {name!r}: pseudo-labels need at least two ensemble members")
        upreds = [read_predictions(d / "unlabeled") for d in member_dirs]
        pseudo = select_pseudo(upreds, unl_t, name=f"pseudo-{name}")
        merged = merge_for_finetune(train_t, pseudo, float(pseudo_cfg.get("fraction", 1.0)),
                                    int(pseudo_cfg.get("seed", 42)), name=f"merged-{name}")
        best = max(range(len(preds)), key=lambda i: (preds[i].dev_macro_f1, -i))
        best_dir = member_dirs[best]
        best_model = json.loads((best_dir / "model" / "config.json").read_text(encoding="utf-8"))
        best_tc = tc if best == 0 else _merge(tc, track["members"][best - 1].get("train"))
        pspec = self._spec(merged, dev_t, test_t, best_model, _merge(best_tc, pseudo_cfg.get("train")),
                           str(best_dir / "model"), f"{name}-pseudo")
        self._fit_stage(f"pseudo:{name}", pspec, [d.name for d in member_dirs],
                        extra=lambda tmp: save_conll(pseudo, tmp / "pseudo.conll"))

    def _train_members(self, jobs):
        """Train pending ensemble members, concurrently when workers allow."""
        pending = [(job, _begin(job[3])) for job in jobs if not (job[3] / STAGE_MARKER).exists()]
        workers = min(worker_count(), len(pending)) if pending else 1
        if workers == 1:
            for (_, spec, _, _), tmp in pending:
                fit_and_predict(spec, tmp)
        else:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                list(pool.map(_member_job, [(job[1], str(tmp)) for job, tmp in pending]))
        done = {job[3] for job, _ in pending}
        for (mname, _, key, directory), tmp in pending:
            _commit(tmp, directory, mname, key)
        for mname, _, _, directory in jobs:
            self._record(mname, directory, directory not in done)


def run_pipeline(cfg: PipelineConfig, output: str | None = None) -> list[StageRecord]:
    return Pipeline(cfg, output).run()
