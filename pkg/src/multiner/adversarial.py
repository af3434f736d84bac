"""Embedding-space adversarial training: FGM, PGD and FreeLB.

All three approximate the inner maximisation over a norm ball around the
embedding-layer output. Norms are Frobenius over the whole batch tensor
unless ``per_token`` is set, in which case every row is normalised and
projected on its own.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from . import compute as C

METHODS = ("FGM", "PGD", "FreeLB")


class AdversarialError(ValueError):
    pass


@dataclass(frozen=True)
class AdvConfig:
    method: str = "PGD"
    fgm_eps: float = 0.8
    pgd_eps: float = 1.0
    pgd_alpha: float = 0.1
    pgd_k: int = 3
    freelb_adv_lr: float = 0.3
    freelb_mag: float = 0.05
    freelb_k: int = 3
    per_token: bool = False
    pgd_accumulate: bool = False

    def __post_init__(self):
        if self.method not in METHODS:
            raise AdversarialError(f"unknown adversarial method {self.method!r}")
        for name in ("fgm_eps", "pgd_eps", "pgd_alpha", "freelb_adv_lr", "freelb_mag"):
            if not getattr(self, name) > 0:
                raise AdversarialError(f"{name} must be > 0")
        if self.pgd_k < 1 or self.freelb_k < 1:
            raise AdversarialError("step counts must be >= 1")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AdvConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise AdversarialError(f"unknown adversarial keys {sorted(unknown)}")
        return cls(**d)


def _norms(x, per_token):
    if per_token:
        return np.sqrt((x * x).sum(axis=1, keepdims=True))
    return np.sqrt((x * x).sum())


def _normalize(g, per_token):
    n = _norms(g, per_token)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(n > 0, g / np.where(n > 0, n, 1.0), 0.0)
    return out


def project(delta, eps, per_token=False):
    """Project onto the radius-``eps`` ball (a no-op inside it)."""
    n = _norms(delta, per_token)
    factor = np.where(n > eps, eps / np.where(n > 0, n, 1.0), 1.0)
    return delta * factor


def fgm_delta(g, eps, per_token=False):
    """``eps * g / ||g||``, zero where the gradient vanishes."""
    return eps * _normalize(np.asarray(g, dtype=np.float64), per_token)


def pgd_step(delta, g, alpha, eps, per_token=False):
    """One normalised ascent step of size ``alpha`` followed by projection."""
    delta = np.asarray(delta, dtype=np.float64)
    step = delta + alpha * _normalize(np.asarray(g, dtype=np.float64), per_token)
    return project(step, eps, per_token)


def uniform_ball(rng, shape, radius):
    """A point drawn uniformly from the Frobenius ball of ``radius``."""
    numel = int(np.prod(shape))
    direction = rng.normal(size=shape)
    direction /= np.sqrt((direction * direction).sum())
    return direction * radius * rng.random() ** (1.0 / numel)


@dataclass
class AdvStepResult:
    clean_loss: float
    adv_loss: float
    delta_norm: float


def _snapshot(params):
    return {k: p.grad.copy() for k, p in params.items()}


def _restore(params, snap):
    for k, p in params.items():
        p.grad = snap[k].copy()


def _run(loss_fn, delta=None):
    with C.Tape() as tape:
        res = loss_fn(delta)
        tape.backward(res.loss)
    return res


def adv_train_step(params: dict, loss_fn, cfg: AdvConfig, rng=None) -> AdvStepResult:
    """Accumulate adversarially trained gradients into ``params``.

    ``loss_fn(delta)`` must build a fresh forward pass (with fixed dropout
    masks) and return an object with ``loss`` and ``embedding`` tensors;
    ``delta`` is added to the embedding output. Gradients are accumulated
    onto whatever ``params`` already hold, so callers zero them first.

    FGM and PGD sum the clean gradient with the gradient at the final
    perturbed point. FreeLB averages the gradients of its K ascent steps.
    """
    if cfg.method == "FGM":
        clean = _run(loss_fn)
        delta = fgm_delta(clean.embedding.grad, cfg.fgm_eps, cfg.per_token)
        adv = _run(loss_fn, C.Tensor(delta))
        return AdvStepResult(clean.loss.item(), adv.loss.item(), float(np.sqrt((delta ** 2).sum())))

    if cfg.method == "PGD":
        clean = _run(loss_fn)
        kept = _snapshot(params)
        delta = pgd_step(np.zeros_like(clean.embedding.values), clean.embedding.grad,
                         cfg.pgd_alpha, cfg.pgd_eps, cfg.per_token)
        for _ in range(cfg.pgd_k - 1):
            d = C.Tensor(delta, requires_grad=True)
            _run(loss_fn, d)
            if not cfg.pgd_accumulate:
                _restore(params, kept)
            delta = pgd_step(delta, d.grad, cfg.pgd_alpha, cfg.pgd_eps, cfg.per_token)
        adv = _run(loss_fn, C.Tensor(delta))
        return AdvStepResult(clean.loss.item(), adv.loss.item(), float(np.sqrt((delta ** 2).sum())))

    if cfg.method == "FreeLB":
        rng = rng if rng is not None else np.random.default_rng(0)
        x = loss_fn(None).embedding.values
        radius = cfg.freelb_mag * float(np.sqrt((x * x).sum())) / np.sqrt(x.size)
        delta = project(uniform_ball(rng, x.shape, radius), cfg.freelb_mag, cfg.per_token)
        losses = []
        for _ in range(cfg.freelb_k):
            d = C.Tensor(delta, requires_grad=True)
            res = _run(loss_fn, d)
            losses.append(res.loss.item())
            delta = pgd_step(delta, d.grad, cfg.freelb_adv_lr, cfg.freelb_mag, cfg.per_token)
        for p in params.values():
            p.grad /= cfg.freelb_k
        return AdvStepResult(float(np.mean(losses)), losses[-1], float(np.sqrt((delta ** 2).sum())))

    raise AdversarialError(f"unknown adversarial method {cfg.method!r}")
