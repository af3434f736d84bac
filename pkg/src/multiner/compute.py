"""A small reverse-mode differentiation core over dense 2-D float64 arrays.

Operations executed inside an active :class:`Tape` whose inputs require
gradients are recorded; ``tape.backward(loss)`` replays them in reverse and
accumulates into ``Tensor.grad``. Outside a tape every op is a plain forward
computation, which is what inference uses.

    >>> w = Tensor([[1.0, 2.0]], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = sum_all(mul(w, w))
    ...     tape.backward(loss)
    >>> w.grad
    array([[2., 4.]])
"""

from __future__ import annotations

import json
import math
import os

import numpy as np

DEBUG = bool(os.environ.get("MULTINER_DEBUG"))
KL_CLAMP = 1e-12

_active: list["Tape"] = []


class Tensor:
    __slots__ = ("values", "grad", "requires_grad", "name")

    def __init__(self, values, requires_grad=False, name=None):
        v = np.array(values, dtype=np.float64)
        if v.ndim == 0:
            v = v.reshape(1, 1)
        elif v.ndim == 1:
            v = v.reshape(1, -1)
        elif v.ndim != 2:
            raise ValueError(f"tensors are 2-D, got shape {v.shape}")
        self.values = v
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(v) if requires_grad else None
        self.name = name

    @classmethod
    def _wrap(cls, values, requires_grad):
        t = cls.__new__(cls)
        t.values = values
        t.requires_grad = requires_grad
        t.grad = np.zeros_like(values) if requires_grad else None
        t.name = None
        return t

    @property
    def shape(self):
        return self.values.shape

    @property
    def rows(self):
        return self.values.shape[0]

    @property
    def cols(self):
        return self.values.shape[1]

    def item(self) -> float:
        if self.values.size != 1:
            raise ValueError("item() needs a 1x1 tensor")
        return float(self.values[0, 0])

    def zero_grad(self):
        if self.requires_grad:
            self.grad = np.zeros_like(self.values)

    def __repr__(self):
        return f"Tensor({self.rows}x{self.cols}{', grad' if self.requires_grad else ''})"

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(values) -> Tensor:
    return Tensor(values)


class Tape:
    """Ordered record of executed ops; a backward pass consumes it."""

    def __init__(self):
        self.ops = []

    def __enter__(self):
        _active.append(self)
        return self

    def __exit__(self, *exc):
        _active.remove(self)
        return False

    def backward(self, loss: Tensor):
        if loss.values.size != 1:
            raise ValueError("backward needs a scalar (1x1) loss")
        if not loss.requires_grad:
            self.ops.clear()
            return
        loss.grad += 1.0
        for fn in reversed(self.ops):
            fn()
        self.ops.clear()


def _tracking(*inputs) -> bool:
    return bool(_active) and any(t.requires_grad for t in inputs)


def _out(values, inputs, backward):
    """Wrap ``values``; record ``backward(out)`` on the active tape if needed."""
    if DEBUG and not np.all(np.isfinite(values)):
        raise FloatingPointError("non-finite values produced")
    track = _tracking(*inputs)
    out = Tensor._wrap(values, track)
    if track:
        _active[-1].ops.append(lambda: backward(out))
    return out


def _acc(t: Tensor, g):
    if t.requires_grad:
        t.grad += g


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    if shape[0] == 1 and g.shape[0] != 1:
        g = g.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        g = g.sum(axis=1, keepdims=True)
    return g


# --------------------------------------------------------------------------- #
# Primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    def back(out):
        _acc(a, out.grad @ b.values.T)
        _acc(b, a.values.T @ out.grad)

    return _out(a.values @ b.values, (a, b), back)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` (or ``a``) may broadcast from a row or column."""

    def back(out):
        _acc(a, _unbroadcast(out.grad, a.shape))
        _acc(b, _unbroadcast(out.grad, b.shape))

    return _out(a.values + b.values, (a, b), back)


def sub(a: Tensor, b: Tensor) -> Tensor:
    def back(out):
        _acc(a, _unbroadcast(out.grad, a.shape))
        _acc(b, -_unbroadcast(out.grad, b.shape))

    return _out(a.values - b.values, (a, b), back)


def mul(a: Tensor, b: Tensor) -> Tensor:
    def back(out):
        _acc(a, _unbroadcast(out.grad * b.values, a.shape))
        _acc(b, _unbroadcast(out.grad * a.values, b.shape))

    return _out(a.values * b.values, (a, b), back)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def back(out):
        _acc(a, c * out.grad)

    return _out(c * a.values, (a,), back)


def transpose(a: Tensor) -> Tensor:
    def back(out):
        _acc(a, out.grad.T)

    return _out(np.ascontiguousarray(a.values.T), (a,), back)


def concat_cols(parts) -> Tensor:
    parts = list(parts)
    bounds = np.cumsum([0] + [p.cols for p in parts])

    def back(out):
        for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
            _acc(p, out.grad[:, lo:hi])

    return _out(np.concatenate([p.values for p in parts], axis=1), parts, back)


def concat_rows(parts) -> Tensor:
    parts = list(parts)
    bounds = np.cumsum([0] + [p.rows for p in parts])

    def back(out):
        for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
            _acc(p, out.grad[lo:hi])

    return _out(np.concatenate([p.values for p in parts], axis=0), parts, back)


def gather_rows(a: Tensor, index) -> Tensor:
    """Row selection ``a[index]``; repeated indices accumulate on backward."""
    index = np.asarray(index, dtype=np.int64)

    def back(out):
        if a.requires_grad:
            np.add.at(a.grad, index, out.grad)

    return _out(a.values[index], (a,), back)


def scatter_rows(a: Tensor, index, n_rows: int) -> Tensor:
    """Sum rows of ``a`` into ``n_rows`` buckets: ``out[index[k]] += a[k]``."""
    index = np.asarray(index, dtype=np.int64)
    values = np.zeros((n_rows, a.cols))
    np.add.at(values, index, a.values)

    def back(out):
        _acc(a, out.grad[index])

    return _out(values, (a,), back)


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.values)

    def back(out):
        _acc(a, out.grad * (1.0 - y * y))

    return _out(y, (a,), back)


def relu(a: Tensor) -> Tensor:
    mask = a.values > 0

    def back(out):
        _acc(a, out.grad * mask)

    return _out(a.values * mask, (a,), back)


def dropout(a: Tensor, mask) -> Tensor:
    """Multiply by an externally supplied mask (already scaled by 1/keep)."""
    if mask is None:
        return a
    mask = np.asarray(mask, dtype=np.float64)

    def back(out):
        _acc(a, out.grad * mask)

    return _out(a.values * mask, (a,), back)


def dropout_mask(rng, shape, rate: float):
    if rate <= 0.0:
        return None
    keep = 1.0 - rate
    return (rng.random(shape) < keep) / keep


def _softmax_values(x):
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax(x: Tensor) -> Tensor:
    """Rowwise softmax with max subtraction."""
    p = _softmax_values(x.values)

    def back(out):
        g = out.grad
        _acc(x, p * (g - (g * p).sum(axis=1, keepdims=True)))

    return _out(p, (x,), back)


def segment_softmax(scores: Tensor, segment, n_segments: int) -> Tensor:
    """Softmax of a column of scores within groups given by ``segment``."""
    if scores.cols != 1:
        raise ValueError("segment_softmax expects a column tensor")
    segment = np.asarray(segment, dtype=np.int64)
    s = scores.values[:, 0]
    mx = np.full(n_segments, -np.inf)
    np.maximum.at(mx, segment, s)
    e = np.exp(s - mx[segment])
    tot = np.bincount(segment, weights=e, minlength=n_segments)
    p = (e / tot[segment])[:, None]

    def back(out):
        g = out.grad[:, 0]
        dot = np.bincount(segment, weights=p[:, 0] * g, minlength=n_segments)
        _acc(scores, (p[:, 0] * (g - dot[segment]))[:, None])

    return _out(p, (scores,), back)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    if x.cols < 2:
        raise ValueError("layer_norm needs at least 2 columns")
    mu = x.values.mean(axis=1, keepdims=True)
    xc = x.values - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=1, keepdims=True) + eps)
    xhat = xc * inv

    def back(out):
        g = out.grad
        _acc(gain, (g * xhat).sum(axis=0, keepdims=True))
        _acc(bias, g.sum(axis=0, keepdims=True))
        if x.requires_grad:
            gx = g * gain.values
            x.grad += inv * (
                gx - gx.mean(axis=1, keepdims=True) - xhat * (gx * xhat).mean(axis=1, keepdims=True)
            )

    return _out(xhat * gain.values + bias.values, (x, gain, bias), back)


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean over rows of ``-log softmax(logits)[target]``."""
    targets = np.asarray(targets, dtype=np.int64)
    n = logits.rows
    z = logits.values - logits.values.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    loss = float(np.mean(lse - z[np.arange(n), targets]))

    def back(out):
        if logits.requires_grad:
            p = np.exp(z - lse[:, None])
            p[np.arange(n), targets] -= 1.0
            logits.grad += out.grad[0, 0] * p / n

    return _out(np.array([[loss]]), (logits,), back)


def kl_divergence(p: Tensor, q: Tensor) -> Tensor:
    """Mean over rows of ``sum p * log(p / q)``; entries below 1e-12 are clamped."""
    if p.shape != q.shape:
        raise ValueError(f"kl_divergence shape mismatch {p.shape} vs {q.shape}")
    pc = np.maximum(p.values, KL_CLAMP)
    qc = np.maximum(q.values, KL_CLAMP)
    n = p.rows
    log_ratio = np.log(pc) - np.log(qc)
    loss = float((pc * log_ratio).sum() / n)

    def back(out):
        g = out.grad[0, 0] / n
        _acc(p, g * (log_ratio + 1.0) * (p.values > KL_CLAMP))
        _acc(q, -g * (pc / qc) * (q.values > KL_CLAMP))

    return _out(np.array([[loss]]), (p, q), back)


def l2_norm(a: Tensor) -> Tensor:
    """Frobenius norm as a 1x1 tensor."""
    nrm = float(np.sqrt((a.values * a.values).sum()))

    def back(out):
        if nrm > 0:
            _acc(a, out.grad[0, 0] * a.values / nrm)

    return _out(np.array([[nrm]]), (a,), back)


def sum_all(a: Tensor) -> Tensor:
    def back(out):
        _acc(a, np.full(a.shape, out.grad[0, 0]))

    return _out(np.array([[a.values.sum()]]), (a,), back)


def mean(a: Tensor) -> Tensor:
    n = a.values.size

    def back(out):
        _acc(a, np.full(a.shape, out.grad[0, 0] / n))

    return _out(np.array([[a.values.mean()]]), (a,), back)


def sum_rows(a: Tensor) -> Tensor:
    """Per-row sum, giving a column tensor."""

    def back(out):
        _acc(a, np.broadcast_to(out.grad, a.shape))

    return _out(a.values.sum(axis=1, keepdims=True), (a,), back)


def reverse_gradient(a: Tensor, strength: float) -> Tensor:
    """Identity forward; multiplies the incoming gradient by ``-strength``."""
    strength = float(strength)

    def back(out):
        _acc(a, -strength * out.grad)

    return _out(a.values.copy(), (a,), back)


# --------------------------------------------------------------------------- #
# Gradient checking


def grad_check(f, x: Tensor | list, eps: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` maps the current tensor state to a scalar tensor; ``x`` is one
    tensor or a list of them (all coordinates are perturbed in place). The
    relative error denominator is ``max(|a|, |b|, 1e-8)``.
    """
    xs = x if isinstance(x, (list, tuple)) else [x]
    flags = [t.requires_grad for t in xs]
    for t in xs:
        t.requires_grad = True
        t.grad = np.zeros_like(t.values)
    with Tape() as tape:
        out = f(x)
        if out.values.size != 1:
            raise ValueError("grad_check needs a scalar-valued function")
        tape.backward(out)
    analytic = [t.grad.copy() for t in xs]
    worst = 0.0
    for t, a in zip(xs, analytic):
        flat = t.values.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + eps
            fp = f(x).item()
            flat[k] = orig - eps
            fm = f(x).item()
            flat[k] = orig
            num = (fp - fm) / (2 * eps)
            ana = a.reshape(-1)[k]
            err = abs(num - ana) / max(abs(num), abs(ana), 1e-8)
            worst = max(worst, err)
    for t, flag in zip(xs, flags):
        t.requires_grad = flag
        t.grad = np.zeros_like(t.values) if flag else None
    return worst


# --------------------------------------------------------------------------- #
# Optimisation


def warmup_linear(step: int, total: int, warmup_proportion: float) -> float:
    """Learning-rate multiplier: linear warmup, then linear decay to zero."""
    warm = int(math.ceil(total * warmup_proportion))
    if warm > 0 and step < warm:
        return (step + 1) / warm
    return max(0.0, (total - step) / max(1, total - warm))


class Adam:
    def __init__(self, params: dict, lr=1e-3, betas=(0.9, 0.999), eps=1e-8,
                 total_steps=1, warmup_proportion=0.0):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.total_steps = total_steps
        self.warmup_proportion = warmup_proportion
        self.t = 0
        self.m = {k: np.zeros_like(p.values) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.values) for k, p in params.items()}

    def current_lr(self) -> float:
        return self.lr * warmup_linear(self.t, self.total_steps, self.warmup_proportion)

    def step(self):
        lr = self.current_lr()
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, p in self.params.items():
            g = p.grad
            self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * g * g
            p.values -= lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = np.zeros_like(p.values)


# --------------------------------------------------------------------------- #
# Checkpoints


def params_to_json(params: dict) -> str:
    items = [
        {"name": k, "rows": p.rows, "cols": p.cols, "values": p.values.reshape(-1).tolist()}
        for k, p in params.items()
    ]
    return json.dumps(items, separators=(",", ":")) + "\n"


def params_from_json(text: str) -> dict:
    out = {}
    for item in json.loads(text):
        vals = np.array(item["values"], dtype=np.float64)
        if vals.size != item["rows"] * item["cols"]:
            raise ValueError(f"checkpoint entry {item['name']!r} has the wrong size")
        out[item["name"]] = Tensor(vals.reshape(item["rows"], item["cols"]), requires_grad=True,
                                   name=item["name"])
    return out
