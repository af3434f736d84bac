import json
import math

import numpy as np
import pytest

from multiner import compute as C
from multiner.compute import Adam, Tape, Tensor, grad_check, warmup_linear


def weighted(out, rng):
    """Reduce ``out`` to a scalar with random weights so every entry's gradient differs."""
    return C.sum_all(C.mul(out, Tensor(rng.normal(size=out.shape))))


def primitive_cases(rng):
    r, c = int(rng.integers(2, 5)), int(rng.integers(2, 5))
    a = Tensor(rng.normal(size=(r, c)))
    b = Tensor(rng.normal(size=(r, c)))
    m = Tensor(rng.normal(size=(c, 3)))
    row = Tensor(rng.normal(size=(1, c)))
    wide = Tensor(rng.normal(size=(r, c + 1)))
    gain, bias = Tensor(rng.normal(size=(1, c + 1))), Tensor(rng.normal(size=(1, c + 1)))
    idx = rng.integers(r, size=5)
    mask = C.dropout_mask(rng, (r, c), 0.3)
    seg = np.sort(rng.integers(3, size=r))
    seg[0], seg[-1] = 0, 2
    col = Tensor(rng.normal(size=(r, 1)))
    tgt = rng.integers(c, size=r)
    p = Tensor(C._softmax_values(rng.normal(size=(r, c))))
    q = Tensor(C._softmax_values(rng.normal(size=(r, c))))
    w = lambda t: weighted(t, np.random.default_rng(7))  # noqa: E731
    return {
        "matmul": ([a, m], lambda: w(C.matmul(a, m))),
        "add": ([a, b], lambda: w(C.add(a, b))),
        "add_broadcast": ([a, row], lambda: w(C.add(a, row))),
        "sub": ([a, b], lambda: w(C.sub(a, b))),
        "mul": ([a, b], lambda: w(C.mul(a, b))),
        "mul_broadcast": ([a, col], lambda: w(C.mul(a, col))),
        "scale": ([a], lambda: w(C.scale(a, -1.7))),
        "transpose": ([a], lambda: w(C.transpose(a))),
        "concat_cols": ([a, b], lambda: w(C.concat_cols([a, b]))),
        "concat_rows": ([a, b], lambda: w(C.concat_rows([a, b]))),
        "gather_rows": ([a], lambda: w(C.gather_rows(a, idx))),
        "scatter_rows": ([a], lambda: w(C.scatter_rows(a, idx[:r] % 3, 3))),
        "tanh": ([a], lambda: w(C.tanh(a))),
        "relu": ([a], lambda: w(C.relu(a))),
        "dropout": ([a], lambda: w(C.dropout(a, mask))),
        "softmax": ([a], lambda: w(C.softmax(a))),
        "segment_softmax": ([col], lambda: w(C.segment_softmax(col, seg, 3))),
        "layer_norm": ([wide, gain, bias], lambda: w(C.layer_norm(wide, gain, bias))),
        "cross_entropy": ([a], lambda: C.cross_entropy(a, tgt)),
        "kl_divergence": ([p, q], lambda: C.kl_divergence(p, q)),
        "l2_norm": ([a], lambda: C.l2_norm(a)),
        "sum_all": ([a], lambda: C.sum_all(C.tanh(a))),
        "mean": ([a], lambda: C.mean(C.tanh(a))),
        "sum_rows": ([a], lambda: w(C.sum_rows(a))),
    }


PRIMITIVES = sorted(primitive_cases(np.random.default_rng(0)))


@pytest.mark.parametrize("name", PRIMITIVES)
def test_primitive_gradients_20_seeds(name):
    worst = 0.0
    for seed in range(20):
        inputs, f = primitive_cases(np.random.default_rng(seed))[name]
        worst = max(worst, grad_check(lambda _: f(), inputs))
    assert worst < 1e-5


def test_layer_norm_width_two_gradient():
    # at width 2 the output is nearly constant unless eps is large
    rng = np.random.default_rng(5)
    x, g, b = (Tensor(rng.normal(size=s)) for s in [(3, 2), (1, 2), (1, 2)])
    w = Tensor(rng.normal(size=(3, 2)))
    assert grad_check(lambda _: C.sum_all(C.mul(C.layer_norm(x, g, b, eps=1.0), w)), [x, g, b]) < 1e-5


def test_reverse_gradient_flips_and_scales():
    rng = np.random.default_rng(0)
    x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    w = Tensor(rng.normal(size=(3, 4)))
    with Tape() as tape:
        out = C.reverse_gradient(x, 0.3)
        np.testing.assert_array_equal(out.values, x.values)
        tape.backward(C.sum_all(C.mul(C.tanh(out), w)))
    np.testing.assert_allclose(x.grad, -0.3 * w.values * (1 - np.tanh(x.values) ** 2), atol=1e-15)


def test_grad_check_sum_linear():
    x = Tensor(np.random.default_rng(0).normal(size=(3, 3)))
    assert grad_check(C.sum_all, x) < 1e-10


def test_grad_check_composite():
    rng = np.random.default_rng(1)
    x = Tensor(rng.normal(size=(4, 4)))
    w = Tensor(rng.normal(size=(4, 4)))
    t = rng.integers(4, size=4)
    f = lambda xs: C.kl_divergence(C.softmax(C.matmul(xs[0], xs[1])), Tensor(np.full((4, 4), 0.25)))  # noqa: E731
    assert grad_check(f, [x, w]) < 1e-5
    g = lambda xs: C.cross_entropy(C.softmax(C.matmul(xs[0], xs[1])), t)  # noqa: E731
    assert grad_check(g, [x, w]) < 1e-5


def test_grad_check_rejects_non_scalar():
    with pytest.raises(ValueError):
        grad_check(lambda x: C.tanh(x), Tensor(np.ones((2, 2))))


def test_softmax_examples():
    np.testing.assert_allclose(C.softmax(Tensor([[2.0, 2.0, 2.0]])).values, [[1 / 3] * 3])
    np.testing.assert_allclose(C.softmax(Tensor([[0.0, math.log(3)]])).values, [[0.25, 0.75]], atol=1e-15)
    x = np.random.default_rng(0).normal(scale=30, size=(20, 7))
    np.testing.assert_allclose(C.softmax(Tensor(x)).values.sum(axis=1), 1.0, atol=1e-12)


def test_layer_norm_examples():
    one, zero = Tensor(np.ones((1, 2))), Tensor(np.zeros((1, 2)))
    np.testing.assert_array_equal(C.layer_norm(Tensor([[5.0, 5.0]]), one, zero).values, [[0.0, 0.0]])
    np.testing.assert_allclose(C.layer_norm(Tensor([[1.0, 3.0]]), one, zero, eps=1e-15).values,
                               [[-1.0, 1.0]], atol=1e-12)
    rng = np.random.default_rng(0)
    x = rng.normal(size=(5, 6))
    one6, zero6 = Tensor(np.ones((1, 6))), Tensor(np.zeros((1, 6)))
    base = C.layer_norm(Tensor(x), one6, zero6).values
    shifted = C.layer_norm(Tensor(x + rng.normal(size=(5, 1)) * 10), one6, zero6).values
    np.testing.assert_allclose(base, shifted, atol=1e-6)


def test_kl_examples():
    p = Tensor([[0.5, 0.5]])
    assert C.kl_divergence(p, p).item() == 0.0
    expected = 0.5 * math.log(0.5 / 0.9) + 0.5 * math.log(0.5 / 0.1)
    assert C.kl_divergence(p, Tensor([[0.9, 0.1]])).item() == pytest.approx(expected, abs=1e-12)
    assert expected == pytest.approx(0.510826, abs=1e-6)
    with pytest.raises(ValueError):
        C.kl_divergence(p, Tensor([[1.0, 0.0, 0.0]]))


def test_cross_entropy_uniform_is_log_L():
    assert C.cross_entropy(Tensor(np.zeros((3, 13))), [0, 5, 12]).item() == pytest.approx(math.log(13))


def test_tape_consumed_and_ordering():
    w = Tensor([[2.0]], requires_grad=True)
    with Tape() as tape:
        loss = C.mul(C.tanh(w), w)
        assert len(tape.ops) == 2
        tape.backward(loss)
        assert tape.ops == []
    expected = math.tanh(2.0) + 2.0 * (1 - math.tanh(2.0) ** 2)
    assert w.grad[0, 0] == pytest.approx(expected)
    with pytest.raises(ValueError):
        with Tape() as tape:
            tape.backward(C.tanh(Tensor([[1.0, 2.0]], requires_grad=True)))


def test_no_recording_outside_tape():
    w = Tensor([[1.0]], requires_grad=True)
    out = C.tanh(w)
    assert not out.requires_grad


def test_forward_bitwise_deterministic():
    rng = np.random.default_rng(3)
    a, m = rng.normal(size=(4, 5)), rng.normal(size=(5, 5))
    f = lambda: C.layer_norm(C.softmax(C.matmul(Tensor(a), Tensor(m))), Tensor(np.ones((1, 5))),  # noqa: E731
                             Tensor(np.zeros((1, 5)))).values
    assert f().tobytes() == f().tobytes()


def test_reverse_gradient_zero_blocks():
    w = Tensor([[1.5, -2.0]], requires_grad=True)
    with Tape() as tape:
        tape.backward(C.sum_all(C.mul(C.reverse_gradient(w, 0.0), w)))
    np.testing.assert_array_equal(w.grad, [[1.5, -2.0]])


def test_dropout_mask():
    assert C.dropout_mask(np.random.default_rng(0), (3, 3), 0.0) is None
    m = C.dropout_mask(np.random.default_rng(0), (200, 50), 0.2)
    assert set(np.unique(m)) <= {0.0, 1.25}
    assert abs(m.mean() - 1.0) < 0.05


def test_warmup_schedule():
    total = 100
    lrs = [warmup_linear(s, total, 0.06) for s in range(total)]
    assert lrs[:6] == pytest.approx([1 / 6, 2 / 6, 3 / 6, 4 / 6, 5 / 6, 1.0])
    assert all(a >= b for a, b in zip(lrs[5:], lrs[6:]))
    assert lrs[-1] == pytest.approx(1 / 94)
    assert warmup_linear(0, 10, 0.0) == 1.0


def test_adam_minimises_quadratic():
    x = Tensor([[3.0, -4.0]], requires_grad=True)
    opt = Adam({"x": x}, lr=0.1, total_steps=500)
    for _ in range(500):
        opt.zero_grad()
        with Tape() as tape:
            tape.backward(C.sum_all(C.mul(x, x)))
        opt.step()
    assert np.abs(x.values).max() < 1e-2


def test_adam_first_step_is_lr_sign():
    x = Tensor([[1.0, -1.0]], requires_grad=True)
    x.grad = np.array([[0.5, -3.0]])
    Adam({"x": x}, lr=0.01).step()
    np.testing.assert_allclose(x.values, [[0.99, -0.99]], atol=1e-9)


def test_params_json_round_trip():
    rng = np.random.default_rng(0)
    params = {"a": Tensor(rng.normal(size=(2, 3)), True), "b": Tensor(rng.normal(size=(1, 1)), True)}
    text = C.params_to_json(params)
    assert {"name", "rows", "cols", "values"} == set(json.loads(text)[0])
    back = C.params_from_json(text)
    for k in params:
        assert back[k].values.tobytes() == params[k].values.tobytes()
