import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from superpose import autograd as ag
from superpose.autograd import Tensor

TOL = 1e-4


def _away_from(x, points, gap=0.05):
    for p in points:
        near = np.abs(x - p) < gap
        x = np.where(near, p + np.sign(x - p + 1e-12) * gap, x)
    return x


# op name -> (fn over Tensors, input factory(rng, n, m))
CASES = {
    "add": (lambda a, b: ag.sum(ag.add(a, b) * a), lambda r, n, m: [r.normal(size=(n, m)), r.normal(size=(m,))]),
    "sub": (lambda a, b: ag.sum(ag.sub(a, b) * a), lambda r, n, m: [r.normal(size=(n, m)), r.normal(size=(n, 1))]),
    "neg": (lambda a: ag.sum(ag.neg(a) * a), lambda r, n, m: [r.normal(size=(n, m))]),
    "mul": (lambda a, b: ag.sum(ag.mul(a, b)), lambda r, n, m: [r.normal(size=(n, m)), r.normal(size=(1, m))]),
    "div": (lambda a, b: ag.sum(ag.div(a, b)),
            lambda r, n, m: [r.normal(size=(n, m)), r.uniform(0.5, 2.0, size=(n, m)) * r.choice([-1, 1], (n, m))]),
    "matmul": (lambda a, b: ag.sum(ag.matmul(a, b) ** 2),
               lambda r, n, m: [r.normal(size=(2, n, m)), r.normal(size=(m, 3))]),
    "affine": (lambda x, w, b: ag.sum(ag.affine(x, w, b) ** 2),
               lambda r, n, m: [r.normal(size=(2, n, m)), r.normal(size=(m, 3)), r.normal(size=(3,))]),
    "softmax": (lambda a, w: ag.sum(ag.softmax(a, axis=-1) * w),
                lambda r, n, m: [r.normal(size=(n, m)), r.normal(size=(n, m))]),
    "log_softmax": (lambda a, w: ag.sum(ag.log_softmax(a, axis=-1) * w),
                    lambda r, n, m: [r.normal(size=(n, m)), r.normal(size=(n, m))]),
    "layer_norm": (lambda x, g, b, w: ag.sum(ag.layer_norm(x, g, b) * w),
                   lambda r, n, m: [r.normal(size=(n, m + 1)), r.normal(size=(m + 1,)), r.normal(size=(m + 1,)),
                                    r.normal(size=(n, m + 1))]),
    "gelu": (lambda a: ag.sum(ag.gelu(a) ** 2), lambda r, n, m: [r.normal(size=(n, m))]),
    "tanh": (lambda a: ag.sum(ag.tanh(a) ** 2), lambda r, n, m: [r.normal(size=(n, m))]),
    "sigmoid": (lambda a: ag.sum(ag.sigmoid(a) ** 2), lambda r, n, m: [r.normal(size=(n, m))]),
    "exp": (lambda a: ag.sum(ag.exp(a)), lambda r, n, m: [r.normal(size=(n, m))]),
    "log": (lambda a: ag.sum(ag.log(a)), lambda r, n, m: [r.uniform(0.2, 3.0, size=(n, m))]),
    "concat": (lambda a, b: ag.sum(ag.concat([a, b], axis=-1) ** 2),
               lambda r, n, m: [r.normal(size=(n, m)), r.normal(size=(n, 2))]),
    "getitem": (lambda a: ag.sum(ag.getitem(a, (slice(None), slice(0, 2))) ** 2),
                lambda r, n, m: [r.normal(size=(n, m + 2))]),
    "reshape": (lambda a, w: ag.sum(ag.reshape(a, (-1,)) * w),
                lambda r, n, m: [r.normal(size=(n, m)), r.normal(size=(n * m,))]),
    "transpose": (lambda a, w: ag.sum(ag.transpose(a, (1, 0)) * w),
                  lambda r, n, m: [r.normal(size=(n, m)), r.normal(size=(m, n))]),
    "clamp": (lambda a: ag.sum(ag.clamp(a, -0.5, 0.7) ** 2),
              lambda r, n, m: [_away_from(r.uniform(-2, 2, size=(n, m)), (-0.5, 0.7))]),
    "mean": (lambda a: ag.sum(ag.mean(a, axis=0) ** 2), lambda r, n, m: [r.normal(size=(n, m))]),
    "sum": (lambda a: ag.sum(ag.sum(a, axis=1, keepdims=True) ** 2), lambda r, n, m: [r.normal(size=(n, m))]),
    "sqrt": (lambda a: ag.sum(ag.sqrt(a)), lambda r, n, m: [r.uniform(0.2, 3.0, size=(n, m))]),
    "pow": (lambda a: ag.sum(ag.pow(a, 3)), lambda r, n, m: [r.normal(size=(n, m))]),
    "conv1d": (lambda x, w, b: ag.sum(ag.conv1d(x, w, b) ** 2),
               lambda r, n, m: [r.normal(size=(2, n + 3, m)), r.normal(size=(3, m, 2)), r.normal(size=(2,))]),
    "embedding": (lambda t: ag.sum(ag.embedding(t, np.array([[0, 2, 2], [1, 0, 2]])) ** 2),
                  lambda r, n, m: [r.normal(size=(3, m))]),
    "cross_entropy": (lambda z: ag.cross_entropy(z, np.arange(6).reshape(2, 3) % 4),
                      lambda r, n, m: [r.normal(size=(2, 3, 4))]),
}


def test_every_op_has_a_gradient_case():
    assert set(CASES) == set(ag.SUPPORTED_OPS)


@pytest.mark.parametrize("op", sorted(CASES))
@given(seed=st.integers(0, 2 ** 31 - 1), n=st.integers(1, 4), m=st.integers(1, 4))
def test_gradcheck_float64(op, seed, n, m):
    fn, make = CASES[op]
    arrays = make(np.random.default_rng(seed), n, m)
    assert ag.gradcheck(fn, arrays) < TOL


def test_gradcheck_detects_a_wrong_gradient():
    def bad(a):
        out = ag.exp(a)
        out._vjp = lambda g: (g * 2.0,)  # deliberately wrong
        return ag.sum(out)
    assert ag.gradcheck(bad, [np.array([0.3, -0.2])]) > 0.1


def test_clamp_gradient_zero_outside():
    x = Tensor([-2.0, 0.5, 3.0], requires_grad=True)
    ag.backward(ag.sum(ag.clamp(x, 0.0, 1.0)))
    assert x.grad.tolist() == [0.0, 1.0, 0.0]


def test_sqrt_gradient_at_zero_is_finite():
    x = Tensor([0.0, 4.0], requires_grad=True)
    ag.backward(ag.sum(ag.sqrt(x)))
    assert np.isfinite(x.grad).all()
    assert x.grad[1] == pytest.approx(0.25)


def test_softmax_matches_direct_formula():
    x = np.random.default_rng(1).normal(size=(3, 5))
    e = np.exp(x - x.max(-1, keepdims=True))
    np.testing.assert_allclose(ag.softmax(Tensor(x, dtype=np.float64)).data, e / e.sum(-1, keepdims=True), atol=1e-12)


def test_layer_norm_matches_direct_formula():
    x = np.random.default_rng(2).normal(size=(4, 6))
    g, b = np.full(6, 2.0), np.full(6, 0.5)
    want = 2.0 * (x - x.mean(-1, keepdims=True)) / np.sqrt(x.var(-1, keepdims=True) + 1e-5) + 0.5
    with ag.float64():
        got = ag.layer_norm(Tensor(x), Tensor(g), Tensor(b)).data
    np.testing.assert_allclose(got, want, atol=1e-10)


def _conv_loop(x, w, b):
    B, T, _ = x.shape
    k = w.shape[0]
    pad = np.concatenate([np.repeat(x[:, :1], k - 1, axis=1), x], axis=1)
    out = np.zeros((B, T, w.shape[2]))
    for t in range(T):
        for j in range(k):
            out[:, t] += pad[:, t + j] @ w[j]
    return out + b


def test_conv1d_matches_loop_oracle():
    r = np.random.default_rng(3)
    x, w, b = r.normal(size=(2, 7, 3)), r.normal(size=(3, 3, 4)), r.normal(size=4)
    with ag.float64():
        got = ag.conv1d(Tensor(x), Tensor(w), Tensor(b)).data
    np.testing.assert_allclose(got, _conv_loop(x, w, b), atol=1e-12)


@given(t=st.integers(0, 6), seed=st.integers(0, 1000))
def test_conv1d_is_causal(t, seed):
    r = np.random.default_rng(seed)
    x, w = r.normal(size=(1, 7, 2)), r.normal(size=(3, 2, 2))
    y = r.normal(size=x.shape)
    x2 = x.copy()
    x2[:, t + 1:] = y[:, t + 1:]
    with ag.float64():
        a = ag.conv1d(Tensor(x), Tensor(w)).data
        b = ag.conv1d(Tensor(x2), Tensor(w)).data
    np.testing.assert_array_equal(a[:, :t + 1], b[:, :t + 1])


def test_conv1d_rejects_short_sequence():
    with pytest.raises(ValueError):
        ag.conv1d(Tensor(np.zeros((1, 2, 3))), Tensor(np.zeros((3, 3, 1))))


def test_cross_entropy_uniform_and_range_check():
    z = Tensor(np.zeros((2, 5, 259)))
    assert float(ag.cross_entropy(z, np.zeros((2, 5), int)).data) == pytest.approx(math.log(259), rel=1e-6)
    with pytest.raises(IndexError):
        ag.cross_entropy(z, np.full((2, 5), 259))


def test_non_finite_output_raises_with_node_id():
    with pytest.raises(ag.NumericError) as e:
        ag.log(Tensor([0.0, 1.0]))
    assert e.value.node_id is not None


def test_backward_without_graph():
    with pytest.raises(ag.GraphStateError):
        ag.backward(Tensor(1.0))
    with ag.no_grad():
        y = ag.sum(Tensor([1.0, 2.0], requires_grad=True) * 2)
    assert not y.requires_grad
    with pytest.raises(ag.GraphStateError):
        ag.backward(y)


def test_backward_needs_scalar_and_shapes_must_match():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with pytest.raises(ag.DimensionError):
        ag.backward(x * 2)
    with pytest.raises(ag.DimensionError):
        ag.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ag.DimensionError):
        ag.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4,))))


def test_shared_subexpression_accumulates():
    x = Tensor([3.0], requires_grad=True)
    y = x * x
    ag.backward(ag.sum(y + y))
    assert x.grad[0] == pytest.approx(12.0)


def test_adam_matches_reference_update():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True, dtype=np.float64)
    opt = ag.Adam({"p": p}, lr=0.1, beta1=0.9, beta2=0.999, eps=1e-8)
    m = v = np.zeros(2)
    ref = np.array([1.0, -2.0])
    grads = [np.array([0.5, -1.0]), np.array([0.2, 0.3]), np.array([-0.4, 0.1])]
    for t, g in enumerate(grads, 1):
        opt.step({"p": g})
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref - 0.1 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    np.testing.assert_allclose(p.data, ref, rtol=1e-12)


def test_clip_grad_norm():
    a = Tensor([0.0], requires_grad=True)
    b = Tensor([0.0], requires_grad=True)
    a.grad, b.grad = np.array([3.0]), np.array([4.0])
    assert ag.clip_grad_norm([a, b], 1.0) == pytest.approx(5.0)
    assert math.hypot(a.grad[0], b.grad[0]) == pytest.approx(1.0, rel=1e-6)
