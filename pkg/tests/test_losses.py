import math
import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st

from superpose import autograd as ag
from superpose.autograd import Tensor
from superpose.bspline import AlphaSchedule
from superpose.errors import ConfigError
from superpose.losses import LossWeights, alpha_reg, lm_loss, perplexity_from_loss, recon_loss, total_loss


def test_recon_zero_when_exact():
    h = np.random.default_rng(0).normal(size=(2, 3, 4))
    out = recon_loss({1: Tensor(h)}, {1: h}, LossWeights())
    assert float(out.data) == 0.0


def test_recon_hand_example():
    hh = Tensor(np.array([[3.0, 0.0], [0.0, 4.0]]))
    tgt = np.zeros((2, 2))
    w = LossWeights(mse=1.0, l2=0.1)
    # mean(r^2) = 25/4, ||r|| = 5
    assert float(recon_loss({1: hh, 2: hh}, {1: tgt, 2: tgt}, w).data) == pytest.approx(2 * (6.25 + 0.5))


def test_recon_missing_target():
    with pytest.raises(ConfigError):
        recon_loss({1: Tensor(np.zeros(2))}, {}, LossWeights())


def test_lm_uniform_and_perplexity():
    z = Tensor(np.zeros((1, 4, 259)))
    loss = lm_loss(z, np.array([[1, 2, 3, 4]]))
    assert float(loss.data) == pytest.approx(math.log(259), rel=1e-6)
    assert perplexity_from_loss(loss) == pytest.approx(259, abs=1e-3)


def _reg_oracle(c, b, tv):
    c, b = np.asarray(c, np.float64), np.asarray(b, np.float64)
    smooth = ((c[1:] - c[:-1]) ** 2).sum()
    central = (c ** 2).sum()
    mu = b.mean(0)
    var = ((b - mu) ** 2).mean(0)
    return smooth, central, np.mean(mu ** 2), np.mean((var - tv) ** 2)


@pytest.mark.parametrize("mode", ["1d", "2d"])
def test_alpha_reg_components(mode):
    r = np.random.default_rng(1)
    shape_c, shape_b = ((8,), (6,)) if mode == "1d" else ((8, 3), (6, 3))
    c, b = r.normal(size=shape_c), r.normal(size=shape_b)
    with ag.float64():
        s = AlphaSchedule(Tensor(c), Tensor(b), 3, 6, mode)
        w = LossWeights(smoothness=1.0, centrality=2.0, mean_bias=3.0, variance_bias=4.0, target_variance=0.01)
        total, parts = alpha_reg(s, w)
    sm, ce, mb, vb = _reg_oracle(c, b, 0.01)
    assert parts["smoothness"] == pytest.approx(sm)
    assert parts["centrality"] == pytest.approx(ce)
    assert parts["mean_bias"] == pytest.approx(mb)
    assert parts["variance_bias"] == pytest.approx(vb)
    assert float(total.data) == pytest.approx(sm + 2 * ce + 3 * mb + 4 * vb)


def test_alpha_reg_zero_when_flat_and_on_target():
    s = AlphaSchedule(Tensor(np.zeros(8)), Tensor(np.array([0.1, -0.1] * 3)), 3, 6)
    _, parts = alpha_reg(s, LossWeights(target_variance=0.01))
    assert all(v == pytest.approx(0.0, abs=1e-12) for v in parts.values())


def test_total_loss_weights():
    parts = {"lm": Tensor(2.0), "recon": Tensor(3.0), "alpha_reg": Tensor(5.0)}
    zero = LossWeights(lm=0, recon=0, mse=0, l2=0, alpha_reg=0)
    assert float(total_loss("2d", parts, zero).data) == 0.0
    only_lm = LossWeights(lm=1, recon=0, alpha_reg=0)
    assert float(total_loss("2d", parts, only_lm).data) == float(parts["lm"].data)
    w = LossWeights(lm=1, recon=0.5, alpha_reg=0.1)
    assert float(total_loss("2d", parts, w).data) == pytest.approx(2 + 1.5 + 0.5)
    with pytest.warns(UserWarning):
        assert float(total_loss("1d", parts, w).data) == pytest.approx(3.5)
    with pytest.raises(ConfigError):
        total_loss("3d", parts, w)


def test_no_warning_without_alpha_reg():
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        total_loss("1d", {"lm": Tensor(1.0), "recon": Tensor(1.0)}, LossWeights())


@pytest.mark.parametrize("bad", [{"l2": -1.0}, {"lm": float("nan")}, {"alpha_reg": float("inf")}])
def test_weight_validation(bad):
    with pytest.raises(ConfigError):
        LossWeights(**bad)


# -- gradient checks over every objective term ----------------------------------

R = np.random.default_rng(7)


def _sched(c, b, mode):
    return AlphaSchedule(c, b, 2, 4, mode)


GRAD_CASES = {
    "recon": (lambda h: recon_loss({1: h, 2: h * 2.0}, {1: np.ones((2, 3, 4)), 2: np.zeros((2, 3, 4))},
                                   LossWeights(mse=1.0, l2=0.3)),
              [R.normal(size=(2, 3, 4))]),
    "lm": (lambda z: lm_loss(z, np.array([[0, 3, 2], [1, 1, 4]])), [R.normal(size=(2, 3, 5))]),
    "alpha_clamp": (lambda c, b: ag.sum(_sched(c, b, "1d").alpha_all() ** 2),
                    [R.uniform(0.3, 0.6, 5), R.uniform(-0.1, 0.1, 4)]),
    "alpha_reg_1d": (lambda c, b: alpha_reg(_sched(c, b, "1d"), LossWeights())[0],
                     [R.normal(size=5), R.normal(size=4)]),
    "alpha_reg_2d": (lambda c, b: alpha_reg(_sched(c, b, "2d"), LossWeights())[0],
                     [R.normal(size=(5, 3)), R.normal(size=(4, 3))]),
    "total_1d": (lambda z, h: total_loss("1d", {"lm": lm_loss(z, np.array([[1, 0]])),
                                                "recon": recon_loss({1: h}, {1: np.zeros((1, 2, 3))}, LossWeights())},
                                         LossWeights(recon=0.7)),
                 [R.normal(size=(1, 2, 3)), R.normal(size=(1, 2, 3))]),
    "total_2d": (lambda z, h, c, b: total_loss("2d", {
        "lm": lm_loss(z, np.array([[1, 0]])),
        "recon": recon_loss({1: h}, {1: np.zeros((1, 2, 3))}, LossWeights()),
        "alpha_reg": alpha_reg(_sched(c, b, "2d"), LossWeights())[0]}, LossWeights(alpha_reg=0.5)),
        [R.normal(size=(1, 2, 3)), R.normal(size=(1, 2, 3)), R.normal(size=(5, 3)), R.normal(size=(4, 3))]),
}


@pytest.mark.parametrize("name", sorted(GRAD_CASES))
def test_loss_gradcheck_float64(name):
    fn, arrays = GRAD_CASES[name]
    assert ag.gradcheck(fn, [a.copy() for a in arrays]) < 1e-4


@given(seed=st.integers(0, 10_000))
def test_recon_gradcheck_random(seed):
    r = np.random.default_rng(seed)
    h, t = r.normal(size=(2, 2, 3)), r.normal(size=(2, 2, 3))
    assert ag.gradcheck(lambda x: recon_loss({1: x}, {1: t}, LossWeights()), [h]) < 1e-4
