import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from distreward.errors import InvalidInput
from distreward.losses import (
    AdvantageInputs, LossConfig, NoisedBatch, advantage, batch_reference_point, dpo_loss, dpok_loss, kto_loss,
    kto_loss_continuous_dist, kto_loss_continuous_instance, noise_batch, noise_pairs,
)
from distreward.toy_diffusion import PARAM_ORDER, DenoiserModel
from oracles import central_fd

LOG2 = float(np.log(2.0))


def flat_grads(g):
    return np.concatenate([g[k].ravel() for k in PARAM_ORDER])


def rel_err(g, fd):
    return np.max(np.abs(g - fd)) / max(np.max(np.abs(fd)), 1e-12)


def random_batch(seed, n=6):
    rng = np.random.default_rng(seed)
    x0 = rng.standard_normal((n, 2))
    sigma = np.exp(rng.uniform(-2.0, 1.0, n))
    return NoisedBatch(x0, x0 + sigma[:, None] * rng.standard_normal((n, 2)), sigma, rng.integers(0, 3, n))


class Shifted:
    """Denoiser returning x0 plus a fixed error (for closed-form advantages)."""

    def __init__(self, x0, err):
        self.x0, self.err = x0, err

    def __call__(self, x_t, sigma, cond):
        return self.x0 + self.err


def test_advantage_examples():
    x0 = np.array([[0.5, -1.0]])
    e = np.array([[0.3, 0.4]])
    ref = Shifted(x0, e)
    assert advantage(AdvantageInputs(x0, x0, 1.0, 0, ref, ref)) == 0.0
    assert advantage(AdvantageInputs(x0, x0, 1.0, 0, Shifted(x0, 0 * e), ref)) == pytest.approx(0.25)


@given(st.integers(0, 10_000))
def test_advantage_raw_norms_and_antisymmetry(seed):
    rng = np.random.default_rng(seed)
    theta = DenoiserModel.init(2, 2, width=5, seed=seed % 97, out_scale=0.5)
    ref = DenoiserModel.init(2, 2, width=5, seed=seed % 97 + 1, out_scale=0.5)
    x0, xt = rng.standard_normal((2, 1, 2))
    sig, c = float(np.exp(rng.uniform(-2, 2))), int(rng.integers(0, 2))
    a = advantage(AdvantageInputs(x0, xt, sig, c, theta, ref))
    ft = theta(xt, np.array([sig]), [c])
    fr = ref(xt, np.array([sig]), [c])
    want = float(((x0 - fr) ** 2).sum()) - float(((x0 - ft) ** 2).sum())
    assert a == pytest.approx(want, abs=1e-12)
    assert advantage(AdvantageInputs(x0, xt, sig, c, ref, theta)) == pytest.approx(-a, abs=1e-12)


def test_dpo_equal_advantages_is_log2(tiny_models):
    theta, _ = tiny_models
    b = random_batch(0, 4)
    res = dpo_loss(theta, theta, b, b, LossConfig(beta=3.0))
    assert res.loss == pytest.approx(LOG2)
    assert np.allclose(flat_grads(res.grads), 0.0)


def test_dpo_saturates_for_large_beta(tiny_models):
    theta, ref = tiny_models
    pos, neg = random_batch(1, 4), random_batch(2, 4)
    res = dpo_loss(theta, ref, pos, neg, LossConfig(beta=1.0))
    margin = res.info["margin"]
    good = margin > 0
    big = dpo_loss(theta, ref, pos, neg, LossConfig(beta=1e6))
    assert np.all(big.info["per_item"][good] < 1e-6)
    assert np.all(res.info["per_item"] > 0)


def test_raw_sigmoid_form(tiny_models):
    theta, ref = tiny_models
    pos, neg = random_batch(3, 4), random_batch(4, 4)
    res = dpo_loss(theta, ref, pos, neg, LossConfig(beta=1.0, raw_sigmoid=True))
    z = res.info["margin"]
    assert res.loss == pytest.approx(float(np.mean(-1.0 / (1.0 + np.exp(-z)))))


def _check_fd(make_loss, theta):
    res = make_loss(theta)
    fd = central_fd(lambda v: make_loss(theta.with_flat(v)).loss, theta.flat(), 1e-6)
    assert rel_err(flat_grads(res.grads), fd) < 1e-4


@pytest.mark.parametrize("seed", range(3))
def test_gradients_match_finite_differences(seed, tiny_models):
    theta, ref = tiny_models
    theta = theta.with_flat(theta.flat() + 0.1 * np.random.default_rng(seed).standard_normal(theta.n_params()))
    cfg = LossConfig(beta=2.0)
    pos, neg = random_batch(10 + seed), random_batch(20 + seed)
    batch = NoisedBatch.concat(pos, neg)
    labels = np.r_[np.ones(6), -np.ones(6)]
    rewards = np.random.default_rng(seed).standard_normal(12)
    # Reference point held fixed at its value for the unperturbed parameters.
    a_bar = kto_loss(theta, ref, batch, labels, cfg).info["a_bar"]
    _check_fd(lambda m: dpo_loss(m, ref, pos, neg, cfg), theta)
    _check_fd(lambda m: kto_loss(m, ref, batch, labels, cfg, paired=True, a_bar=a_bar), theta)
    _check_fd(lambda m: kto_loss(m, ref, batch, labels, cfg, paired=False, a_bar=a_bar), theta)
    _check_fd(lambda m: kto_loss_continuous_instance(m, ref, batch, rewards, 0.1, cfg, a_bar=a_bar), theta)
    _check_fd(lambda m: kto_loss_continuous_dist(m, ref, batch, labels > 0, -0.2, -0.9, cfg, a_bar=a_bar), theta)
    _check_fd(lambda m: dpok_loss(m, batch, rewards, 0.1, cfg), theta)


def test_ref_model_untouched(tiny_models):
    theta, ref = tiny_models
    before = ref.flat().copy()
    b = random_batch(5)
    res = kto_loss(theta, ref, b, np.r_[np.ones(3), -np.ones(3)], LossConfig(beta=1.0))
    assert set(res.grads) == set(PARAM_ORDER)
    assert np.array_equal(ref.flat(), before)


def test_kto_reference_point_clamped():
    assert batch_reference_point([-3.0, -1.0]) == 0.0
    assert batch_reference_point([1.0, 3.0]) == 2.0


def test_kto_equal_advantages_give_log2(tiny_models):
    theta, _ = tiny_models
    b = random_batch(6)
    res = kto_loss(theta, theta, b, np.r_[np.ones(3), -np.ones(3)], LossConfig(beta=7.0), paired=True)
    assert np.allclose(res.info["per_item"], LOG2)


def test_kto_single_positive_above_reference(tiny_models):
    theta, ref = tiny_models
    b = random_batch(7, 1)
    with pytest.warns(RuntimeWarning):
        res = kto_loss(theta, ref, b, [1], LossConfig(beta=1.0), a_bar=float(advantage_of(theta, ref, b)) - 1.0)
    assert res.loss < LOG2


def advantage_of(theta, ref, b):
    return advantage(AdvantageInputs(b.x0, b.x_t, b.sigma, b.condition, theta, ref))


def test_kto_empty_class_handling(tiny_models):
    theta, ref = tiny_models
    b = random_batch(8, 3)
    with pytest.raises(InvalidInput):
        kto_loss(theta, ref, b, [1, 1, 1], LossConfig(), paired=True)
    with warnings.catch_warnings(record=True) as w:
        warnings.simplefilter("always")
        res = kto_loss(theta, ref, b, [-1, -1, -1], LossConfig(), paired=False)
    assert res.info["warnings"] and w


def test_continuous_instance_weights(tiny_models):
    theta, ref = tiny_models
    b = random_batch(9, 4)
    cfg = LossConfig(beta=1.5)
    r = np.array([0.3, 0.3, 2.0, -1.0])
    res = kto_loss_continuous_instance(theta, ref, b, r, 0.3, cfg)
    assert res.info["weights"][0] == 0.5
    want = 1.0 / (1.0 + np.exp(-(r - 0.3)))
    assert np.allclose(res.info["weights"], want, rtol=1e-12, atol=0)
    z = cfg.beta * want * (res.advantages - res.info["a_bar"])
    assert np.allclose(res.info["per_item"], np.log1p(np.exp(-z)), atol=1e-12)


def test_continuous_instance_limits(tiny_models):
    theta, ref = tiny_models
    b = random_batch(10, 4)
    cfg = LossConfig(beta=2.0)
    a_bar = 0.05
    plus = kto_loss_continuous_instance(theta, ref, b, np.full(4, np.inf), 0.0, cfg, a_bar=a_bar)
    with pytest.warns(RuntimeWarning):
        hard = kto_loss(theta, ref, b, np.ones(4), cfg, a_bar=a_bar)
    assert plus.loss == pytest.approx(hard.loss, abs=1e-9)
    # The sigmoid weight vanishes (it does not become -1) far below the threshold.
    minus = kto_loss_continuous_instance(theta, ref, b, np.full(4, -np.inf), 0.0, cfg, a_bar=a_bar)
    assert np.allclose(minus.info["per_item"], LOG2)


def test_continuous_dist_weights(tiny_models):
    theta, ref = tiny_models
    b = random_batch(11, 4)
    from_pos = np.array([True, True, False, False])
    eq = kto_loss_continuous_dist(theta, ref, b, from_pos, -1.0, -1.0, LossConfig())
    assert np.all(eq.info["weights"] == 0.5)
    r_pos, r_neg = -0.2, -1.4
    res = kto_loss_continuous_dist(theta, ref, b, from_pos, r_pos, r_neg, LossConfig())
    w_pos = 1.0 / (1.0 + np.exp(-(r_pos - r_neg) / 2))
    assert np.allclose(res.info["weights"], [w_pos, w_pos, 1 - w_pos, 1 - w_pos])
    swapped = kto_loss_continuous_dist(theta, ref, b, from_pos, r_neg, r_pos, LossConfig())
    assert np.allclose(swapped.info["weights"] - 0.5, -(res.info["weights"] - 0.5))


def test_dpok_threshold_and_direction(tiny_models):
    theta, _ = tiny_models
    b = random_batch(12, 4)
    zero = dpok_loss(theta, b, np.full(4, 0.7), 0.7, LossConfig(beta=3.0))
    assert zero.loss == 0.0 and np.allclose(flat_grads(zero.grads), 0.0)
    x0 = np.array([[0.2, 0.1]])
    perfect = DenoiserModel.init(2, 2, width=4, seed=0)
    perfect = perfect.with_flat(np.zeros(perfect.n_params()))
    # With zero weights and sigma_min the denoiser returns c_skip * x_t ~= x_t = x0.
    one = NoisedBatch(x0, x0 / perfect.schedule.c_skip(perfect.schedule.sigma_min), perfect.schedule.sigma_min, 0)
    assert dpok_loss(perfect, one, [1.0], 0.0, LossConfig(beta=1.0)).loss == pytest.approx(0.0, abs=1e-20)
    w = dpok_loss(theta, b, [1.0, -1.0, 2.0, 0.0], 0.0, LossConfig(beta=1.0)).info["weights"]
    assert w[0] > 0 > w[1] and w[3] == 0


def test_noise_pairs_share_sigma(rng):
    pos, neg = noise_pairs(np.zeros((5, 2)), np.ones((5, 2)), 0, 1, rng)
    assert np.array_equal(pos.sigma, neg.sigma)
    assert not np.allclose(pos.x_t - pos.x0, neg.x_t - neg.x0)
    single = noise_batch(np.zeros((200, 2)), 0, rng)
    assert len(np.unique(single.sigma)) == 200


def test_sigma_weighting_scales_beta(tiny_models):
    theta, ref = tiny_models
    b = random_batch(13, 4)
    res = kto_loss(theta, ref, b, [1, 1, -1, -1], LossConfig(beta=1.0, sigma_weighting=True), a_bar=0.0)
    lam = theta.schedule.loss_weight(b.sigma)
    z = lam * np.array([1, 1, -1, -1]) * res.advantages
    assert np.allclose(res.info["per_item"], np.logaddexp(0, -z))


def test_loss_config_validation():
    with pytest.raises(InvalidInput):
        LossConfig(beta=0.0)
    with pytest.raises(InvalidInput):
        LossConfig(variant="ddpo")
    assert LossConfig().beta == 5000.0
