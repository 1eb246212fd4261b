"""Preference losses for diffusion models learning from positive/negative demonstrations.

Every loss is built on the advantage

    A(x0, x_t, sigma) = ||x0 - f_ref(x_t)||^2 - ||x0 - f_theta(x_t)||^2

i.e. how much closer the trained model's denoised estimate is to the
demonstration than the frozen reference model's. Losses return the scalar
value together with hand-derived gradients for the trained model only; the
reference model is evaluated forward-only.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInput
from .toy_diffusion import NoiseSchedule

VARIANTS = ("dpo", "kto_paired", "kto_unpaired", "kto_cont_instance", "kto_cont_dist", "dpok")


@dataclass
class LossConfig:
    beta: float = 5000.0
    variant: str = "kto_paired"
    r_threshold: float | None = None  # None: use the batch mean reward
    raw_sigmoid: bool = False  # maximize E[sigmoid(.)] directly instead of minimizing -log sigmoid(.)
    sigma_weighting: bool = False  # multiply beta by the EDM loss weight lambda(sigma)

    def __post_init__(self):
        if not self.beta > 0:
            raise InvalidInput("beta must be positive")
        if self.variant not in VARIANTS:
            raise InvalidInput(f"unknown loss variant {self.variant!r}; expected one of {VARIANTS}")


@dataclass
class NoisedBatch:
    """Demonstrations x0 with their noised versions x_t at noise levels sigma."""

    x0: np.ndarray
    x_t: np.ndarray
    sigma: np.ndarray
    condition: np.ndarray

    def __post_init__(self):
        self.x0 = np.atleast_2d(np.asarray(self.x0, dtype=np.float64))
        self.x_t = np.atleast_2d(np.asarray(self.x_t, dtype=np.float64))
        n = self.x0.shape[0]
        self.sigma = np.broadcast_to(np.asarray(self.sigma, dtype=np.float64), (n,)).copy()
        self.condition = np.broadcast_to(np.asarray(self.condition, dtype=int), (n,)).copy()
        if self.x_t.shape != self.x0.shape:
            raise InvalidInput("x0 and x_t must have equal shapes")

    def __len__(self):
        return self.x0.shape[0]

    @classmethod
    def concat(cls, *batches) -> "NoisedBatch":
        return cls(np.concatenate([b.x0 for b in batches]), np.concatenate([b.x_t for b in batches]),
                   np.concatenate([b.sigma for b in batches]), np.concatenate([b.condition for b in batches]))


@dataclass
class AdvantageInputs:
    x0: np.ndarray
    x_t: np.ndarray
    sigma: float
    condition: int
    theta: object
    ref: object


@dataclass
class LossResult:
    loss: float
    grads: dict
    advantages: np.ndarray
    info: dict = field(default_factory=dict)


def noise_batch(x0, condition, rng, schedule: NoiseSchedule | None = None, sigma=None) -> NoisedBatch:
    """Noise every demonstration at an independently drawn log-normal sigma."""
    sch = schedule or NoiseSchedule()
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    n = x0.shape[0]
    if sigma is None:
        sigma = sch.sigma_from_normal(rng.standard_normal(n))
    sigma = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (n,))
    x_t = x0 + sigma[:, None] * rng.standard_normal(x0.shape)
    return NoisedBatch(x0, x_t, sigma, condition)


def noise_pairs(pos_x0, neg_x0, pos_cond, neg_cond, rng, schedule=None) -> tuple[NoisedBatch, NoisedBatch]:
    """Noise paired demonstrations: one sigma per pair, independent noise per member."""
    sch = schedule or NoiseSchedule()
    n = np.atleast_2d(pos_x0).shape[0]
    sigma = sch.sigma_from_normal(rng.standard_normal(n))
    return noise_batch(pos_x0, pos_cond, rng, sch, sigma), noise_batch(neg_x0, neg_cond, rng, sch, sigma)


def advantage(inputs: AdvantageInputs) -> float:
    x0 = np.asarray(inputs.x0, dtype=np.float64)
    f_ref = np.asarray(inputs.ref(inputs.x_t, inputs.sigma, inputs.condition)).reshape(x0.shape)
    f_theta = np.asarray(inputs.theta(inputs.x_t, inputs.sigma, inputs.condition)).reshape(x0.shape)
    return float(np.sum((x0 - f_ref) ** 2) - np.sum((x0 - f_theta) ** 2))


def _advantages(theta, ref, batch: NoisedBatch):
    f_theta, cache = theta.forward(batch.x_t, batch.sigma, batch.condition)
    f_ref = ref(batch.x_t, batch.sigma, batch.condition)
    err_theta = batch.x0 - f_theta
    adv = np.sum((batch.x0 - f_ref) ** 2, axis=1) - np.sum(err_theta ** 2, axis=1)
    return adv, err_theta, cache


def _backprop_advantage(theta, cache, err_theta, d_loss_d_adv):
    # dA/df_theta = 2 (x0 - f_theta)
    return theta.backward(cache, 2.0 * d_loss_d_adv[:, None] * err_theta)


def _beta_t(config: LossConfig, sigma, schedule: NoiseSchedule):
    if config.sigma_weighting:
        return config.beta * schedule.loss_weight(sigma)
    return np.full_like(sigma, config.beta)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(z, dtype=np.float64)))


def _pref_objective(z, raw_sigmoid: bool):
    """Per-item loss and its derivative for preference margin ``z``."""
    if raw_sigmoid:
        s = _sigmoid(z)
        return -s, -s * (1.0 - s)
    return np.logaddexp(0.0, -z), -_sigmoid(-z)


def dpo_loss(theta, ref, pos: NoisedBatch, neg: NoisedBatch, config: LossConfig) -> LossResult:
    """Paired preference loss on the advantage margin A(x+) - A(x-)."""
    if len(pos) != len(neg):
        raise InvalidInput("positive and negative batches must be paired")
    n = len(pos)
    both = NoisedBatch.concat(pos, neg)
    adv, err, cache = _advantages(theta, ref, both)
    a_pos, a_neg = adv[:n], adv[n:]
    beta_t = _beta_t(config, pos.sigma, theta.schedule)
    z = beta_t * (a_pos - a_neg)
    per, dz = _pref_objective(z, config.raw_sigmoid)
    g = dz * beta_t / n
    d_adv = np.concatenate([g, -g])
    grads = _backprop_advantage(theta, cache, err, d_adv)
    return LossResult(float(np.mean(per)), grads, adv, {"per_item": per, "margin": z})


def batch_reference_point(adv) -> float:
    """max(0, mean advantage): the KTO reference point estimated from a batch."""
    return max(0.0, float(np.mean(adv)))


def _kto_core(theta, ref, batch, signed_weight, config, info, a_bar):
    n = len(batch)
    adv, err, cache = _advantages(theta, ref, batch)
    # Stop-gradient: the reference point is a constant w.r.t. the parameters.
    if a_bar is None:
        a_bar = batch_reference_point(adv)
    beta_t = _beta_t(config, batch.sigma, theta.schedule)
    z = beta_t * signed_weight * (adv - a_bar)
    per, dz = _pref_objective(z, config.raw_sigmoid)
    d_adv = dz * beta_t * signed_weight / n
    grads = _backprop_advantage(theta, cache, err, d_adv)
    info.update({"per_item": per, "a_bar": a_bar, "weights": signed_weight})
    return LossResult(float(np.mean(per)), grads, adv, info)


def kto_loss(theta, ref, batch: NoisedBatch, labels, config: LossConfig, paired: bool = False,
             a_bar: float | None = None) -> LossResult:
    """Preference loss pushing positives above and negatives below a reference advantage.

    ``labels`` are booleans (True = positive) or +/-1. The paired variant
    requires both classes; the unpaired variant tolerates a missing class and
    records a warning in ``info["warnings"]``. ``a_bar`` defaults to
    ``batch_reference_point`` of this batch's advantages; pass a value
    computed from an independent batch to override it.
    """
    labels = np.asarray(labels)
    sign = np.where(labels.astype(float) > 0, 1.0, -1.0)
    if sign.size != len(batch):
        raise InvalidInput("one label per demonstration required")
    notes = []
    if not np.any(sign > 0) or not np.any(sign < 0):
        msg = "batch has no positive demonstrations" if not np.any(sign > 0) else "batch has no negative demonstrations"
        if paired:
            raise InvalidInput(msg)
        notes.append(msg)
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
    return _kto_core(theta, ref, batch, sign, config, {"warnings": notes}, a_bar)


def kto_loss_continuous_instance(theta, ref, batch: NoisedBatch, rewards, r_threshold, config: LossConfig,
                                 a_bar: float | None = None) -> LossResult:
    """Preference loss with the hard sign replaced by sigmoid(r - r_threshold)."""
    rewards = np.asarray(rewards, dtype=np.float64)
    if rewards.size != len(batch):
        raise InvalidInput("one reward per demonstration required")
    weight = _sigmoid(rewards - r_threshold)
    return _kto_core(theta, ref, batch, weight, config, {}, a_bar)


def kto_loss_continuous_dist(theta, ref, batch: NoisedBatch, from_pos, r_pos: float, r_neg: float,
                             config: LossConfig, a_bar: float | None = None) -> LossResult:
    """Set-level continuous weighting: sigmoid(r(D_r) - (r(D+) + r(D-)) / 2) per item from set D_r."""
    from_pos = np.asarray(from_pos, dtype=bool)
    if from_pos.size != len(batch):
        raise InvalidInput("one set label per demonstration required")
    mid = 0.5 * (r_pos + r_neg)
    weight = np.where(from_pos, _sigmoid(r_pos - mid), _sigmoid(r_neg - mid))
    return _kto_core(theta, ref, batch, weight, config, {}, a_bar)


def dpok_loss(theta, batch: NoisedBatch, rewards, r_threshold, config: LossConfig) -> LossResult:
    """Reward-weighted denoising regression: beta (r - r_threshold) ||x0 - f_theta(x_t)||^2."""
    rewards = np.asarray(rewards, dtype=np.float64)
    n = len(batch)
    if rewards.size != n:
        raise InvalidInput("one reward per demonstration required")
    f_theta, cache = theta.forward(batch.x_t, batch.sigma, batch.condition)
    err = f_theta - batch.x0
    sq = np.sum(err ** 2, axis=1)
    w = _beta_t(config, batch.sigma, theta.schedule) * (rewards - r_threshold)
    grads = theta.backward(cache, (2.0 / n) * w[:, None] * err)
    return LossResult(float(np.mean(w * sq)), grads, np.empty(0), {"weights": w, "sq_error": sq})
