"""A small EDM-style conditional diffusion model over low-dimensional data.

The denoiser is a two-hidden-layer SiLU MLP wrapped in the EDM
preconditioning (variance-exploding, alpha_t = 1)::

    D(x; sigma, c) = c_skip(sigma) x + c_out(sigma) F(c_in(sigma) x, embed(sigma), onehot(c))

Gradients with respect to the MLP parameters are computed by hand so the
preference losses can be checked against finite differences without an
autodiff framework.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import InvalidInput, TrainingDiverged
from .gauss_stats import accumulate_stats, frechet_distance
from .optim import Adam, clip_grads

CHECKPOINT_FORMAT = "distreward-denoiser"
CHECKPOINT_VERSION = 1
PARAM_ORDER = ("W1", "b1", "W2", "b2", "W3", "b3")
NOISE_FREQS = (1.0, 2.0, 4.0)

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
MASK64 = 0xFFFFFFFFFFFFFFFF


# --------------------------------------------------------------------------- seeding


def fnv1a64(data: bytes) -> int:
    h = FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV_PRIME) & MASK64
    return h


def seed_from_prompt(prompt) -> int:
    """Stable 64-bit seed for a prompt string or integer condition id.

    Strings hash their UTF-8 bytes; integers hash the string ``"cond:<id>"``
    so that an id never collides with the literal prompt ``"<id>"``.
    """
    if isinstance(prompt, (bool, np.bool_)):
        raise InvalidInput("prompt must be a string or integer id")
    if isinstance(prompt, (int, np.integer)):
        data = f"cond:{int(prompt)}".encode("utf-8")
    elif isinstance(prompt, str):
        data = prompt.encode("utf-8")
    else:
        raise InvalidInput(f"cannot hash prompt of type {type(prompt).__name__}")
    return fnv1a64(data)


def derive_seed(master: int, *names) -> int:
    """Seed for a named component, derived from the master seed."""
    key = "/".join([str(int(master))] + [str(n) for n in names])
    return fnv1a64(key.encode("utf-8"))


def rng_for(master: int, *names) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, *names))


# --------------------------------------------------------------------------- schedule


@dataclass(frozen=True)
class NoiseSchedule:
    sigma_min: float = 0.002
    sigma_max: float = 80.0
    sigma_data: float = 0.5
    p_mean: float = -0.4
    p_std: float = 1.0
    alpha: float = 1.0  # variance-exploding: x_t = alpha * x0 + sigma * eps with alpha fixed at 1

    def __post_init__(self):
        if not 0 < self.sigma_min < self.sigma_max:
            raise InvalidInput("need 0 < sigma_min < sigma_max")
        if self.sigma_data <= 0:
            raise InvalidInput("sigma_data must be positive")
        if self.alpha != 1.0:
            raise InvalidInput("only the variance-exploding convention (alpha = 1) is supported")

    def c_skip(self, sigma):
        sd2 = self.sigma_data ** 2
        return sd2 / (np.square(sigma) + sd2)

    def c_out(self, sigma):
        return sigma * self.sigma_data / np.sqrt(np.square(sigma) + self.sigma_data ** 2)

    def c_in(self, sigma):
        return 1.0 / np.sqrt(np.square(sigma) + self.sigma_data ** 2)

    def c_noise(self, sigma):
        return np.log(sigma) / 4.0

    def loss_weight(self, sigma):
        return (np.square(sigma) + self.sigma_data ** 2) / np.square(sigma * self.sigma_data)

    def sigma_from_normal(self, z):
        return np.clip(np.exp(self.p_mean + self.p_std * np.asarray(z, dtype=np.float64)),
                       self.sigma_min, self.sigma_max)

    def ladder(self, steps: int) -> np.ndarray:
        """Log-spaced noise levels from sigma_max down to sigma_min, followed by 0."""
        if steps < 1:
            raise InvalidInput("steps must be >= 1")
        if steps == 1:
            sig = np.array([self.sigma_max])
        else:
            sig = np.geomspace(self.sigma_max, self.sigma_min, steps)
        return np.append(sig, 0.0)


def sample_sigma(seed, schedule: NoiseSchedule = NoiseSchedule(), size=None):
    """Log-normal training noise level(s): exp(p_mean + p_std z), clamped to the schedule range."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    z = rng.standard_normal(size)
    out = schedule.sigma_from_normal(z)
    return float(out) if size is None else out


def forward_noise(x0, sigma, seed, schedule: NoiseSchedule = NoiseSchedule()):
    """Draw x_t ~ N(x0, sigma^2 I)."""
    x0 = np.asarray(x0, dtype=np.float64)
    sig = np.asarray(sigma, dtype=np.float64)
    if np.any(sig < schedule.sigma_min) or np.any(sig > schedule.sigma_max):
        raise InvalidInput(f"sigma outside [{schedule.sigma_min}, {schedule.sigma_max}]")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    eps = rng.standard_normal(x0.shape)
    if sig.ndim == 1 and x0.ndim == 2:
        sig = sig[:, None]
    return x0 + sig * eps


# --------------------------------------------------------------------------- task


@dataclass
class ToyTask:
    """Per-condition Gaussian mixtures standing in for a conditional dataset.

    ``means`` has shape (conditions, components, dim); ``stds`` (conditions,
    components) gives isotropic component scales; ``weights`` (conditions,
    components) mixing proportions. ``embed`` maps samples into a fixed random
    feature space used by every embedding-based reward.
    """

    means: np.ndarray
    stds: np.ndarray
    weights: np.ndarray
    frame_len: int = 8
    embed_features: int = 6
    encoder_seed: int = 1234

    def __post_init__(self):
        self.means = np.asarray(self.means, dtype=np.float64)
        self.stds = np.asarray(self.stds, dtype=np.float64)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.means.ndim != 3:
            raise InvalidInput("means must have shape (conditions, components, dim)")
        c, k, _ = self.means.shape
        if self.stds.shape != (c, k) or self.weights.shape != (c, k):
            raise InvalidInput("stds and weights must have shape (conditions, components)")
        if np.any(self.stds <= 0):
            raise InvalidInput("component stds must be positive")
        if np.any(self.weights < 0) or not np.allclose(self.weights.sum(axis=1), 1.0):
            raise InvalidInput("mixture weights must be non-negative and sum to 1")
        rng = np.random.default_rng(self.encoder_seed)
        self._enc_w = rng.standard_normal((self.dim, self.embed_features))
        self._enc_b = rng.uniform(-1.0, 1.0, self.embed_features)

    @classmethod
    def default(cls, **kw) -> "ToyTask":
        means = np.array([
            [[-1.0, 1.0], [-1.0, -1.0]],
            [[1.0, 1.0], [1.0, -1.0]],
        ])
        stds = np.full((2, 2), 0.25)
        weights = np.full((2, 2), 0.5)
        return cls(means, stds, weights, **kw)

    @property
    def n_conditions(self) -> int:
        return self.means.shape[0]

    @property
    def n_components(self) -> int:
        return self.means.shape[1]

    @property
    def dim(self) -> int:
        return self.means.shape[2]

    @property
    def embed_dim(self) -> int:
        return self.dim + self.embed_features

    def shifted(self, delta) -> "ToyTask":
        return ToyTask(self.means + np.asarray(delta, dtype=np.float64), self.stds, self.weights,
                       self.frame_len, self.embed_features, self.encoder_seed)

    def condition_mean(self, c: int) -> np.ndarray:
        return self.weights[c] @ self.means[c]

    def sample(self, conditions, rng: np.random.Generator) -> np.ndarray:
        conditions = np.asarray(conditions, dtype=int)
        comp = np.array([rng.choice(self.n_components, p=self.weights[c]) for c in conditions], dtype=int)
        noise = rng.standard_normal((conditions.size, self.dim))
        return self.means[conditions, comp] + self.stds[conditions, comp][:, None] * noise

    def sample_text_like(self, conditions, rng: np.random.Generator, jitter: float = 0.5) -> np.ndarray:
        """A second reference channel: component centres plus coarse jitter, no fine detail."""
        conditions = np.asarray(conditions, dtype=int)
        comp = np.array([rng.choice(self.n_components, p=self.weights[c]) for c in conditions], dtype=int)
        scale = jitter * self.stds[conditions, comp][:, None]
        return self.means[conditions, comp] + scale * rng.standard_normal((conditions.size, self.dim))

    def embed(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        flat = x.reshape(-1, self.dim)
        out = np.concatenate([flat, np.tanh(flat @ self._enc_w + self._enc_b)], axis=1)
        return out.reshape(x.shape[:-1] + (self.embed_dim,))

    def to_dict(self) -> dict:
        return {
            "means": self.means.tolist(), "stds": self.stds.tolist(), "weights": self.weights.tolist(),
            "frame_len": self.frame_len, "embed_features": self.embed_features,
            "encoder_seed": self.encoder_seed,
        }


# --------------------------------------------------------------------------- model


def _silu(z):
    s = 1.0 / (1.0 + np.exp(-z))
    return z * s, s


def noise_embedding(c_noise) -> np.ndarray:
    c = np.asarray(c_noise, dtype=np.float64)[:, None]
    f = np.asarray(NOISE_FREQS)
    return np.concatenate([c, np.sin(c * f), np.cos(c * f)], axis=1)


@dataclass
class DenoiserModel:
    """MLP denoiser. Condition index ``n_conditions`` is the learned null condition."""

    dim: int
    n_conditions: int
    width: int = 64
    schedule: NoiseSchedule = field(default_factory=NoiseSchedule)
    params: dict = field(default_factory=dict)

    @property
    def in_dim(self) -> int:
        return self.dim + 1 + 2 * len(NOISE_FREQS) + self.n_conditions + 1

    @property
    def null_condition(self) -> int:
        return self.n_conditions

    @classmethod
    def init(cls, dim, n_conditions, width=64, seed=0, schedule=None, out_scale=0.1) -> "DenoiserModel":
        model = cls(dim, n_conditions, width, schedule or NoiseSchedule())
        rng = np.random.default_rng(seed)
        h = width
        model.params = {
            "W1": rng.standard_normal((model.in_dim, h)) / np.sqrt(model.in_dim),
            "b1": np.zeros(h),
            "W2": rng.standard_normal((h, h)) / np.sqrt(h),
            "b2": np.zeros(h),
            "W3": out_scale * rng.standard_normal((h, dim)) / np.sqrt(h),
            "b3": np.zeros(dim),
        }
        return model

    def copy(self) -> "DenoiserModel":
        return DenoiserModel(self.dim, self.n_conditions, self.width, self.schedule,
                             {k: v.copy() for k, v in self.params.items()})

    def n_params(self) -> int:
        return sum(v.size for v in self.params.values())

    def flat(self) -> np.ndarray:
        return np.concatenate([self.params[k].ravel() for k in PARAM_ORDER])

    def with_flat(self, vec) -> "DenoiserModel":
        vec = np.asarray(vec, dtype=np.float64)
        out, i = {}, 0
        for k in PARAM_ORDER:
            p = self.params[k]
            out[k] = vec[i:i + p.size].reshape(p.shape).copy()
            i += p.size
        return DenoiserModel(self.dim, self.n_conditions, self.width, self.schedule, out)

    def _inputs(self, x_t, sigma, condition):
        x_t = np.atleast_2d(np.asarray(x_t, dtype=np.float64))
        n = x_t.shape[0]
        sigma = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (n,))
        cond = np.broadcast_to(np.asarray(condition, dtype=int), (n,))
        if np.any(cond < 0) or np.any(cond > self.n_conditions):
            raise InvalidInput(f"condition ids must lie in [0, {self.n_conditions}]")
        onehot = np.zeros((n, self.n_conditions + 1))
        onehot[np.arange(n), cond] = 1.0
        sch = self.schedule
        h0 = np.concatenate([sch.c_in(sigma)[:, None] * x_t, noise_embedding(sch.c_noise(sigma)), onehot], axis=1)
        return x_t, sigma, h0

    def forward(self, x_t, sigma, condition):
        """Batched denoised estimate. Returns ``(D, cache)`` for ``backward``."""
        x_t, sigma, h0 = self._inputs(x_t, sigma, condition)
        p = self.params
        z1 = h0 @ p["W1"] + p["b1"]
        a1, s1 = _silu(z1)
        z2 = a1 @ p["W2"] + p["b2"]
        a2, s2 = _silu(z2)
        raw = a2 @ p["W3"] + p["b3"]
        sch = self.schedule
        out = sch.c_skip(sigma)[:, None] * x_t + sch.c_out(sigma)[:, None] * raw
        cache = (sigma, h0, z1, a1, s1, z2, a2, s2)
        return out, cache

    def backward(self, cache, grad_out) -> dict:
        """Parameter gradients given dLoss/dD for every row of the forward batch."""
        sigma, h0, z1, a1, s1, z2, a2, s2 = cache
        p = self.params
        g_raw = self.schedule.c_out(sigma)[:, None] * np.asarray(grad_out, dtype=np.float64)
        grads = {"W3": a2.T @ g_raw, "b3": g_raw.sum(axis=0)}
        g_a2 = g_raw @ p["W3"].T
        g_z2 = g_a2 * s2 * (1.0 + z2 * (1.0 - s2))
        grads["W2"] = a1.T @ g_z2
        grads["b2"] = g_z2.sum(axis=0)
        g_a1 = g_z2 @ p["W2"].T
        g_z1 = g_a1 * s1 * (1.0 + z1 * (1.0 - s1))
        grads["W1"] = h0.T @ g_z1
        grads["b1"] = g_z1.sum(axis=0)
        return grads

    def __call__(self, x_t, sigma, condition):
        return self.forward(x_t, sigma, condition)[0]


def denoise(model, x_t, sigma, condition) -> np.ndarray:
    """Denoised estimate f(x_t, sigma | condition); batched over rows of ``x_t``."""
    return model(x_t, sigma, condition)


# --------------------------------------------------------------------------- sampling


@dataclass
class SampleResult:
    samples: np.ndarray  # (n, dim)
    frames: np.ndarray  # (n, k, dim): trailing denoised estimates


def initial_noise(seeds, dim: int) -> np.ndarray:
    return np.stack([np.random.default_rng(int(s)).standard_normal(dim) for s in seeds])


def sample_batch(model, conditions, seeds, steps: int = 40, frame_len: int = 8,
                 schedule: NoiseSchedule | None = None) -> SampleResult:
    """Deterministic first-order reverse pass over a log-spaced noise ladder.

    Each item's initial noise comes from its own seed, so identical
    (condition, seed) pairs give identical draws under any model. ``model``
    may be any callable ``(x_t, sigma, condition) -> D``.
    """
    sch = schedule or getattr(model, "schedule", NoiseSchedule())
    conditions = np.asarray(conditions, dtype=int).reshape(-1)
    seeds = np.asarray(seeds, dtype=np.uint64).reshape(-1)
    if conditions.size != seeds.size:
        raise InvalidInput("conditions and seeds must have equal length")
    ladder = sch.ladder(steps)
    dim = model.dim
    x = initial_noise(seeds, dim) * ladder[0]
    history = []
    for s_cur, s_next in zip(ladder[:-1], ladder[1:]):
        d = model(x, np.full(conditions.size, s_cur), conditions)
        history.append(d)
        x = x + (s_next - s_cur) * (x - d) / s_cur
    k = max(1, min(frame_len, len(history)))
    frames = np.stack(history[-k:], axis=1)
    return SampleResult(x, frames)


def sample(model, condition, seed, steps: int = 40, frame_len: int = 8):
    """Single generation. Returns ``(sample, frames)``."""
    res = sample_batch(model, [condition], [seed], steps, frame_len)
    return res.samples[0], res.frames[0]


# --------------------------------------------------------------------------- pretraining


@dataclass
class PretrainConfig:
    steps: int = 3000
    batch_size: int = 256
    lr: float = 3e-3
    lr_final: float = 3e-4
    clip: float = 10.0
    cond_dropout: bool = True
    dropout_prob: float = 0.1
    eval_every: int = 250
    eval_size: int = 1024


def denoising_loss(model, x0, sigma, eps, condition, need_grad=True):
    """EDM-weighted denoising regression, averaged over the batch."""
    x_t = x0 + sigma[:, None] * eps
    out, cache = model.forward(x_t, sigma, condition)
    w = model.schedule.loss_weight(sigma)
    resid = out - x0
    loss = float(np.mean(w * np.sum(resid * resid, axis=1)))
    if not need_grad:
        return loss, None
    g_out = (2.0 / x0.shape[0]) * w[:, None] * resid
    return loss, model.backward(cache, g_out)


def _training_batch(task, model, rng, size, cfg):
    cond = rng.integers(0, task.n_conditions, size)
    x0 = task.sample(cond, rng)
    sigma = sample_sigma(rng, model.schedule, size)
    eps = rng.standard_normal(x0.shape)
    if cfg.cond_dropout:
        drop = rng.random(size) < cfg.dropout_prob
        cond = np.where(drop, model.null_condition, cond)
    return x0, sigma, eps, cond


def heldout_loss(model, task, seed=0, size=1024) -> float:
    rng = np.random.default_rng(seed)
    x0, sigma, eps, cond = _training_batch(task, model, rng, size, PretrainConfig(cond_dropout=False))
    return denoising_loss(model, x0, sigma, eps, cond, need_grad=False)[0]


def pretrain(model, task, steps=None, seed=0, config: PretrainConfig | None = None, history=None,
             monitor=None):
    """Standard denoising pretraining with Adam and a linear lr decay.

    Returns a new model. ``history`` (a list) receives per-step training
    losses; ``monitor`` (a list) receives ``(step, heldout_loss)`` every
    ``config.eval_every`` steps and at the end, always on the same held-out batch.
    """
    cfg = config or PretrainConfig()
    steps = cfg.steps if steps is None else steps
    out = model.copy()
    if steps == 0:
        return out
    rng = np.random.default_rng(seed)
    opt = Adam(lr=cfg.lr)
    for step in range(steps):
        opt.lr = cfg.lr + (cfg.lr_final - cfg.lr) * step / max(steps - 1, 1)
        x0, sigma, eps, cond = _training_batch(task, out, rng, cfg.batch_size, cfg)
        loss, grads = denoising_loss(out, x0, sigma, eps, cond)
        if not np.isfinite(loss):
            raise TrainingDiverged(f"pretraining loss became {loss} at step {step}", step=step)
        grads, _ = clip_grads(grads, cfg.clip)
        opt.step(out.params, grads)
        if history is not None:
            history.append(loss)
        if monitor is not None and (step % cfg.eval_every == 0):
            monitor.append((step, heldout_loss(out, task, size=cfg.eval_size)))
    if monitor is not None:
        monitor.append((steps, heldout_loss(out, task, size=cfg.eval_size)))
    return out


def dataset_fad_to_task(model, task, n=512, seed=0, steps=40, target: ToyTask | None = None) -> float:
    """FAD in the task's embedding space between ``n`` generations and the task (or ``target``) mixture."""
    rng = np.random.default_rng(seed)
    cond = np.arange(n) % task.n_conditions
    seeds = rng.integers(0, 2 ** 63, n)
    gen = sample_batch(model, cond, seeds, steps).samples
    ref = (target or task).sample(cond, np.random.default_rng(seed + 1))
    return frechet_distance(accumulate_stats(task.embed(gen)), accumulate_stats(task.embed(ref)))


# --------------------------------------------------------------------------- checkpoints


def model_to_dict(model: DenoiserModel) -> dict:
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "dim": model.dim,
        "n_conditions": model.n_conditions,
        "width": model.width,
        "schedule": asdict(model.schedule),
        "param_order": list(PARAM_ORDER),
        "params": {k: {"shape": list(model.params[k].shape),
                       "data": [float(v) for v in model.params[k].ravel()]} for k in PARAM_ORDER},
    }


def model_from_dict(d: dict) -> DenoiserModel:
    if d.get("format") != CHECKPOINT_FORMAT:
        raise InvalidInput(f"not a denoiser checkpoint (format={d.get('format')!r})")
    if d.get("version") != CHECKPOINT_VERSION:
        raise InvalidInput(f"checkpoint version {d.get('version')} != supported {CHECKPOINT_VERSION}")
    params = {}
    for k in PARAM_ORDER:
        rec = d["params"][k]
        params[k] = np.asarray(rec["data"], dtype=np.float64).reshape(rec["shape"])
    return DenoiserModel(int(d["dim"]), int(d["n_conditions"]), int(d["width"]),
                         NoiseSchedule(**d["schedule"]), params)


def save_checkpoint(model: DenoiserModel, path) -> None:
    with open(path, "w") as f:
        json.dump(model_to_dict(model), f)


def load_checkpoint(path) -> DenoiserModel:
    with open(path) as f:
        return model_from_dict(json.load(f))
