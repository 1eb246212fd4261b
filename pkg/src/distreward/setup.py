"""Build tasks, rewards and the evaluation metric suite from an experiment config."""

from __future__ import annotations

import json

import numpy as np

from .config import ConfigError, ExperimentConfig, ModelConfig, TaskConfig
from .eval_stats import RatingTable, normalize_global, normalize_per_rater_gibbs
from .io import read_embeddings
from .rewards import ExemplarSet, MixedReward, PreferenceModel, RewardSpec
from .toy_diffusion import DenoiserModel, PretrainConfig, ToyTask, derive_seed, load_checkpoint, pretrain

METRICS = ("preference", "cosine", "per_item_fad", "dataset_fad", "vendi")


def build_task(cfg: TaskConfig) -> ToyTask:
    if cfg.preset != "default":
        raise ConfigError(f"unknown task preset {cfg.preset!r}")
    return ToyTask.default(frame_len=cfg.frame_len, embed_features=cfg.embed_features,
                           encoder_seed=cfg.encoder_seed)


def hidden_quality(x) -> np.ndarray:
    """Latent 'aesthetic' signal of the synthetic raters: upper modes are better."""
    return np.tanh(2.0 * np.asarray(x, dtype=np.float64)[..., 1])


def synthetic_ratings(task: ToyTask, n_items: int, n_raters: int, seed: int, ratings_per_item: int = 3):
    """Samples with 1-5 ratings from raters who differ in offset and noise level."""
    rng = np.random.default_rng(derive_seed(seed, "ratings"))
    cond = np.arange(n_items) % task.n_conditions
    x = task.sample(cond, rng)
    offset = rng.normal(0.0, 0.6, n_raters)
    noise = rng.uniform(0.3, 1.0, n_raters)
    raters, items, values = [], [], []
    q = hidden_quality(x)
    for i in range(n_items):
        for j in rng.choice(n_raters, size=min(ratings_per_item, n_raters), replace=False):
            v = 3.0 + 1.5 * q[i] + offset[j] + noise[j] * rng.standard_normal()
            raters.append(int(j))
            items.append(i)
            values.append(float(np.clip(np.rint(v), 1, 5)))
    return x, RatingTable(np.array(raters), np.array(items), np.array(values))


def item_labels(table: RatingTable, n_items: int, method: str, seed: int) -> np.ndarray:
    """Normalize ratings, then average per item."""
    if method == "gibbs":
        z = normalize_per_rater_gibbs(table, seed=seed).scores
    else:
        z = normalize_global(table.ratings)
    sums = np.bincount(table.item_ids, weights=z, minlength=n_items)
    counts = np.bincount(table.item_ids, minlength=n_items)
    return sums / np.maximum(counts, 1)


def build_preference_model(task: ToyTask, cfg: ExperimentConfig) -> PreferenceModel:
    r = cfg.reward
    x, table = synthetic_ratings(task, r.preference_size, r.preference_raters, r.reference_seed)
    labels = item_labels(table, r.preference_size, r.label_norm, r.reference_seed)
    return PreferenceModel.fit(task.embed(x), labels, r.bandwidth if r.bandwidth > 0 else None)


def build_exemplars(task: ToyTask, cfg: ExperimentConfig) -> ExemplarSet:
    r = cfg.reward
    if r.reference_path:
        return ExemplarSet.from_embeddings(read_embeddings(r.reference_path), r.modality)
    target = task.shifted(r.target_shift)
    rng = np.random.default_rng(derive_seed(r.reference_seed, "exemplars"))
    cond = np.arange(r.reference_size) % task.n_conditions
    x = target.sample_text_like(cond, rng) if r.modality == "text-like" else target.sample(cond, rng)
    return ExemplarSet.from_embeddings(task.embed(x), r.modality)


def cosine_references(task: ToyTask) -> np.ndarray:
    # Each condition's "text" names its first mixture component.
    return task.embed(task.means[:, 0, :])


def build_metric(name: str, task: ToyTask, cfg: ExperimentConfig) -> RewardSpec:
    if name == "preference":
        return RewardSpec.preference(build_preference_model(task, cfg))
    if name == "cosine":
        return RewardSpec.cosine(cosine_references(task))
    if name == "per_item_fad":
        return RewardSpec.per_item_fad(build_exemplars(task, cfg))
    if name == "dataset_fad":
        return RewardSpec.dataset_fad(build_exemplars(task, cfg))
    if name == "vendi":
        return RewardSpec.vendi()
    raise ConfigError(f"unknown reward metric {name!r}; expected one of {METRICS + ('mixed',)}")


def build_reward(task: ToyTask, cfg: ExperimentConfig):
    r = cfg.reward
    if r.metric == "mixed":
        if len(r.mix) != 2:
            raise ConfigError("reward.mix must name exactly two metrics")
        a, b = (build_metric(m, task, cfg) for m in r.mix)
        return MixedReward(a, b, r.p, cfg.train.seed)
    return build_metric(r.metric, task, cfg)


def metric_suite(task: ToyTask, cfg: ExperimentConfig) -> dict:
    """Every metric reported at evaluation time, keyed by name."""
    return {name: build_metric(name, task, cfg) for name in METRICS}


def target_metrics(cfg: ExperimentConfig) -> list:
    return list(cfg.reward.mix) if cfg.reward.metric == "mixed" else [cfg.reward.metric]


_PRETRAINED: dict = {}


def pretrained_baseline(task: ToyTask, cfg: ModelConfig) -> DenoiserModel:
    """Pretrained (or loaded) baseline; pretraining results are cached per process."""
    if cfg.checkpoint:
        return load_checkpoint(cfg.checkpoint)
    key = json.dumps([task.to_dict(), cfg.width, cfg.init_seed, cfg.pretrain_steps, cfg.pretrain_lr,
                      cfg.pretrain_seed], sort_keys=True)
    if key not in _PRETRAINED:
        init = DenoiserModel.init(task.dim, task.n_conditions, cfg.width, seed=cfg.init_seed)
        pcfg = PretrainConfig(steps=cfg.pretrain_steps, lr=cfg.pretrain_lr, lr_final=cfg.pretrain_lr / 10)
        _PRETRAINED[key] = pretrain(init, task, seed=cfg.pretrain_seed, config=pcfg)
    return _PRETRAINED[key].copy()
