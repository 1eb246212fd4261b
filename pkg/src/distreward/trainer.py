"""On-policy reward fine-tuning loop.

Each step draws conditions, generates two demonstration batches with the
same conditions and different seeds, scores them, splits them into a
positive and a negative set according to the reward kind, and takes one
clipped optimizer step on the configured preference loss.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ConfigError, ExperimentConfig
from .demo_select import DemoBatch, SplitResult, contiguous_shards, greedy_swap, greedy_swap_sharded, split_by_batch_mean, split_pairwise
from .errors import AllTied, TrainingDiverged
from .evaluation import EvalReport, default_prompts, evaluate, generate, read_prompts
from .io import dumps_canonical
from .losses import (
    dpo_loss, dpok_loss, kto_loss, kto_loss_continuous_dist, kto_loss_continuous_instance, noise_batch, noise_pairs,
)
from .optim import Adam, clip_grads
from .rewards import resolve_reward
from .setup import build_reward, build_task, metric_suite, pretrained_baseline, target_metrics
from .toy_diffusion import DenoiserModel, derive_seed, sample_batch, save_checkpoint

SEED_HIGH = 2 ** 63


@dataclass
class TrainState:
    theta: DenoiserModel
    ref: DenoiserModel
    optimizer: Adam
    iteration: int = 0


@dataclass
class StepRecord:
    iteration: int
    reward_kind: str
    reward_metric: str
    variant: str = ""
    skipped: bool = False
    reason: str = ""
    reward_pos: float = float("nan")
    reward_neg: float = float("nan")
    reward_d1: float = float("nan")
    reward_d2: float = float("nan")
    batch_mean_reward: float = float("nan")
    loss: float = float("nan")
    grad_norm: float = float("nan")
    clipped_norm: float = float("nan")
    ref_sourced: float = 0.0  # fraction of demonstrations generated by the reference model
    swap_trace: list = field(default_factory=list)


@dataclass
class RunArtifacts:
    checkpoints: list  # (iteration, DenoiserModel), baseline first
    records: list  # StepRecord per iteration
    eval_series: list  # (iteration, hook value)
    report: EvalReport | None = None
    baseline: DenoiserModel | None = None

    def series(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records], dtype=np.float64)

    @property
    def final(self) -> DenoiserModel:
        return self.checkpoints[-1][1]

    def summary(self) -> dict:
        done = [r for r in self.records if not r.skipped]
        return {
            "iterations": len(self.records),
            "skipped": [r.iteration for r in self.records if r.skipped],
            "mean_reward_first": _mean([r.batch_mean_reward for r in done[:50]]),
            "mean_reward_last": _mean([r.batch_mean_reward for r in done[-50:]]),
        }


def _mean(v):
    return float(np.mean(v)) if v else None


@dataclass
class Context:
    """Everything a step needs besides the mutable state."""

    cfg: ExperimentConfig
    task: object
    reward: object

    @classmethod
    def from_config(cls, cfg: ExperimentConfig) -> "Context":
        task = build_task(cfg.task)
        reward = build_reward(task, cfg)
        ctx = cls(cfg, task, reward)
        ctx.check()
        return ctx

    def check(self):
        v = self.cfg.loss.variant
        specs = [self.reward.a, self.reward.b] if hasattr(self.reward, "resolve") else [self.reward]
        for s in specs:
            if s.is_distributional and v in ("kto_unpaired", "kto_cont_instance", "dpok"):
                raise ConfigError(f"loss variant {v!r} needs per-item rewards; {s.metric!r} is a set reward")


def _generate(state: TrainState, ctx: Context, conds, seeds, rng) -> DemoBatch:
    t = ctx.cfg.train
    task = ctx.task
    if t.ref_mix_per_item:
        use_ref = rng.random(conds.size) < t.ref_mix
    else:
        use_ref = np.full(conds.size, rng.random() < t.ref_mix)
    samples = np.empty((conds.size, task.dim))
    frames = np.empty((conds.size, task.frame_len, task.dim))
    for model, mask in ((state.theta, ~use_ref), (state.ref, use_ref)):
        if mask.any():
            res = sample_batch(model, conds[mask], seeds[mask], t.demo_steps, task.frame_len)
            samples[mask] = res.samples
            frames[mask, :res.frames.shape[1]] = res.frames
            frames[mask, res.frames.shape[1]:] = res.frames[:, -1:]
    return DemoBatch(conds, seeds, samples, task.embed(samples), task.embed(frames), use_ref.astype(int))


def _sharded_split(d1, d2, fn, shards) -> SplitResult:
    """Every shard runs the greedy pass; each pair takes the outcome of the shard that owns it."""
    results = greedy_swap_sharded(d1, d2, fn, shards)
    from_d1 = np.zeros(len(d1), dtype=bool)
    trace = []
    for shard, res in zip(shards, results):
        from_d1[shard] = res.pos_from_d1[shard]
        trace.extend(res.swap_trace)
    pos = d2.where(from_d1, d1)
    neg = d1.where(from_d1, d2)
    return SplitResult(pos, neg, float(fn(pos.payload())), float(fn(neg.payload())), trace, from_d1,
                       results[0].reward_d1, results[0].reward_d2)


def _with_dropout(cond, rng, ctx, null):
    t = ctx.cfg.train
    if not t.cond_dropout:
        return cond
    return np.where(rng.random(cond.size) < t.dropout_prob, null, cond)


def train_step(state: TrainState, ctx: Context) -> tuple[TrainState, StepRecord]:
    """One on-policy update. Raises AllTied (parameters untouched) when every reward ties."""
    cfg, t = ctx.cfg, ctx.cfg.train
    it = state.iteration
    rng = np.random.default_rng(derive_seed(t.seed, "train-step", it))
    spec = resolve_reward(ctx.reward, it)
    variant = cfg.loss.variant
    rec = StepRecord(it, spec.kind, spec.metric, variant)
    paired = variant != "kto_unpaired"
    n = t.batch_size // 2 if paired else t.batch_size
    conds = rng.integers(0, ctx.task.n_conditions, n)

    d1 = _generate(state, ctx, conds, rng.integers(0, SEED_HIGH, n, dtype=np.uint64), rng)
    if paired:
        d2 = _generate(state, ctx, conds, rng.integers(0, SEED_HIGH, n, dtype=np.uint64), rng)
        rec.ref_sourced = float(np.mean(np.concatenate([d1.source, d2.source])))
        if spec.is_distributional:
            fn = spec.set_function()
            split = (greedy_swap(d1, d2, fn) if t.shards == 1
                     else _sharded_split(d1, d2, fn, contiguous_shards(n, t.shards)))
            inst = None
            rec.batch_mean_reward = 0.5 * (split.reward_d1 + split.reward_d2)
            rec.swap_trace = split.trace_dicts()
        else:
            r1 = spec.instance_rewards(d1.embeddings, d1.frames, conds)
            r2 = spec.instance_rewards(d2.embeddings, d2.frames, conds)
            if np.all(np.concatenate([r1, r2]) == r1[0]):
                raise AllTied(f"step {it}: every reward in the batch is identical")
            split = split_pairwise(d1, d2, r1, r2)
            inst = np.concatenate([np.maximum(r1, r2), np.minimum(r1, r2)])
            rec.batch_mean_reward = float(np.mean(inst))
        rec.reward_pos, rec.reward_neg = split.reward_pos, split.reward_neg
        rec.reward_d1, rec.reward_d2 = split.reward_d1, split.reward_d2
        pos, neg = split.d_pos, split.d_neg
    else:
        rec.ref_sourced = float(np.mean(d1.source))
        r = spec.instance_rewards(d1.embeddings, d1.frames, conds)
        split = split_by_batch_mean(d1, r, t.threshold)
        rec.batch_mean_reward = rec.reward_d1 = float(np.mean(r))
        rec.reward_pos = float(np.mean(r[split.labels])) if split.labels.any() else float("nan")
        rec.reward_neg = float(np.mean(r[~split.labels])) if (~split.labels).any() else float("nan")

    null = state.theta.null_condition
    sch = state.theta.schedule
    if variant == "dpo":
        bp, bn = noise_pairs(pos.samples, neg.samples, _with_dropout(pos.conditions, rng, ctx, null),
                             _with_dropout(neg.conditions, rng, ctx, null), rng, sch)
        res = dpo_loss(state.theta, state.ref, bp, bn, cfg.loss)
    elif variant == "kto_unpaired":
        batch = noise_batch(d1.samples, _with_dropout(conds, rng, ctx, null), rng, sch)
        res = kto_loss(state.theta, state.ref, batch, split.labels, cfg.loss, paired=False)
    else:
        x0 = np.concatenate([pos.samples, neg.samples])
        cond = _with_dropout(np.concatenate([pos.conditions, neg.conditions]), rng, ctx, null)
        batch = noise_batch(x0, cond, rng, sch)
        from_pos = np.arange(2 * n) < n
        if variant == "kto_paired":
            res = kto_loss(state.theta, state.ref, batch, from_pos, cfg.loss, paired=True)
        elif variant == "kto_cont_dist":
            res = kto_loss_continuous_dist(state.theta, state.ref, batch, from_pos, split.reward_pos,
                                           split.reward_neg, cfg.loss)
        else:
            thr = cfg.loss.r_threshold if cfg.loss.r_threshold is not None else float(np.mean(inst))
            if variant == "kto_cont_instance":
                res = kto_loss_continuous_instance(state.theta, state.ref, batch, inst, thr, cfg.loss)
            else:
                res = dpok_loss(state.theta, batch, inst, thr, cfg.loss)

    if not np.isfinite(res.loss):
        raise TrainingDiverged(f"loss became {res.loss} at step {it}", step=it)
    grads, norm = clip_grads(res.grads, t.clip)
    rec.loss, rec.grad_norm = res.loss, norm
    rec.clipped_norm = float(np.sqrt(sum(np.sum(g * g) for g in grads.values())))
    state.optimizer.step(state.theta.params, grads)
    if not all(np.all(np.isfinite(p)) for p in state.theta.params.values()):
        raise TrainingDiverged(f"parameters became non-finite at step {it}", step=it)
    state.iteration += 1
    return state, rec


def hook_value(model, ctx: Context, prompts) -> float:
    """Mean target reward (set reward for distributional targets) on the hook prompts."""
    g = generate(model, prompts, ctx.task, ctx.cfg.eval.steps)
    vals = []
    for spec in ([ctx.reward.a, ctx.reward.b] if hasattr(ctx.reward, "resolve") else [ctx.reward]):
        if spec.is_distributional:
            vals.append(spec.set_reward(g.embeddings))
        else:
            vals.append(float(np.mean(spec.instance_rewards(g.embeddings, g.frames, g.conditions))))
    return float(np.mean(vals))


def eval_prompts(ctx: Context) -> list:
    e = ctx.cfg.eval
    if e.prompts_file:
        return read_prompts(e.prompts_file)
    return default_prompts(e.n_prompts, ctx.task.n_conditions)


def final_report(model, baseline, ctx: Context, prompts=None) -> EvalReport:
    e = ctx.cfg.eval
    return evaluate(model, baseline, prompts or eval_prompts(ctx), ctx.task, metric_suite(ctx.task, ctx.cfg),
                    target_metrics(ctx.cfg), e.steps, e.n_boot, e.subset, e.seed)


def run_experiment(cfg: ExperimentConfig, out_dir=None, baseline: DenoiserModel | None = None,
                   evaluate_final: bool = True) -> RunArtifacts:
    """Pretrain (or reuse) the baseline, fine-tune it, and optionally write the artifact layout."""
    cfg.validate()
    ctx = Context.from_config(cfg)
    t = cfg.train
    base = baseline.copy() if baseline is not None else pretrained_baseline(ctx.task, cfg.model)
    state = TrainState(base.copy(), base.copy(), Adam(lr=t.lr, beta1=t.beta1))
    ref_snapshot = base.flat()
    hook_prompts = default_prompts(cfg.eval.hook_prompts, ctx.task.n_conditions)
    art = RunArtifacts([(0, base.copy())], [], [], baseline=base)
    last_good = base.copy()
    for it in range(t.iterations):
        try:
            state, rec = train_step(state, ctx)
        except AllTied as exc:
            spec = resolve_reward(ctx.reward, it)
            rec = StepRecord(it, spec.kind, spec.metric, cfg.loss.variant, skipped=True, reason=str(exc))
            state.iteration += 1
        except TrainingDiverged as exc:
            exc.last_good = last_good
            if out_dir is not None:
                _write(art, cfg, out_dir)
            raise
        art.records.append(rec)
        done = it + 1
        last_good = state.theta.copy()
        if t.checkpoint_every and done % t.checkpoint_every == 0 and done != t.iterations:
            art.checkpoints.append((done, state.theta.copy()))
        if t.eval_every and done % t.eval_every == 0:
            art.eval_series.append((done, hook_value(state.theta, ctx, hook_prompts)))
    if t.iterations > 0:
        art.checkpoints.append((t.iterations, state.theta.copy()))
    assert np.array_equal(state.ref.flat(), ref_snapshot), "reference model changed during training"
    if evaluate_final:
        art.report = final_report(art.final, base, ctx)
    if out_dir is not None:
        _write(art, cfg, out_dir)
    return art


_LOSS_FIELDS = ("iteration", "variant", "skipped", "loss", "grad_norm", "clipped_norm")
_REWARD_FIELDS = ("iteration", "reward_kind", "reward_metric", "reward_d1", "reward_d2", "reward_pos",
                  "reward_neg", "batch_mean_reward", "ref_sourced")


def _fmt(v):
    return repr(v) if isinstance(v, float) else str(v)


def report_dict(art: RunArtifacts, cfg: ExperimentConfig) -> dict:
    def clean(v):
        return None if isinstance(v, float) and not np.isfinite(v) else v

    return {
        "config": cfg.to_dict(),
        "summary": art.summary(),
        "checkpoints": [f"checkpoints/{_ckpt_name(i, cfg)}" for i, _ in art.checkpoints],
        "reward_series": {k: [clean(getattr(r, k)) for r in art.records]
                          for k in ("reward_pos", "reward_neg", "batch_mean_reward")},
        "eval_series": [[i, v] for i, v in art.eval_series],
        "final_eval": art.report.to_dict() if art.report is not None else None,
    }


def _ckpt_name(i, cfg):
    if i == 0:
        return "baseline.json"
    return "final.json" if i == cfg.train.iterations else f"step_{i:06d}.json"


def _write(art: RunArtifacts, cfg: ExperimentConfig, out_dir) -> None:
    out = Path(out_dir)
    for sub in ("checkpoints", "logs", "traces"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    for i, model in art.checkpoints:
        save_checkpoint(model, out / "checkpoints" / _ckpt_name(i, cfg))
    with open(out / "logs" / "loss.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(_LOSS_FIELDS)
        for r in art.records:
            w.writerow([_fmt(getattr(r, k)) for k in _LOSS_FIELDS])
    with open(out / "logs" / "rewards.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(_REWARD_FIELDS)
        for r in art.records:
            w.writerow([_fmt(getattr(r, k)) for k in _REWARD_FIELDS])
    for r in art.records:
        if r.swap_trace:
            (out / "traces" / f"step_{r.iteration:06d}.json").write_text(dumps_canonical(r.swap_trace))
    (out / "report.json").write_text(dumps_canonical(report_dict(art, cfg)))
