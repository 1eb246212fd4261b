"""Model-versus-baseline evaluation on a frozen prompt list.

Each prompt gets one generation per model; its initial noise is seeded from
the prompt text, so noise differs across prompts but is identical for every
model compared.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInput
from .eval_stats import PairedScores, bootstrap_dataset_win_rate, win_rate
from .gauss_stats import accumulate_stats, frechet_distance
from .toy_diffusion import model_to_dict, sample_batch, seed_from_prompt

REPORT_SCHEMA = "distreward-eval"
REPORT_VERSION = 1


@dataclass(frozen=True)
class Prompt:
    text: str
    condition: int


def default_prompts(n: int, n_conditions: int) -> list:
    return [Prompt(f"prompt-{i:04d} condition-{i % n_conditions}", i % n_conditions) for i in range(n)]


def read_prompts(path) -> list:
    """Prompts file: one ``<condition_id><TAB><prompt text>`` per line; '#' starts a comment."""
    out = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line.strip() or line.startswith("#"):
                continue
            cond, sep, text = line.partition("\t")
            if not sep or not text:
                raise InvalidInput(f"{path}:{lineno}: expected '<condition_id>\\t<prompt>'")
            try:
                c = int(cond)
            except ValueError as exc:
                raise InvalidInput(f"{path}:{lineno}: condition id {cond!r} is not an integer") from exc
            if c < 0:
                raise InvalidInput(f"{path}:{lineno}: condition id must be non-negative")
            out.append(Prompt(text, c))
    if not out:
        raise InvalidInput(f"{path}: no prompts")
    return out


def sha256_json(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()


@dataclass
class Generations:
    samples: np.ndarray
    embeddings: np.ndarray
    frames: np.ndarray
    conditions: np.ndarray


def generate(model, prompts, task, steps: int = 40) -> Generations:
    cond = np.array([p.condition for p in prompts], dtype=int)
    if np.any(cond >= task.n_conditions):
        raise InvalidInput(f"prompt condition out of range for a {task.n_conditions}-condition task")
    seeds = np.array([seed_from_prompt(p.text) for p in prompts], dtype=np.uint64)
    res = sample_batch(model, cond, seeds, steps, task.frame_len)
    return Generations(res.samples, task.embed(res.samples), task.embed(res.frames), cond)


@dataclass
class EvalReport:
    n_prompts: int
    metrics: dict
    target_metrics: list
    input_hashes: dict
    seeds: dict
    extra: dict = field(default_factory=dict)

    @property
    def target_win_rate(self) -> float:
        return float(np.mean([self.metrics[m]["win_rate"] for m in self.target_metrics]))

    def to_dict(self) -> dict:
        return {
            "schema": REPORT_SCHEMA, "version": REPORT_VERSION, "n_prompts": self.n_prompts,
            "metrics": self.metrics, "target_metrics": list(self.target_metrics),
            "target_win_rate": self.target_win_rate, "input_hashes": self.input_hashes,
            "seeds": self.seeds, **self.extra,
        }


def _metric_entry(spec, gm: Generations, gb: Generations, n_boot, subset, seed) -> dict:
    entry = {"kind": spec.kind, "direction": spec.direction}
    if spec.metric == "dataset_fad":
        ref = spec.payload.stats
        fm = frechet_distance(accumulate_stats(gm.embeddings), ref)
        fb = frechet_distance(accumulate_stats(gb.embeddings), ref)
        rate = bootstrap_dataset_win_rate(gm.embeddings, gb.embeddings, ref, n_boot, subset, seed)
        entry.update(model=fm, baseline=fb, win_rate=rate, win_rate_method="bootstrap")
    elif spec.metric == "vendi":
        vm, vb = spec.set_reward(gm.embeddings), spec.set_reward(gb.embeddings)
        entry.update(model=vm, baseline=vb, win_rate=1.0 if vm > vb else (0.5 if vm == vb else 0.0),
                     win_rate_method="set")
    else:
        sm = spec.raw_instance(gm.embeddings, gm.frames, gm.conditions)
        sb = spec.raw_instance(gb.embeddings, gb.frames, gb.conditions)
        rate = win_rate(PairedScores(sm, sb, spec.direction == "maximize"))
        entry.update(model=float(np.mean(sm)), baseline=float(np.mean(sb)), win_rate=rate,
                     win_rate_method="paired")
    return entry


def evaluate(model, baseline, prompts, task, metrics: dict, target_metrics=(), steps: int = 40,
             n_boot: int = 1000, subset: int = 40, seed: int = 0) -> EvalReport:
    """Compare ``model`` against ``baseline`` on every metric in ``metrics`` (name -> RewardSpec)."""
    if not prompts:
        raise InvalidInput("no prompts")
    for m in target_metrics:
        if m not in metrics:
            raise InvalidInput(f"target metric {m!r} is not evaluated")
    gm = generate(model, prompts, task, steps)
    gb = generate(baseline, prompts, task, steps)
    results = {name: _metric_entry(spec, gm, gb, n_boot, subset, seed) for name, spec in sorted(metrics.items())}
    hashes = {
        "model": sha256_json(model_to_dict(model)),
        "baseline": sha256_json(model_to_dict(baseline)),
        "prompts": sha256_json([[p.condition, p.text] for p in prompts]),
    }
    seeds = {"noise": "seed_from_prompt", "bootstrap": seed, "n_boot": n_boot, "subset": subset, "steps": steps}
    return EvalReport(len(prompts), results, list(target_metrics) or sorted(metrics)[:1], hashes, seeds)
