"""Command-line interface.

Exit codes: 0 success, 1 runtime failure, 2 usage, config or input-format error.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, load_config
from .demo_select import DemoBatch, contiguous_shards, greedy_swap, greedy_swap_sharded, prune_exemplars
from .diversity import vendi_score
from .errors import DistRewardError, InvalidInput
from .eval_stats import binomial_test_one_sided, clopper_pearson_lower, posterior_prob_win
from .gauss_stats import accumulate_stats, frechet_distance
from .io import dumps_canonical, read_embeddings, read_stats, write_stats
from .rewards import DatasetFAD, ExemplarSet, per_item_fad
from .toy_diffusion import DenoiserModel, PretrainConfig, load_checkpoint, pretrain, save_checkpoint


class UsageError(InvalidInput):
    pass


def _ref_stats(args):
    if args.ref:
        return accumulate_stats(read_embeddings(args.ref))
    return read_stats(args.ref_stats)


def _add_ref(p, required=True):
    g = p.add_mutually_exclusive_group(required=required)
    g.add_argument("--ref", help="reference embedding file")
    g.add_argument("--ref-stats", help="reference statistics JSON")


def cmd_stats(args):
    st = accumulate_stats(read_embeddings(args.input))
    if args.out:
        write_stats(args.out, st)
    print(f"count={st.count} dim={st.dim}")


def cmd_fad(args):
    gen = accumulate_stats(read_embeddings(args.gen))
    print(f"{frechet_distance(gen, _ref_stats(args)):.6f}")


def cmd_persong_fad(args):
    ref = ExemplarSet(_ref_stats(args))
    for path in args.frames:
        print(f"{path}\t{per_item_fad(read_embeddings(path), ref):.6f}")


def cmd_vendi(args):
    print(f"{vendi_score(read_embeddings(args.input)):.6f}")


def cmd_select(args):
    e1, e2 = read_embeddings(args.d1), read_embeddings(args.d2)
    d1, d2 = DemoBatch.from_embeddings(e1), DemoBatch.from_embeddings(e2)
    if args.reward == "dataset_fad":
        if not (args.ref or args.ref_stats):
            raise UsageError("--reward dataset_fad needs --ref or --ref-stats")
        fn = DatasetFAD(ExemplarSet(_ref_stats(args)))
    else:
        fn = vendi_score
    if args.shards > 1:
        shards = contiguous_shards(len(d1), args.shards)
        results = greedy_swap_sharded(d1, d2, fn, shards)
        out = {"shards": [{"indices": [int(i) for i in s], "pos_from_d1": r.pos_from_d1.tolist(),
                           "reward_pos": r.reward_pos, "reward_neg": r.reward_neg, "trace": r.trace_dicts()}
                          for s, r in zip(shards, results)],
               "reward_d1": results[0].reward_d1, "reward_d2": results[0].reward_d2}
        summary = " ".join(f"shard{k}={r.reward_pos:.6f}" for k, r in enumerate(results))
    else:
        r = greedy_swap(d1, d2, fn)
        out = {"pos_from_d1": r.pos_from_d1.tolist(), "reward_d1": r.reward_d1, "reward_d2": r.reward_d2,
               "reward_pos": r.reward_pos, "reward_neg": r.reward_neg, "trace": r.trace_dicts()}
        summary = f"pos={r.reward_pos:.6f} neg={r.reward_neg:.6f}"
    out["reward"] = args.reward
    if args.out:
        Path(args.out).write_text(dumps_canonical(out))
    print(f"d1={out['reward_d1']:.6f} d2={out['reward_d2']:.6f} {summary}")


def cmd_prune(args):
    cand = read_embeddings(args.candidates)
    ref = ExemplarSet(_ref_stats(args))
    idx = prune_exemplars(cand, ref, args.size)
    fad = frechet_distance(accumulate_stats(cand[idx]), ref.stats)
    if args.out:
        Path(args.out).write_text("".join(f"{int(i)}\n" for i in idx))
    print(f"kept={len(idx)} fad={fad:.6f}")


def _config(path):
    return load_config(path) if path else ExperimentConfig()


def cmd_pretrain(args):
    from .setup import build_task

    cfg = _config(args.config)
    m = cfg.model
    steps = m.pretrain_steps if args.steps is None else args.steps
    seed = m.pretrain_seed if args.seed is None else args.seed
    task = build_task(cfg.task)
    init = DenoiserModel.init(task.dim, task.n_conditions, m.width, seed=m.init_seed)
    pcfg = PretrainConfig(steps=steps, lr=m.pretrain_lr, lr_final=m.pretrain_lr / 10)
    model = pretrain(init, task, seed=seed, config=pcfg)
    save_checkpoint(model, args.out)
    print(f"pretrained {steps} steps -> {args.out}")


def cmd_train(args):
    from .trainer import run_experiment

    cfg = _config(args.config)
    if args.seed is not None:
        cfg.train.seed = args.seed
    art = run_experiment(cfg, out_dir=args.out)
    s = art.summary()
    line = f"iterations={s['iterations']} skipped={len(s['skipped'])}"
    if s["mean_reward_last"] is not None:
        line += f" reward_first={s['mean_reward_first']:.6f} reward_last={s['mean_reward_last']:.6f}"
    if art.report is not None:
        line += f" target_win_rate={art.report.target_win_rate:.4f}"
    print(line)


def cmd_eval(args):
    from .evaluation import evaluate, read_prompts
    from .setup import build_task, metric_suite, target_metrics

    cfg = _config(args.rewards)
    if args.seed is not None:
        cfg.eval.seed = args.seed
    task = build_task(cfg.task)
    model, baseline = load_checkpoint(args.model), load_checkpoint(args.baseline)
    e = cfg.eval
    rep = evaluate(model, baseline, read_prompts(args.prompts), task, metric_suite(task, cfg),
                   target_metrics(cfg), e.steps, e.n_boot, e.subset, e.seed)
    text = dumps_canonical(rep.to_dict())
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    print(f"target_win_rate={rep.target_win_rate:.4f}", file=sys.stderr if not args.out else sys.stdout)


def cmd_report(args):
    if args.run:
        with open(Path(args.run) / "report.json") as f:
            rep = json.load(f)
        ev = rep.get("final_eval")
        s = rep["summary"]
        print(f"iterations={s['iterations']} skipped={len(s['skipped'])}")
        if ev:
            for name, m in sorted(ev["metrics"].items()):
                print(f"{name}\tmodel={m['model']:.6f}\tbaseline={m['baseline']:.6f}\twin_rate={m['win_rate']:.4f}")
            if args.csv:
                with open(args.csv, "w", newline="") as f:
                    w = csv.writer(f)
                    w.writerow(["metric", "model", "baseline", "win_rate"])
                    for name, m in sorted(ev["metrics"].items()):
                        w.writerow([name, repr(m["model"]), repr(m["baseline"]), repr(m["win_rate"])])
        return
    k, n = args.wins, args.trials
    if not 0 <= k <= n or n < 1:
        raise UsageError("need 0 <= wins <= trials and trials >= 1")
    print(f"binomial_p={binomial_test_one_sided(k, n):.6e}")
    print(f"clopper_pearson_lower={clopper_pearson_lower(k, n, args.alpha):.6f}")
    print(f"posterior_prob_win={posterior_prob_win(k, n):.8f}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="distreward", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("stats", help="Gaussian statistics of an embedding file")
    s.add_argument("--input", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_stats)

    s = sub.add_parser("fad", help="Frechet distance between a generated set and a reference")
    s.add_argument("--gen", required=True)
    _add_ref(s)
    s.set_defaults(func=cmd_fad)

    s = sub.add_parser("persong-fad", help="per-item FAD of frame-embedding files")
    s.add_argument("--frames", required=True, nargs="+")
    _add_ref(s)
    s.set_defaults(func=cmd_persong_fad)

    s = sub.add_parser("vendi", help="Vendi score of an embedding file")
    s.add_argument("--input", required=True)
    s.set_defaults(func=cmd_vendi)

    s = sub.add_parser("select", help="greedy positive-set construction from two paired batches")
    s.add_argument("--d1", required=True)
    s.add_argument("--d2", required=True)
    s.add_argument("--reward", choices=("dataset_fad", "vendi"), default="dataset_fad")
    s.add_argument("--shards", type=int, default=1)
    s.add_argument("--out")
    _add_ref(s, required=False)
    s.set_defaults(func=cmd_select)

    s = sub.add_parser("prune", help="choose an exemplar subset minimizing FAD to a reference")
    s.add_argument("--candidates", required=True)
    s.add_argument("--size", type=int, required=True)
    s.add_argument("--out")
    _add_ref(s)
    s.set_defaults(func=cmd_prune)

    s = sub.add_parser("pretrain", help="pretrain the toy denoiser")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--steps", type=int)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("train", help="run a fine-tuning experiment")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint against a baseline")
    s.add_argument("--model", required=True)
    s.add_argument("--baseline", required=True)
    s.add_argument("--prompts", required=True)
    s.add_argument("--rewards", required=True, help="experiment config defining task and metrics")
    s.add_argument("--out")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("report", help="summarize a run directory or a human-preference win count")
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--run")
    g.add_argument("--wins", type=int)
    s.add_argument("--trials", type=int)
    s.add_argument("--alpha", type=float, default=0.05)
    s.add_argument("--csv")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "report" and args.wins is not None and args.trials is None:
        parser.error("--wins needs --trials")
    try:
        args.func(args)
    except (InvalidInput, FileNotFoundError, IsADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (DistRewardError, ArithmeticError, RuntimeError, OSError, np.linalg.LinAlgError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
