"""Run one or more experiment configs over a range of seeds and summarize.

    python scripts/run_experiments.py configs/dist_fad.toml --seeds 0-9 --out runs/
"""

import argparse
from pathlib import Path

from distreward.config import load_config
from distreward.trainer import run_experiment


def parse_seeds(text):
    lo, _, hi = text.partition("-")
    return list(range(int(lo), int(hi or lo) + 1))


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("configs", nargs="+")
    p.add_argument("--seeds", default="0")
    p.add_argument("--out", help="write one run directory per (config, seed)")
    p.add_argument("--no-eval", action="store_true", help="skip the final evaluation report")
    args = p.parse_args()

    for path in args.configs:
        for seed in parse_seeds(args.seeds):
            cfg = load_config(path)
            cfg.train.seed = seed
            out = Path(args.out) / f"{Path(path).stem}_seed{seed}" if args.out else None
            art = run_experiment(cfg, out_dir=out, evaluate_final=not args.no_eval)
            s = art.summary()
            line = f"{Path(path).stem} seed={seed} reward {s['mean_reward_first']:.4f} -> {s['mean_reward_last']:.4f}"
            if art.report is not None:
                for name in art.report.target_metrics:
                    m = art.report.metrics[name]
                    line += f" | {name} {m['baseline']:.4f} -> {m['model']:.4f} (win {m['win_rate']:.3f})"
            print(line, flush=True)


if __name__ == "__main__":
    main()
