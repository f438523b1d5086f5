"""Compare training dynamics across the activation ablations.

Trains NormSiLU, NormSiLU without the mean, without RMS, and plain SiLU on
identical seeds and prints the quantities the orderings are judged on: the
peak activation ratio, the final lambda and the late-training SiLU output
magnitude. Short runs are enough to see the early surge of the
unnormalized variants.

    python demos/04_ablation_dynamics.py --steps 400 --seeds 1
"""
import argparse
from dataclasses import replace

from threadpoolctl import threadpool_limits

from deco.ablation import suite_variants, summary_lines, verdicts
from deco.config import desk_preset
from deco.corpus import build_stdlib_corpus
from deco.training import run_ablation_suite

ap = argparse.ArgumentParser()
ap.add_argument("--suite", default="activation")
ap.add_argument("--steps", type=int, default=400)
ap.add_argument("--seeds", type=int, default=1)
args = ap.parse_args()

cfg = desk_preset()
t = replace(cfg.train, n_steps=args.steps, warmup_steps=min(50, args.steps // 4),
            decay_steps=min(200, args.steps // 4))
cfg = replace(cfg, train=t).validate()
with threadpool_limits(1):
    runs = run_ablation_suite(cfg, suite_variants(args.suite), build_stdlib_corpus(),
                              seeds=tuple(range(args.seeds)), progress=lambda s: print("training", s, flush=True))
for line in summary_lines(runs):
    print(line)
for v in verdicts(args.suite, runs):
    print(v.line())
