"""Train the desk-scale DECO language model and watch the controller.

The byte-level model trains on a corpus of Python stdlib docstrings (built
on the fly, no network). Every step logs the LM loss, the router entropy,
the regularization coefficient lambda and the per-layer activation ratios;
the controller multiplies lambda by eta while the ratio is above target and
divides otherwise.

    python demos/02_train_desk.py --steps 300
    python demos/02_train_desk.py --eta 1.02 --lambda-init 1e-4   # faster controller
"""
import argparse
from dataclasses import replace

from threadpoolctl import threadpool_limits

from deco.config import desk_preset
from deco.corpus import build_stdlib_corpus
from deco.lm import build_model
from deco.metrics import write_csv
from deco.training import as_bytes, evaluate_ppl, split_corpus, train_run

ap = argparse.ArgumentParser()
ap.add_argument("--steps", type=int, default=2000)
ap.add_argument("--eta", type=float)
ap.add_argument("--lambda-init", type=float)
ap.add_argument("--csv", default="desk_metrics.csv")
args = ap.parse_args()

cfg = desk_preset()
t = cfg.train
t = replace(t, n_steps=args.steps, warmup_steps=min(t.warmup_steps, args.steps // 4),
            decay_steps=min(t.decay_steps, args.steps // 4))
if args.eta:
    t = replace(t, eta=args.eta)
if args.lambda_init is not None:
    t = replace(t, lambda_init=args.lambda_init)
cfg = replace(cfg, train=t).validate()

corpus = build_stdlib_corpus()
_, held = split_corpus(as_bytes(corpus), cfg.train.eval_fraction)
print(f"corpus: {len(corpus)} bytes; model: {cfg.model.n_layers} layers, d_h={cfg.model.d_h}, "
      f"{cfg.moe.n_experts} experts of width {cfg.moe.d_e}")
print(f"held-out ppl before training: {evaluate_ppl(build_model(cfg.model, cfg.moe), held, max_windows=100):.1f}")


def show(row):
    if row.step % 100 == 0 or row.step == cfg.train.n_steps - 1:
        print(f"step {row.step:5d}  lm {row.lm_loss:.3f}  ent {row.ent_loss:.3f}  lambda {row.lam:.2e}  "
              f"ratio {row.mean_act_ratio:.3f}  |silu| {row.mean_silu_mag:.3f}", flush=True)


with threadpool_limits(1):
    res = train_run(cfg, corpus, callback=show)
    print(f"held-out ppl after training: {evaluate_ppl(res.model, held, max_windows=100):.2f}")
write_csv(res.rows, args.csv)
print(f"metrics written to {args.csv}")
