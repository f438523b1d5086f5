"""``deco`` command line: train, eval, bench, ablate, gradcheck.

Every command is a thin wrapper over library calls; see the README for the
config, checkpoint and metrics formats.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .ablation import SUITES, suite_variants, summary_lines, verdicts
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import PRESETS, ConfigError, RunConfig, load_run_config
from .corpus import load_corpus, write_stdlib_corpus
from .gradcheck import input_scale_invariance, run_gradcheck
from .metrics import write_csv
from .sparse_infer import (BenchReport, bench_prompts, benchmark, format_table, make_bench_model,
                           reports_to_csv)
from .training import TrainingDiverged, as_bytes, evaluate_ppl, run_ablation_suite, split_corpus, train_run

MODE_NAMES = {"dense": "dense", "relu": "relu_sparse", "topk": "topk_sparse",
              "relu_sparse": "relu_sparse", "topk_sparse": "topk_sparse"}


class CLIError(Exception):
    pass


def _threads(args) -> int:
    env = os.environ.get("DECO_THREADS")
    if env:
        try:
            return int(env)
        except ValueError:
            raise CLIError(f"DECO_THREADS={env!r} is not an integer") from None
    return args.threads


def _load_config(args) -> RunConfig:
    if args.config:
        return load_run_config(args.config)
    return PRESETS[args.preset]()


def _corpus_for(cfg: RunConfig, override: str | None = None) -> bytes:
    path = override or cfg.paths.corpus
    if path in ("", "stdlib"):
        return load_corpus(None)
    if not Path(path).is_file():
        raise CLIError(f"corpus not found: {path}")
    return load_corpus(path)


def cmd_train(args) -> int:
    cfg = _load_config(args)
    if args.out:
        cfg = replace(cfg, paths=replace(cfg.paths, output_dir=args.out))
    corpus = _corpus_for(cfg, args.corpus)
    out = Path(cfg.paths.output_dir)
    out.mkdir(parents=True, exist_ok=True)

    def progress(row):
        if args.log_every and row.step % args.log_every == 0:
            print(f"step {row.step:5d}  lm {row.lm_loss:.4f}  ent {row.ent_loss:.4f}  "
                  f"lambda {row.lam:.3e}  ratio {row.mean_act_ratio:.3f}", flush=True)

    with threadpool_limits(_threads(args)):
        res = train_run(cfg, corpus, callback=progress)
        _, held = split_corpus(as_bytes(corpus), cfg.train.eval_fraction)
        ppl = evaluate_ppl(res.model, held, max_windows=args.eval_windows)
    save_checkpoint(out / "checkpoint.deco", res.model, cfg)
    write_csv(res.rows, out / "metrics.csv")
    (out / "config.json").write_text(cfg.to_json() + "\n", encoding="utf-8")
    print(f"held-out ppl {ppl:.4f}")
    print(f"wrote {out / 'checkpoint.deco'} and {out / 'metrics.csv'}")
    return 0


def cmd_eval(args) -> int:
    model, cfg = load_checkpoint(args.checkpoint)
    corpus = _corpus_for(cfg, args.corpus)
    _, held = split_corpus(as_bytes(corpus), cfg.train.eval_fraction)
    with threadpool_limits(_threads(args)):
        ppl = evaluate_ppl(model, held, max_windows=args.eval_windows)
    print(f"ppl {ppl:.4f}")
    return 0


def _parse_size(spec: str) -> dict:
    out = {}
    for part in filter(None, spec.split(",")):
        k, _, v = part.partition("=")
        if not v:
            raise CLIError(f"bad --size entry {part!r}; expected key=value")
        out[k.strip()] = float(v) if k.strip() == "target_ratio" else int(v)
    return out


def _prompts(args, context_length: int, vocab: int):
    seq_len = min(args.seq_len, context_length)
    n_seqs = max(1, -(-args.tokens // seq_len))
    return bench_prompts(n_seqs, seq_len, seed=args.seed, vocab=vocab)


def cmd_bench(args) -> int:
    modes = []
    for m in args.modes.split(","):
        if m not in MODE_NAMES:
            raise CLIError(f"unknown mode {m!r}; expected dense, topk, relu")
        modes.append(MODE_NAMES[m])
    n_threads = _threads(args)
    with threadpool_limits(n_threads):
        if args.checkpoint:
            model, _ = load_checkpoint(args.checkpoint)
            prompts = _prompts(args, model.config.context_length, model.config.vocab_size)
        else:
            size = _parse_size(args.size)
            prompts = _prompts(args, size.get("context_length", 256), 256)
            # random weights: calibrate the routers on the workload being timed
            model = make_bench_model(**size, calib_tokens=np.stack(prompts))
        reports = benchmark(model, prompts, modes, warmup=args.warmup, repeats=args.repeats,
                            topk_ratio=args.topk_ratio)
    text = reports_to_csv(reports)
    if args.csv:
        Path(args.csv).write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    print(f"# threads={n_threads}")
    print(format_table(reports))
    return 0


def cmd_ablate(args) -> int:
    variants = suite_variants(args.suite)
    cfg = _load_config(args)
    if args.steps:
        t = cfg.train
        cfg = replace(cfg, train=replace(t, n_steps=args.steps, decay_steps=min(t.decay_steps, args.steps // 4),
                                         warmup_steps=min(t.warmup_steps, args.steps // 4)))
    corpus = _corpus_for(cfg, args.corpus)
    out = Path(args.out or Path(cfg.paths.output_dir) / f"ablate_{args.suite}")
    out.mkdir(parents=True, exist_ok=True)
    seeds = tuple(range(args.seeds))
    with threadpool_limits(_threads(args)):
        runs = run_ablation_suite(cfg, variants, corpus, seeds=seeds, progress=lambda s: print("training", s,
                                                                                              flush=True))
    for name, per_seed in runs.items():
        for seed, rows in zip(seeds, per_seed):
            write_csv(rows, out / f"{name}_seed{seed}.csv")
    for line in summary_lines(runs):
        print(line)
    vs = verdicts(args.suite, runs)
    for v in vs:
        print(v.line())
    if not vs:
        print("no dynamics orderings are defined for this suite")
    return 0


def cmd_gradcheck(args) -> int:
    rep = run_gradcheck(corrupt=args.corrupt)
    for line in rep.lines():
        print(line)
    inv = input_scale_invariance()
    inv_ok = all(v < 0.01 for v in inv.values())
    for c, v in inv.items():
        print(f"input-scale invariance c={c:g}: relative change of ||dL/dW_up||_F = {v:.2e}")
    print(f"input-scale invariance: {'PASS' if inv_ok else 'FAIL'}")
    return 0 if rep.passed and inv_ok else 1


def cmd_corpus(args) -> int:
    n = write_stdlib_corpus(args.out)
    print(f"wrote {n} bytes to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="deco", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def config_args(sp):
        sp.add_argument("config", nargs="?", help="run config JSON (default: --preset)")
        sp.add_argument("--preset", default="desk", choices=sorted(PRESETS))
        sp.add_argument("--corpus", help="override paths.corpus ('stdlib' builds one from docstrings)")

    def thread_arg(sp):
        sp.add_argument("--threads", type=int, default=1, help="BLAS threads (env DECO_THREADS wins)")

    sp = sub.add_parser("train", help="train a model; writes checkpoint + metrics CSV")
    config_args(sp)
    thread_arg(sp)
    sp.add_argument("--out", help="override paths.output_dir")
    sp.add_argument("--log-every", type=int, default=100)
    sp.add_argument("--eval-windows", type=int, default=200)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="held-out perplexity of a checkpoint")
    sp.add_argument("checkpoint")
    sp.add_argument("corpus", nargs="?", help="corpus file (default: the one in the checkpoint config)")
    thread_arg(sp)
    sp.add_argument("--eval-windows", type=int, default=200)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("bench", help="decode benchmark: dense vs TopK vs ReLU sparse")
    sp.add_argument("--checkpoint", help="benchmark this model instead of a generated one")
    sp.add_argument("--size", default="", help="generated model, e.g. d_h=256,n_experts=64,d_e=32,n_layers=8")
    sp.add_argument("--modes", default="dense,topk,relu")
    thread_arg(sp)
    sp.add_argument("--tokens", type=int, default=1000, help="decode steps per timed pass")
    sp.add_argument("--seq-len", type=int, default=250)
    sp.add_argument("--warmup", type=int, default=3)
    sp.add_argument("--repeats", type=int, default=3)
    sp.add_argument("--topk-ratio", type=float, default=0.2)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--csv", help="also write the report CSV here")
    sp.set_defaults(func=cmd_bench)

    sp = sub.add_parser("ablate", help=f"ablation suite: {', '.join(SUITES)}")
    sp.add_argument("suite")
    sp.add_argument("--config")
    sp.add_argument("--preset", default="desk", choices=sorted(PRESETS))
    sp.add_argument("--corpus")
    thread_arg(sp)
    sp.add_argument("--seeds", type=int, default=3)
    sp.add_argument("--steps", type=int, help="override train.n_steps")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("gradcheck", help="finite-difference check of every backward pass")
    sp.add_argument("--corrupt", help=argparse.SUPPRESS)
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("corpus", help="write the offline stdlib-docstring corpus")
    sp.add_argument("out")
    sp.set_defaults(func=cmd_corpus)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (CLIError, ConfigError, CheckpointError, FileNotFoundError, ValueError) as e:
        print(f"deco {args.command}: error: {e}", file=sys.stderr)
        return 2
    except TrainingDiverged as e:
        print(f"deco {args.command}: training diverged: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
