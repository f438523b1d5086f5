"""Turning router sparsity into decode speed on a CPU.

A random-weight model (d_h=256, 64 experts of width 32) is calibrated so its
ReLU routers fire on 20% of experts. Decoding one token at a time, the
sparse modes run only the active experts through the same fixed-order
kernel the dense mode uses, so the logits agree bit for bit while the
routed FLOPs drop to the activation ratio.

    python demos/03_sparse_decode.py --tokens 500
"""
import argparse

import numpy as np
from threadpoolctl import threadpool_limits

from deco.sparse_infer import (Counters, InferencePlan, bench_prompts, benchmark, decode_sequence,
                               format_table, make_bench_model)

ap = argparse.ArgumentParser()
ap.add_argument("--tokens", type=int, default=1000)
ap.add_argument("--seq-len", type=int, default=250)
args = ap.parse_args()

with threadpool_limits(1):
    prompts = bench_prompts(max(1, args.tokens // args.seq_len), args.seq_len, seed=0)
    model = make_bench_model(calib_tokens=np.stack(prompts))

    c = Counters()
    same = True
    for p in prompts:
        dense = decode_sequence(InferencePlan(model, "dense"), p)
        sparse = decode_sequence(InferencePlan(model, "relu_sparse"), p, c)
        same = same and np.array_equal(dense, sparse)
    print(f"dense vs relu_sparse logits identical: {same}")
    print(f"active expert pairs {c.active_pairs} of {c.possible_pairs} ({c.activation_ratio:.3f}); "
          f"routed FLOPs {c.routed_flops} vs dense {c.dense_routed_flops}")

    reports = benchmark(model, prompts, warmup=3, repeats=3, topk_ratio=c.activation_ratio)
print(format_table(reports))
