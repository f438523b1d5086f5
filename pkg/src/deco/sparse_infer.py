"""Batch-1 autoregressive decoding that turns router sparsity into saved work.

Three execution modes share one code path:

* ``dense``       - every routed expert is computed; inactive ones carry a
                    zero score. This is the oracle and the baseline.
* ``relu_sparse`` - only experts with a positive ReLU router logit run.
* ``topk_sparse`` - the router is swapped for a TopK router over the same
                    weights (k = round(ratio * N_e)) and only the k run.

The routed FFN always goes through ``kernels.routed_ffn`` with pairs in the
same order, so a sparse step differs from the dense one only by skipping
terms that are exactly zero: the logits agree bit for bit. ``router="topk"``
with ``mode="dense"`` gives the dense oracle for TopK.

FLOPs are counted as 2 per multiply-add. Expert bytes are the weight bytes a
step has to touch: the active experts' blocks, plus the cross-expert mean
weight and the shared expert, which every token reads.
"""
from __future__ import annotations

import csv
import io
import math
import statistics
import time
from dataclasses import dataclass, field

import numpy as np

from .config import LMConfig, MoEConfig
from .experts import PackedExperts, active_pairs, gated_mlp_forward
from .lm import NORM_EPS, LanguageModel, build_model
from .numerics import make_rng, rms_norm
from .routing import RouterParams, route

MODES = ("dense", "relu_sparse", "topk_sparse")


@dataclass
class Counters:
    tokens: int = 0
    routed_flops: int = 0        # up/down(/gate) projections of routed experts
    dense_routed_flops: int = 0  # what the same steps cost with every expert active
    norm_flops: int = 0          # x @ W_up_mean, once per token per layer
    router_flops: int = 0
    shared_flops: int = 0
    expert_bytes: int = 0
    active_pairs: int = 0
    possible_pairs: int = 0

    def add(self, other: "Counters") -> None:
        for k in vars(self):
            setattr(self, k, getattr(self, k) + getattr(other, k))

    @property
    def activation_ratio(self) -> float:
        return self.active_pairs / self.possible_pairs if self.possible_pairs else 0.0


@dataclass
class _MoELayerPlan:
    router: RouterParams
    packed: PackedExperts
    shared: object
    expert_bytes: int            # one routed expert's weights
    fixed_bytes: int             # mean weight + shared expert
    pair_flops: int
    norm_flops: int
    router_flops: int
    shared_flops: int


class InferencePlan:
    """Per-layer packed weights and routers for one execution mode."""

    def __init__(self, model: LanguageModel, mode: str = "relu_sparse", *, router: str | None = None,
                 topk_ratio: float = 0.2):
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
        if router is None:
            router = "topk" if mode == "topk_sparse" else "model"
        if router not in ("model", "topk"):
            raise ValueError(f"unknown router override {router!r}")
        self.model = model
        self.mode = mode
        self.router_kind = router
        self.dtype = model.dtype
        self.layers: dict[int, _MoELayerPlan] = {}
        for i in model.moe_layers:
            ffn = model.layers[i].ffn
            r = ffn.router
            if router == "topk":
                k = max(1, int(round(topk_ratio * r.n_experts)))
                r = RouterParams(r.W, np.ones(1, dtype=r.W.dtype), "topk", k=k, fixed_scale=1.0)
            packed = PackedExperts.from_params(ffn.experts)
            n_e, d_h, d_e = packed.up_T.shape
            item = packed.up_T.itemsize
            n_mats = 3 if packed.gated else 2
            shared_bytes = sum(v.nbytes for v in ffn.shared.arrays().values())
            self.layers[i] = _MoELayerPlan(
                router=r, packed=packed, shared=ffn.shared,
                expert_bytes=n_mats * d_e * d_h * item,
                fixed_bytes=(packed.mean_T.nbytes if packed.use_mean else 0) + shared_bytes,
                pair_flops=2 * n_mats * d_e * d_h,
                norm_flops=2 * d_e * d_h if packed.use_mean else 0,
                router_flops=2 * d_h * n_e,
                shared_flops=2 * 3 * d_h * ffn.shared.d_ff,
            )

    def new_state(self) -> "DecodeState":
        cfg = self.model.config
        shape = (cfg.context_length, cfg.d_h)
        return DecodeState([np.zeros(shape, self.dtype) for _ in self.model.layers],
                           [np.zeros(shape, self.dtype) for _ in self.model.layers])

    def moe_ffn(self, i: int, x: np.ndarray, counters: Counters) -> np.ndarray:
        """Routed + shared FFN for a ``[1, d_h]`` input."""
        lp = self.layers[i]
        decision = route(x, lp.router)
        n_e = lp.router.n_experts
        if self.mode == "dense":
            tok = np.zeros(n_e, dtype=np.int64)
            exp = np.arange(n_e, dtype=np.int64)
        else:
            tok, exp = active_pairs(decision.active)
        y = lp.packed.run(x, tok, exp, decision.scores[tok, exp])
        y += gated_mlp_forward(x, lp.shared)[0]
        n_pairs = int(tok.size)
        counters.routed_flops += n_pairs * lp.pair_flops
        counters.dense_routed_flops += n_e * lp.pair_flops
        counters.norm_flops += lp.norm_flops
        counters.router_flops += lp.router_flops
        counters.shared_flops += lp.shared_flops
        counters.expert_bytes += n_pairs * lp.expert_bytes + lp.fixed_bytes
        counters.active_pairs += decision.n_active
        counters.possible_pairs += n_e
        return y


@dataclass
class DecodeState:
    k_cache: list[np.ndarray]
    v_cache: list[np.ndarray]
    pos: int = 0


def decode_step(plan: InferencePlan, state: DecodeState, token: int,
                counters: Counters | None = None) -> np.ndarray:
    """Feed one token, return next-token logits ``[V]``; updates the KV cache."""
    model = plan.model
    cfg = model.config
    if state.pos >= cfg.context_length:
        raise ValueError(f"context of {cfg.context_length} tokens is full")
    if counters is None:
        counters = Counters()
    t = state.pos
    D = cfg.d_h
    H = cfg.n_heads
    hd = D // H
    scale = 1.0 / math.sqrt(hd)
    h = (model.tok_emb[token] + model.pos_emb[t])[None, :]
    for i, L in enumerate(model.layers):
        a = rms_norm(h, L.ln1, NORM_EPS)
        qkv = a @ L.attn.W_qkv.T
        q = qkv[0, :D].reshape(H, hd)
        state.k_cache[i][t] = qkv[0, D:2 * D]
        state.v_cache[i][t] = qkv[0, 2 * D:]
        K = state.k_cache[i][:t + 1].reshape(t + 1, H, hd).transpose(1, 0, 2)
        V = state.v_cache[i][:t + 1].reshape(t + 1, H, hd).transpose(1, 0, 2)
        att = (K @ q[:, :, None])[:, :, 0] * scale
        att -= att.max(axis=-1, keepdims=True)
        P = np.exp(att)
        P /= P.sum(axis=-1, keepdims=True)
        o = (P[:, None, :] @ V).reshape(1, D)
        h = h + o @ L.attn.W_o.T
        f = rms_norm(h, L.ln2, NORM_EPS)
        if L.is_moe:
            y = plan.moe_ffn(i, f, counters)
        else:
            y = gated_mlp_forward(f, L.ffn)[0]
        h = h + y
    out = rms_norm(h, model.ln_f, NORM_EPS)
    state.pos += 1
    counters.tokens += 1
    return (out @ model.head.T)[0]


def decode_sequence(plan: InferencePlan, tokens, counters: Counters | None = None) -> np.ndarray:
    """Teacher-forced decode of ``tokens`` from an empty cache; logits ``[T, V]``."""
    state = plan.new_state()
    return np.stack([decode_step(plan, state, int(tok), counters) for tok in tokens])


# ---------------------------------------------------------------------------
# benchmark model

def calibrate_relu_routers(model: LanguageModel, tokens: np.ndarray, target_ratio: float,
                           direction: np.ndarray) -> list[float]:
    """Shift every ReLU router so its activation ratio on ``tokens`` is ``target_ratio``.

    Router columns are made orthogonal to ``direction`` (a component every
    hidden state shares) and then moved by ``-beta * direction``; ``beta`` is
    found by bisection, layer by layer since each layer's input depends on the
    routers below it. Returns the measured ratios.
    """
    u = direction / np.linalg.norm(direction)
    ratios = []
    for i in model.moe_layers:
        _, cache, _ = model.forward(tokens)
        X = cache["layers"][i][3].astype(np.float64)
        W = model.layers[i].ffn.router.W
        W_perp = W - np.outer(u, u @ W)
        A = X @ W_perp
        b = X @ u

        def ratio(beta):
            return float(((A - beta * b[:, None]) > 0).mean())

        lo, hi = 0.0, 1e-3
        while ratio(hi) > target_ratio and hi < 1e3:
            hi *= 2
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            if ratio(mid) > target_ratio:
                lo = mid
            else:
                hi = mid
        W[...] = (W_perp - hi * u[:, None]).astype(W.dtype)
        ratios.append(ratio(hi))
    return ratios


def make_bench_model(*, d_h=256, n_experts=64, d_e=32, d_s=64, n_layers=8, n_heads=4,
                     context_length=256, activation="normsilu", gating="non_gated",
                     target_ratio=0.2, seed=0, calib_tokens: np.ndarray | None = None) -> LanguageModel:
    """Random-weight inference model whose ReLU routers fire at ``target_ratio``."""
    moe = MoEConfig(d_h=d_h, d_e=d_e, d_s=d_s, n_experts=n_experts, activation=activation,
                    gating=gating, target_activation_ratio=target_ratio)
    lm = LMConfig(d_h=d_h, n_layers=n_layers, n_heads=n_heads, context_length=context_length, seed=seed)
    model = build_model(lm, moe)
    gen = make_rng(seed).child("bench_offset").generator()
    c = gen.standard_normal(d_h)
    c *= float(np.linalg.norm(model.tok_emb, axis=1).mean()) / np.linalg.norm(c)
    model.tok_emb += c.astype(model.dtype)
    if calib_tokens is None:
        gen = make_rng(seed).child("bench_calib").generator()
        calib_tokens = gen.integers(0, lm.vocab_size, (8, context_length))
    calibrate_relu_routers(model, calib_tokens, target_ratio, c)
    return model


# ---------------------------------------------------------------------------
# benchmark

@dataclass
class BenchReport:
    mode: str
    tokens: int
    seconds: float                 # median wall time of one pass over the prompts
    tokens_per_sec: float
    activation_ratio: float
    routed_flops_per_token: float
    ffn_flops_per_token: float
    expert_bytes_per_token: float
    routed_flops: int              # exact integer totals for one pass
    ffn_flops: int
    expert_bytes: int
    speedup: float = 1.0
    flop_ratio: float = 1.0        # routed FLOPs relative to dense
    times: list[float] = field(default_factory=list, repr=False)

    CSV_FIELDS = ("mode", "tokens", "seconds", "tokens_per_sec", "speedup", "activation_ratio",
                  "routed_flops", "routed_flops_per_token", "flop_ratio", "ffn_flops",
                  "ffn_flops_per_token", "expert_bytes", "expert_bytes_per_token")


def _one_pass(plan: InferencePlan, prompts) -> tuple[float, Counters]:
    counters = Counters()
    t0 = time.perf_counter()
    for seq in prompts:
        decode_sequence(plan, seq, counters)
    return time.perf_counter() - t0, counters


def benchmark(model: LanguageModel, prompts, modes=MODES, *, warmup: int = 3, repeats: int = 5,
              topk_ratio: float = 0.2) -> list[BenchReport]:
    """Time teacher-forced decoding of ``prompts`` in each mode.

    Rounds interleave the modes so drift hits all of them alike; the first
    ``warmup`` rounds are discarded and the median of the rest is reported.
    Run under a fixed thread count (see ``cli``).
    """
    if warmup < 3:
        raise ValueError("at least 3 warmup rounds are required")
    modes = list(modes)
    plans = {m: InferencePlan(model, m, topk_ratio=topk_ratio) for m in modes}
    times = {m: [] for m in modes}
    counts: dict[str, Counters] = {}
    for r in range(warmup + repeats):
        for m in modes:
            dt, c = _one_pass(plans[m], prompts)
            if r >= warmup:
                times[m].append(dt)
            counts[m] = c
    reports = []
    for m in modes:
        c = counts[m]
        med = statistics.median(times[m])
        ffn = c.routed_flops + c.norm_flops + c.router_flops + c.shared_flops
        reports.append(BenchReport(m, c.tokens, med, c.tokens / med, c.activation_ratio,
                                   c.routed_flops / c.tokens, ffn / c.tokens, c.expert_bytes / c.tokens,
                                   c.routed_flops, ffn, c.expert_bytes, times=times[m]))
    base = next((r for r in reports if r.mode == "dense"), None)
    for r in reports:
        r.flop_ratio = r.routed_flops / counts[r.mode].dense_routed_flops
        r.speedup = base.seconds / r.seconds if base is not None else float("nan")
    return reports


def reports_to_csv(reports: list[BenchReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(BenchReport.CSV_FIELDS)
    for r in reports:
        w.writerow([repr(v) if isinstance(v, float) else str(v)
                    for v in (getattr(r, f) for f in BenchReport.CSV_FIELDS)])
    return buf.getvalue()


def format_table(reports: list[BenchReport]) -> str:
    lines = [f"{'mode':<12} {'tok/s':>9} {'speedup':>8} {'ratio':>7} {'flop ratio':>10} "
             f"{'routed MFLOP/tok':>16} {'expert KB/tok':>13}"]
    for r in reports:
        lines.append(f"{r.mode:<12} {r.tokens_per_sec:>9.1f} {r.speedup:>8.2f} {r.activation_ratio:>7.3f} "
                     f"{r.flop_ratio:>10.3f} {r.routed_flops_per_token / 1e6:>16.3f} "
                     f"{r.expert_bytes_per_token / 1024:>13.1f}")
    return "\n".join(lines)


def bench_prompts(n_seqs: int, seq_len: int, seed: int = 0, vocab: int = 256, corpus: bytes | None = None):
    """Token sequences for timing: corpus slices when given, else uniform bytes."""
    gen = make_rng(seed).child("bench_prompts").generator()
    if corpus is None:
        return [gen.integers(0, vocab, seq_len) for _ in range(n_seqs)]
    data = np.frombuffer(corpus, dtype=np.uint8)
    starts = gen.integers(0, len(data) - seq_len, n_seqs)
    return [data[s:s + seq_len].astype(np.int64) for s in starts]
