"""Training loop, WSD schedule, perplexity and ablation runs."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from .config import RunConfig, TrainConfig
from .lm import LanguageModel, build_model, cross_entropy
from .metrics import MetricsRow
from .numerics import make_rng
from .regularization import RegulatorState, update_lambda

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    pass


def wsd_lr(step: int, cfg: TrainConfig) -> float:
    """Linear warmup from 0, flat at peak, linear decay to 0 over the last steps."""
    if not 0 <= step < cfg.n_steps:
        raise ValueError(f"step {step} outside [0, {cfg.n_steps})")
    if step < cfg.warmup_steps:
        return cfg.peak_lr * step / cfg.warmup_steps
    left = cfg.n_steps - step
    if left <= cfg.decay_steps:
        return cfg.peak_lr * left / cfg.decay_steps
    return cfg.peak_lr


class AdamW:
    """Adam with decoupled weight decay on arrays of rank >= 2."""

    def __init__(self, params: dict[str, np.ndarray], beta1=0.9, beta2=0.95, eps=1e-8, weight_decay=0.1):
        self.params = params
        self.b1, self.b2, self.eps, self.wd = beta1, beta2, eps, weight_decay
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, grads: dict[str, np.ndarray], lr: float) -> None:
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for k, p in self.params.items():
            g = grads[k]
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * (g * g)
            if self.wd and p.ndim >= 2:
                p *= 1 - lr * self.wd
            p -= (lr / c1) * m / (np.sqrt(v / c2) + self.eps)


def clip_grads(grads: dict[str, np.ndarray], max_norm: float) -> float:
    total = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values()))
    if max_norm and total > max_norm:
        s = max_norm / (total + 1e-12)
        for g in grads.values():
            g *= s
    return total


def split_corpus(data: np.ndarray, eval_fraction: float) -> tuple[np.ndarray, np.ndarray]:
    cut = int(len(data) * (1 - eval_fraction))
    return data[:cut], data[cut:]


def as_bytes(corpus) -> np.ndarray:
    if isinstance(corpus, np.ndarray):
        return corpus.astype(np.uint8, copy=False)
    if isinstance(corpus, str):
        corpus = corpus.encode("utf-8")
    return np.frombuffer(bytes(corpus), dtype=np.uint8)


class BatchSampler:
    """Random contiguous windows, deterministic per seed."""

    def __init__(self, data: np.ndarray, batch_size: int, seq_len: int, seed: int):
        if len(data) < seq_len + 2:
            raise ValueError(f"corpus of {len(data)} bytes is shorter than one window")
        self.data = data
        self.batch_size = batch_size
        self.seq_len = seq_len
        self.gen = make_rng(seed).child("batches").generator()

    def next(self) -> tuple[np.ndarray, np.ndarray]:
        T = self.seq_len
        starts = self.gen.integers(0, len(self.data) - T - 1, size=self.batch_size)
        idx = starts[:, None] + np.arange(T + 1)
        win = self.data[idx].astype(np.int64)
        return win[:, :-1], win[:, 1:]


@dataclass
class TrainResult:
    model: LanguageModel
    rows: list[MetricsRow]
    regulator: RegulatorState | None


def train(model: LanguageModel, cfg: TrainConfig, corpus, *, target_activation_ratio: float | None = None,
          callback: Callable[[MetricsRow], None] | None = None, log_every: int = 0) -> TrainResult:
    """Train in place with ``L = L_lm + lam * L_ent`` and the lambda controller.

    ``corpus`` is raw bytes (or a uint8 array); the held-out tail of
    ``cfg.eval_fraction`` is never sampled.
    """
    cfg.validate()
    data = as_bytes(corpus)
    train_data, _ = split_corpus(data, cfg.eval_fraction)
    sampler = BatchSampler(train_data, cfg.batch_size, cfg.seq_len, cfg.seed)
    params = model.params()
    opt = AdamW(params, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay)

    has_relu = any(model.layers[i].ffn.router.kind == "relu" for i in model.moe_layers)
    if target_activation_ratio is None and model.moe_config is not None:
        target_activation_ratio = model.moe_config.target_activation_ratio
    reg = None
    if has_relu:
        reg = RegulatorState.start(cfg.lambda_init, cfg.eta, target_activation_ratio)

    rows = []
    for step in range(cfg.n_steps):
        lr = wsd_lr(step, cfg)
        x, y = sampler.next()
        lam = reg.lam if reg is not None else 0.0
        lm_loss, stats, grads = model.loss_and_grads(x, y, lam)
        if not math.isfinite(lm_loss) or not math.isfinite(stats.ent_loss):
            norms = {k: float(np.linalg.norm(v)) for k, v in params.items()}
            worst = sorted(norms.items(), key=lambda kv: -kv[1] if math.isfinite(kv[1]) else -np.inf)[:5]
            raise TrainingDiverged(f"non-finite loss at step {step}; largest parameter norms: {worst}")
        clip_grads(grads, cfg.grad_clip)
        opt.step(grads, lr)
        row = MetricsRow(step, lm_loss, stats.ent_loss, lam, lr,
                         list(stats.activation_ratios), list(stats.mean_abs_silu))
        rows.append(row)
        if reg is not None and cfg.controller:
            reg = update_lambda(reg, row.mean_act_ratio)
        if callback is not None:
            callback(row)
        if log_every and step % log_every == 0:
            log.info("step %d lm %.4f ent %.4f lam %.3e ratio %.3f", step, lm_loss, stats.ent_loss,
                     lam, row.mean_act_ratio)
    return TrainResult(model, rows, reg)


def evaluate_ppl(model: LanguageModel, data, *, seq_len: int | None = None, batch_size: int = 16,
                 max_windows: int | None = None) -> float:
    """``exp(mean CE)`` over non-overlapping windows of ``data``."""
    data = as_bytes(data)
    T = seq_len or model.config.context_length
    n_win = (len(data) - 1) // T
    if max_windows is not None:
        n_win = min(n_win, max_windows)
    if n_win < 1:
        raise ValueError("evaluation slice shorter than one window")
    total, count = 0.0, 0
    for b0 in range(0, n_win, batch_size):
        starts = np.arange(b0, min(n_win, b0 + batch_size)) * T
        idx = starts[:, None] + np.arange(T + 1)
        win = data[idx].astype(np.int64)
        logits = model.logits(win[:, :-1])
        loss, _ = cross_entropy(logits, win[:, 1:])
        n = win[:, 1:].size
        total += loss * n
        count += n
    return math.exp(total / count)


def train_run(cfg: RunConfig, corpus, **kw) -> TrainResult:
    """Build the model described by ``cfg`` and train it."""
    cfg.validate()
    model = build_model(cfg.model, cfg.moe)
    return train(model, cfg.train, corpus, target_activation_ratio=cfg.moe.target_activation_ratio, **kw)


def dense_baseline_config(cfg: RunConfig) -> RunConfig:
    """All-dense model whose FFN width matches the MoE block's parameter count."""
    model = replace(cfg.model, ffn_kinds=["dense"] * cfg.model.n_layers)
    return replace(cfg, model=model)


def run_ablation_suite(base: RunConfig, variants: dict[str, dict], corpus, *,
                       seeds=(0,), progress: Callable[[str], None] | None = None) -> dict[str, list[list[MetricsRow]]]:
    """Train one model per (variant, seed) differing only in the given MoE knobs.

    Returns ``{variant: [rows for each seed]}``.
    """
    out = {}
    for name, changes in variants.items():
        out[name] = []
        for seed in seeds:
            cfg = replace(base, moe=replace(base.moe, **changes),
                          model=replace(base.model, seed=seed), train=replace(base.train, seed=seed))
            cfg.validate()
            if progress:
                progress(f"{name} seed={seed}")
            out[name].append(train_run(cfg, corpus).rows)
    return out
