"""Byte-level causal transformer hosting dense or MoE FFN layers.

Pre-norm blocks: ``h += attn(rms(h)); h += ffn(rms(h))``, learned positional
embeddings, untied output head. Forward and backward are written out by hand.
Parameters are initialized from streams keyed by their names, so two models
built with the same seed share every weight they have in common, whatever
their FFN choice.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .config import LMConfig, MoEConfig
from .experts import GatedMLPParams, init_gated_mlp
from .moe import (MoEBlockParams, dense_ffn_backward, dense_ffn_forward, init_moe_block,
                  matched_dense_dff, moe_backward, moe_forward)
from .numerics import init_normal, make_rng, rms_norm_backward, rms_norm_forward
from .regularization import router_entropy_and_grad

NORM_EPS = 1e-6


@dataclass
class AttentionParams:
    W_qkv: np.ndarray              # [3 d_h, d_h]
    W_o: np.ndarray                # [d_h, d_h]
    n_heads: int

    def arrays(self):
        return {"W_qkv": self.W_qkv, "W_o": self.W_o}


@dataclass
class Layer:
    ln1: np.ndarray
    attn: AttentionParams
    ln2: np.ndarray
    ffn: GatedMLPParams | MoEBlockParams

    @property
    def is_moe(self) -> bool:
        return isinstance(self.ffn, MoEBlockParams)


@dataclass
class StepStats:
    activation_ratios: list[float] = field(default_factory=list)
    mean_abs_silu: list[float] = field(default_factory=list)
    ent_loss: float = 0.0


class LanguageModel:
    def __init__(self, config: LMConfig, moe_config: MoEConfig | None, tok_emb, pos_emb,
                 layers: list[Layer], ln_f, head):
        self.config = config
        self.moe_config = moe_config
        self.tok_emb = tok_emb
        self.pos_emb = pos_emb
        self.layers = layers
        self.ln_f = ln_f
        self.head = head

    # -- parameter views ---------------------------------------------------
    def params(self) -> dict[str, np.ndarray]:
        out = {"tok_emb": self.tok_emb, "pos_emb": self.pos_emb}
        for i, L in enumerate(self.layers):
            p = f"layers.{i}."
            out[p + "ln1"] = L.ln1
            for k, v in L.attn.arrays().items():
                out[p + "attn." + k] = v
            out[p + "ln2"] = L.ln2
            for k, v in L.ffn.arrays().items():
                out[p + "ffn." + k] = v
        out["ln_f"] = self.ln_f
        out["head"] = self.head
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        """Non-trainable arrays that still belong in a checkpoint (fixed alphas)."""
        out = {}
        for i, L in enumerate(self.layers):
            if L.is_moe and "alpha" not in L.ffn.router.arrays():
                out[f"layers.{i}.ffn.router.alpha"] = L.ffn.router.alpha
        return out

    def n_params(self) -> int:
        return sum(v.size for v in self.params().values())

    @property
    def moe_layers(self) -> list[int]:
        return [i for i, L in enumerate(self.layers) if L.is_moe]

    @property
    def dtype(self):
        return self.tok_emb.dtype

    def astype(self, dtype) -> "LanguageModel":
        layers = []
        for L in self.layers:
            layers.append(Layer(L.ln1.astype(dtype),
                                AttentionParams(L.attn.W_qkv.astype(dtype), L.attn.W_o.astype(dtype), L.attn.n_heads),
                                L.ln2.astype(dtype), L.ffn.astype(dtype)))
        return LanguageModel(self.config, self.moe_config, self.tok_emb.astype(dtype),
                             self.pos_emb.astype(dtype), layers, self.ln_f.astype(dtype),
                             self.head.astype(dtype))

    # -- forward / backward ------------------------------------------------
    def forward(self, tokens: np.ndarray, *, keep_cache: bool = True):
        """Logits ``[B, T, V]`` for integer tokens ``[B, T]``; returns (logits, cache, stats)."""
        B, T = tokens.shape
        if T > self.config.context_length:
            raise ValueError(f"sequence length {T} exceeds context {self.config.context_length}")
        h = self.tok_emb[tokens] + self.pos_emb[:T]
        caches = []
        stats = StepStats()
        ents = {}
        for L in self.layers:
            a_in, c_ln1 = rms_norm_forward(h, L.ln1, NORM_EPS)
            a_out, c_attn = attention_forward(a_in, L.attn)
            h = h + a_out
            f_in, c_ln2 = rms_norm_forward(h, L.ln2, NORM_EPS)
            flat = f_in.reshape(B * T, -1)
            if L.is_moe:
                y, decision, trace, c_ffn = moe_forward(flat, L.ffn)
                stats.activation_ratios.append(decision.activation_ratio)
                stats.mean_abs_silu.append(trace.mean_abs_silu)
                if L.ffn.router.kind == "relu":
                    ents[len(caches)] = router_entropy_and_grad(decision.scores)
            else:
                y, c_ffn = dense_ffn_forward(flat, L.ffn)
            h = h + y.reshape(B, T, -1)
            caches.append((c_ln1, c_attn, c_ln2, flat, c_ffn) if keep_cache else None)
        out, c_lnf = rms_norm_forward(h, self.ln_f, NORM_EPS)
        logits = out @ self.head.T
        stats.ent_loss = float(np.mean([e[0] for e in ents.values()])) if ents else 0.0
        cache = {"tokens": tokens, "layers": caches, "ln_f": c_lnf, "out": out, "ents": ents}
        return logits, cache, stats

    def backward(self, cache, g_logits: np.ndarray, lam: float = 0.0) -> dict[str, np.ndarray]:
        """Gradients of ``mean CE + lam * mean entropy`` given ``d loss / d logits``."""
        tokens = cache["tokens"]
        B, T = tokens.shape
        grads: dict[str, np.ndarray] = {}
        out = cache["out"]
        grads["head"] = g_logits.reshape(B * T, -1).T @ out.reshape(B * T, -1)
        g_out = g_logits @ self.head
        g_h, grads["ln_f"] = rms_norm_backward(g_out, self.ln_f, cache["ln_f"])

        ents = cache["ents"]
        for i in reversed(range(len(self.layers))):
            L = self.layers[i]
            c_ln1, c_attn, c_ln2, f_in, c_ffn = cache["layers"][i]
            p = f"layers.{i}."
            gy = g_h.reshape(B * T, -1)
            if L.is_moe:
                extra = ents[i][1] * (lam / len(ents)) if lam and i in ents else None
                g_flat, g_ffn = moe_backward(L.ffn, c_ffn, gy, extra)
            else:
                g_flat, g_ffn = dense_ffn_backward(f_in, L.ffn, c_ffn, gy)
            for k, v in g_ffn.items():
                grads[p + "ffn." + k] = v
            g_fin = g_flat.reshape(B, T, -1)
            g_ln2_in, grads[p + "ln2"] = rms_norm_backward(g_fin, L.ln2, c_ln2)
            g_h = g_h + g_ln2_in
            g_a_in, g_attn = attention_backward(L.attn, c_attn, g_h)
            for k, v in g_attn.items():
                grads[p + "attn." + k] = v
            g_ln1_in, grads[p + "ln1"] = rms_norm_backward(g_a_in, L.ln1, c_ln1)
            g_h = g_h + g_ln1_in

        g_tok = np.zeros_like(self.tok_emb)
        np.add.at(g_tok, tokens.reshape(-1), g_h.reshape(B * T, -1))
        grads["tok_emb"] = g_tok
        g_pos = np.zeros_like(self.pos_emb)
        g_pos[:T] = g_h.sum(axis=0)
        grads["pos_emb"] = g_pos
        return grads

    def loss_and_grads(self, tokens: np.ndarray, targets: np.ndarray, lam: float = 0.0):
        """Return ``(lm_loss, stats, grads)`` for one batch."""
        logits, cache, stats = self.forward(tokens)
        lm_loss, g_logits = cross_entropy(logits, targets)
        grads = self.backward(cache, g_logits, lam)
        return lm_loss, stats, grads

    def logits(self, tokens: np.ndarray) -> np.ndarray:
        return self.forward(tokens, keep_cache=False)[0]


# ---------------------------------------------------------------------------
# attention

def attention_forward(x: np.ndarray, p: AttentionParams):
    B, T, D = x.shape
    H = p.n_heads
    hd = D // H
    qkv = x @ p.W_qkv.T
    q, k, v = (np.ascontiguousarray(qkv[..., i * D:(i + 1) * D].reshape(B, T, H, hd).transpose(0, 2, 1, 3))
               for i in range(3))
    # a Python float keeps float32 activations float32
    scale = 1.0 / math.sqrt(hd)
    att = q @ k.transpose(0, 1, 3, 2)
    att *= scale
    att[..., np.triu(np.ones((T, T), dtype=bool), k=1)] = -np.inf
    att -= att.max(axis=-1, keepdims=True)
    P = np.exp(att, out=att)
    P /= P.sum(axis=-1, keepdims=True)
    o = (P @ v).transpose(0, 2, 1, 3).reshape(B, T, D)
    y = o @ p.W_o.T
    return y, (x, q, k, v, P, o, scale)


def attention_backward(p: AttentionParams, cache, gy: np.ndarray):
    x, q, k, v, P, o, scale = cache
    B, T, D = x.shape
    H = p.n_heads
    hd = D // H
    g_Wo = gy.reshape(B * T, D).T @ o.reshape(B * T, D)
    g_o = np.ascontiguousarray((gy @ p.W_o).reshape(B, T, H, hd).transpose(0, 2, 1, 3))
    g_P = g_o @ v.transpose(0, 1, 3, 2)
    g_v = P.transpose(0, 1, 3, 2) @ g_o
    g_P -= (g_P * P).sum(axis=-1, keepdims=True)
    g_P *= P
    g_P *= scale
    g_att = g_P
    g_q = g_att @ k
    g_k = g_att.transpose(0, 1, 3, 2) @ q
    g_qkv = np.concatenate([g.transpose(0, 2, 1, 3).reshape(B, T, D) for g in (g_q, g_k, g_v)], axis=-1)
    g_Wqkv = g_qkv.reshape(B * T, 3 * D).T @ x.reshape(B * T, D)
    gx = g_qkv @ p.W_qkv
    return gx, {"W_qkv": g_Wqkv, "W_o": g_Wo}


# ---------------------------------------------------------------------------
# loss

def cross_entropy(logits: np.ndarray, targets: np.ndarray):
    """Mean token cross-entropy and its gradient w.r.t. the logits."""
    V = logits.shape[-1]
    flat = logits.reshape(-1, V)
    t = targets.reshape(-1)
    z = flat - flat.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    n = t.size
    loss = float(-logp[np.arange(n), t].sum() / n)
    g = np.exp(logp)
    g[np.arange(n), t] -= 1
    g /= n
    return loss, g.reshape(logits.shape).astype(logits.dtype, copy=False)


# ---------------------------------------------------------------------------
# construction

def build_model(config: LMConfig, moe_config: MoEConfig | None = None, dtype=np.float32) -> LanguageModel:
    """Initialize a model; layer kinds come from ``config.layer_kinds()``."""
    config.validate(moe_config if "moe" in config.layer_kinds() else None)
    kinds = config.layer_kinds()
    if "moe" in kinds and moe_config is None:
        raise ValueError("MoE layers requested but no MoEConfig given")
    if moe_config is not None:
        moe_config.validate()
    rng = make_rng(config.seed)
    d = config.d_h
    d_ff = config.d_ff
    if d_ff is None:
        if moe_config is None:
            raise ValueError("dense-only model needs model.d_ff or an MoEConfig to match")
        d_ff = matched_dense_dff(moe_config)
    std = moe_config.init_std if moe_config is not None else 0.02

    tok_emb = init_normal((config.vocab_size, d), std, rng.child("tok_emb"), dtype)
    pos_emb = init_normal((config.context_length, d), std, rng.child("pos_emb"), dtype)
    layers = []
    for i, kind in enumerate(kinds):
        p = f"layers.{i}."
        attn = AttentionParams(init_normal((3 * d, d), std, rng.child(p + "attn.W_qkv"), dtype),
                               init_normal((d, d), std, rng.child(p + "attn.W_o"), dtype),
                               config.n_heads)
        if kind == "moe":
            ffn = init_moe_block(moe_config, rng.child(p + "ffn"), dtype)
        else:
            ffn = init_gated_mlp(d, d_ff, rng.child(p + "ffn.dense"), std, dtype)
        layers.append(Layer(np.ones(d, dtype), attn, np.ones(d, dtype), ffn))
    head = init_normal((config.vocab_size, d), std, rng.child("head"), dtype)
    return LanguageModel(config, moe_config, tok_emb, pos_emb, layers, np.ones(d, dtype), head)
