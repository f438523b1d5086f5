"""Routed experts (NormSiLU and ablations), SparseLinear, and the shared expert.

The training path evaluates every expert with BLAS and lets the router scores
(exactly zero for inactive experts) mask the result; it is mathematically the
sparse computation and keeps the backward pass to a handful of GEMMs.
``sparse_linear`` and the kernels in ``deco.kernels`` are the gathered path
used for inference.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .numerics import (RMS_EPS, RngState, init_normal, rms_norm_backward, rms_norm_forward,
                       silu, silu_grad)
from .routing import RouterDecision

VARIANTS = ("normsilu", "normsilu_no_mean", "normsilu_no_rms", "silu")


def variant_steps(variant: str) -> tuple[bool, bool]:
    """(subtract cross-expert mean, apply per-expert RMS norm) for a variant."""
    try:
        return {"normsilu": (True, True), "normsilu_no_mean": (False, True),
                "normsilu_no_rms": (True, False), "silu": (False, False)}[variant]
    except KeyError:
        raise ValueError(f"unknown activation {variant!r}; expected one of {VARIANTS}") from None


@dataclass
class ExpertParams:
    W_up: np.ndarray               # [N_e, d_e, d_h]
    W_down: np.ndarray             # [N_e, d_h, d_e]
    rms_weight: np.ndarray         # [d_e], one per layer, shared by all experts
    W_gate: np.ndarray | None = None
    activation: str = "normsilu"
    gating: str = "non_gated"
    eps: float = RMS_EPS

    def __post_init__(self):
        if (self.W_gate is not None) != (self.gating == "gated"):
            raise ValueError("W_gate must be given exactly when gating == 'gated'")
        variant_steps(self.activation)

    @property
    def n_experts(self) -> int:
        return self.W_up.shape[0]

    @property
    def d_e(self) -> int:
        return self.W_up.shape[1]

    def arrays(self) -> dict[str, np.ndarray]:
        out = {"W_up": self.W_up, "W_down": self.W_down, "rms_weight": self.rms_weight}
        if self.W_gate is not None:
            out["W_gate"] = self.W_gate
        return out

    def astype(self, dtype) -> "ExpertParams":
        return ExpertParams(self.W_up.astype(dtype), self.W_down.astype(dtype),
                            self.rms_weight.astype(dtype),
                            None if self.W_gate is None else self.W_gate.astype(dtype),
                            self.activation, self.gating, self.eps)


def init_experts(d_h, d_e, n_experts, rng: RngState, *, activation="normsilu", gating="non_gated",
                 std=0.02, eps=RMS_EPS, dtype=np.float32) -> ExpertParams:
    W_up = init_normal((n_experts, d_e, d_h), std, rng.child("W_up"), dtype)
    W_down = init_normal((n_experts, d_h, d_e), std, rng.child("W_down"), dtype)
    W_gate = init_normal((n_experts, d_e, d_h), std, rng.child("W_gate"), dtype) if gating == "gated" else None
    return ExpertParams(W_up, W_down, np.ones(d_e, dtype=dtype), W_gate, activation, gating, eps)


@dataclass
class ExpertTrace:
    """Intermediates of one expert forward pass.

    Arrays are ``[N_t, N_e, d_e]`` on the training path (entries of inactive
    experts are computed but carry zero weight) and ``[P, d_e]`` over active
    (token, expert) pairs on the gathered path.
    """

    z: np.ndarray
    z_centered: np.ndarray
    u: np.ndarray
    silu_out: np.ndarray
    active: np.ndarray
    mean_abs_silu: float
    cache: dict = field(default_factory=dict, repr=False)


# ---------------------------------------------------------------------------
# SparseLinear

@dataclass
class Gathered:
    """Result of a gathered product: one row per active (token, expert) pair."""

    values: np.ndarray             # [P, out]
    token_idx: np.ndarray          # [P]
    expert_idx: np.ndarray         # [P]
    flops: int

    def to_dense(self, n_tokens: int, n_experts: int) -> np.ndarray:
        out = np.zeros((n_tokens, n_experts, self.values.shape[1]), dtype=self.values.dtype)
        out[self.token_idx, self.expert_idx] = self.values
        return out


def active_pairs(active: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(token, expert) indices of a mask, token-major with ascending expert."""
    t, e = np.nonzero(active)
    return t.astype(np.int64), e.astype(np.int64)


def sparse_linear(x: np.ndarray, weights: np.ndarray, active: np.ndarray,
                  weights_T: np.ndarray | None = None) -> Gathered:
    """``weights[e] @ x[t]`` for every active pair only.

    ``weights`` is ``[N_e, out, in]``; pass ``weights_T`` (``[N_e, in, out]``,
    contiguous) to skip the per-call transpose.
    """
    n_e, n_out, n_in = weights.shape
    if active.shape != (x.shape[0], n_e):
        raise ValueError(f"mask shape {active.shape} does not match ({x.shape[0]}, {n_e})")
    if weights_T is None:
        weights_T = np.ascontiguousarray(weights.transpose(0, 2, 1))
    tok, exp = active_pairs(active)
    dtype = np.result_type(x.dtype, weights.dtype)
    out = np.empty((tok.size, n_out), dtype=dtype)
    if tok.size:
        kernels.gather_matmul(np.ascontiguousarray(x, dtype=dtype), weights_T.astype(dtype, copy=False),
                              tok, exp, out)
    return Gathered(out, tok, exp, 2 * n_in * n_out * int(tok.size))


# ---------------------------------------------------------------------------
# NormSiLU

def up_mean(W_up: np.ndarray) -> np.ndarray:
    """Cross-expert mean of the up projections, ``[d_e, d_h]``."""
    return W_up.mean(axis=0)


def norm_silu(x: np.ndarray, W_up: np.ndarray, intermediate: np.ndarray, rms_weight: np.ndarray,
              variant: str = "normsilu", eps: float = RMS_EPS, *, w_mean: np.ndarray | None = None,
              token_idx: np.ndarray | None = None):
    """Normalize the up-projection output and apply SiLU.

    ``intermediate`` is either ``[N_t, K, d_e]`` (the mean response is
    broadcast over axis 1) or ``[P, d_e]`` gathered rows with ``token_idx``
    giving each row's token. ``w_mean`` is the cached cross-expert mean
    weight; it is recomputed from ``W_up`` when omitted.

    Returns ``(silu_output, trace)``.
    """
    use_mean, use_rms = variant_steps(variant)
    z = intermediate
    if use_mean:
        if w_mean is None:
            w_mean = up_mean(W_up)
        m = x @ w_mean.T
        z0 = z - (m[token_idx] if token_idx is not None else m[:, None, :])
    else:
        z0 = z
    if use_rms:
        u, rms_cache = rms_norm_forward(z0, rms_weight, eps)
    else:
        u, rms_cache = z0, None
    out = silu(u)
    trace = ExpertTrace(z, z0, u, out, np.ones(z.shape[:-1], dtype=bool),
                        float(np.abs(out).mean()) if out.size else 0.0, {"rms": rms_cache})
    return out, trace


# ---------------------------------------------------------------------------
# routed experts, training path

def expert_forward(x: np.ndarray, decision: RouterDecision, params: ExpertParams):
    """Weighted sum of expert outputs; returns ``(y, trace)``."""
    n_t, d_h = x.shape
    n_e, d_e = params.n_experts, params.d_e
    z = (x @ params.W_up.reshape(n_e * d_e, d_h).T).reshape(n_t, n_e, d_e)
    act, trace = norm_silu(x, params.W_up, z, params.rms_weight, params.activation, params.eps)
    if params.gating == "gated":
        zg = (x @ params.W_gate.reshape(n_e * d_e, d_h).T).reshape(n_t, n_e, d_e)
        sg = silu(zg)
        a = act * sg
        trace.cache.update(zg=zg, sg=sg)
    else:
        a = act
    s = decision.scores
    down_T = params.W_down.transpose(0, 2, 1).reshape(n_e * d_e, d_h)
    a_s = (a * s[:, :, None]).reshape(n_t, n_e * d_e)
    y = a_s @ down_T
    active = decision.active
    trace.active = active
    n_act = int(active.sum())
    trace.mean_abs_silu = float(np.abs(act)[active].sum() / (n_act * d_e)) if n_act else 0.0
    trace.cache.update(a=a, a_s=a_s, down_T=down_T)
    return y, trace


def expert_backward(x: np.ndarray, decision: RouterDecision, params: ExpertParams,
                    trace: ExpertTrace, gy: np.ndarray):
    """Return ``(grad_x, grads, grad_scores)`` for ``expert_forward``.

    The mean step couples the experts: every expert's ``W_up`` receives
    ``1/N_e`` of the gradient of the shared mean weight, active or not.
    """
    n_t, d_h = x.shape
    n_e, d_e = params.n_experts, params.d_e
    use_mean, use_rms = variant_steps(params.activation)
    c = trace.cache
    s = decision.scores

    gA = (gy @ c["down_T"].T).reshape(n_t, n_e, d_e)
    g_scores = (gA * c["a"]).sum(axis=-1)
    g_down_T = c["a_s"].T @ gy
    g_a = gA * s[:, :, None]

    grads = {"W_down": g_down_T.reshape(n_e, d_e, d_h).transpose(0, 2, 1)}
    gx = np.zeros_like(x)
    if params.gating == "gated":
        act = trace.silu_out
        g_zg = g_a * act * silu_grad(c["zg"])
        g_a = g_a * c["sg"]
        g_zg2 = g_zg.reshape(n_t, n_e * d_e)
        grads["W_gate"] = (g_zg2.T @ x).reshape(n_e, d_e, d_h)
        gx += g_zg2 @ params.W_gate.reshape(n_e * d_e, d_h)

    g_u = g_a * silu_grad(trace.u)
    if use_rms:
        g_z0, grads["rms_weight"] = rms_norm_backward(g_u, params.rms_weight, c["rms"])
    else:
        g_z0 = g_u
        grads["rms_weight"] = np.zeros_like(params.rms_weight)

    g_z2 = g_z0.reshape(n_t, n_e * d_e)
    g_up = (g_z2.T @ x).reshape(n_e, d_e, d_h)
    gx += g_z2 @ params.W_up.reshape(n_e * d_e, d_h)
    if use_mean:
        g_m = -g_z0.sum(axis=1)                    # [N_t, d_e]
        g_wmean = g_m.T @ x                        # [d_e, d_h]
        g_up = g_up + g_wmean[None] / n_e
        gx += g_m @ up_mean(params.W_up)
    grads["W_up"] = g_up
    return gx, grads, g_scores


# ---------------------------------------------------------------------------
# routed experts, gathered path

@dataclass
class PackedExperts:
    """Expert weights transposed to ``[N_e, in, out]`` plus the frozen mean weight."""

    up_T: np.ndarray
    down_T: np.ndarray
    gate_T: np.ndarray
    mean_T: np.ndarray
    rms_weight: np.ndarray
    use_mean: bool
    use_rms: bool
    gated: bool
    eps: float

    @classmethod
    def from_params(cls, params: ExpertParams, dtype=None) -> "PackedExperts":
        dtype = dtype or params.W_up.dtype
        use_mean, use_rms = variant_steps(params.activation)
        up_T = np.ascontiguousarray(params.W_up.transpose(0, 2, 1), dtype=dtype)
        gate = params.W_gate if params.W_gate is not None else np.zeros((1, 1, 1), dtype)
        return cls(up_T,
                   np.ascontiguousarray(params.W_down.transpose(0, 2, 1), dtype=dtype),
                   np.ascontiguousarray(gate.transpose(0, 2, 1), dtype=dtype),
                   np.ascontiguousarray(up_mean(params.W_up).T, dtype=dtype),
                   params.rms_weight.astype(dtype), use_mean, use_rms,
                   params.gating == "gated", float(params.eps))

    def run(self, x: np.ndarray, token_idx: np.ndarray, expert_idx: np.ndarray,
            scores: np.ndarray) -> np.ndarray:
        y = np.zeros((x.shape[0], self.down_T.shape[2]), dtype=self.up_T.dtype)
        kernels.routed_ffn(np.ascontiguousarray(x, dtype=y.dtype), self.up_T, self.gate_T, self.down_T,
                           self.mean_T, self.rms_weight, token_idx, expert_idx,
                           np.ascontiguousarray(scores, dtype=y.dtype),
                           self.use_mean, self.use_rms, self.gated, self.eps, y)
        return y


def expert_forward_gathered(x: np.ndarray, decision: RouterDecision, packed: PackedExperts,
                            all_experts: bool = False) -> np.ndarray:
    """Expert output computed only for active pairs, or for all pairs when
    ``all_experts`` is set (the dense-masked reference)."""
    mask = np.ones_like(decision.active) if all_experts else decision.active
    tok, exp = active_pairs(mask)
    return packed.run(x, tok, exp, decision.scores[tok, exp])


# ---------------------------------------------------------------------------
# shared expert / dense FFN (gated SiLU MLP)

@dataclass
class GatedMLPParams:
    W_gate: np.ndarray             # [d_ff, d_h]
    W_up: np.ndarray               # [d_ff, d_h]
    W_down: np.ndarray             # [d_h, d_ff]

    @property
    def d_ff(self) -> int:
        return self.W_up.shape[0]

    def arrays(self) -> dict[str, np.ndarray]:
        return {"W_gate": self.W_gate, "W_up": self.W_up, "W_down": self.W_down}

    def astype(self, dtype) -> "GatedMLPParams":
        return GatedMLPParams(self.W_gate.astype(dtype), self.W_up.astype(dtype), self.W_down.astype(dtype))


SharedExpertParams = GatedMLPParams


def init_gated_mlp(d_h: int, d_ff: int, rng: RngState, std=0.02, dtype=np.float32) -> GatedMLPParams:
    return GatedMLPParams(init_normal((d_ff, d_h), std, rng.child("W_gate"), dtype),
                          init_normal((d_ff, d_h), std, rng.child("W_up"), dtype),
                          init_normal((d_h, d_ff), std, rng.child("W_down"), dtype))


def gated_mlp_forward(x: np.ndarray, params: GatedMLPParams):
    zg = x @ params.W_gate.T
    zu = x @ params.W_up.T
    sg = silu(zg)
    h = sg * zu
    return h @ params.W_down.T, (zg, zu, sg, h)


def gated_mlp_backward(x: np.ndarray, params: GatedMLPParams, cache, gy: np.ndarray):
    zg, zu, sg, h = cache
    gh = gy @ params.W_down
    g_zu = gh * sg
    g_zg = gh * zu * silu_grad(zg)
    grads = {"W_down": gy.T @ h, "W_up": g_zu.T @ x, "W_gate": g_zg.T @ x}
    gx = g_zu @ params.W_up + g_zg @ params.W_gate
    return gx, grads


shared_expert_forward = gated_mlp_forward
shared_expert_backward = gated_mlp_backward

