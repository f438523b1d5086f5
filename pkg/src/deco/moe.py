"""One MoE layer (router + routed experts + shared expert) and the dense FFN."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import MoEConfig
from .experts import (ExpertParams, ExpertTrace, GatedMLPParams, SharedExpertParams,
                      expert_backward, expert_forward, gated_mlp_backward, gated_mlp_forward,
                      init_experts, init_gated_mlp)
from .numerics import RngState
from .routing import RouterDecision, RouterParams, init_router, route, route_backward

DenseFFNParams = GatedMLPParams
dense_ffn_forward = gated_mlp_forward
dense_ffn_backward = gated_mlp_backward


@dataclass
class MoEBlockParams:
    router: RouterParams
    experts: ExpertParams
    shared: SharedExpertParams
    config: MoEConfig

    def __post_init__(self):
        d_h, n_e = self.router.W.shape
        if self.experts.W_up.shape[0] != n_e or self.experts.W_up.shape[2] != d_h:
            raise ValueError(f"expert weights {self.experts.W_up.shape} do not match router {self.router.W.shape}")
        if self.shared.W_up.shape[1] != d_h:
            raise ValueError("shared expert hidden size does not match router")

    def arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for prefix, part in (("router", self.router), ("experts", self.experts), ("shared", self.shared)):
            for k, v in part.arrays().items():
                out[f"{prefix}.{k}"] = v
        return out

    def astype(self, dtype) -> "MoEBlockParams":
        return MoEBlockParams(self.router.astype(dtype), self.experts.astype(dtype),
                              self.shared.astype(dtype), self.config)


def init_moe_block(cfg: MoEConfig, rng: RngState, dtype=np.float32) -> MoEBlockParams:
    router = init_router(cfg.d_h, cfg.n_experts, rng.child("router"), kind=cfg.routing,
                         alpha_mode=cfg.alpha_mode, alpha_init=cfg.alpha_init, k=cfg.top_k,
                         p_threshold=cfg.top_p, fixed_scale=cfg.fixed_scale, std=cfg.init_std,
                         dtype=dtype)
    experts = init_experts(cfg.d_h, cfg.d_e, cfg.n_experts, rng.child("experts"),
                           activation=cfg.activation, gating=cfg.gating, std=cfg.init_std,
                           eps=cfg.rms_eps, dtype=dtype)
    shared = init_gated_mlp(cfg.d_h, cfg.d_s, rng.child("shared"), cfg.init_std, dtype)
    return MoEBlockParams(router, experts, shared, cfg)


@dataclass
class MoECache:
    x: np.ndarray
    decision: RouterDecision
    trace: ExpertTrace
    shared_cache: tuple


def moe_forward(x: np.ndarray, params: MoEBlockParams, *, force_scores: np.ndarray | None = None):
    """``y = shared(x) + sum_e scores[:, e] * expert_e(x)``.

    Returns ``(y, decision, trace, cache)``. ``force_scores`` replaces the
    router scores (the active mask follows it); it exists for tests that
    compare against a full-activation dense sum.
    """
    decision = route(x, params.router)
    if force_scores is not None:
        decision = RouterDecision(force_scores, force_scores != 0,
                                  float((force_scores != 0).mean()), decision.logits,
                                  decision.relu_out, decision.probs)
    y_routed, trace = expert_forward(x, decision, params.experts)
    y_shared, shared_cache = gated_mlp_forward(x, params.shared)
    return y_shared + y_routed, decision, trace, MoECache(x, decision, trace, shared_cache)


def moe_backward(params: MoEBlockParams, cache: MoECache, gy: np.ndarray,
                 grad_scores_extra: np.ndarray | None = None):
    """Return ``(grad_x, grads)`` with grads keyed like ``MoEBlockParams.arrays``.

    ``grad_scores_extra`` adds a direct gradient on the router scores (the
    entropy regularizer's contribution).
    """
    x = cache.x
    gx_e, g_exp, g_scores = expert_backward(x, cache.decision, params.experts, cache.trace, gy)
    if grad_scores_extra is not None:
        g_scores = g_scores + grad_scores_extra
    gx_r, g_router = route_backward(x, params.router, cache.decision, g_scores)
    gx_s, g_shared = gated_mlp_backward(x, params.shared, cache.shared_cache, gy)
    grads = {}
    for prefix, g in (("router", g_router), ("experts", g_exp), ("shared", g_shared)):
        for k, v in g.items():
            grads[f"{prefix}.{k}"] = v
    names = params.arrays()
    grads = {k: v for k, v in grads.items() if k in names}
    return gx_e + gx_r + gx_s, grads


def expert_output_norms(x: np.ndarray, params: MoEBlockParams) -> np.ndarray:
    """Per-expert mean of ``||score * expert_out||_2`` over the tokens that
    activate it (NaN for experts never active). Telemetry only."""
    decision = route(x, params.router)
    n_e = params.router.n_experts
    norms = np.full(n_e, np.nan)
    for e in range(n_e):
        col = decision.active[:, e]
        if not col.any():
            continue
        only = np.arange(n_e) == e
        single = RouterDecision(np.where(only, decision.scores, 0)[col], (decision.active & only)[col], 0.0)
        y, _ = expert_forward(x[col], single, params.experts)
        norms[e] = float(np.linalg.norm(y, axis=-1).mean())
    return norms


# ---------------------------------------------------------------------------
# parameter accounting

def count_params(params) -> dict[str, int]:
    """Exact learnable-parameter counts per component for an MoE block or dense FFN."""
    if isinstance(params, GatedMLPParams):
        n = sum(v.size for v in params.arrays().values())
        return {"dense_ffn": n, "total": n}
    r = params.router
    n_alpha = r.alpha.size if "alpha" in r.arrays() else 0
    out = {
        "router": r.W.size,
        "alpha": n_alpha,
        "experts": sum(v.size for v in params.experts.arrays().values()),
        "shared": sum(v.size for v in params.shared.arrays().values()),
    }
    out["total"] = sum(out.values())
    return out


def moe_param_count(cfg: MoEConfig) -> int:
    """Same numbers as ``count_params`` straight from the config."""
    per_expert = (3 if cfg.gating == "gated" else 2) * cfg.d_e * cfg.d_h
    n_alpha = 0
    if cfg.routing == "relu" and cfg.alpha_mode != "fixed":
        n_alpha = cfg.n_experts if cfg.alpha_mode == "vector" else 1
    return (cfg.d_h * cfg.n_experts + n_alpha + cfg.n_experts * per_expert + cfg.d_e
            + 3 * cfg.d_h * cfg.d_s)


def matched_dense_dff(cfg: MoEConfig, multiple: int = 8) -> int:
    """Dense SwiGLU width with the closest parameter count to the MoE block,
    rounded to a multiple of ``multiple``."""
    target = moe_param_count(cfg)
    per_unit = 3 * cfg.d_h
    return max(multiple, int(round(target / per_unit / multiple)) * multiple)
