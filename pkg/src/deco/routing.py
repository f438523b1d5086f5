"""Per-token expert scores and active sets.

``route_relu`` is the DECO router: ``scores = alpha * relu(x @ W)``. An expert
counts as active when its ReLU output is positive, whatever its alpha, because
that is what decides whether the expert gets computed.

``route_topk`` follows the DeepSeek-V3 recipe (sigmoid, pick k, renormalize to
unit sum, multiply by one scalar). ``route_topp`` keeps the smallest prefix of
softmax-sorted experts whose cumulative probability reaches ``p_threshold``,
with the selected softmax probabilities used as weights as-is.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import RngState, init_normal, sigmoid, softmax


@dataclass
class RouterParams:
    W: np.ndarray                  # [d_h, N_e]
    alpha: np.ndarray              # [N_e] (vector) or [1] (scalar / fixed)
    kind: str = "relu"
    k: int = 1
    p_threshold: float = 1.0
    fixed_scale: float = 1.0
    alpha_mode: str = "vector"     # "fixed" keeps alpha out of the trainable set

    @property
    def n_experts(self) -> int:
        return self.W.shape[1]

    def arrays(self) -> dict[str, np.ndarray]:
        out = {"W": self.W}
        if self.kind == "relu" and self.alpha_mode != "fixed":
            out["alpha"] = self.alpha
        return out

    def astype(self, dtype) -> "RouterParams":
        return RouterParams(self.W.astype(dtype), self.alpha.astype(dtype), self.kind, self.k,
                            self.p_threshold, self.fixed_scale, self.alpha_mode)


def init_router(d_h: int, n_experts: int, rng: RngState, *, kind="relu", alpha_mode="vector",
                alpha_init=0.1, k=1, p_threshold=1.0, fixed_scale=1.0, std=0.02,
                dtype=np.float32) -> RouterParams:
    W = init_normal((d_h, n_experts), std, rng.child("W"), dtype)
    n_alpha = n_experts if alpha_mode == "vector" else 1
    alpha = np.full(n_alpha, alpha_init, dtype=dtype)
    return RouterParams(W, alpha, kind, k, p_threshold, fixed_scale, alpha_mode)


@dataclass
class RouterDecision:
    scores: np.ndarray             # [N_t, N_e]
    active: np.ndarray             # bool [N_t, N_e]
    activation_ratio: float
    logits: np.ndarray | None = field(default=None, repr=False)
    relu_out: np.ndarray | None = field(default=None, repr=False)
    probs: np.ndarray | None = field(default=None, repr=False)

    @property
    def n_active(self) -> int:
        return int(self.active.sum())


def _ratio(active: np.ndarray) -> float:
    return float(active.sum()) / active.size if active.size else 0.0


def route_relu(x: np.ndarray, params: RouterParams) -> RouterDecision:
    logits = x @ params.W
    r = np.maximum(logits, 0)
    active = logits > 0
    scores = params.alpha * r
    return RouterDecision(scores, active, _ratio(active), logits=logits, relu_out=r)


def route_relu_backward(x: np.ndarray, params: RouterParams, decision: RouterDecision,
                        grad_scores: np.ndarray):
    """Return ``(grad_x, grad_W, grad_alpha)``; the ReLU sub-gradient at 0 is 0."""
    r = decision.relu_out
    ga = (r * grad_scores).sum(axis=0)
    if params.alpha.shape[0] == 1:
        ga = ga.sum(keepdims=True)
    glog = np.where(decision.active, params.alpha * grad_scores, 0)
    return glog @ params.W.T, x.T @ glog, ga


def _desc_order(values: np.ndarray) -> np.ndarray:
    # stable sort on the negated values: ties go to the lower expert index
    return np.argsort(-values, axis=-1, kind="stable")


def route_topk(x: np.ndarray, params: RouterParams) -> RouterDecision:
    logits = x @ params.W
    s = sigmoid(logits)
    n_t, n_e = s.shape
    sel = _desc_order(s)[:, : params.k]
    active = np.zeros((n_t, n_e), dtype=bool)
    np.put_along_axis(active, sel, True, axis=-1)
    picked = np.where(active, s, 0)
    scores = params.fixed_scale * picked / picked.sum(axis=-1, keepdims=True)
    return RouterDecision(scores, active, _ratio(active), logits=logits, probs=s)


def route_topk_backward(x, params, decision, grad_scores):
    """Gradient through the renormalized sigmoid of the selected experts."""
    s, act = decision.probs, decision.active
    picked = np.where(act, s, 0)
    tot = picked.sum(axis=-1, keepdims=True)
    g = np.where(act, grad_scores, 0)
    gs = params.fixed_scale * (g - (g * picked).sum(axis=-1, keepdims=True) / tot) / tot
    gs = np.where(act, gs, 0)
    glog = gs * s * (1 - s)
    return glog @ params.W.T, x.T @ glog, None


def route_topp(x: np.ndarray, params: RouterParams) -> RouterDecision:
    logits = x @ params.W
    q = softmax(logits)
    order = _desc_order(q)
    q_sorted = np.take_along_axis(q, order, axis=-1)
    cum = np.cumsum(q_sorted, axis=-1)
    # keep experts until the running total first reaches the threshold
    before = cum - q_sorted
    keep_sorted = before < params.p_threshold
    keep_sorted[:, 0] = True
    if params.p_threshold >= 1.0:
        # rounding in the cumulative sum must not drop the tail
        keep_sorted[:] = True
    active = np.zeros_like(keep_sorted)
    np.put_along_axis(active, order, keep_sorted, axis=-1)
    scores = np.where(active, q, 0)
    return RouterDecision(scores, active, _ratio(active), logits=logits, probs=q)


def route_topp_backward(x, params, decision, grad_scores):
    q = decision.probs
    gq = np.where(decision.active, grad_scores, 0)
    glog = q * (gq - (gq * q).sum(axis=-1, keepdims=True))
    return glog @ params.W.T, x.T @ glog, None


def route(x: np.ndarray, params: RouterParams) -> RouterDecision:
    if params.kind == "relu":
        return route_relu(x, params)
    if params.kind == "topk":
        return route_topk(x, params)
    if params.kind == "topp":
        return route_topp(x, params)
    raise ValueError(f"unknown routing kind {params.kind!r}")


def route_backward(x, params, decision, grad_scores) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Dispatch to the kind-specific backward; returns grad_x and a grads dict."""
    if params.kind == "relu":
        gx, gW, ga = route_relu_backward(x, params, decision, grad_scores)
        grads = {"W": gW}
        if params.alpha_mode != "fixed":
            grads["alpha"] = ga
        return gx, grads
    fn = route_topk_backward if params.kind == "topk" else route_topp_backward
    gx, gW, _ = fn(x, params, decision, grad_scores)
    return gx, {"W": gW}
