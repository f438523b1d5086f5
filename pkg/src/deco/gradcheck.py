"""Finite-difference verification of every hand-written backward pass.

Each check builds a tiny float64 instance, takes ``L = sum(R * output)`` for a
fixed random ``R`` (plus ``lam * entropy`` where a ReLU router is involved),
and compares the analytic gradients with central differences.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .config import MoEConfig
from .experts import (expert_backward, expert_forward, gated_mlp_backward,
                      gated_mlp_forward, init_experts, init_gated_mlp)
from .moe import init_moe_block, moe_backward, moe_forward
from .numerics import GradCheckReport, finite_diff_grad, make_rng
from .regularization import router_entropy_and_grad
from .routing import RouterDecision, init_router, route, route_backward

ACTIVATIONS = ("normsilu", "normsilu_no_mean", "normsilu_no_rms", "silu")
GATINGS = ("non_gated", "gated")
ENT_LAMBDA = 0.5

# tiny shapes keep every check to a few hundred parameters
D_H, D_E, D_S, N_E, N_T = 8, 4, 4, 6, 5


@dataclass
class SuiteReport:
    results: list[tuple[str, GradCheckReport]] = field(default_factory=list)
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return all(r.passed for _, r in self.results)

    @property
    def max_rel_err(self) -> float:
        return max((r.max_rel_err for _, r in self.results), default=0.0)

    def groups(self) -> list[str]:
        return [f"{c}:{p}" for c, r in self.results for p in r.rel_err]

    def lines(self) -> list[str]:
        out = []
        for comp, rep in self.results:
            out.append(f"[{'PASS' if rep.passed else 'FAIL'}] {comp}  max rel err {rep.max_rel_err:.2e}")
            out.extend(rep.lines("    "))
        out.append(f"overall: {'PASS' if self.passed else 'FAIL'}  max rel err {self.max_rel_err:.2e} "
                   f"({len(self.groups())} parameter groups, {self.seconds:.1f}s)")
        return out


def _check(loss_fn, params, analytic, corrupt, h, rtol):
    if corrupt is not None and corrupt in analytic:
        analytic = dict(analytic)
        analytic[corrupt] = analytic[corrupt] * 1.5 + 1e-3
    return finite_diff_grad(loss_fn, params, analytic, h=h, rtol=rtol)


KINK_MARGIN = 1e-3


def _inputs(seed: int, W: np.ndarray | None = None, n=N_T, d=D_H):
    """Random inputs, redrawn until no router logit is within ``KINK_MARGIN`` of 0."""
    gen = make_rng(seed).child("inputs").generator()
    while True:
        x = gen.standard_normal((n, d))
        if W is None or np.abs(x @ W).min() > KINK_MARGIN:
            return x


def check_router(kind: str, alpha_mode: str = "vector", *, seed=0, corrupt=None, h=1e-5, rtol=1e-4):
    rng = make_rng(seed)
    # a wider init so the ReLU router has a mix of active and inactive experts
    r = init_router(D_H, N_E, rng.child("router"), kind=kind, alpha_mode=alpha_mode, alpha_init=0.7,
                    k=2, p_threshold=0.6, std=0.5, dtype=np.float64)
    if alpha_mode == "vector":
        r.alpha[:] = np.linspace(0.3, 1.1, N_E)
    x = _inputs(seed, r.W)
    R = rng.child("R").generator().standard_normal((N_T, N_E))
    use_ent = kind == "relu"

    def loss():
        d = route(x, r)
        out = float((R * d.scores).sum())
        if use_ent:
            out += ENT_LAMBDA * router_entropy_and_grad(d.scores, need_grad=False)[0]
        return out

    d = route(x, r)
    g = R.copy()
    if use_ent:
        g = g + ENT_LAMBDA * router_entropy_and_grad(d.scores)[1]
    gx, grads = route_backward(x, r, d, g)
    params = dict(r.arrays(), x=x)
    return _check(loss, params, dict(grads, x=gx), corrupt, h, rtol)


def check_experts(activation: str, gating: str, *, seed=0, corrupt=None, h=1e-5, rtol=1e-4):
    rng = make_rng(seed)
    p = init_experts(D_H, D_E, N_E, rng.child("experts"), activation=activation, gating=gating,
                     std=0.3, dtype=np.float64)
    p.rms_weight[:] = np.linspace(0.5, 1.5, D_E)
    x = _inputs(seed)
    gen = rng.child("scores").generator()
    active = gen.random((N_T, N_E)) < 0.5
    scores = np.where(active, gen.random((N_T, N_E)) + 0.1, 0.0)
    R = rng.child("R").generator().standard_normal((N_T, D_H))

    def loss():
        y, _ = expert_forward(x, RouterDecision(scores, active, 0.0), p)
        return float((R * y).sum())

    dec = RouterDecision(scores, active, 0.0)
    y, tr = expert_forward(x, dec, p)
    gx, grads, gs = expert_backward(x, dec, p, tr, R)
    if activation in ("normsilu_no_rms", "silu"):
        # the RMS weight is unused by these variants; check it is exactly zero
        params = {k: v for k, v in p.arrays().items() if k != "rms_weight"}
        if np.any(grads["rms_weight"] != 0):
            raise AssertionError("unused rms_weight received a gradient")
    else:
        params = dict(p.arrays())
    params.update(x=x, scores=scores)
    analytic = {k: grads[k] for k in params if k in grads}
    analytic.update(x=gx, scores=gs)
    return _check(loss, params, analytic, corrupt, h, rtol)


def check_shared(*, seed=0, corrupt=None, h=1e-5, rtol=1e-4):
    rng = make_rng(seed)
    p = init_gated_mlp(D_H, D_S, rng.child("shared"), std=0.3, dtype=np.float64)
    x = _inputs(seed)
    R = rng.child("R").generator().standard_normal((N_T, D_H))

    def loss():
        return float((R * gated_mlp_forward(x, p)[0]).sum())

    _, cache = gated_mlp_forward(x, p)
    gx, grads = gated_mlp_backward(x, p, cache, R)
    return _check(loss, dict(p.arrays(), x=x), dict(grads, x=gx), corrupt, h, rtol)


def block_variants() -> dict[str, dict]:
    out = {}
    for act in ACTIVATIONS:
        for gate in GATINGS:
            out[f"relu/vector/{act}/{gate}"] = dict(activation=act, gating=gate)
    out["relu/scalar/normsilu/non_gated"] = dict(alpha_mode="scalar")
    out["relu/fixed/normsilu/non_gated"] = dict(alpha_mode="fixed")
    out["topk/normsilu/non_gated"] = dict(routing="topk", top_k=2)
    out["topp/normsilu/non_gated"] = dict(routing="topp", top_p=0.6)
    return out


def check_block(changes: dict, *, seed=0, corrupt=None, h=1e-5, rtol=1e-4):
    cfg = MoEConfig(d_h=D_H, d_e=D_E, d_s=D_S, n_experts=N_E, init_std=0.3, alpha_init=0.7, **changes)
    params = init_moe_block(cfg, make_rng(seed).child("block"), dtype=np.float64)
    params.experts.rms_weight[:] = np.linspace(0.5, 1.5, D_E)
    x = _inputs(seed, params.router.W)
    R = make_rng(seed).child("R").generator().standard_normal((N_T, D_H))
    use_ent = cfg.routing == "relu"

    def loss():
        y, dec, _, _ = moe_forward(x, params)
        out = float((R * y).sum())
        if use_ent:
            out += ENT_LAMBDA * router_entropy_and_grad(dec.scores, need_grad=False)[0]
        return out

    y, dec, _, cache = moe_forward(x, params)
    extra = ENT_LAMBDA * router_entropy_and_grad(dec.scores)[1] if use_ent else None
    gx, grads = moe_backward(params, cache, R, extra)
    names = params.arrays()
    if cfg.activation in ("normsilu_no_rms", "silu"):
        names = {k: v for k, v in names.items() if k != "experts.rms_weight"}
    return _check(loss, dict(names, x=x), dict(grads, x=gx), corrupt, h, rtol)


def input_scale_invariance(activation: str = "normsilu", scales=(10.0, 100.0), *, seed=0,
                           d_h=64, d_e=8, n_experts=16, n_tokens=32, std=0.02) -> dict[float, float]:
    """Relative change of ``||dL/dW_up||_F`` when the input is multiplied by ``c``.

    Every expert is active with unit score, so only the expert stack is
    measured. NormSiLU should give changes near zero; plain SiLU does not.
    """
    rng = make_rng(seed)
    p = init_experts(d_h, d_e, n_experts, rng.child("experts"), activation=activation, std=std,
                     dtype=np.float64)
    x = rng.child("x").generator().standard_normal((n_tokens, d_h))
    R = rng.child("R").generator().standard_normal((n_tokens, d_h))
    dec = RouterDecision(np.ones((n_tokens, n_experts)), np.ones((n_tokens, n_experts), bool), 1.0)

    def grad_norm(xx):
        _, tr = expert_forward(xx, dec, p)
        _, g, _ = expert_backward(xx, dec, p, tr, R)
        return float(np.linalg.norm(g["W_up"]))

    base = grad_norm(x)
    return {c: abs(grad_norm(c * x) - base) / base for c in scales}


def run_gradcheck(*, corrupt: str | None = None, seed: int = 0, h: float = 1e-5,
                  rtol: float = 1e-4) -> SuiteReport:
    """Every component and ablation variant; ``corrupt`` names a parameter
    whose analytic gradient is deliberately damaged (a test hook)."""
    t0 = time.perf_counter()
    rep = SuiteReport()
    kw = dict(seed=seed, corrupt=corrupt, h=h, rtol=rtol)
    for mode in ("vector", "scalar", "fixed"):
        rep.results.append((f"router/relu/{mode}", check_router("relu", mode, **kw)))
    rep.results.append(("router/topk", check_router("topk", **kw)))
    rep.results.append(("router/topp", check_router("topp", **kw)))
    for act in ACTIVATIONS:
        for gate in GATINGS:
            rep.results.append((f"experts/{act}/{gate}", check_experts(act, gate, **kw)))
    rep.results.append(("shared", check_shared(**kw)))
    for name, changes in block_variants().items():
        rep.results.append((f"block/{name}", check_block(changes, **kw)))
    rep.seconds = time.perf_counter() - t0
    return rep
