"""Router-entropy sparsification loss and the multiplicative lambda controller."""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Iterable

import numpy as np

ENTROPY_EPS = 1e-8


@dataclass(frozen=True)
class RegulatorState:
    lam: float
    eta: float = 1.002
    target_activation_ratio: float = 0.2
    epsilon: float = ENTROPY_EPS
    lambda_init: float = 1e-8

    @classmethod
    def start(cls, lambda_init=1e-8, eta=1.002, target_activation_ratio=0.2, epsilon=ENTROPY_EPS):
        if eta <= 1:
            raise ValueError(f"eta must be > 1, got {eta}")
        return cls(lambda_init, eta, target_activation_ratio, epsilon, lambda_init)


def router_entropy(p: np.ndarray, epsilon: float = ENTROPY_EPS) -> float:
    """Mean over tokens of ``-p1 . ln(p1 + eps)`` with ``p1 = |p| / sum|p|``.

    Rows whose scores are all zero contribute zero.
    """
    loss, _ = router_entropy_and_grad(p, epsilon, need_grad=False)
    return loss


def router_entropy_and_grad(p: np.ndarray, epsilon: float = ENTROPY_EPS, need_grad: bool = True):
    a = np.abs(p)
    tot = a.sum(axis=-1, keepdims=True)
    live = tot[:, 0] > 0
    safe = np.where(tot > 0, tot, 1)
    p1 = a / safe
    per_tok = -(p1 * np.log(p1 + epsilon)).sum(axis=-1)
    per_tok = np.where(live, per_tok, 0)
    n = p.shape[0]
    loss = float(per_tok.sum() / n) if n else 0.0
    if not need_grad:
        return loss, None
    g_p1 = -(np.log(p1 + epsilon) + p1 / (p1 + epsilon))
    g_a = (g_p1 - (g_p1 * p1).sum(axis=-1, keepdims=True)) / safe
    g = np.where(live[:, None], g_a * np.sign(p), 0) / n
    return loss, g.astype(p.dtype, copy=False)


def update_lambda(state: RegulatorState, activation_ratio: float) -> RegulatorState:
    """Grow lambda by eta while sparsity is under target, otherwise shrink it."""
    if not 0.0 <= activation_ratio <= 1.0:
        raise ValueError(f"activation ratio {activation_ratio} outside [0, 1]")
    sparsity = 1.0 - activation_ratio
    target_sparsity = 1.0 - state.target_activation_ratio
    if sparsity < target_sparsity:
        lam = state.lam * state.eta
    else:
        lam = state.lam / state.eta
    return replace(state, lam=lam)


def total_loss(lm_loss: float, ent_loss: float, state: RegulatorState) -> float:
    return lm_loss + state.lam * ent_loss


def replay_lambdas(state: RegulatorState, ratios: Iterable[float]) -> list[float]:
    """Lambda in effect at each step given the per-step activation ratios."""
    out = []
    for r in ratios:
        out.append(state.lam)
        state = update_lambda(state, r)
    return out
