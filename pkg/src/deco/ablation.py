"""Ablation suite presets and the dynamics-ordering verdicts.

Each suite trains otherwise-identical models that differ in one MoE knob.
The orderings checked are the qualitative training-dynamics trends: without
RMS normalization the activation ratio surges and the controller has to push
lambda higher; without the cross-expert mean the SiLU outputs shrink; gated
experts make the activation ratio less stable.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

from .metrics import MetricsRow

SUITES: dict[str, dict[str, dict]] = {
    "scaling": {"fixed": {"alpha_mode": "fixed"}, "scalar": {"alpha_mode": "scalar"},
                "vector": {"alpha_mode": "vector"}},
    "activation": {"normsilu": {"activation": "normsilu"},
                   "no_mean": {"activation": "normsilu_no_mean"},
                   "no_rms": {"activation": "normsilu_no_rms"},
                   "silu": {"activation": "silu"}},
    "gating": {"ga": {"gating": "gated"}, "ng": {"gating": "non_gated"}},
}

PEAK_WINDOW = 25


def suite_variants(name: str) -> dict[str, dict]:
    try:
        return SUITES[name]
    except KeyError:
        raise ValueError(f"unknown suite {name!r}; valid suites: {', '.join(SUITES)}") from None


def peak_activation_ratio(rows: list[MetricsRow], window: int = PEAK_WINDOW) -> float:
    """Largest trailing ``window``-step mean of the per-step activation ratio."""
    r = [row.mean_act_ratio for row in rows]
    window = max(1, min(window, len(r)))
    acc = sum(r[:window])
    best = acc
    for i in range(window, len(r)):
        acc += r[i] - r[i - window]
        best = max(best, acc)
    return best / window


def final_lambda(rows: list[MetricsRow]) -> float:
    return rows[-1].lam


def _final_quartile(rows):
    return rows[len(rows) * 3 // 4:]


def final_quartile_ratio(rows: list[MetricsRow]) -> float:
    q = _final_quartile(rows)
    return sum(r.mean_act_ratio for r in q) / len(q)


def final_quartile_silu(rows: list[MetricsRow]) -> float:
    q = _final_quartile(rows)
    return sum(r.mean_silu_mag for r in q) / len(q)


@dataclass
class Ordering:
    label: str
    metric: Callable[[list[MetricsRow]], float]
    greater: str
    lesser: str


ORDERINGS: dict[str, list[Ordering]] = {
    "activation": [
        Ordering("(a) peak activation ratio: SiLU > NormSiLU", peak_activation_ratio, "silu", "normsilu"),
        Ordering("(a) peak activation ratio: w/o RMS > NormSiLU", peak_activation_ratio, "no_rms", "normsilu"),
        Ordering("(b) final lambda: SiLU > NormSiLU", final_lambda, "silu", "normsilu"),
        Ordering("(c) final-quartile SiLU magnitude: NormSiLU > SiLU", final_quartile_silu, "normsilu", "silu"),
        Ordering("(c) final-quartile SiLU magnitude: NormSiLU > w/o Mean", final_quartile_silu, "normsilu",
                 "no_mean"),
    ],
    "gating": [
        Ordering("(d) peak activation ratio: GA > NG", peak_activation_ratio, "ga", "ng"),
    ],
    "scaling": [],
}


@dataclass
class Verdict:
    label: str
    wins: int
    seeds: int
    values: list[tuple[float, float]]

    @property
    def passed(self) -> bool:
        return self.wins * 2 > self.seeds

    def line(self) -> str:
        vals = ", ".join(f"{a:.4g} vs {b:.4g}" for a, b in self.values)
        return f"{'PASS' if self.passed else 'FAIL'} {self.label}  [{self.wins}/{self.seeds} seeds: {vals}]"


def verdicts(suite: str, runs: dict[str, list[list[MetricsRow]]]) -> list[Verdict]:
    """Majority vote over seeds for each ordering of ``suite``."""
    out = []
    for o in ORDERINGS[suite]:
        pairs = [(o.metric(a), o.metric(b)) for a, b in zip(runs[o.greater], runs[o.lesser])]
        out.append(Verdict(o.label, sum(a > b for a, b in pairs), len(pairs), pairs))
    return out


def summary_lines(runs: dict[str, list[list[MetricsRow]]]) -> list[str]:
    lines = []
    for name, seeds in runs.items():
        for i, rows in enumerate(seeds):
            lines.append(f"{name:<10} seed#{i}  final lm_loss {rows[-1].lm_loss:.4f}  "
                         f"peak ratio {peak_activation_ratio(rows):.3f}  "
                         f"final-quartile ratio {final_quartile_ratio(rows):.3f}  "
                         f"final lambda {final_lambda(rows):.3e}  "
                         f"final-quartile |SiLU| {final_quartile_silu(rows):.4f}")
    return lines
