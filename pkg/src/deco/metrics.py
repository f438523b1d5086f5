"""Per-step training metrics and their CSV form."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

BASE_COLUMNS = ["step", "lm_loss", "ent_loss", "lambda", "lr"]


@dataclass
class MetricsRow:
    step: int
    lm_loss: float
    ent_loss: float
    lam: float
    lr: float
    act_ratios: list[float] = field(default_factory=list)
    silu_mags: list[float] = field(default_factory=list)

    @property
    def mean_act_ratio(self) -> float:
        # the controller input; plain left-to-right sum so a replay is exact
        return sum(self.act_ratios) / len(self.act_ratios) if self.act_ratios else 0.0

    @property
    def mean_silu_mag(self) -> float:
        return sum(self.silu_mags) / len(self.silu_mags) if self.silu_mags else 0.0


def header(n_moe_layers: int) -> list[str]:
    return (BASE_COLUMNS + [f"act_ratio_L{i + 1}" for i in range(n_moe_layers)]
            + [f"silu_mag_L{i + 1}" for i in range(n_moe_layers)])


def _fmt(v) -> str:
    # repr of a Python float is the shortest round-trip form and never locale-formatted
    return repr(float(v))


def write_csv(rows: list[MetricsRow], path_or_file) -> None:
    n = len(rows[0].act_ratios) if rows else 0
    own = isinstance(path_or_file, (str, Path))
    f = open(path_or_file, "w", newline="", encoding="utf-8") if own else path_or_file
    try:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header(n))
        for r in rows:
            if len(r.act_ratios) != n:
                raise ValueError(f"row {r.step} has {len(r.act_ratios)} layers, expected {n}")
            w.writerow([str(r.step), _fmt(r.lm_loss), _fmt(r.ent_loss), _fmt(r.lam), _fmt(r.lr)]
                       + [_fmt(v) for v in r.act_ratios] + [_fmt(v) for v in r.silu_mags])
    finally:
        if own:
            f.close()


def read_csv(path_or_text) -> list[MetricsRow]:
    if isinstance(path_or_text, Path) or (isinstance(path_or_text, str) and "\n" not in path_or_text):
        text = Path(path_or_text).read_text(encoding="utf-8")
    else:
        text = path_or_text
    reader = csv.reader(io.StringIO(text))
    head = next(reader)
    if head[:5] != BASE_COLUMNS:
        raise ValueError(f"unexpected metrics header {head[:5]}")
    n = (len(head) - 5) // 2
    rows = []
    for rec in reader:
        vals = [float(v) for v in rec[1:]]
        rows.append(MetricsRow(int(rec[0]), vals[0], vals[1], vals[2], vals[3],
                               vals[4:4 + n], vals[4 + n:4 + 2 * n]))
    return rows


def to_csv_text(rows: list[MetricsRow]) -> str:
    buf = io.StringIO()
    write_csv(rows, buf)
    return buf.getvalue()
