import numpy as np
import pytest

from deco.numerics import make_rng


@pytest.fixture
def gen():
    return make_rng(1234).child("tests").generator()


def naive_matmul(a, b):
    """Triple loop, k ascending, starting from zero."""
    m, k = a.shape
    _, n = b.shape
    out = np.zeros((m, n), dtype=np.result_type(a, b))
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for t in range(k):
                acc += a[i, t] * b[t, j]
            out[i, j] = acc
    return out


def tiny_config(**train):
    """A run config small enough to train in well under a second."""
    from deco.config import LMConfig, MoEConfig, PathsConfig, RunConfig, TrainConfig
    moe = MoEConfig(d_h=16, d_e=4, d_s=8, n_experts=6, alpha_init=0.5, init_std=0.1)
    model = LMConfig(d_h=16, n_layers=2, n_heads=2, context_length=16)
    t = dict(n_steps=8, batch_size=2, seq_len=16, warmup_steps=2, decay_steps=2, peak_lr=3e-3)
    t.update(train)
    return RunConfig(model=model, moe=moe, train=TrainConfig(**t), paths=PathsConfig()).validate()


@pytest.fixture(scope="session")
def small_corpus():
    from deco.corpus import build_stdlib_corpus
    return build_stdlib_corpus(max_bytes=200_000)


# one PASS/FAIL line per acceptance criterion, repeated in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def report_criterion(number: int, ok: bool, text: str) -> None:
    line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {text}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
