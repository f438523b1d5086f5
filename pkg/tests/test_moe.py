import numpy as np
import pytest

from deco.config import MoEConfig
from deco.experts import gated_mlp_forward, init_gated_mlp
from deco.moe import (count_params, dense_ffn_backward, dense_ffn_forward, expert_output_norms,
                      init_moe_block, matched_dense_dff, moe_backward, moe_forward, moe_param_count)
from deco.numerics import finite_diff_grad, make_rng, silu


def block(**kw):
    cfg = MoEConfig(**{"d_h": 8, "d_e": 4, "d_s": 4, "n_experts": 6, "init_std": 0.3, **kw})
    return init_moe_block(cfg, make_rng(0), dtype=np.float64)


def test_no_active_experts_equals_shared(gen):
    p = block()
    p.router.W[...] = -np.abs(p.router.W)
    x = np.abs(gen.standard_normal((5, 8)))
    y, d, _, _ = moe_forward(x, p)
    assert d.activation_ratio == 0
    assert np.array_equal(y, gated_mlp_forward(x, p.shared)[0])


def test_zero_alpha_equals_shared(gen):
    p = block()
    p.router.alpha[:] = 0
    x = gen.standard_normal((5, 8))
    y, d, _, _ = moe_forward(x, p)
    assert d.activation_ratio > 0
    assert np.array_equal(y, gated_mlp_forward(x, p.shared)[0])


@pytest.mark.parametrize("activation", ["normsilu", "silu"])
def test_dense_masked_oracle(activation, gen):
    p = block(activation=activation)
    x = gen.standard_normal((7, 8))
    y, d, _, _ = moe_forward(x, p)
    e = p.experts
    ref = gated_mlp_forward(x, p.shared)[0]
    mean = e.W_up.mean(axis=0)
    for n in range(e.n_experts):
        z = x @ e.W_up[n].T
        if activation == "normsilu":
            z = z - x @ mean.T
            z = z / np.sqrt((z * z).mean(-1, keepdims=True) + 1e-6) * e.rms_weight
        out = silu(z) @ e.W_down[n].T
        ref = ref + np.where(d.active[:, n:n + 1], d.scores[:, n:n + 1] * out, 0)
    assert np.allclose(y, ref, rtol=1e-12, atol=1e-14)


def test_forced_full_activation_is_dense_sum(gen):
    p = block()
    x = gen.standard_normal((4, 8))
    ones = np.ones((4, 6))
    y, _, tr, _ = moe_forward(x, p, force_scores=ones)
    ref = gated_mlp_forward(x, p.shared)[0] + np.einsum("ted,ehd->th", tr.cache["a"], p.experts.W_down)
    assert np.allclose(y, ref, rtol=1e-12)


def test_linear_in_alpha(gen):
    p = block()
    x = gen.standard_normal((5, 8))
    y1, _, _, _ = moe_forward(x, p)
    shared = gated_mlp_forward(x, p.shared)[0]
    p.router.alpha *= 2
    y2, _, _, _ = moe_forward(x, p)
    assert np.allclose(y2 - y1, y1 - shared, rtol=1e-12, atol=1e-14)


def test_zero_upstream_grad(gen):
    p = block()
    x = gen.standard_normal((5, 8))
    _, _, _, cache = moe_forward(x, p)
    gx, grads = moe_backward(p, cache, np.zeros((5, 8)))
    assert not gx.any() and not any(g.any() for g in grads.values())


def test_alpha_grad_zero_for_never_active_expert(gen):
    p = block()
    x = gen.standard_normal((5, 8))
    p.router.W[:, 2] = 0.0                  # logit exactly 0: never active
    _, d, _, cache = moe_forward(x, p)
    assert not d.active[:, 2].any()
    _, grads = moe_backward(p, cache, gen.standard_normal((5, 8)))
    assert grads["router.alpha"][2] == 0
    assert not grads["experts.W_down"][2].any()


@pytest.mark.parametrize("kw", [{}, {"gating": "gated"}, {"alpha_mode": "scalar"}, {"routing": "topk", "top_k": 2},
                                {"routing": "topp", "top_p": 0.5}, {"activation": "normsilu_no_mean"}])
def test_block_gradcheck(kw, gen):
    p = block(**kw)
    while True:
        x = gen.standard_normal((5, 8))
        if np.abs(x @ p.router.W).min() > 1e-3:
            break
    R = gen.standard_normal((5, 8))
    _, _, _, cache = moe_forward(x, p)
    gx, grads = moe_backward(p, cache, R)
    rep = finite_diff_grad(lambda: float((R * moe_forward(x, p)[0]).sum()), {"x": x, **p.arrays()},
                           {"x": gx, **grads})
    assert rep.passed, rep.lines()


def test_dense_ffn(gen):
    p = init_gated_mlp(8, 12, make_rng(0), std=0.3, dtype=np.float64)
    assert not dense_ffn_forward(np.zeros((3, 8)), p)[0].any()
    assert count_params(p)["total"] == 3 * 8 * 12
    x = gen.standard_normal((4, 8))
    R = gen.standard_normal((4, 8))
    _, c = dense_ffn_forward(x, p)
    gx, grads = dense_ffn_backward(x, p, c, R)
    rep = finite_diff_grad(lambda: float((R * dense_ffn_forward(x, p)[0]).sum()), {"x": x, **p.arrays()},
                           {"x": gx, **grads}, rtol=1e-5)
    assert rep.passed


@pytest.mark.parametrize("kw", [{}, {"gating": "gated"}, {"alpha_mode": "scalar"}, {"alpha_mode": "fixed"},
                                {"routing": "topk"}])
def test_count_params(kw):
    p = block(**kw)
    c = count_params(p)
    d_h, d_e, n_e = 8, 4, 6
    n_alpha = {"vector": n_e, "scalar": 1, "fixed": 0}[kw.get("alpha_mode", "vector")]
    if kw.get("routing") == "topk":
        n_alpha = 0
    assert c["router"] + c["alpha"] == d_h * n_e + n_alpha
    per = 3 if kw.get("gating") == "gated" else 2
    assert c["experts"] == per * n_e * d_e * d_h + d_e
    assert c["total"] == moe_param_count(p.config)


@pytest.mark.parametrize("cfg", [MoEConfig(d_h=768, d_e=64, d_s=128, n_experts=42),
                                 MoEConfig(d_h=256, d_e=32, d_s=64, n_experts=64)])
def test_matched_dense_budget_within_one_percent(cfg):
    d_ff = matched_dense_dff(cfg)
    assert d_ff % 8 == 0
    assert abs(3 * cfg.d_h * d_ff - moe_param_count(cfg)) / moe_param_count(cfg) < 0.01


def test_expert_output_norms_telemetry(gen):
    p = block()
    norms = expert_output_norms(gen.standard_normal((40, 8)), p)
    assert norms.shape == (6,)
    assert np.all(np.isnan(norms) | (norms >= 0))
