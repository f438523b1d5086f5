import numpy as np
import pytest

from deco.experts import (ExpertParams, PackedExperts, active_pairs, expert_backward, expert_forward,
                          expert_forward_gathered, gated_mlp_backward, gated_mlp_forward, init_experts,
                          init_gated_mlp, norm_silu, sparse_linear, up_mean, variant_steps)
from deco.numerics import finite_diff_grad, make_rng, rms_norm, silu
from deco.routing import RouterDecision

VARIANTS = ["normsilu", "normsilu_no_mean", "normsilu_no_rms", "silu"]


def decision(scores):
    scores = np.asarray(scores, float)
    return RouterDecision(scores, scores != 0, float((scores != 0).mean()))


def dense_up(x, W_up):
    # same GEMM as the training path
    n_e, d_e, d_h = W_up.shape
    return (x @ W_up.reshape(n_e * d_e, d_h).T).reshape(x.shape[0], n_e, d_e)


# -- SparseLinear -----------------------------------------------------------

def test_sparse_linear_empty_and_full(gen):
    x = gen.standard_normal((4, 6))
    W = gen.standard_normal((3, 5, 6))
    g = sparse_linear(x, W, np.zeros((4, 3), bool))
    assert g.values.shape == (0, 5) and g.flops == 0
    g = sparse_linear(x, W, np.ones((4, 3), bool))
    assert np.allclose(g.to_dense(4, 3), dense_up(x, W), rtol=1e-13)


def test_sparse_linear_equals_masked_dense_exactly(gen):
    x = gen.standard_normal((40, 16))
    W = gen.standard_normal((10, 8, 16))
    mask = gen.random((40, 10)) < 0.2
    full = sparse_linear(x, W, np.ones_like(mask)).to_dense(40, 10)
    part = sparse_linear(x, W, mask)
    assert np.array_equal(part.to_dense(40, 10), np.where(mask[..., None], full, 0))
    assert part.flops == 2 * 8 * 16 * int(mask.sum())


def test_sparse_linear_never_reads_inactive_experts(gen):
    x = gen.standard_normal((5, 4))
    W = gen.standard_normal((3, 2, 4))
    mask = np.zeros((5, 3), bool)
    mask[:, 1] = True
    W_poison = W.copy()
    W_poison[[0, 2]] = np.nan
    assert np.array_equal(sparse_linear(x, W_poison, mask).values, sparse_linear(x, W, mask).values)


def test_active_pairs_order():
    t, e = active_pairs(np.array([[0, 1, 1], [1, 0, 1]], bool))
    assert t.tolist() == [0, 0, 1, 1] and e.tolist() == [1, 2, 0, 2]


# -- NormSiLU ---------------------------------------------------------------

def test_single_expert_centering_gives_zero(gen):
    x = gen.standard_normal((4, 6))
    W = gen.standard_normal((1, 3, 6))
    out, tr = norm_silu(x, W, dense_up(x, W), np.ones(3))
    assert np.array_equal(tr.z_centered, np.zeros_like(tr.z_centered))
    assert np.array_equal(out, np.zeros_like(out))


def test_identical_experts_give_zero(gen):
    # zero up to the rounding of a 5-way mean
    x = gen.standard_normal((4, 6))
    W = np.repeat(gen.standard_normal((1, 3, 6)), 5, axis=0)
    out, tr = norm_silu(x, W, dense_up(x, W), np.ones(3))
    assert np.abs(tr.z_centered).max() < 1e-14
    assert np.abs(out).max() < 1e-12


@pytest.mark.parametrize("dtype,tol", [(np.float64, 1e-12), (np.float32, 1e-6)])
def test_weight_centering_equivalence(dtype, tol, gen):
    x = gen.standard_normal((7, 6)).astype(dtype)
    W = gen.standard_normal((3, 4, 6)).astype(dtype)
    w = gen.standard_normal(4).astype(dtype)
    out, _ = norm_silu(x, W, dense_up(x, W), w)
    Wc = W - W.mean(axis=0)
    ref = silu(rms_norm(dense_up(x, Wc), w))
    assert np.abs(out - ref).max() < tol


def test_gathered_intermediate_matches_dense(gen):
    x = gen.standard_normal((6, 8))
    W = gen.standard_normal((5, 4, 8))
    mask = gen.random((6, 5)) < 0.4
    g = sparse_linear(x, W, mask)
    out_g, _ = norm_silu(x, W, g.values, np.ones(4), token_idx=g.token_idx)
    out_d, _ = norm_silu(x, W, dense_up(x, W), np.ones(4))
    assert np.allclose(out_g, out_d[g.token_idx, g.expert_idx], rtol=1e-12, atol=1e-14)


def test_variant_steps():
    assert variant_steps("normsilu") == (True, True)
    assert variant_steps("silu") == (False, False)
    with pytest.raises(ValueError):
        variant_steps("gelu")


def test_silu_magnitude_smaller_than_normsilu_at_init(gen):
    x = gen.standard_normal((2000, 64))
    dec = decision(np.ones((2000, 16)))
    mags = {}
    for act in ("silu", "normsilu"):
        p = init_experts(64, 8, 16, make_rng(0), activation=act, dtype=np.float64)
        mags[act] = expert_forward(x, dec, p)[1].mean_abs_silu
    assert mags["silu"] < mags["normsilu"]


# -- expert forward / backward ------------------------------------------------

def test_no_active_experts_gives_zero(gen):
    p = init_experts(6, 3, 4, make_rng(0), dtype=np.float64)
    y, _ = expert_forward(gen.standard_normal((5, 6)), decision(np.zeros((5, 4))), p)
    assert not y.any()


def test_single_expert_direct_evaluation(gen):
    p = init_experts(6, 3, 4, make_rng(0), activation="silu", std=0.3, dtype=np.float64)
    x = gen.standard_normal((5, 6))
    s = np.zeros((5, 4))
    s[:, 2] = 1.0
    y, _ = expert_forward(x, decision(s), p)
    ref = silu(x @ p.W_up[2].T) @ p.W_down[2].T
    assert np.allclose(y, ref, rtol=1e-13)


def test_linear_in_scores(gen):
    p = init_experts(6, 3, 4, make_rng(0), std=0.3, dtype=np.float64)
    x = gen.standard_normal((5, 6))
    s = gen.random((5, 4)) * (gen.random((5, 4)) < 0.5)
    y1, _ = expert_forward(x, decision(s), p)
    y2, _ = expert_forward(x, decision(2 * s), p)
    assert np.array_equal(y2, 2 * y1)


def test_zero_upstream_gradient(gen):
    p = init_experts(6, 3, 4, make_rng(0), gating="gated", std=0.3, dtype=np.float64)
    x = gen.standard_normal((5, 6))
    dec = decision(gen.random((5, 4)))
    _, tr = expert_forward(x, dec, p)
    gx, grads, gs = expert_backward(x, dec, p, tr, np.zeros((5, 6)))
    assert not gx.any() and not gs.any() and not any(g.any() for g in grads.values())


def test_single_expert_normsilu_up_gradient_is_zero(gen):
    p = init_experts(6, 3, 1, make_rng(0), std=0.3, dtype=np.float64)
    x = gen.standard_normal((5, 6))
    dec = decision(np.ones((5, 1)))
    _, tr = expert_forward(x, dec, p)
    _, grads, _ = expert_backward(x, dec, p, tr, gen.standard_normal((5, 6)))
    assert np.abs(grads["W_up"]).max() == 0


@pytest.mark.parametrize("activation", VARIANTS)
@pytest.mark.parametrize("gating", ["non_gated", "gated"])
def test_expert_backward_finite_differences(activation, gating, gen):
    p = init_experts(6, 3, 4, make_rng(5), activation=activation, gating=gating, std=0.3, dtype=np.float64)
    p.rms_weight[:] = [0.5, 1.0, 1.5]
    x = gen.standard_normal((5, 6))
    s = gen.random((5, 4)) * (gen.random((5, 4)) < 0.6)
    dec = decision(s)
    R = gen.standard_normal((5, 6))
    _, tr = expert_forward(x, dec, p)
    gx, grads, gs = expert_backward(x, dec, p, tr, R)
    params = {"x": x, "scores": s, **p.arrays()}
    analytic = {"x": gx, "scores": gs, **grads}
    if activation in ("normsilu_no_rms", "silu"):
        params.pop("rms_weight")
    rep = finite_diff_grad(lambda: float((R * expert_forward(x, decision(s), p)[0]).sum()), params, analytic,
                           rtol=1e-5)
    assert rep.passed, rep.lines()


def test_inactive_experts_get_no_down_or_gate_gradient(gen):
    p = init_experts(6, 3, 4, make_rng(0), gating="gated", std=0.3, dtype=np.float64)
    x = gen.standard_normal((5, 6))
    s = gen.random((5, 4))
    s[:, 1] = 0
    dec = decision(s)
    _, tr = expert_forward(x, dec, p)
    _, grads, _ = expert_backward(x, dec, p, tr, gen.standard_normal((5, 6)))
    assert not grads["W_down"][1].any() and not grads["W_gate"][1].any()
    # W_up of the inactive expert only sees the shared-mean coupling
    assert grads["W_up"][1].any()
    assert np.allclose(grads["W_up"][1], grads["W_up"][1][None].mean(0))


# -- gathered inference path ----------------------------------------------------

@pytest.mark.parametrize("activation", VARIANTS)
@pytest.mark.parametrize("gating", ["non_gated", "gated"])
def test_packed_sparse_equals_packed_dense_bitwise(activation, gating, gen):
    p = init_experts(16, 4, 8, make_rng(1), activation=activation, gating=gating, std=0.3)
    x = gen.standard_normal((9, 16)).astype(np.float32)
    s = (gen.random((9, 8)) * (gen.random((9, 8)) < 0.3)).astype(np.float32)
    dec = decision(s)
    packed = PackedExperts.from_params(p)
    sparse = expert_forward_gathered(x, dec, packed)
    dense = expert_forward_gathered(x, dec, packed, all_experts=True)
    assert sparse.tobytes() == dense.tobytes()
    train_path, _ = expert_forward(x, dec, p)
    assert np.allclose(sparse, train_path, rtol=1e-4, atol=1e-6)


def test_packed_mean_is_frozen_copy():
    p = init_experts(4, 2, 3, make_rng(0), dtype=np.float64)
    packed = PackedExperts.from_params(p)
    before = packed.mean_T.copy()
    p.W_up += 1.0
    assert np.array_equal(packed.mean_T, before)
    assert np.allclose(up_mean(p.W_up).T, before + 1.0)


# -- shared expert ----------------------------------------------------------------

def test_shared_expert_zero_weights_and_shape(gen):
    p = init_gated_mlp(6, 4, make_rng(0), dtype=np.float64)
    for w in p.arrays().values():
        w[...] = 0
    for n in (1, 7):
        y, _ = gated_mlp_forward(gen.standard_normal((n, 6)), p)
        assert y.shape == (n, 6) and not y.any()


def test_shared_expert_finite_differences(gen):
    p = init_gated_mlp(6, 4, make_rng(0), std=0.3, dtype=np.float64)
    x = gen.standard_normal((5, 6))
    R = gen.standard_normal((5, 6))
    _, cache = gated_mlp_forward(x, p)
    gx, grads = gated_mlp_backward(x, p, cache, R)
    rep = finite_diff_grad(lambda: float((R * gated_mlp_forward(x, p)[0]).sum()), {"x": x, **p.arrays()},
                           {"x": gx, **grads}, rtol=1e-5)
    assert rep.passed, rep.lines()


def test_expert_params_validation():
    with pytest.raises(ValueError):
        ExpertParams(np.zeros((2, 3, 4)), np.zeros((2, 4, 3)), np.ones(3), gating="gated")
