"""Fixed-order gather kernels for expert execution.

Weights are passed pre-transposed and expert-contiguous (``[N_e, in, out]``)
so that skipping an expert skips one contiguous block, and the inner loop runs
over the output dimension. Every output element is reduced left to right over
the input dimension starting from zero, the same order as
``numerics.matmul``, which makes a gathered product bit-identical to the
corresponding entries of the dense one.
"""
from __future__ import annotations

import math

import numpy as np
from numba import njit


@njit(cache=True)
def _vecmat(x, WT, out):
    # out[j] = sum_k x[k] * WT[k, j], k ascending
    n_in, n_out = WT.shape
    for j in range(n_out):
        out[j] = 0.0
    for k in range(n_in):
        xv = x[k]
        for j in range(n_out):
            out[j] += xv * WT[k, j]


@njit(cache=True)
def gather_matmul(x, WT, token_idx, expert_idx, out):
    """out[p] = x[token_idx[p]] @ WT[expert_idx[p]] for every listed pair."""
    for p in range(token_idx.shape[0]):
        _vecmat(x[token_idx[p]], WT[expert_idx[p]], out[p])


@njit(cache=True)
def _silu(v):
    return v / (1.0 + math.exp(-v))


@njit(cache=True)
def routed_ffn(x, up_T, gate_T, down_T, mean_T, rms_w, token_idx, expert_idx, scores,
               use_mean, use_rms, gated, eps, y):
    """Accumulate ``scores[p] * expert(x[token_idx[p]])`` into ``y``.

    Pairs must be grouped by token with ascending expert index; the caller
    decides which pairs exist (all of them for dense execution, only the
    active ones for sparse execution). ``y`` must arrive zero-filled.
    """
    n_pairs = token_idx.shape[0]
    d_e = up_T.shape[2]
    d_h = down_T.shape[2]
    z = np.empty(d_e, dtype=y.dtype)
    g = np.empty(d_e, dtype=y.dtype)
    m = np.empty(d_e, dtype=y.dtype)
    o = np.empty(d_h, dtype=y.dtype)
    last_t = -1
    for p in range(n_pairs):
        t = token_idx[p]
        e = expert_idx[p]
        if t != last_t:
            if use_mean:
                _vecmat(x[t], mean_T, m)
            last_t = t
        _vecmat(x[t], up_T[e], z)
        if use_mean:
            for j in range(d_e):
                z[j] -= m[j]
        if use_rms:
            ss = 0.0
            for j in range(d_e):
                ss += z[j] * z[j]
            inv = 1.0 / math.sqrt(ss / d_e + eps)
            for j in range(d_e):
                z[j] = rms_w[j] * (z[j] * inv)
        for j in range(d_e):
            z[j] = _silu(z[j])
        if gated:
            _vecmat(x[t], gate_T[e], g)
            for j in range(d_e):
                z[j] *= _silu(g[j])
        _vecmat(z, down_T[e], o)
        s = scores[p]
        for j in range(d_h):
            y[t, j] += s * o[j]
