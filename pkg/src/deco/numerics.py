"""Deterministic tensor math, initialization and a finite-difference oracle.

Tensors are plain ``numpy.ndarray`` objects. Training runs in float32; gradient
checks rerun the same code in float64.

Two matmul paths exist:

* ``matmul`` is the reference kernel. Each output element is accumulated
  strictly left to right over the inner dimension, starting from zero, so a
  row or column subset of a product is bit-identical to the same entries of
  the full product. Dense and gathered expert execution both go through it.
* Everything else (training, attention) uses BLAS via ``@``, which is
  deterministic run to run at a fixed thread count but makes no
  subset guarantee.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np
from numba import njit

RMS_EPS = 1e-6


class NonFiniteError(FloatingPointError):
    pass


def _check_finite(x: np.ndarray, what: str) -> None:
    if not np.isfinite(x).all():
        raise NonFiniteError(f"non-finite values in input to {what}")


# ---------------------------------------------------------------------------
# fixed-order kernels

@njit(cache=True)
def _matmul_kernel(a, b, out):
    m, k = a.shape
    n = b.shape[1]
    for i in range(m):
        for j in range(n):
            out[i, j] = 0.0
        for kk in range(k):
            av = a[i, kk]
            for j in range(n):
                out[i, j] += av * b[kk, j]


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Reference product ``a @ b`` with a fixed left-to-right reduction over k."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    dtype = np.result_type(a.dtype, b.dtype, np.float32)
    out = np.empty((a.shape[0], b.shape[1]), dtype=dtype)
    _matmul_kernel(np.ascontiguousarray(a, dtype=dtype), np.ascontiguousarray(b, dtype=dtype), out)
    return out


# ---------------------------------------------------------------------------
# element-wise ops

def sigmoid(x: np.ndarray) -> np.ndarray:
    # exp(-|x|) never overflows
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0, e) / (1.0 + e)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def silu(x: np.ndarray) -> np.ndarray:
    return x * sigmoid(x)


def silu_grad(x: np.ndarray) -> np.ndarray:
    """d silu / dx = s + x s (1 - s)."""
    s = sigmoid(x)
    return s * (1 + x * (1 - s))


def softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


_ELEMENTWISE: dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "relu": relu,
    "silu": silu,
    "sigmoid": sigmoid,
    "softmax_lastdim": softmax,
    "abs": np.abs,
    "log": np.log,
}


def elementwise(op: str, x: np.ndarray) -> np.ndarray:
    """Apply a named pointwise op (softmax is over the last axis)."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown op {op!r}; expected one of {sorted(_ELEMENTWISE)}") from None
    x = np.asarray(x, dtype=np.result_type(x, np.float32))
    _check_finite(x, op)
    return fn(x)


# ---------------------------------------------------------------------------
# RMS normalization

def rms_norm(x: np.ndarray, weight: np.ndarray, eps: float = RMS_EPS) -> np.ndarray:
    """``weight * x / sqrt(mean(x**2) + eps)`` over the last axis."""
    if x.shape[-1] != weight.shape[-1]:
        raise ValueError(f"rms_norm: last dim {x.shape[-1]} != weight length {weight.shape[-1]}")
    r = np.sqrt((x * x).mean(axis=-1, keepdims=True) + eps)
    return weight * (x / r)


def rms_norm_forward(x, weight, eps=RMS_EPS):
    """Forward that also returns the cache needed by ``rms_norm_backward``."""
    r = np.sqrt((x * x).mean(axis=-1, keepdims=True) + eps)
    xhat = x / r
    return weight * xhat, (xhat, r)


def rms_norm_backward(g, weight, cache):
    """Return (grad_x, grad_weight) for ``rms_norm``."""
    xhat, r = cache
    gw = (g * xhat).reshape(-1, xhat.shape[-1]).sum(axis=0)
    gxhat = g * weight
    d = xhat.shape[-1]
    gx = (gxhat - xhat * (gxhat * xhat).sum(axis=-1, keepdims=True) / d) / r
    return gx, gw


# ---------------------------------------------------------------------------
# RNG and initialization

@dataclass(frozen=True)
class RngState:
    """Seed for a Philox (counter-based) stream.

    ``child(name)`` derives an independent stream keyed by a string, so a
    parameter's initial value depends only on the seed and its name and not on
    which other parameters exist.
    """

    seed: int
    path: tuple[int, ...] = field(default=())

    algorithm = "philox4x64"

    def child(self, name: str) -> "RngState":
        return RngState(self.seed, self.path + (zlib.crc32(name.encode("utf-8")),))

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence([self.seed & 0xFFFFFFFFFFFFFFFF, *self.path])
        return np.random.Generator(np.random.Philox(ss))


def make_rng(seed: int) -> RngState:
    return RngState(int(seed))


def init_normal(shape, std: float, rng: RngState | np.random.Generator, dtype=np.float32) -> np.ndarray:
    if std <= 0:
        raise ValueError(f"init_normal: std must be positive, got {std}")
    gen = rng.generator() if isinstance(rng, RngState) else rng
    return (gen.standard_normal(tuple(shape)) * std).astype(dtype)


# ---------------------------------------------------------------------------
# finite-difference gradient oracle

@dataclass
class GradCheckReport:
    """Per-parameter comparison of analytic and central-difference gradients.

    The relative error of a parameter is ``max|a - n| / max(max|a|, max|n|)``,
    i.e. the worst element error measured against that parameter's gradient
    scale. A parameter passes when its relative error is below ``rtol`` or its
    absolute error is below ``atol``.
    """

    rel_err: dict[str, float]
    abs_err: dict[str, float]
    rtol: float
    atol: float

    @property
    def per_param_pass(self) -> dict[str, bool]:
        return {k: self.rel_err[k] < self.rtol or self.abs_err[k] < self.atol for k in self.rel_err}

    @property
    def passed(self) -> bool:
        return all(self.per_param_pass.values())

    @property
    def max_rel_err(self) -> float:
        return max(self.rel_err.values(), default=0.0)

    def lines(self, prefix: str = "") -> list[str]:
        out = []
        for k in self.rel_err:
            flag = "ok" if self.per_param_pass[k] else "FAIL"
            out.append(f"{prefix}{k:<28s} rel={self.rel_err[k]:.2e} abs={self.abs_err[k]:.2e} {flag}")
        return out


def numeric_grad(loss_fn: Callable[[], float], params: Mapping[str, np.ndarray],
                 h: float = 1e-5, names=None) -> dict[str, np.ndarray]:
    """Central differences of ``loss_fn()`` w.r.t. each array in ``params``.

    Arrays are perturbed in place and restored, so ``loss_fn`` must read
    the parameters by reference.
    """
    grads = {}
    for name in names or params:
        p = params[name]
        g = np.zeros_like(p, dtype=np.float64)
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            fp = loss_fn()
            flat[i] = old - h
            fm = loss_fn()
            flat[i] = old
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NonFiniteError(f"non-finite loss perturbing {name}[{i}] by +/-{h}")
            gflat[i] = (fp - fm) / (2 * h)
        grads[name] = g
    return grads


def finite_diff_grad(loss_fn: Callable[[], float], params: Mapping[str, np.ndarray],
                     analytic: Mapping[str, np.ndarray], h: float = 1e-5,
                     rtol: float = 1e-4, atol: float = 1e-9) -> GradCheckReport:
    """Compare ``analytic`` gradients to central differences of ``loss_fn``."""
    for name, p in params.items():
        if p.dtype != np.float64:
            raise TypeError(f"gradient check needs float64 parameters; {name} is {p.dtype}")
    num = numeric_grad(loss_fn, params, h)
    rel, ab = {}, {}
    for name, n in num.items():
        a = np.asarray(analytic[name], dtype=np.float64).reshape(n.shape)
        diff = np.abs(a - n).max() if n.size else 0.0
        scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0))
        ab[name] = float(diff)
        rel[name] = float(diff / scale) if scale > 0 else (0.0 if diff == 0 else np.inf)
    return GradCheckReport(rel, ab, rtol, atol)
