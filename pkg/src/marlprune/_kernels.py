"""Hot numeric kernels with a numba path and a pure-numpy fallback.

When numba imports and the environment variable ``MARLPRUNE_NUMBA`` is not
set to ``0``, the active backend is ``accelerated``: the numba loops for the
reduction-heavy kernels (layer norm, softmax backward) and numpy for the
exp/tanh-heavy ones, where numpy's SIMD ufuncs beat scalar libm calls from
numba.  ``numpy_impl`` and the all-numba ``numba_impl`` stay importable so
``benchmarks/bench_kernels.py`` can compare them.
"""
from __future__ import annotations

import math
import os
import types

import numpy as np

try:
    import numba

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAS_NUMBA = False

GELU_C = math.sqrt(2.0 / math.pi)
GELU_K = 0.044715


def _flag_enabled() -> bool:
    return os.environ.get("MARLPRUNE_NUMBA", "1").strip().lower() not in ("0", "false", "no", "off")


USE_NUMBA = HAS_NUMBA and _flag_enabled()


# ---------------------------------------------------------------------------
# numpy reference kernels
# ---------------------------------------------------------------------------


def _np_softmax_rows(scores, mask):
    # scores (B, R, K), mask (B, K) additive
    z = scores + mask[:, None, :]
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _np_softmax_rows_bwd(probs, grad):
    s = (grad * probs).sum(axis=-1, keepdims=True)
    return probs * (grad - s)


def _np_layer_norm(x, gain, bias, eps):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gain + bias, xhat, rstd[:, 0]


def _np_layer_norm_bwd(grad, xhat, rstd, gain):
    dxhat = grad * gain
    d = xhat.shape[-1]
    m1 = dxhat.sum(axis=-1, keepdims=True) / d
    m2 = (dxhat * xhat).sum(axis=-1, keepdims=True) / d
    dx = rstd[:, None] * (dxhat - m1 - xhat * m2)
    return dx, (grad * xhat).sum(axis=0), grad.sum(axis=0)


def _np_gelu(x):
    t = np.tanh(GELU_C * (x + GELU_K * x * x * x))
    return 0.5 * x * (1.0 + t)


def _np_gelu_bwd(x, grad):
    x2 = x * x
    t = np.tanh(GELU_C * (x + GELU_K * x2 * x))
    d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x2)
    return grad * d


numpy_impl = types.SimpleNamespace(
    softmax_rows=_np_softmax_rows,
    softmax_rows_bwd=_np_softmax_rows_bwd,
    layer_norm=_np_layer_norm,
    layer_norm_bwd=_np_layer_norm_bwd,
    gelu=_np_gelu,
    gelu_bwd=_np_gelu_bwd,
)


# ---------------------------------------------------------------------------
# numba kernels
# ---------------------------------------------------------------------------

if HAS_NUMBA:
    _jit = numba.njit(cache=True, fastmath=False, nogil=True)

    @_jit
    def _nb_softmax_rows(scores, mask):
        B, R, K = scores.shape
        out = np.empty_like(scores)
        for b in range(B):
            for r in range(R):
                m = -np.inf
                for k in range(K):
                    v = scores[b, r, k] + mask[b, k]
                    out[b, r, k] = v
                    if v > m:
                        m = v
                s = 0.0
                for k in range(K):
                    e = math.exp(out[b, r, k] - m)
                    out[b, r, k] = e
                    s += e
                inv = 1.0 / s
                for k in range(K):
                    out[b, r, k] *= inv
        return out

    @_jit
    def _nb_softmax_rows_bwd(probs, grad):
        B, R, K = probs.shape
        out = np.empty_like(probs)
        for b in range(B):
            for r in range(R):
                s = 0.0
                for k in range(K):
                    s += grad[b, r, k] * probs[b, r, k]
                for k in range(K):
                    out[b, r, k] = probs[b, r, k] * (grad[b, r, k] - s)
        return out

    @_jit
    def _nb_layer_norm(x, gain, bias, eps):
        R, D = x.shape
        out = np.empty_like(x)
        xhat = np.empty_like(x)
        rstd = np.empty(R, dtype=x.dtype)
        for r in range(R):
            mu = 0.0
            for j in range(D):
                mu += x[r, j]
            mu /= D
            var = 0.0
            for j in range(D):
                c = x[r, j] - mu
                var += c * c
            var /= D
            rs = 1.0 / math.sqrt(var + eps)
            rstd[r] = rs
            for j in range(D):
                h = (x[r, j] - mu) * rs
                xhat[r, j] = h
                out[r, j] = h * gain[j] + bias[j]
        return out, xhat, rstd

    @_jit
    def _nb_layer_norm_bwd(grad, xhat, rstd, gain):
        R, D = grad.shape
        dx = np.empty_like(grad)
        dgain = np.zeros(D, dtype=grad.dtype)
        dbias = np.zeros(D, dtype=grad.dtype)
        for r in range(R):
            m1 = 0.0
            m2 = 0.0
            for j in range(D):
                g = grad[r, j]
                dh = g * gain[j]
                m1 += dh
                m2 += dh * xhat[r, j]
                dgain[j] += g * xhat[r, j]
                dbias[j] += g
            m1 /= D
            m2 /= D
            for j in range(D):
                dx[r, j] = rstd[r] * (grad[r, j] * gain[j] - m1 - xhat[r, j] * m2)
        return dx, dgain, dbias

    @_jit
    def _nb_gelu_flat(x):
        out = np.empty_like(x)
        for i in range(x.size):
            v = x[i]
            t = math.tanh(GELU_C * (v + GELU_K * v * v * v))
            out[i] = 0.5 * v * (1.0 + t)
        return out

    @_jit
    def _nb_gelu_bwd_flat(x, grad):
        out = np.empty_like(x)
        for i in range(x.size):
            v = x[i]
            v2 = v * v
            t = math.tanh(GELU_C * (v + GELU_K * v2 * v))
            d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * v2)
            out[i] = grad[i] * d
        return out

    def _nb_gelu(x):
        x = np.ascontiguousarray(x)
        return _nb_gelu_flat(x.reshape(-1)).reshape(x.shape)

    def _nb_gelu_bwd(x, grad):
        x = np.ascontiguousarray(x)
        g = np.ascontiguousarray(grad, dtype=x.dtype)
        return _nb_gelu_bwd_flat(x.reshape(-1), g.reshape(-1)).reshape(x.shape)

    def _nb_softmax_rows_entry(scores, mask):
        scores = np.ascontiguousarray(scores)
        return _nb_softmax_rows(scores, np.ascontiguousarray(mask, dtype=scores.dtype))

    def _nb_softmax_rows_bwd_entry(probs, grad):
        probs = np.ascontiguousarray(probs)
        return _nb_softmax_rows_bwd(probs, np.ascontiguousarray(grad, dtype=probs.dtype))

    def _nb_layer_norm_entry(x, gain, bias, eps):
        x = np.ascontiguousarray(x)
        dt = x.dtype
        return _nb_layer_norm(x, np.ascontiguousarray(gain, dtype=dt), np.ascontiguousarray(bias, dtype=dt), float(eps))

    def _nb_layer_norm_bwd_entry(grad, xhat, rstd, gain):
        xhat = np.ascontiguousarray(xhat)
        dt = xhat.dtype
        return _nb_layer_norm_bwd(
            np.ascontiguousarray(grad, dtype=dt), xhat, rstd, np.ascontiguousarray(gain, dtype=dt)
        )

    numba_impl = types.SimpleNamespace(
        softmax_rows=_nb_softmax_rows_entry,
        softmax_rows_bwd=_nb_softmax_rows_bwd_entry,
        layer_norm=_nb_layer_norm_entry,
        layer_norm_bwd=_nb_layer_norm_bwd_entry,
        gelu=_nb_gelu,
        gelu_bwd=_nb_gelu_bwd,
    )
    accelerated = types.SimpleNamespace(
        softmax_rows=_np_softmax_rows,
        softmax_rows_bwd=_nb_softmax_rows_bwd_entry,
        layer_norm=_nb_layer_norm_entry,
        layer_norm_bwd=_nb_layer_norm_bwd_entry,
        gelu=_np_gelu,
        gelu_bwd=_np_gelu_bwd,
    )
else:  # pragma: no cover
    numba_impl = None
    accelerated = numpy_impl


active = accelerated if USE_NUMBA else numpy_impl


def backend_name() -> str:
    return "numpy" if active is numpy_impl else "numba"
