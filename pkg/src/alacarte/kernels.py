"""Numeric hot kernels: numba-jitted loops with a pure-numpy fallback.

The backend is chosen once at import time. Numba is used when it imports
cleanly and ``ALACARTE_NO_NUMBA`` is unset (or "0"/"false"); otherwise the
vectorized numpy implementations are bound to the public names. ``BACKEND``
records the choice, and both variants stay importable so the benchmark in
``benchmarks/bench_kernels.py`` can time them against each other.

Kernels operate on C-contiguous arrays, row-wise for 2-d inputs, with no
broadcasting. Loop accumulation is sequential, so a fixed backend gives
bit-reproducible results for a fixed input.
"""

import math
import os

import numpy as np

_FLAG = os.environ.get("ALACARTE_NO_NUMBA", "").strip().lower()
_DISABLED = _FLAG not in ("", "0", "false")

SQRT_HALF = 0.7071067811865476  # 1/sqrt(2)
INV_SQRT_2PI = 0.3989422804014327  # 1/sqrt(2*pi)


# ---------------------------------------------------------------------------
# numpy implementations (vectorized)
# ---------------------------------------------------------------------------

def _softmax_rows_np(x):
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x - m)
    e /= e.sum(axis=1, keepdims=True)
    return e


def _softmax_rows_bwd_np(y, dy):
    inner = (dy * y).sum(axis=1, keepdims=True)
    return y * (dy - inner)


def _layernorm_rows_np(x, gamma, beta, eps):
    mean = x.mean(axis=1)
    centered = x - mean[:, None]
    var = (centered * centered).mean(axis=1)
    rstd = 1.0 / np.sqrt(var + eps)
    y = centered * rstd[:, None] * gamma + beta
    return y.astype(x.dtype, copy=False), mean, rstd


def _layernorm_rows_bwd_np(x, gamma, mean, rstd, dy):
    xhat = (x - mean[:, None]) * rstd[:, None]
    dgamma = (dy * xhat).sum(axis=0)
    dbeta = dy.sum(axis=0)
    dxhat = dy * gamma
    m1 = dxhat.mean(axis=1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
    dx = (dxhat - m1 - xhat * m2) * rstd[:, None]
    return dx.astype(x.dtype, copy=False), dgamma, dbeta


_erf_np = np.vectorize(math.erf, otypes=[np.float64])


def _gelu_fwd_np(x):
    # exact erf form, not the tanh approximation
    return (0.5 * x * (1.0 + _erf_np(x * SQRT_HALF))).astype(x.dtype, copy=False)


def _gelu_bwd_np(x, dy):
    cdf = 0.5 * (1.0 + _erf_np(x * SQRT_HALF))
    pdf = np.exp(-0.5 * x * x) * INV_SQRT_2PI
    return (dy * (cdf + x * pdf)).astype(x.dtype, copy=False)


def _adamw_update_np(p, g, m, v, step, lr, beta1, beta2, eps, weight_decay):
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * g * g
    bc1 = 1.0 - beta1 ** step
    bc2 = 1.0 - beta2 ** step
    mhat = m / bc1
    vhat = v / bc2
    p -= lr * (mhat / (np.sqrt(vhat) + eps) + weight_decay * p)


def _kmeans_assign_np(points, centroids):
    diff = points[:, None, :] - centroids[None, :, :]
    sqd = (diff * diff).sum(axis=2)
    labels = sqd.argmin(axis=1)
    return labels.astype(np.int64), sqd[np.arange(points.shape[0]), labels]


def _cross_entropy_fwd_np(logits, labels):
    m = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - m)
    s = e.sum(axis=1)
    probs = e / s[:, None]
    rows = np.arange(logits.shape[0])
    losses = np.log(s) + m[:, 0] - logits[rows, labels]
    return losses.astype(logits.dtype, copy=False), probs.astype(logits.dtype, copy=False)


# ---------------------------------------------------------------------------
# loop implementations (numba targets; also runnable as plain python)
# ---------------------------------------------------------------------------

def _softmax_rows_loop(x):
    out = np.empty_like(x)
    for i in range(x.shape[0]):
        m = x[i, 0]
        for j in range(1, x.shape[1]):
            if x[i, j] > m:
                m = x[i, j]
        s = 0.0
        for j in range(x.shape[1]):
            val = math.exp(x[i, j] - m)
            out[i, j] = val
            s += val
        for j in range(x.shape[1]):
            out[i, j] /= s
    return out


def _softmax_rows_bwd_loop(y, dy):
    dx = np.empty_like(y)
    for i in range(y.shape[0]):
        inner = 0.0
        for j in range(y.shape[1]):
            inner += dy[i, j] * y[i, j]
        for j in range(y.shape[1]):
            dx[i, j] = y[i, j] * (dy[i, j] - inner)
    return dx


def _layernorm_rows_loop(x, gamma, beta, eps):
    rows, dim = x.shape
    y = np.empty_like(x)
    mean = np.empty(rows, dtype=np.float64)
    rstd = np.empty(rows, dtype=np.float64)
    for i in range(rows):
        mu = 0.0
        for j in range(dim):
            mu += x[i, j]
        mu /= dim
        var = 0.0
        for j in range(dim):
            d = x[i, j] - mu
            var += d * d
        var /= dim
        r = 1.0 / math.sqrt(var + eps)
        mean[i] = mu
        rstd[i] = r
        for j in range(dim):
            y[i, j] = (x[i, j] - mu) * r * gamma[j] + beta[j]
    return y, mean, rstd


def _layernorm_rows_bwd_loop(x, gamma, mean, rstd, dy):
    rows, dim = x.shape
    dx = np.empty_like(x)
    dgamma = np.zeros(dim, dtype=x.dtype)
    dbeta = np.zeros(dim, dtype=x.dtype)
    for i in range(rows):
        mu = mean[i]
        r = rstd[i]
        m1 = 0.0
        m2 = 0.0
        for j in range(dim):
            xhat = (x[i, j] - mu) * r
            dxh = dy[i, j] * gamma[j]
            m1 += dxh
            m2 += dxh * xhat
            dgamma[j] += dy[i, j] * xhat
            dbeta[j] += dy[i, j]
        m1 /= dim
        m2 /= dim
        for j in range(dim):
            xhat = (x[i, j] - mu) * r
            dxh = dy[i, j] * gamma[j]
            dx[i, j] = (dxh - m1 - xhat * m2) * r
    return dx, dgamma, dbeta


def _gelu_fwd_loop(x):
    out = np.empty_like(x)
    flat_in = x.ravel()
    flat_out = out.ravel()
    for i in range(flat_in.shape[0]):
        v = flat_in[i]
        flat_out[i] = 0.5 * v * (1.0 + math.erf(v * SQRT_HALF))
    return out


def _gelu_bwd_loop(x, dy):
    out = np.empty_like(x)
    flat_x = x.ravel()
    flat_dy = dy.ravel()
    flat_out = out.ravel()
    for i in range(flat_x.shape[0]):
        v = flat_x[i]
        cdf = 0.5 * (1.0 + math.erf(v * SQRT_HALF))
        pdf = math.exp(-0.5 * v * v) * INV_SQRT_2PI
        flat_out[i] = flat_dy[i] * (cdf + v * pdf)
    return out


def _adamw_update_loop(p, g, m, v, step, lr, beta1, beta2, eps, weight_decay):
    bc1 = 1.0 - beta1 ** step
    bc2 = 1.0 - beta2 ** step
    pf = p.ravel()
    gf = g.ravel()
    mf = m.ravel()
    vf = v.ravel()
    for i in range(pf.shape[0]):
        mf[i] = beta1 * mf[i] + (1.0 - beta1) * gf[i]
        vf[i] = beta2 * vf[i] + (1.0 - beta2) * gf[i] * gf[i]
        mhat = mf[i] / bc1
        vhat = vf[i] / bc2
        pf[i] -= lr * (mhat / (math.sqrt(vhat) + eps) + weight_decay * pf[i])


def _kmeans_assign_loop(points, centroids):
    n = points.shape[0]
    k = centroids.shape[0]
    dim = points.shape[1]
    labels = np.empty(n, dtype=np.int64)
    dists = np.empty(n, dtype=points.dtype)
    for i in range(n):
        best = -1
        best_d = np.inf
        for c in range(k):
            d = 0.0
            for j in range(dim):
                diff = points[i, j] - centroids[c, j]
                d += diff * diff
            if d < best_d:
                best_d = d
                best = c
        labels[i] = best
        dists[i] = best_d
    return labels, dists


def _cross_entropy_fwd_loop(logits, labels):
    rows, cols = logits.shape
    losses = np.empty(rows, dtype=logits.dtype)
    probs = np.empty_like(logits)
    for i in range(rows):
        m = logits[i, 0]
        for j in range(1, cols):
            if logits[i, j] > m:
                m = logits[i, j]
        s = 0.0
        for j in range(cols):
            val = math.exp(logits[i, j] - m)
            probs[i, j] = val
            s += val
        for j in range(cols):
            probs[i, j] /= s
        losses[i] = math.log(s) + m - logits[i, labels[i]]
    return losses, probs


# ---------------------------------------------------------------------------
# backend selection
# ---------------------------------------------------------------------------

_NUMPY_IMPLS = {
    "softmax_rows": _softmax_rows_np,
    "softmax_rows_backward": _softmax_rows_bwd_np,
    "layernorm_rows": _layernorm_rows_np,
    "layernorm_rows_backward": _layernorm_rows_bwd_np,
    "gelu_forward": _gelu_fwd_np,
    "gelu_backward": _gelu_bwd_np,
    "adamw_update": _adamw_update_np,
    "kmeans_assign": _kmeans_assign_np,
    "cross_entropy_forward": _cross_entropy_fwd_np,
}

_LOOP_IMPLS = {
    "softmax_rows": _softmax_rows_loop,
    "softmax_rows_backward": _softmax_rows_bwd_loop,
    "layernorm_rows": _layernorm_rows_loop,
    "layernorm_rows_backward": _layernorm_rows_bwd_loop,
    "gelu_forward": _gelu_fwd_loop,
    "gelu_backward": _gelu_bwd_loop,
    "adamw_update": _adamw_update_loop,
    "kmeans_assign": _kmeans_assign_loop,
    "cross_entropy_forward": _cross_entropy_fwd_loop,
}

NUMBA_IMPLS = {}
BACKEND = "numpy"

if not _DISABLED:
    try:
        from numba import njit

        for _name, _fn in _LOOP_IMPLS.items():
            NUMBA_IMPLS[_name] = njit(cache=True, nogil=True)(_fn)
        BACKEND = "numba"
    except ImportError:
        NUMBA_IMPLS = {}
        BACKEND = "numpy"

_ACTIVE = NUMBA_IMPLS if BACKEND == "numba" else _NUMPY_IMPLS

softmax_rows = _ACTIVE["softmax_rows"]
softmax_rows_backward = _ACTIVE["softmax_rows_backward"]
layernorm_rows = _ACTIVE["layernorm_rows"]
layernorm_rows_backward = _ACTIVE["layernorm_rows_backward"]
gelu_forward = _ACTIVE["gelu_forward"]
gelu_backward = _ACTIVE["gelu_backward"]
adamw_update = _ACTIVE["adamw_update"]
kmeans_assign = _ACTIVE["kmeans_assign"]
cross_entropy_forward = _ACTIVE["cross_entropy_forward"]

NUMPY_IMPLS = _NUMPY_IMPLS


def warmup(dtype=np.float32):
    """Trigger jit compilation for all kernels at the given dtype."""
    x = np.ones((2, 3), dtype=dtype)
    g = np.ones(3, dtype=dtype)
    labels = np.zeros(2, dtype=np.int64)
    softmax_rows(x)
    softmax_rows_backward(x, x)
    y, mean, rstd = layernorm_rows(x, g, g, 1e-6)
    layernorm_rows_backward(x, g, mean, rstd, x)
    gelu_forward(x)
    gelu_backward(x, x)
    adamw_update(x.copy(), x, np.zeros_like(x), np.zeros_like(x), 1, 0.1, 0.9, 0.999, 1e-8, 0.0)
    kmeans_assign(x, x[:1])
    cross_entropy_forward(x, labels)
