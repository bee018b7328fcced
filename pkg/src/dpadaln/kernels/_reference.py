"""Pure numpy implementations of the hot kernels.

Every function here has a compiled twin in ``_core.pyx`` with the same
signature. Results agree to rounding; integer streams agree bit for bit.
"""

import numpy as np

GOLDEN = np.uint64(0x9E3779B97F4A7C15)
MIX1 = np.uint64(0xBF58476D1CE4E5B9)
MIX2 = np.uint64(0x94D049BB133111EB)
TWO_PI = 6.283185307179586
INV_2_53 = 1.0 / 9007199254740992.0

KIND_TANH = 0
KIND_HARD = 1
KIND_BAND = 2
KIND_STE = 3


def splitmix64(key, start, n):
    """Raw 64-bit words for counters ``start .. start+n-1`` under ``key``."""
    ctr = np.arange(n, dtype=np.uint64) + np.uint64(start) + np.uint64(1)
    z = np.uint64(key) + ctr * GOLDEN
    z = (z ^ (z >> np.uint64(30))) * MIX1
    z = (z ^ (z >> np.uint64(27))) * MIX2
    return z ^ (z >> np.uint64(31))


def counter_uniform(key, start, n):
    """Uniforms strictly inside (0, 1) from the top 53 bits of each word."""
    words = splitmix64(key, start, n)
    return ((words >> np.uint64(11)).astype(np.float64) + 0.5) * INV_2_53


def counter_normal(key, start, n):
    """Standard normals by Box-Muller; consumes ``2 * ceil(n / 2)`` counters."""
    pairs = (n + 1) // 2
    u = counter_uniform(key, start, 2 * pairs)
    r = np.sqrt(-2.0 * np.log(u[0::2]))
    theta = TWO_PI * u[1::2]
    out = np.empty(2 * pairs)
    out[0::2] = r * np.cos(theta)
    out[1::2] = r * np.sin(theta)
    return out[:n]


def _band(x, M, eps):
    a = M - eps
    ax = np.abs(x)
    s = (ax - a) / (2.0 * eps)
    mid = a + eps * s * (2.0 - s)
    mag = np.where(ax <= a, ax, np.where(ax >= M + eps, M, mid))
    return np.copysign(mag, x)


def bound_forward(x, M, kind, band):
    x = np.asarray(x, dtype=np.float64)
    if np.isinf(M):
        return x.copy()
    if kind == KIND_TANH:
        return M * np.tanh(x / M)
    if kind == KIND_HARD or kind == KIND_STE or (kind == KIND_BAND and band <= 0.0):
        return np.minimum(M, np.maximum(-M, x))
    if kind == KIND_BAND:
        return _band(x, M, band)
    raise ValueError(f"unknown bound kind {kind}")


def bound_derivative(x, M, kind, band):
    x = np.asarray(x, dtype=np.float64)
    if np.isinf(M) or kind == KIND_STE:
        return np.ones_like(x)
    if kind == KIND_TANH:
        th = np.tanh(x / M)
        return 1.0 - th * th
    if kind == KIND_HARD or (kind == KIND_BAND and band <= 0.0):
        return (np.abs(x) < M).astype(np.float64)
    if kind == KIND_BAND:
        a = M - band
        ax = np.abs(x)
        s = (ax - a) / (2.0 * band)
        return np.where(ax <= a, 1.0, np.where(ax >= M + band, 0.0, 1.0 - s))
    raise ValueError(f"unknown bound kind {kind}")


def layer_norm_forward(x, eps):
    """Row-wise normalization over the last axis of a 2-D array."""
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    return xc * rstd, rstd[:, 0]


def layer_norm_backward(gy, y, rstd):
    mg = gy.mean(axis=1, keepdims=True)
    mgy = (gy * y).mean(axis=1, keepdims=True)
    return rstd[:, None] * (gy - mg - y * mgy)


def clip_accumulate(G, C):
    """Clip each row of ``G`` to norm ``C`` and sum rows with Neumaier compensation.

    Returns ``(total, norms, eta)``.
    """
    G = np.ascontiguousarray(G, dtype=np.float64)
    norms = np.sqrt(np.einsum("bp,bp->b", G, G))
    eta = np.ones_like(norms)
    if not np.isinf(C):
        big = norms > C
        eta[big] = C / norms[big]
    total = np.zeros(G.shape[1])
    comp = np.zeros(G.shape[1])
    for b in range(G.shape[0]):
        v = G[b] * eta[b] if eta[b] != 1.0 else G[b]
        t = total + v
        comp += np.where(np.abs(total) >= np.abs(v), (total - t) + v, (v - t) + total)
        total = t
    return total + comp, norms, eta
