"""Point, distributional and spectral metrics between generated and reference values."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

SMOOTHING = 1e-12
BINS = 50
MAPE_FLOOR = 1e-6


def _masked(pred, target, mask):
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"pred shape {pred.shape} differs from target shape {target.shape}")
    sel = np.ones(pred.shape, dtype=bool) if mask is None else np.broadcast_to(np.asarray(mask, dtype=bool), pred.shape)
    if not sel.any():
        raise ValueError("no masked positions to evaluate")
    return pred[sel], target[sel]


def point_metrics(pred, target, mask=None) -> dict:
    """RMSE, MAE, MAPE (targets with magnitude below 1e-6 skipped) and R^2 over ``mask``."""
    p, t = _masked(pred, target, mask)
    err = p - t
    keep = np.abs(t) >= MAPE_FLOOR
    mape = float(np.mean(np.abs(err[keep]) / np.abs(t[keep]))) if keep.any() else float("nan")
    sst = float(((t - t.mean()) ** 2).sum())
    sse = float((err * err).sum())
    r2 = 1.0 - sse / sst if sst > 0 else (1.0 if sse == 0 else float("-inf"))
    return {"rmse": float(np.sqrt(np.mean(err * err))), "mae": float(np.mean(np.abs(err))),
            "mape": mape, "r2": r2}


def _samples(x, name):
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if x.size == 0:
        raise ValueError(f"{name} is empty")
    return x


def histograms(p_samples, q_samples, bins: int = BINS):
    """Normalized, smoothed histograms on shared equal-width edges over the union range."""
    p, q = _samples(p_samples, "p_samples"), _samples(q_samples, "q_samples")
    lo, hi = min(p.min(), q.min()), max(p.max(), q.max())
    if hi == lo:
        hi = lo + 1.0
    edges = np.linspace(lo, hi, bins + 1)
    hp = np.histogram(p, edges)[0] + SMOOTHING
    hq = np.histogram(q, edges)[0] + SMOOTHING
    return hp / hp.sum(), hq / hq.sum()


def kl(p, q) -> float:
    p, q = np.asarray(p, dtype=np.float64), np.asarray(q, dtype=np.float64)
    return float(np.sum(p * (np.log(p) - np.log(q))))


def js(p, q) -> float:
    m = 0.5 * (np.asarray(p) + np.asarray(q))
    return 0.5 * kl(p, m) + 0.5 * kl(q, m)


def hist_divergences(p_samples, q_samples, bins: int = BINS) -> dict:
    hp, hq = histograms(p_samples, q_samples, bins)
    return {"kl": max(kl(hp, hq), 0.0), "js": max(js(hp, hq), 0.0)}


def ws_ks(p_samples, q_samples) -> dict:
    """Wasserstein-1 as the integral of ``|F_p - F_q|`` and the largest ECDF gap."""
    p, q = np.sort(_samples(p_samples, "p_samples")), np.sort(_samples(q_samples, "q_samples"))
    grid = np.concatenate([p, q])
    grid.sort(kind="mergesort")
    Fp = np.searchsorted(p, grid, side="right") / p.size
    Fq = np.searchsorted(q, grid, side="right") / q.size
    gap = np.abs(Fp - Fq)
    ws = float(np.sum(gap[:-1] * np.diff(grid)))
    return {"ws": ws, "ks": float(gap.max())}


def _as_points(x, name):
    x = np.asarray(x, dtype=np.float64)
    x = x.reshape(-1, 1) if x.ndim <= 1 else x.reshape(len(x), -1)
    if len(x) < 2:
        raise ValueError(f"{name} needs at least 2 samples for the unbiased estimator")
    return x


def _sqdist(a, b):
    d = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * a @ b.T
    return np.maximum(d, 0.0)


def median_bandwidth(x, y) -> float:
    z = np.concatenate([_as_points(x, "x"), _as_points(y, "y")])
    d = np.sqrt(_sqdist(z, z)[np.triu_indices(len(z), 1)])
    med = float(np.median(d))
    return med if med > 0 else 1.0


def mmd_rbf(x_samples, y_samples, bandwidth: float | None = None) -> float:
    """Square root of the unbiased MMD^2 with a Gaussian kernel (clamped at 0)."""
    x, y = _as_points(x_samples, "x_samples"), _as_points(y_samples, "y_samples")
    if bandwidth is None:
        bandwidth = median_bandwidth(x, y)
    if not bandwidth > 0:
        raise ValueError("bandwidth must be > 0")
    if math.isinf(bandwidth):
        return 0.0
    g = -1.0 / (2.0 * bandwidth * bandwidth)
    kxx, kyy, kxy = np.exp(g * _sqdist(x, x)), np.exp(g * _sqdist(y, y)), np.exp(g * _sqdist(x, y))
    n, m = len(x), len(y)
    sxx = (kxx.sum() - np.trace(kxx)) / (n * (n - 1))
    syy = (kyy.sum() - np.trace(kyy)) / (m * (m - 1))
    mmd2 = sxx + syy - 2.0 * kxy.mean()
    return float(math.sqrt(max(mmd2, 0.0)))


def periodogram(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    power = np.abs(np.fft.fft(x)) ** 2
    total = power.sum()
    return power / total if total > 0 else np.full(x.size, 1.0 / x.size)


def spectral_distance(pred_window, target_window) -> float:
    """Mean squared difference of normalized periodograms."""
    a, b = np.asarray(pred_window).reshape(-1), np.asarray(target_window).reshape(-1)
    if a.size != b.size:
        raise ValueError(f"length mismatch: {a.size} vs {b.size}")
    if a.size < 4:
        raise ValueError("spectral distance needs at least 4 points")
    d = periodogram(a) - periodogram(b)
    return float(np.mean(d * d))


@dataclass(frozen=True)
class MetricReport:
    point: dict
    dist: dict
    temporal: dict

    def rows(self):
        for group in ("point", "dist", "temporal"):
            for k, v in getattr(self, group).items():
                yield group, k, v

    def to_text(self, header: str = "") -> str:
        lines = ([header] if header else []) + ["[metrics]"]
        lines += [f"{g}_{k} = {v!r}" for g, k, v in self.rows()]
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        names = [f"{g}_{k}" for g, k, _ in self.rows()]
        vals = [repr(float(v)) for _, _, v in self.rows()]
        return ",".join(names) + "\n" + ",".join(vals) + "\n"


def evaluate_windows(pred, target, mask) -> MetricReport:
    """Metrics over masked entries of ``(N, L)`` windows; divergences pool all masked values."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    point = point_metrics(pred, target, mask)
    p, t = pred[mask], target[mask]
    dist = {**hist_divergences(p, t), **ws_ks(p, t)}
    dist["mmd"] = mmd_rbf(p, t) if min(p.size, t.size) >= 2 else 0.0
    spectral = float(np.mean([spectral_distance(a, b) for a, b in zip(pred.reshape(len(pred), -1),
                                                                  target.reshape(len(target), -1))]))
    return MetricReport(point, dist, {"spectral_dist": spectral})
