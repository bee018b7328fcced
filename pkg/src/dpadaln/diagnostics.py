"""Per-example gradient-norm logs, tail summaries, clipping statistics and ECDF tables."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np

LOG_HEADER = ("step", "total_norm", "cond_norm", "other_norm", "eta")
QUANTILES = (0.50, 0.90, 0.95, 0.99)
ETA_QUANTILES = (0.10, 0.50, 0.90, 0.99)
PARTS = ("total", "cond", "other")


def percentile(values, q: float) -> float:
    """Linear-interpolation quantile at rank ``q (n - 1)`` of the sorted values."""
    v = np.sort(np.asarray(values, dtype=np.float64).reshape(-1))
    if v.size == 0:
        raise ValueError("percentile of an empty sample")
    if not 0.0 <= q <= 1.0:
        raise ValueError(f"q must lie in [0, 1], got {q}")
    rank = q * (v.size - 1)
    lo = int(math.floor(rank))
    hi = min(lo + 1, v.size - 1)
    frac = rank - lo
    if frac == 0.0:
        return float(v[lo])
    return float(v[lo] + frac * (v[hi] - v[lo]))


@dataclass(frozen=True)
class GradLog:
    """Column arrays of a gradient log; the Pythagorean identity is checked on construction."""

    step: np.ndarray
    total_norm: np.ndarray
    cond_norm: np.ndarray
    other_norm: np.ndarray
    eta: np.ndarray

    def __post_init__(self):
        cols = [np.asarray(getattr(self, k), dtype=np.float64 if k != "step" else np.int64) for k in LOG_HEADER]
        n = len(cols[0])
        if any(len(c) != n for c in cols):
            raise ValueError("gradient log columns differ in length")
        for k, c in zip(LOG_HEADER, cols):
            object.__setattr__(self, k, c)
        t, c, o = cols[1], cols[2], cols[3]
        lhs, rhs = t * t, c * c + o * o
        bad = np.abs(lhs - rhs) > 1e-9 * np.maximum(lhs, 1e-300)
        bad &= ~((lhs == 0) & (rhs == 0))
        if bad.any():
            i = int(np.flatnonzero(bad)[0])
            raise ValueError(f"record {i}: total_norm^2 != cond_norm^2 + other_norm^2")
        if n and (np.any(cols[4] <= 0) or np.any(cols[4] > 1)):
            raise ValueError("eta must lie in (0, 1]")

    def __len__(self):
        return len(self.step)

    @classmethod
    def from_records(cls, records) -> "GradLog":
        rows = list(records)
        if not rows:
            return cls(*[np.zeros(0)] * 5)
        arr = np.array([[float(getattr(r, k)) if not isinstance(r, (tuple, list)) else float(r[i])
                         for i, k in enumerate(LOG_HEADER)] for r in rows])
        return cls(arr[:, 0].astype(np.int64), arr[:, 1], arr[:, 2], arr[:, 3], arr[:, 4])

    @classmethod
    def concat(cls, logs) -> "GradLog":
        logs = list(logs)
        return cls(*[np.concatenate([getattr(g, k) for g in logs]) for k in LOG_HEADER])

    def column(self, part: str) -> np.ndarray:
        return getattr(self, f"{part}_norm")


@dataclass(frozen=True)
class GradLogRecord:
    step: int
    total_norm: float
    cond_norm: float
    other_norm: float
    eta: float


def format_log(log: GradLog) -> str:
    buf = io.StringIO()
    buf.write(",".join(LOG_HEADER) + "\n")
    for i in range(len(log)):
        buf.write(f"{int(log.step[i])},{float(log.total_norm[i])!r},{float(log.cond_norm[i])!r},"
                  f"{float(log.other_norm[i])!r},{float(log.eta[i])!r}\n")
    return buf.getvalue()


def parse_log(text: str, source: str = "<log>") -> GradLog:
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None or tuple(h.strip() for h in header) != LOG_HEADER:
        raise ValueError(f"{source}: expected header {','.join(LOG_HEADER)}")
    rows = []
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != 5:
            raise ValueError(f"{source}:{lineno}: expected 5 fields")
        try:
            rows.append((int(row[0]), *map(float, row[1:])))
        except ValueError as exc:
            raise ValueError(f"{source}:{lineno}: {exc}") from None
    return GradLog.from_records(rows)


def read_log(path: str) -> GradLog:
    with open(path) as fh:
        return parse_log(fh.read(), path)


# ------------------------------------------------------------------ summaries


@dataclass(frozen=True)
class TailSummary:
    """``values[part][q]`` for parts total/cond/other and the standard quantiles."""

    values: dict

    @classmethod
    def of(cls, log: GradLog, quantiles=QUANTILES) -> "TailSummary":
        if len(log) == 0:
            raise ValueError("empty gradient log")
        return cls({p: {q: percentile(log.column(p), q) for q in quantiles} for p in PARTS})

    def get(self, part: str, q: float) -> float:
        return self.values[part][q]


def rho_emp(aware: TailSummary, vanilla: TailSummary, which: str = "total", q: float = 0.99) -> float:
    """Ratio of the aware to the vanilla tail statistic."""
    den = vanilla.get(which, q)
    if den == 0:
        raise ZeroDivisionError(f"vanilla {which} statistic at q={q} is zero")
    return aware.get(which, q) / den


def rho_from_values(s_aware: float, s_vanilla: float) -> float:
    if s_vanilla == 0:
        raise ZeroDivisionError("vanilla statistic is zero")
    return s_aware / s_vanilla


@dataclass(frozen=True)
class ClipStats:
    p_clip: float
    eta_mean: float
    eta_quantiles: dict


def clip_stats(log: GradLog, C: float) -> ClipStats:
    if len(log) == 0:
        raise ValueError("empty gradient log")
    p = float(np.mean(log.total_norm > C))
    qs = {q: percentile(log.eta, q) for q in ETA_QUANTILES}
    return ClipStats(p, float(np.mean(log.eta)), qs)


def check_clip_threshold(log: GradLog, C: float, rtol: float = 1e-9) -> None:
    """Raise if the log was not produced with clipping threshold ``C``.

    Clipped records satisfy ``eta * total = C``; unclipped records have
    ``total <= C``. A log without clipping (``C`` infinite) has every ``eta = 1``.
    """
    if not C > 0:
        raise ValueError(f"clip threshold must be > 0, got {C}")
    clipped = log.eta < 1.0
    if math.isinf(C):
        if clipped.any():
            raise ValueError("log shows clipping but C is infinite")
        return
    implied = log.eta[clipped] * log.total_norm[clipped]
    if implied.size and np.max(np.abs(implied - C)) > rtol * C:
        raise ValueError(f"log was clipped at C = {float(np.median(implied)):.6g}, not {C:.6g}")
    if np.any(log.total_norm[~clipped] > C * (1 + rtol)):
        raise ValueError(f"log has unclipped norms above C = {C:.6g}")


def ccdf_grid(values, points: int = 200) -> np.ndarray:
    """Log-spaced grid over ``[p50 / 10, 10 max]``."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("empty sample")
    lo = percentile(v, 0.5) / 10.0
    hi = 10.0 * float(v.max())
    if not lo > 0:
        positive = v[v > 0]
        lo = float(positive.min()) / 10.0 if positive.size else 1e-12
    # keep both ends finite and normal so the logs exist
    fi = np.finfo(np.float64)
    cap = float(fi.max) / 16.0
    lo = min(max(lo, float(fi.tiny)), cap / 10.0)
    hi = min(hi, cap)
    if not hi > lo:
        hi = lo * 10.0
    return np.geomspace(lo, hi, points)


def ecdf_ccdf_export(values, grid_points) -> np.ndarray:
    """Rows ``(t, ECDF(t), CCDF(t))``; ``CCDF`` is computed as ``1 - ECDF`` so they sum to 1."""
    v = np.sort(np.asarray(values, dtype=np.float64).reshape(-1))
    if v.size == 0:
        raise ValueError("empty sample")
    t = np.asarray(grid_points, dtype=np.float64).reshape(-1)
    counts = np.searchsorted(v, t, side="right")
    ecdf = counts / v.size
    ccdf = (v.size - counts) / v.size
    return np.column_stack([t, ecdf, ccdf])


def format_ecdf(table) -> str:
    lines = ["t,ecdf,ccdf"]
    lines += [f"{float(t)!r},{float(e)!r},{float(c)!r}" for t, e, c in table]
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------- reports


TAIL_COLUMNS = ("S_other", "S_cond", "S_total", "rho_emp", "rho_cond")


def tail_table(rows) -> str:
    """Rows of ``(label, q, S_other, S_cond, S_total, rho_emp, rho_cond)``; ``None`` prints as ``-``."""
    out = ["label,q," + ",".join(TAIL_COLUMNS)]
    for label, q, *vals in rows:
        cells = ["-" if v is None else f"{v:.6g}" for v in vals]
        out.append(f"{label},p{round(q * 100):d}," + ",".join(cells))
    return "\n".join(out) + "\n"


def tail_rows(vanilla: TailSummary, aware: TailSummary, qs=(0.95, 0.99)):
    rows = []
    for q in qs:
        rows.append(("dp_vanilla", q, vanilla.get("other", q), vanilla.get("cond", q), vanilla.get("total", q),
                     None, None))
        rows.append(("dp_aware", q, aware.get("other", q), aware.get("cond", q), aware.get("total", q),
                     rho_emp(aware, vanilla, "total", q), rho_emp(aware, vanilla, "cond", q)))
    return rows


CLIP_COLUMNS = ("p_clip", "E_eta", "eta_p10", "eta_p50", "eta_p90", "eta_p99")


def clip_table(rows) -> str:
    """Rows of ``(label, ClipStats)``."""
    out = ["label," + ",".join(CLIP_COLUMNS)]
    for label, s in rows:
        vals = [s.p_clip, s.eta_mean] + [s.eta_quantiles[q] for q in ETA_QUANTILES]
        out.append(label + "," + ",".join(f"{v:.6g}" for v in vals))
    return "\n".join(out) + "\n"


def summary_text(summary: TailSummary, title: str) -> str:
    lines = [f"[{title}]"]
    for p in PARTS:
        lines.append(f"{p} = " + ", ".join(f"p{round(q * 100)}:{v!r}" for q, v in summary.values[p].items()))
    return "\n".join(lines) + "\n"


def compare_report(vanilla: GradLog, aware: GradLog, C: float) -> str:
    """Tail and clipping comparison of two matched runs."""
    sv, sa = TailSummary.of(vanilla), TailSummary.of(aware)
    parts = [
        "# gradient tail comparison",
        f"clip_C = {C!r}",
        f"records = {len(vanilla)} (vanilla), {len(aware)} (aware)",
        "quantile = linear interpolation at rank q(n-1)",
        "",
        "[tails]",
        tail_table(tail_rows(sv, sa)),
        "[clipping]",
        clip_table([("dp_vanilla", clip_stats(vanilla, C)), ("dp_aware", clip_stats(aware, C))]),
        summary_text(sv, "summary.vanilla"),
        summary_text(sa, "summary.aware"),
    ]
    return "\n".join(parts)
