"""Windows, normalization, task masks, CSV ingestion and a synthetic generator.

Mask bits use 1 for an observed time step and 0 for a step to be generated.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .rng import CounterRNG

MASK_KINDS = ("random", "block", "stride")


@dataclass(frozen=True)
class MaskSpec:
    bits: np.ndarray
    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        bits = np.asarray(self.bits, dtype=np.int8)
        if bits.ndim != 1 or not np.isin(bits, (0, 1)).all():
            raise ValueError("mask bits must be a 0/1 vector")
        n_obs = int(bits.sum())
        if n_obs == 0 or n_obs == bits.size:
            raise ValueError(f"{self.kind} mask needs at least one observed and one masked step")
        if self.kind not in MASK_KINDS:
            raise ValueError(f"unknown mask kind {self.kind!r}")
        object.__setattr__(self, "bits", bits)

    @property
    def L(self) -> int:
        return self.bits.size

    @property
    def masked(self) -> np.ndarray:
        return 1 - self.bits

    @property
    def n_masked(self) -> int:
        return int(self.L - self.bits.sum())


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def random_mask(L: int, ratio: float, rng: CounterRNG) -> MaskSpec:
    """Mask ``round(ratio * L)`` steps chosen uniformly without replacement."""
    n = _round_half_up(ratio * L)
    if n <= 0 or n >= L:
        raise ValueError(f"ratio {ratio} masks {n} of {L} steps")
    bits = np.ones(L, dtype=np.int8)
    bits[rng.choice_without_replacement(L, n)] = 0
    return MaskSpec(bits, "random", {"ratio": float(ratio)})


def block_mask(L: int, pred_len: int) -> MaskSpec:
    """Mask the last ``pred_len`` steps."""
    if not 1 <= pred_len < L:
        raise ValueError(f"pred_len must be in [1, {L}), got {pred_len}")
    bits = np.ones(L, dtype=np.int8)
    bits[L - pred_len:] = 0
    return MaskSpec(bits, "block", {"pred_len": int(pred_len)})


def stride_intervals(L: int, num_blocks: int, phase: int) -> list[tuple[int, int]]:
    length, stride = L // (2 * num_blocks), L // num_blocks
    return [(phase + j * stride, phase + j * stride + length) for j in range(num_blocks)]


def _phase_range(L: int, num_blocks: int) -> tuple[int, int]:
    if num_blocks < 1 or 2 * num_blocks > L:
        raise ValueError(f"{num_blocks} blocks do not fit in a window of {L}")
    slack = L // num_blocks - L // (2 * num_blocks)
    return (1, slack - 1) if slack >= 2 else (0, slack)


def _stride_spec(L: int, num_blocks: int, phase: int) -> MaskSpec:
    bits = np.ones(L, dtype=np.int8)
    for a, b in stride_intervals(L, num_blocks, phase):
        bits[a:b] = 0
    return MaskSpec(bits, "stride", {"num_blocks": int(num_blocks), "phase": int(phase)})


def stride_mask(L: int, num_blocks: int, rng: CounterRNG) -> MaskSpec:
    """``num_blocks`` equal intervals of length ``L // (2 num_blocks)`` every ``L // num_blocks`` steps.

    The phase is drawn so blocks sit away from the window edges when the slack
    allows it.
    """
    lo, hi = _phase_range(L, num_blocks)
    return _stride_spec(L, num_blocks, lo + rng.integers(hi - lo + 1))


@dataclass(frozen=True)
class MaskRanges:
    ratio: tuple[float, float] = (0.1, 0.5)
    pred_len: tuple[int, int] = (24, 96)
    num_blocks: tuple[int, int] = (4, 8)
    kinds: tuple[str, ...] = MASK_KINDS

    @classmethod
    def desk(cls) -> "MaskRanges":
        return cls(pred_len=(3, 13), num_blocks=(2, 4))

    @classmethod
    def paper(cls) -> "MaskRanges":
        return cls()


def sample_mask(L: int, ranges: MaskRanges, rng: CounterRNG, kind: str | None = None) -> MaskSpec:
    """Draw a task mask; always consumes the same number of counters."""
    u_kind, u_param, u_extra = rng.uniform(3)
    if kind is None:
        kind = ranges.kinds[min(int(u_kind * len(ranges.kinds)), len(ranges.kinds) - 1)]
    if kind == "random":
        lo, hi = ranges.ratio
        return random_mask(L, lo + (hi - lo) * u_param, rng)
    if kind == "block":
        lo, hi = ranges.pred_len
        return block_mask(L, lo + min(int(u_param * (hi - lo + 1)), hi - lo))
    lo, hi = ranges.num_blocks
    nb = lo + min(int(u_param * (hi - lo + 1)), hi - lo)
    a, b = _phase_range(L, nb)
    return _stride_spec(L, nb, a + min(int(u_extra * (b - a + 1)), b - a))


# ------------------------------------------------------------------ windows


@dataclass(frozen=True)
class SeriesWindow:
    values: np.ndarray
    channel_names: tuple[str, ...]
    origin: int


def window_offsets(n: int, L: int, stride: int) -> np.ndarray:
    if n < L:
        raise ValueError(f"series of length {n} is shorter than the window {L}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    return np.arange(0, (n - L) // stride * stride + 1, stride)


def window_dataset(series, L: int, stride: int, channel_names=None) -> list[SeriesWindow]:
    series = np.asarray(series, dtype=np.float64)
    if series.ndim == 1:
        series = series[:, None]
    names = tuple(channel_names) if channel_names is not None else tuple(f"ch{i}" for i in range(series.shape[1]))
    return [SeriesWindow(series[o:o + L].copy(), names, int(o)) for o in window_offsets(len(series), L, stride)]


def stack_windows(windows) -> np.ndarray:
    return np.stack([w.values for w in windows])


# ------------------------------------------------------------ normalization


@dataclass(frozen=True)
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        if np.any(~(np.asarray(self.std) > 0)):
            bad = np.flatnonzero(~(np.asarray(self.std) > 0)).tolist()
            raise ValueError(f"degenerate channels with zero spread: {bad}")

    @classmethod
    def fit(cls, train) -> "NormStats":
        train = np.asarray(train, dtype=np.float64)
        return cls(train.mean(axis=0), train.std(axis=0))

    def normalize(self, x) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.std

    def denormalize(self, z) -> np.ndarray:
        return np.asarray(z, dtype=np.float64) * self.std + self.mean


# ---------------------------------------------------------------- ingestion


def load_csv(path: str) -> tuple[np.ndarray, tuple[str, ...]]:
    """Read a comma-separated file whose first column is a timestamp."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty file") from None
        if len(header) < 2:
            raise ValueError(f"{path}: need a timestamp column and at least one channel")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ValueError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                rows.append([float(v) for v in row[1:]])
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
    if not rows:
        raise ValueError(f"{path}: no data rows")
    values = np.array(rows)
    if not np.isfinite(values).all():
        raise ValueError(f"{path}: non-finite values")
    return values, tuple(header[1:])


def chronological_split(series, fractions=(0.7, 0.15, 0.15)):
    """Split rows in time order into train/validation/test parts."""
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise ValueError(f"fractions must be three non-negative numbers summing to 1, got {fractions}")
    n = len(series)
    a = int(round(n * fractions[0]))
    b = a + int(round(n * fractions[1]))
    return series[:a], series[a:b], series[b:]


def month_split(series, rows_per_month: int, months=(12, 4, 4)):
    """Split by whole months of rows (e.g. 720 rows per month for hourly data)."""
    cuts = np.cumsum([m * rows_per_month for m in months])
    if cuts[-1] > len(series):
        raise ValueError(f"series has {len(series)} rows, split needs {int(cuts[-1])}")
    return series[:cuts[0]], series[cuts[0]:cuts[1]], series[cuts[1]:cuts[2]]


# ---------------------------------------------------------------- synthetic


def synth_series(n: int, K: int, rare_event_prob: float, rare_scale: float, rng: CounterRNG,
                 period: int = 24, region: int = 24, burst_len: int = 4, ar: float = 0.8,
                 noise: float = 0.3, offset: float = 5.0) -> np.ndarray:
    """Seasonal target plus AR(1) covariates with rare large bursts.

    Channel 0 is ``offset + sin(2 pi t / period) + AR(1)`` noise. Each of the
    other channels is an AR(1) process with unit marginal std. Every region of
    ``region`` steps, with probability ``rare_event_prob``, one covariate gets a
    burst of height ``rare_scale`` (in units of its std) over ``burst_len``
    steps. The target responds weakly to covariates, so they carry signal.
    """
    if not 0.0 <= rare_event_prob <= 0.1:
        raise ValueError("rare_event_prob must lie in [0, 0.1]")
    if rare_scale < 1:
        raise ValueError("rare_scale must be >= 1")
    if K < 1 or n < 1:
        raise ValueError("need n >= 1 and K >= 1")
    z = rng.normal((n, K))
    innov = math.sqrt(1.0 - ar * ar)
    out = np.empty((n, K))
    state = z[0].copy()
    out[0] = state
    for i in range(1, n):
        state = ar * state + innov * z[i]
        out[i] = state
    n_regions = -(-n // region)
    u = rng.uniform((n_regions, 3))
    if K > 1:
        for r in range(n_regions):
            if u[r, 0] < rare_event_prob:
                ch = 1 + min(int(u[r, 1] * (K - 1)), K - 2)
                start = r * region + min(int(u[r, 2] * region), region - 1)
                out[start:start + burst_len, ch] += rare_scale
    t = np.arange(n)
    cov = out[:, 1:].mean(axis=1) if K > 1 else 0.0
    out[:, 0] = offset + np.sin(2 * np.pi * t / period) + noise * out[:, 0] + 0.2 * cov
    return out
