"""Training runs: data preparation, the DP-SGD loop, logging and artifacts.

Every random choice comes from a counter stream keyed by the run seed and a
purpose (data order, masks, timesteps, diffusion noise, DP noise). None of the
draws depend on the network, so a vanilla and an aware run with the same seed
consume identical streams step by step.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Graph, GradientVector
from .config import RunConfig
from .data import (MaskRanges, NormStats, chronological_split, load_csv, month_split, sample_mask,
                   stack_windows, synth_series, window_dataset)
from .diagnostics import GradLog, TailSummary, clip_stats, clip_table, format_log, percentile, summary_text
from .diffusion import build_schedule, training_inputs
from .dp import NonFiniteUpdateError, OptimState, optimizer_step, privatize_flat
from .model import BoundConfig, DiffusionTransformer, _atomic_write, encode_checkpoint
from .rng import (STREAM_DATA, STREAM_DIFFUSION, STREAM_DP, STREAM_MASK, STREAM_PROBE, STREAM_SERIES,
                  STREAM_TIME, CounterRNG)

STREAM_NAMES = ("data", "mask", "time", "diffusion", "dp")


@dataclass
class Dataset:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    stats: NormStats
    channel_names: tuple


def build_dataset(cfg: RunConfig) -> Dataset:
    d, m = cfg.data, cfg.model
    if d.source == "csv":
        series, names = load_csv(d.csv_path)
        if series.shape[1] != m.channels:
            raise ValueError(f"{d.csv_path}: {series.shape[1]} channels but model.channels = {m.channels}")
    else:
        series = synth_series(d.length, m.channels, d.rare_event_prob, d.rare_scale,
                              CounterRNG(cfg.seed, STREAM_SERIES))
        names = ("target",) + tuple(f"cov{i}" for i in range(1, m.channels))
    if d.split == "months":
        parts = month_split(series, d.rows_per_month)
    else:
        parts = chronological_split(series, cfg.split_fractions())
    stats = NormStats.fit(parts[0])
    L = m.seq_len
    windows = []
    for part, stride in zip(parts, (d.stride, L, L)):
        if len(part) < L:
            raise ValueError(f"a data split has {len(part)} rows, shorter than the window {L}")
        windows.append(stack_windows(window_dataset(stats.normalize(part), L, stride, names)))
    return Dataset(windows[0], windows[1], windows[2], stats, tuple(names))


@dataclass
class Batch:
    idx: np.ndarray
    bits: np.ndarray
    t: np.ndarray
    eps: np.ndarray


def draw_batch(n_windows: int, B: int, L: int, K: int, T: int, ranges: MaskRanges,
               data_rng, mask_rng, time_rng, diff_rng) -> Batch:
    idx = data_rng.integers(n_windows, B)
    bits = np.stack([sample_mask(L, ranges, mask_rng).bits for _ in range(B)])
    t = time_rng.integers(T, B)
    eps = diff_rng.normal((B, L, K))
    return Batch(idx, bits, t, eps)


def fixed_batch(windows: np.ndarray, size: int, cfg: RunConfig, rng: CounterRNG) -> Batch:
    m = cfg.model
    return draw_batch(len(windows), size, m.seq_len, m.channels, cfg.train.diffusion_steps, cfg.masks,
                      rng, rng, rng, rng)


@dataclass
class RunResult:
    config: RunConfig
    params: dict
    ema: dict
    log: GradLog
    train_loss: np.ndarray
    val_curve: list
    final_train_loss: float
    final_train_loss_ema: float
    positions: list
    rejected: int
    magnitudes: dict = field(default_factory=dict)
    norm_stats: NormStats | None = None


def batch_loss(model: DiffusionTransformer, params: dict, x0, batch: Batch, sched) -> float:
    inputs = training_inputs(x0[batch.idx], batch.bits, batch.t, batch.eps, sched, model.config)
    return float(np.mean(model.evaluate(inputs, params)["loss"]))


def modulation_magnitudes(model: DiffusionTransformer, params: dict, inputs: dict) -> dict:
    out = model.evaluate(inputs, params)
    c = out["c"].reshape(len(out["c"]), -1)
    mags = {"c_norm": np.linalg.norm(c, axis=1)}
    for part in ("gamma", "beta", "alpha"):
        mags[part] = np.concatenate([np.abs(out[f"block{i}.{part}"]).reshape(-1)
                                     for i in range(model.config.depth)])
    return mags


def train(cfg: RunConfig, dataset: Dataset | None = None, progress=None) -> RunResult:
    """Run the configured training and return parameters, logs and summaries."""
    data = dataset if dataset is not None else build_dataset(cfg)
    mcfg, tcfg = cfg.model, cfg.train
    dp = cfg.effective_dp()
    model = DiffusionTransformer.create(mcfg, cfg.effective_bounds(), cfg.seed)
    sched = build_schedule(tcfg.diffusion_steps, tcfg.beta_start, tcfg.beta_end)
    params = {k: v.copy() for k, v in model.params.items()}
    state = OptimState.create(params, cfg.optim.lr, cfg.optim.weight_decay, cfg.optim.warmup, cfg.optim.ema_decay)
    part = model.partition
    cond_names = [n for n in params if n in part.cond_ids]
    other_names = [n for n in params if n in part.other_ids]
    streams = [CounterRNG(cfg.seed, s) for s in (STREAM_DATA, STREAM_MASK, STREAM_TIME, STREAM_DIFFUSION, STREAM_DP)]
    data_rng, mask_rng, time_rng, diff_rng, dp_rng = streams
    probe_rng = CounterRNG(cfg.seed, STREAM_PROBE)
    probe = fixed_batch(data.train, tcfg.probe_size, cfg, probe_rng)
    val = fixed_batch(data.val, tcfg.val_size, cfg, probe_rng)
    B, L, K = dp.batch_B, mcfg.seq_len, mcfg.channels
    shapes = {"tokens": (None, L, K + 1), "feat": (None, 1, mcfg.n_features)}

    cols = {k: [] for k in ("step", "total", "cond", "other", "eta")}
    losses, val_curve, positions = [], [], []
    rejected = 0
    for step in range(1, tcfg.steps + 1):
        batch = draw_batch(len(data.train), B, L, K, sched.T, cfg.masks, data_rng, mask_rng, time_rng, diff_rng)
        inputs = training_inputs(data.train[batch.idx], batch.bits, batch.t, batch.eps, sched, mcfg)
        ex_loss, grads, _ = ad.per_example_gradients(Graph(model.apply, params, shapes), inputs, B)
        priv = privatize_flat(grads.flatten(), dp, dp_rng)
        try:
            params = optimizer_step(params, GradientVector.unflatten(priv.update, {k: v.shape for k, v in params.items()}),
                                    state)
        except NonFiniteUpdateError:
            rejected += 1
        positions.append(tuple(s.position for s in streams))
        losses.append(float(ex_loss.mean()))
        if (step - 1) % tcfg.log_every == 0:
            csq = _group_sq(grads, cond_names, B)
            osq = _group_sq(grads, other_names, B)
            cols["step"].append(np.full(B, step))
            cols["total"].append(priv.norms)
            cols["cond"].append(np.sqrt(csq))
            cols["other"].append(np.sqrt(osq))
            cols["eta"].append(priv.eta)
        if step % tcfg.val_every == 0 or step == tcfg.steps:
            val_curve.append((step, batch_loss(model, state.ema, data.val, val, sched)))
        if progress is not None:
            progress(step, losses[-1])

    log = GradLog(*[np.concatenate(cols[k]) for k in ("step", "total", "cond", "other", "eta")])
    probe_inputs = training_inputs(data.train[probe.idx], probe.bits, probe.t, probe.eps, sched, mcfg)
    return RunResult(
        config=cfg, params=params, ema=dict(state.ema), log=log, train_loss=np.array(losses),
        val_curve=val_curve,
        final_train_loss=float(np.mean(model.evaluate(probe_inputs, params)["loss"])),
        final_train_loss_ema=float(np.mean(model.evaluate(probe_inputs, state.ema)["loss"])),
        positions=positions, rejected=rejected,
        magnitudes=modulation_magnitudes(model, params, probe_inputs),
        norm_stats=data.stats,
    )


def _group_sq(grads: GradientVector, names, B):
    out = np.zeros(B)
    for n in names:
        a = grads.arrays[n].reshape(B, -1)
        out += np.einsum("bp,bp->b", a, a)
    return out


# ------------------------------------------------------------------ artifacts


@dataclass(frozen=True)
class RunArtifacts:
    checkpoint: str
    grad_log: str
    report: str
    bound_report: str
    config: str


def training_report(res: RunResult) -> str:
    cfg = res.config
    dp = cfg.effective_dp()
    n = len(res.train_loss)
    tail = res.train_loss[max(0, n - max(1, n // 10)):]
    lines = [
        "# training report",
        f"mode = {cfg.mode}",
        f"profile = {cfg.profile}",
        f"seed = {cfg.seed}",
        f"steps = {n}",
        f"bounds = {'on' if cfg.effective_bounds() is not None else 'off'}",
        f"clip_C = {dp.clip_C!r}",
        f"noise_sigma = {dp.noise_sigma!r}",
        f"rejected_steps = {res.rejected}",
        "",
        "[loss]",
        f"final_train_loss = {res.final_train_loss!r}",
        f"final_train_loss_ema = {res.final_train_loss_ema!r}",
        f"last_tenth_batch_loss = {float(np.mean(tail))!r}",
        "",
        "[validation]",
        "step,loss_ema",
    ]
    lines += [f"{s},{v!r}" for s, v in res.val_curve]
    lines += ["", "[streams]"]
    final = res.positions[-1] if res.positions else (0,) * len(STREAM_NAMES)
    lines += [f"{name} = {pos}" for name, pos in zip(STREAM_NAMES, final)]
    lines.append("")
    lines.append(summary_text(TailSummary.of(res.log), "tails"))
    C = dp.clip_C
    lines.append("[clipping]")
    lines.append(clip_table([(cfg.mode, clip_stats(res.log, C))]))
    return "\n".join(lines)


def magnitude_report(res: RunResult) -> str:
    cfg = res.config
    b = cfg.scaled_bounds
    active = cfg.effective_bounds() is not None
    lines = ["# conditioning magnitudes", f"bounds = {'on' if active else 'off'}",
             f"operator = {b.operator}"]
    limits = {"c_norm": b.c_max, "gamma": b.gamma_max, "beta": b.beta_max, "alpha": b.alpha_max}
    lines.append("quantity,limit,p50,p99,max,frac_at_90pct_limit")
    for k, v in res.magnitudes.items():
        lim = limits[k]
        frac = float(np.mean(v >= 0.9 * lim)) if math.isfinite(lim) else 0.0
        lines.append(f"{k},{lim!r},{percentile(v, 0.5)!r},{percentile(v, 0.99)!r},{float(v.max())!r},{frac!r}")
    return "\n".join(lines) + "\n"


def nice_ceil(x: float) -> float:
    """Smallest value on the 1-2-5 ladder (times a power of ten) that is >= ``x``."""
    if not x > 0:
        raise ValueError(f"need a positive value, got {x}")
    e = math.floor(math.log10(x))
    for k in (e - 1, e, e + 1):
        for m in (1.0, 2.0, 5.0):
            v = m * 10.0 ** k
            if v >= x * (1 - 1e-12):
                return v
    return 10.0 ** (e + 1)


def calibrate_bounds(res: RunResult, q: float = 0.99, operator: str = "tanh"):
    """Base limits from the ``q``-quantile of an unbounded run's magnitudes, rounded up."""
    ref = {k: percentile(v, q) for k, v in res.magnitudes.items()}
    return BoundConfig(nice_ceil(ref["c_norm"]), nice_ceil(ref["gamma"]), nice_ceil(ref["beta"]),
                       nice_ceil(ref["alpha"]), operator=operator), ref


def write_artifacts(res: RunResult, out_dir: str) -> RunArtifacts:
    os.makedirs(out_dir, exist_ok=True)
    cfg = res.config
    paths = RunArtifacts(*(os.path.join(out_dir, f) for f in
                           ("checkpoint.bin", "grad_log.csv", "report.txt", "bounds.txt", "config.ini")))
    extra = {
        "config": cfg.to_ini(),
        "steps": len(res.train_loss),
        "norm_mean": [float(x) for x in res.norm_stats.mean],
        "norm_std": [float(x) for x in res.norm_stats.std],
    }
    _atomic_write(paths.checkpoint, encode_checkpoint(res.params, cfg.model, cfg.effective_bounds(), extra, res.ema))
    _atomic_write(paths.grad_log, format_log(res.log).encode())
    _atomic_write(paths.report, training_report(res).encode())
    _atomic_write(paths.bound_report, magnitude_report(res).encode())
    _atomic_write(paths.config, cfg.to_ini().encode())
    return paths
