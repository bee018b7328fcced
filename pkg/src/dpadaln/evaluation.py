"""Conditional generation on test windows and metric computation."""

from __future__ import annotations

import numpy as np

from .config import RunConfig
from .data import sample_mask
from .diffusion import build_schedule, sample_conditional
from .metrics import MetricReport, evaluate_windows
from .model import DiffusionTransformer, load_checkpoint
from .rng import STREAM_EVAL, STREAM_SAMPLE, CounterRNG
from .training import build_dataset

TASKS = ("interpolation", "forecasting")


def task_masks(task: str, n: int, cfg: RunConfig, rng: CounterRNG) -> np.ndarray:
    """Forecasting uses block masks; interpolation alternates random and stride masks."""
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}; choose from {', '.join(TASKS)}")
    L = cfg.model.seq_len
    kinds = ("block",) if task == "forecasting" else ("random", "stride")
    return np.stack([sample_mask(L, cfg.masks, rng, kinds[i % len(kinds)]).bits for i in range(n)])


def load_model(path: str, cfg: RunConfig | None = None, use_ema: bool = True):
    ck = load_checkpoint(path)
    saved = RunConfig.from_ini(ck["extra"]["config"])
    if cfg is not None and cfg.model != saved.model:
        raise ValueError(f"{path}: checkpoint model {saved.model} does not match config model {cfg.model}")
    params = ck["ema"] if use_ema and ck["ema"] else ck["params"]
    model = DiffusionTransformer(ck["config"], ck["bounds"], params)
    return model, saved, ck


def evaluate_model(model, cfg: RunConfig, task: str, windows: np.ndarray, stats, seed: int,
                   max_windows: int | None = None, bits: np.ndarray | None = None) -> MetricReport:
    """Sample masked steps for each window and score channel 0 in original units."""
    if max_windows is not None:
        windows = windows[:max_windows]
    if len(windows) == 0:
        raise ValueError("no test windows")
    if bits is None:
        bits = task_masks(task, len(windows), cfg, CounterRNG(seed, STREAM_EVAL))
    bits = np.asarray(bits)
    if np.any(bits.sum(axis=1) == bits.shape[1]):
        raise ValueError("a mask has no masked positions; nothing to evaluate")
    tc = cfg.train
    sched = build_schedule(tc.diffusion_steps, tc.beta_start, tc.beta_end)
    gen = sample_conditional(model, windows, bits, sched, CounterRNG(seed, STREAM_SAMPLE), cfg.model)
    pred = stats.denormalize(gen)[..., 0]
    true = stats.denormalize(windows)[..., 0]
    return evaluate_windows(pred, true, bits == 0)


def evaluate_checkpoint(path: str, task: str, cfg: RunConfig | None = None, seed: int = 0,
                        max_windows: int | None = None) -> tuple[MetricReport, RunConfig]:
    model, saved, _ = load_model(path, cfg)
    run_cfg = cfg if cfg is not None else saved
    data = build_dataset(run_cfg)
    return evaluate_model(model, run_cfg, task, data.test, data.stats, seed, max_windows), run_cfg
