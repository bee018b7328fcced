"""Command-line entry point: train, diagnose, evaluate, ablate, bounds."""

from __future__ import annotations

import argparse
import math
import os
import sys
import time

import numpy as np

from .config import ConfigError, load_config
from .diagnostics import (PARTS, ccdf_grid, check_clip_threshold, compare_report, ecdf_ccdf_export,
                          format_ecdf, read_log)
from .model import _atomic_write


class CLIError(Exception):
    pass


def _overrides(pairs) -> dict:
    out = {}
    for item in pairs or ():
        if "=" not in item:
            raise CLIError(f"--set expects section.key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _config(args):
    return load_config(args.config, _overrides(args.set), args.profile)


def _write(path: str, text: str) -> None:
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)
    _atomic_write(path, text.encode())


def _say(args, msg: str) -> None:
    if not args.quiet:
        print(msg, file=sys.stderr)


# ----------------------------------------------------------------- commands


def cmd_train(args) -> int:
    from .training import train, write_artifacts

    cfg = _config(args)
    every = max(1, cfg.train.steps // 20)
    t0 = time.time()

    def progress(step, loss):
        if step % every == 0 or step == cfg.train.steps:
            _say(args, f"step {step}/{cfg.train.steps} loss {loss:.5f} ({time.time() - t0:.0f}s)")

    res = train(cfg, progress=progress)
    paths = write_artifacts(res, args.out)
    print(f"final_train_loss = {res.final_train_loss!r}")
    for name, p in zip(paths.__dataclass_fields__, paths.__dict__.values()):
        print(f"{name}: {p}")
    return 0


def cmd_diagnose(args) -> int:
    if not args.clip_C > 0:
        raise CLIError("--clip-C must be > 0")
    logs = {}
    for name, path in (("vanilla", args.vanilla), ("aware", args.aware)):
        try:
            logs[name] = read_log(path)
        except OSError as exc:
            raise CLIError(f"{path}: {exc.strerror}") from None
        try:
            check_clip_threshold(logs[name], args.clip_C)
        except ValueError as exc:
            raise CLIError(f"{path}: {exc}") from None
    report = compare_report(logs["vanilla"], logs["aware"], args.clip_C)
    os.makedirs(args.out, exist_ok=True)
    _write(os.path.join(args.out, "diagnostics.txt"), report)
    for part in PARTS:
        pooled = np.concatenate([logs[n].column(part) for n in logs])
        grid = ccdf_grid(pooled, args.grid_points)
        for name, log in logs.items():
            _write(os.path.join(args.out, f"ecdf_{name}_{part}.csv"),
                   format_ecdf(ecdf_ccdf_export(log.column(part), grid)))
    print(report)
    return 0


def cmd_evaluate(args) -> int:
    from .evaluation import TASKS, evaluate_checkpoint

    cfg = _config(args) if (args.config or args.set) else None
    if args.task not in TASKS:
        raise CLIError(f"unknown task {args.task!r}")
    if not os.path.exists(args.checkpoint):
        raise CLIError(f"{args.checkpoint}: no such file")
    rep, _ = evaluate_checkpoint(args.checkpoint, args.task, cfg, args.seed, args.windows)
    text = rep.to_text(f"# evaluation: {args.task}")
    if args.out:
        _write(args.out, text)
    print(text, end="")
    return 0


def cmd_ablate(args) -> int:
    from .experiments import ablate, ablation_table

    cfg = _config(args)
    rows = ablate(cfg, args.axis, args.eval_windows, progress=lambda label: _say(args, f"done: {label}"))
    table = ablation_table(args.axis, rows)
    if args.out:
        _write(args.out, table)
    print(table, end="")
    return 0


def cmd_bounds(args) -> int:
    from .sensitivity import (MicroAdaLN, ReferenceMagnitudes, bound_report, brute_force_grad_max,
                              measure_constants, s_aware, sample_grids)

    cfg = _config(args)
    bounds = cfg.scaled_bounds
    model = MicroAdaLN.random(cfg.seed, bounds=bounds)
    xs, cs = sample_grids(model, cfg.seed)
    consts = measure_constants(model, xs, cs)
    refs = None
    if args.references:
        refs = ReferenceMagnitudes(*_read_references(args.references))
    text = bound_report(consts, bounds, refs, cfg.dp.clip_C, "sensitivity bound (one-block probe network)")
    grid_max = brute_force_grad_max(model, xs, cs)
    text += f"[check]\ngrid_max_grad_norm = {grid_max!r}\nwithin_bound = {grid_max <= s_aware(consts, bounds)}\n"
    if args.out:
        _write(args.out, text)
    print(text, end="")
    return 0


def _read_references(path: str):
    """p99 magnitudes from the ``bounds.txt`` written by ``train``."""
    try:
        with open(path) as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise CLIError(f"{path}: {exc.strerror}") from None
    vals = {}
    for line in lines:
        parts = line.split(",")
        if len(parts) == 6 and parts[0] in ("c_norm", "gamma", "beta", "alpha"):
            vals[parts[0]] = float(parts[3])
    missing = [k for k in ("c_norm", "gamma", "beta", "alpha") if k not in vals]
    if missing:
        raise CLIError(f"{path}: missing magnitude rows {', '.join(missing)}")
    if not all(v > 0 and math.isfinite(v) for v in vals.values()):
        raise CLIError(f"{path}: reference magnitudes must be positive and finite")
    return vals["c_norm"], vals["gamma"], vals["beta"], vals["alpha"]


# ------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    from .experiments import AXES

    p = argparse.ArgumentParser(prog="dpadaln", description=__doc__)
    p.add_argument("-q", "--quiet", action="store_true", help="suppress progress messages")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", help="INI configuration file")
        sp.add_argument("--profile", choices=("desk", "paper"), help="defaults profile")
        sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override one key")

    sp = sub.add_parser("train", help="train a model and write its artifacts")
    with_config(sp)
    sp.add_argument("--out", required=True, help="output directory")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("diagnose", help="compare gradient logs of matched vanilla/aware runs")
    sp.add_argument("--vanilla", required=True, help="grad_log.csv of the DP-vanilla run")
    sp.add_argument("--aware", required=True, help="grad_log.csv of the DP-aware run")
    sp.add_argument("--clip-C", dest="clip_C", type=float, required=True, help="clipping threshold of both runs")
    sp.add_argument("--grid-points", type=int, default=200)
    sp.add_argument("--out", required=True, help="output directory")
    sp.set_defaults(func=cmd_diagnose)

    sp = sub.add_parser("evaluate", help="score conditional generation from a checkpoint")
    with_config(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--task", default="interpolation", choices=("interpolation", "forecasting"))
    sp.add_argument("--windows", type=int, default=None, help="limit on test windows")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", help="write the metric report here")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("ablate", help="run one ablation axis")
    with_config(sp)
    sp.add_argument("--axis", required=True, choices=AXES)
    sp.add_argument("--eval-windows", type=int, default=8)
    sp.add_argument("--out", help="write the CSV table here")
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("bounds", help="sensitivity bound report for the configured limits")
    with_config(sp)
    sp.add_argument("--references", help="bounds.txt from a training run (p99 magnitudes)")
    sp.add_argument("--out", help="write the report here")
    sp.set_defaults(func=cmd_bounds)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (CLIError, ConfigError, ValueError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"dpadaln {args.command}: error: {msg}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        print(f"dpadaln {args.command}: interrupted", file=sys.stderr)
        return 130


if __name__ == "__main__":
    sys.exit(main())
