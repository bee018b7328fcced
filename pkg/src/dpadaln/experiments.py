"""Matched vanilla/aware comparisons and ablation grids."""

from __future__ import annotations

from dataclasses import replace

from .config import RunConfig
from .diagnostics import TailSummary, clip_stats
from .dp import DPConfig
from .evaluation import evaluate_model
from .model import DiffusionTransformer
from .training import RunResult, build_dataset, train

AXES = ("components", "operator", "tightness", "clip_C")
TIGHTNESS = (("Loose", 1.00), ("Medium", 0.90), ("Tight", 0.75), ("Too tight", 0.50))
CLIP_VALUES = (0.5, 1.0, 2.0)
OPERATOR_ORDER = ("tanh", "soft_clamp_band", "hard_clamp", "clamp_ste")
ROW_COLUMNS = ("final_loss", "val_loss", "p99_total", "p99_cond", "p99_other", "rho_emp", "rho_cond",
               "p_clip", "E_eta", "rmse", "spec_dist")


def matched_runs(cfg: RunConfig, dataset=None) -> tuple[RunResult, RunResult]:
    """A dp_vanilla and a dp_aware run sharing every random stream."""
    data = dataset if dataset is not None else build_dataset(cfg)
    vanilla = train(replace(cfg, mode="dp_vanilla"), data)
    aware = train(replace(cfg, mode="dp_aware"), data)
    if vanilla.positions != aware.positions:
        raise AssertionError("matched runs consumed different random streams")
    return vanilla, aware


def tail_ratios(vanilla: RunResult, aware: RunResult, q: float = 0.99) -> dict:
    sv, sa = TailSummary.of(vanilla.log), TailSummary.of(aware.log)
    return {p: sa.get(p, q) / sv.get(p, q) for p in ("total", "cond", "other")}


def _variants(cfg: RunConfig, axis: str):
    b = cfg.bounds
    if axis == "components":
        return [
            ("DP-vanilla", replace(cfg, mode="dp_vanilla")),
            ("DP-aware (only c-bounding)", replace(cfg, mode="dp_aware", bounds_apply="on",
                                                   bounds=replace(b, bound_condition=True, bound_modulation=False))),
            ("DP-aware (only AdaLN bounding)", replace(cfg, mode="dp_aware", bounds_apply="on",
                                                       bounds=replace(b, bound_condition=False, bound_modulation=True))),
            ("DP-aware (full)", replace(cfg, mode="dp_aware", bounds_apply="on",
                                        bounds=replace(b, bound_condition=True, bound_modulation=True))),
        ]
    if axis == "operator":
        return [(op, replace(cfg, mode="dp_aware", bounds_apply="on", bounds=replace(b, operator=op)))
                for op in OPERATOR_ORDER]
    if axis == "tightness":
        return [(f"{name} ({s:.2f})", replace(cfg, mode="dp_aware", bounds_apply="on", bounds_scale=s))
                for name, s in TIGHTNESS]
    if axis == "clip_C":
        rows = []
        for C in CLIP_VALUES:
            dp = DPConfig(C, cfg.dp.noise_sigma, cfg.dp.batch_B)
            rows.append((f"DP-vanilla C={C}", replace(cfg, mode="dp_vanilla", dp=dp)))
            rows.append((f"DP-aware C={C}", replace(cfg, mode="dp_aware", dp=dp)))
        return rows
    raise ValueError(f"unknown ablation axis {axis!r}; choose from {', '.join(AXES)}")


def ablate(cfg: RunConfig, axis: str, eval_windows: int = 8, progress=None):
    """Run every variant of ``axis``; returns ``[(label, metrics), ...]``."""
    variants = _variants(cfg, axis)
    data = build_dataset(cfg)
    refs = {}
    out = []
    for label, vcfg in variants:
        key = vcfg.dp
        if key not in refs:
            refs[key] = train(replace(vcfg, mode="dp_vanilla"), data) if vcfg.mode != "dp_vanilla" else None
        res = train(vcfg, data)
        if vcfg.mode == "dp_vanilla":
            refs[key] = res
        out.append((label, _row(res, refs[key], vcfg, data, eval_windows)))
        if progress is not None:
            progress(label)
    return out


def _row(res: RunResult, ref: RunResult, cfg: RunConfig, data, eval_windows: int) -> dict:
    s = TailSummary.of(res.log)
    cs = clip_stats(res.log, cfg.effective_dp().clip_C)
    ratios = tail_ratios(ref, res) if ref is not None else {"total": 1.0, "cond": 1.0}
    row = {
        "final_loss": res.final_train_loss,
        "val_loss": res.val_curve[-1][1] if res.val_curve else float("nan"),
        "p99_total": s.get("total", 0.99),
        "p99_cond": s.get("cond", 0.99),
        "p99_other": s.get("other", 0.99),
        "rho_emp": ratios["total"],
        "rho_cond": ratios["cond"],
        "p_clip": cs.p_clip,
        "E_eta": cs.eta_mean,
    }
    if eval_windows > 0:
        model = DiffusionTransformer(cfg.model, cfg.effective_bounds(), res.ema)
        rep = evaluate_model(model, cfg, "interpolation", data.test, data.stats, cfg.seed, eval_windows)
        row["rmse"] = rep.point["rmse"]
        row["spec_dist"] = rep.temporal["spectral_dist"]
    else:
        row["rmse"] = row["spec_dist"] = float("nan")
    return row


def ablation_table(axis: str, rows) -> str:
    lines = [f"# ablation: {axis}", "variant," + ",".join(ROW_COLUMNS)]
    for label, row in rows:
        lines.append(label + "," + ",".join(f"{row[c]:.6g}" for c in ROW_COLUMNS))
    return "\n".join(lines) + "\n"
