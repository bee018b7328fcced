"""Run configuration: INI text with one section per concern and two profiles.

Every key has a default from the chosen profile; a file only needs the keys it
changes. ``RunConfig.to_ini`` writes a complete, canonical file, so a saved
configuration replays the run exactly.
"""

from __future__ import annotations

import configparser
import math
from dataclasses import asdict, dataclass, field, fields, replace

from .data import MASK_KINDS, MaskRanges
from .dp import DPConfig
from .model import OPERATORS, BoundConfig, ModelConfig

MODES = ("non_dp", "dp_vanilla", "dp_aware")
PROFILES = ("desk", "paper")


class ConfigError(ValueError):
    """Raised with every invalid field listed as ``section.key: reason``."""


@dataclass(frozen=True)
class OptimSettings:
    lr: float = 7e-4
    weight_decay: float = 2e-5
    warmup: int = 100
    ema_decay: float = 0.999


@dataclass(frozen=True)
class TrainSettings:
    steps: int = 2000
    diffusion_steps: int = 50
    beta_start: float = 1e-4
    beta_end: float = 0.02
    val_every: int = 50
    log_every: int = 1
    probe_size: int = 128
    val_size: int = 64


@dataclass(frozen=True)
class DataSettings:
    source: str = "synthetic"
    csv_path: str = ""
    length: int = 6000
    rare_event_prob: float = 0.02
    rare_scale: float = 8.0
    stride: int = 4
    split: str = "70/15/15"
    rows_per_month: int = 720


@dataclass(frozen=True)
class RunConfig:
    profile: str = "desk"
    mode: str = "dp_aware"
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    bounds: BoundConfig = field(default_factory=BoundConfig)
    bounds_apply: str = "auto"
    bounds_scale: float = 0.9
    dp: DPConfig = field(default_factory=DPConfig)
    optim: OptimSettings = field(default_factory=OptimSettings)
    train: TrainSettings = field(default_factory=TrainSettings)
    data: DataSettings = field(default_factory=DataSettings)
    masks: MaskRanges = field(default_factory=MaskRanges.desk)

    @classmethod
    def desk(cls, **kw) -> "RunConfig":
        return replace(cls(), **kw)

    @classmethod
    def paper(cls, **kw) -> "RunConfig":
        base = cls(
            profile="paper",
            model=ModelConfig.paper(),
            dp=DPConfig(1.0, 0.0, 96),
            optim=OptimSettings(7e-4, 2e-5, 1000, 0.999),
            train=TrainSettings(steps=20000, diffusion_steps=1000, val_every=1000, log_every=1,
                                probe_size=192, val_size=192),
            data=DataSettings(length=23136, stride=24),
            masks=MaskRanges.paper(),
        )
        return replace(base, **kw)

    @classmethod
    def profile_defaults(cls, profile: str) -> "RunConfig":
        if profile not in PROFILES:
            raise ConfigError(f"run.profile: unknown profile {profile!r}; choose from {', '.join(PROFILES)}")
        return cls.desk() if profile == "desk" else cls.paper()

    @property
    def bounds_active(self) -> bool:
        if self.bounds_apply == "on":
            return True
        if self.bounds_apply == "off":
            return False
        return self.mode == "dp_aware"

    @property
    def scaled_bounds(self) -> BoundConfig:
        """The base limits times ``bounds_scale`` (0.9 is the Medium setting)."""
        return self.bounds.scaled(self.bounds_scale)

    def effective_bounds(self) -> BoundConfig | None:
        """Bounds used by the network, or ``None`` for the unbounded model."""
        if self.mode == "dp_vanilla" or not self.bounds_active:
            return None
        return self.scaled_bounds

    def effective_dp(self) -> DPConfig:
        if self.mode == "non_dp":
            return DPConfig(math.inf, 0.0, self.dp.batch_B)
        return self.dp

    # ------------------------------------------------------------ text form

    def to_ini(self) -> str:
        sections = {
            "run": {"profile": self.profile, "mode": self.mode, "seed": self.seed},
            "model": asdict(self.model),
            "bounds": {"apply": self.bounds_apply, "scale": self.bounds_scale, **asdict(self.bounds)},
            "dp": asdict(self.dp),
            "optim": asdict(self.optim),
            "train": asdict(self.train),
            "data": asdict(self.data),
            "masks": {
                "ratio": _fmt_pair(self.masks.ratio),
                "pred_len": _fmt_pair(self.masks.pred_len),
                "num_blocks": _fmt_pair(self.masks.num_blocks),
                "kinds": ",".join(self.masks.kinds),
            },
        }
        lines = []
        for name, items in sections.items():
            lines.append(f"[{name}]")
            for k, v in items.items():
                lines.append(f"{k} = {_fmt(v)}")
            lines.append("")
        return "\n".join(lines)

    @classmethod
    def from_ini(cls, text: str, overrides: dict | None = None) -> "RunConfig":
        parser = configparser.ConfigParser(interpolation=None)
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"config: {exc}") from None
        values: dict = {}
        for s in parser.sections():
            values.setdefault(s.lower(), {}).update(parser.items(s))
        for key, val in (overrides or {}).items():
            if "." not in key:
                raise ConfigError(f"{key}: overrides use section.key=value")
            sec, k = key.split(".", 1)
            values.setdefault(sec.lower(), {})[k.lower()] = str(val)
        return cls.from_values(values)

    @classmethod
    def from_values(cls, values: dict) -> "RunConfig":
        errors: list[str] = []
        known = {"run", "model", "bounds", "dp", "optim", "train", "data", "masks"}
        for sec in values:
            if sec not in known:
                errors.append(f"{sec}: unknown section")
        run = values.get("run", {})
        profile = run.get("profile", "desk")
        if profile not in PROFILES:
            raise ConfigError(f"run.profile: unknown profile {profile!r}; choose from {', '.join(PROFILES)}")
        base = cls.profile_defaults(profile)

        def build(section, obj, extra=()):
            given = dict(values.get(section, {}))
            kw = {}
            names = {f.name.lower(): f.name for f in fields(obj)}
            for k, raw in given.items():
                if k in extra:
                    continue
                if k not in names:
                    errors.append(f"{section}.{k}: unknown key")
                    continue
                name = names[k]
                try:
                    kw[name] = _parse(raw, getattr(obj, name), name)
                except ValueError as exc:
                    errors.append(f"{section}.{name}: {exc}")
            try:
                return replace(obj, **kw)
            except (ValueError, TypeError) as exc:
                errors.append(f"{section}: {exc}")
                return obj

        mode = run.get("mode", base.mode)
        if mode not in MODES:
            errors.append(f"run.mode: must be one of {', '.join(MODES)}, got {mode!r}")
        seed = base.seed
        try:
            seed = int(run.get("seed", base.seed))
            if seed < 0:
                errors.append("run.seed: must be >= 0")
        except ValueError:
            errors.append(f"run.seed: not an integer: {run.get('seed')!r}")
        for k in run:
            if k not in ("profile", "mode", "seed"):
                errors.append(f"run.{k}: unknown key")

        model = build("model", base.model)
        bounds_vals = values.get("bounds", {})
        apply = bounds_vals.get("apply", base.bounds_apply)
        if apply not in ("auto", "on", "off"):
            errors.append(f"bounds.apply: must be auto, on or off, got {apply!r}")
        if "operator" in bounds_vals and bounds_vals["operator"] not in OPERATORS:
            errors.append(f"bounds.operator: must be one of {', '.join(sorted(OPERATORS))}")
        bounds = build("bounds", base.bounds, extra=("apply", "scale"))
        scale = base.bounds_scale
        if "scale" in bounds_vals:
            try:
                scale = float(bounds_vals["scale"])
                if not scale > 0:
                    errors.append("bounds.scale: must be > 0")
            except ValueError:
                errors.append(f"bounds.scale: expected a number, got {bounds_vals['scale']!r}")
        dp = build("dp", base.dp)
        optim = build("optim", base.optim)
        train = build("train", base.train)
        data = build("data", base.data)

        mv = values.get("masks", {})
        masks = base.masks
        kw = {}
        for k in ("ratio", "pred_len", "num_blocks"):
            if k in mv:
                try:
                    conv = float if k == "ratio" else int
                    lo, hi = (conv(x) for x in mv[k].replace(" ", "").split(","))
                    if lo > hi:
                        raise ValueError("low end exceeds high end")
                    kw[k] = (lo, hi)
                except ValueError as exc:
                    errors.append(f"masks.{k}: expected 'low,high': {exc}")
        if "kinds" in mv:
            kinds = tuple(x.strip() for x in mv["kinds"].split(",") if x.strip())
            bad = [k for k in kinds if k not in MASK_KINDS]
            if bad or not kinds:
                errors.append(f"masks.kinds: must be a subset of {', '.join(MASK_KINDS)}")
            else:
                kw["kinds"] = kinds
        for k in mv:
            if k not in ("ratio", "pred_len", "num_blocks", "kinds"):
                errors.append(f"masks.{k}: unknown key")
        masks = replace(masks, **kw)

        cfg = cls(profile, mode, seed, model, bounds, apply, scale, dp, optim, train, data, masks)
        errors += cfg.validate()
        if errors:
            raise ConfigError("; ".join(errors))
        return cfg

    def validate(self) -> list[str]:
        errs = []
        t, d, m = self.train, self.data, self.masks
        if t.steps < 1:
            errs.append("train.steps: must be >= 1")
        if t.diffusion_steps < 1:
            errs.append("train.diffusion_steps: must be >= 1")
        if not 0 < t.beta_start <= t.beta_end < 1:
            errs.append("train.beta_start/beta_end: need 0 < start <= end < 1")
        for k in ("val_every", "log_every", "probe_size", "val_size"):
            if getattr(t, k) < 1:
                errs.append(f"train.{k}: must be >= 1")
        if d.source not in ("synthetic", "csv"):
            errs.append("data.source: must be synthetic or csv")
        if d.source == "csv" and not d.csv_path:
            errs.append("data.csv_path: required when data.source = csv")
        if d.stride < 1:
            errs.append("data.stride: must be >= 1")
        if d.source == "synthetic" and d.length < 4 * self.model.seq_len:
            errs.append("data.length: too short for the window length")
        if not (d.split == "months" or len(d.split.split("/")) == 3):
            errs.append("data.split: use 'a/b/c' percentages or 'months'")
        if not 0 < m.ratio[0] <= m.ratio[1] < 1:
            errs.append("masks.ratio: need 0 < low <= high < 1")
        if not 1 <= m.pred_len[0] <= m.pred_len[1] < self.model.seq_len:
            errs.append(f"masks.pred_len: need 1 <= low <= high < seq_len ({self.model.seq_len})")
        if not 1 <= m.num_blocks[0] <= m.num_blocks[1] or 2 * m.num_blocks[1] > self.model.seq_len:
            errs.append("masks.num_blocks: need 1 <= low <= high and 2*high <= seq_len")
        if self.mode != "non_dp" and math.isinf(self.dp.clip_C) and self.dp.noise_sigma > 0:
            errs.append("dp.noise_sigma: noise needs a finite dp.clip_C")
        return errs

    def split_fractions(self) -> tuple[float, float, float]:
        a, b, c = (float(x) for x in self.data.split.split("/"))
        s = a + b + c
        return a / s, b / s, c / s


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if v is None:
        return "none"
    if isinstance(v, float):
        return "inf" if math.isinf(v) and v > 0 else repr(v)
    return str(v)


def _fmt_pair(p) -> str:
    return f"{_fmt(p[0])},{_fmt(p[1])}"


def _parse(raw: str, current, key: str):
    raw = raw.strip()
    if isinstance(current, bool):
        low = raw.lower()
        if low in ("true", "yes", "on", "1"):
            return True
        if low in ("false", "no", "off", "0"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if current is None or key == "band_eps":
        return None if raw.lower() in ("none", "") else float(raw)
    if isinstance(current, int):
        try:
            return int(raw)
        except ValueError:
            raise ValueError(f"expected an integer, got {raw!r}") from None
    if isinstance(current, float):
        try:
            return float(raw)
        except ValueError:
            raise ValueError(f"expected a number, got {raw!r}") from None
    return raw


def load_config(path: str | None, overrides: dict | None = None, profile: str | None = None) -> RunConfig:
    text = ""
    if path:
        try:
            with open(path) as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"config: cannot read {path}: {exc.strerror}") from None
    ov = dict(overrides or {})
    if profile is not None:
        ov.setdefault("run.profile", profile)
    return RunConfig.from_ini(text, ov)
