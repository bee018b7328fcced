"""Conditional diffusion transformer with bounded AdaLN-Zero conditioning.

Each block computes ``y = x + alpha * F(gamma * LN(x) + beta)`` where
``(gamma, beta, alpha)`` come from a linear projection of the (optionally
l2-projected) condition vector, passed coordinate-wise through a bounding
operator. ``F`` is one self-attention layer followed by a tanh MLP, both with
residual paths.
"""

from __future__ import annotations

import json
import math
import os
import tempfile
from dataclasses import asdict, dataclass, field, replace
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import kernels
from .autodiff import Graph, GradientVector, Var
from .rng import STREAM_INIT, CounterRNG

OPERATORS = {
    "tanh": kernels.KIND_TANH,
    "hard_clamp": kernels.KIND_HARD,
    "soft_clamp_band": kernels.KIND_BAND,
    "clamp_ste": kernels.KIND_STE,
}

CHECKPOINT_MAGIC = b"DPADALN-CKPT"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    depth: int = 2
    hidden: int = 32
    heads: int = 4
    seq_len: int = 24
    channels: int = 3
    cond_dim: int = 16
    t_embed_dim: int = 8
    mlp_ratio: int = 2

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.hidden % self.heads:
            raise ValueError(f"hidden ({self.hidden}) must be divisible by heads ({self.heads})")
        if self.t_embed_dim % 2:
            raise ValueError("t_embed_dim must be even")

    @classmethod
    def desk(cls) -> "ModelConfig":
        return cls()

    @classmethod
    def paper(cls) -> "ModelConfig":
        return cls(depth=8, hidden=256, heads=8, seq_len=168, channels=7, cond_dim=64, t_embed_dim=32)

    @property
    def n_features(self) -> int:
        return 1 + 2 * self.channels + self.t_embed_dim


@dataclass(frozen=True)
class BoundConfig:
    c_max: float = 5.0
    gamma_max: float = 2.0
    beta_max: float = 0.5
    alpha_max: float = 0.5
    operator: str = "tanh"
    band_eps: float | None = None
    bound_condition: bool = True
    bound_modulation: bool = True

    def __post_init__(self):
        for name in ("c_max", "gamma_max", "beta_max", "alpha_max"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be strictly positive, got {getattr(self, name)}")
        if self.operator not in OPERATORS:
            raise ValueError(f"unknown operator {self.operator!r}; choose from {sorted(OPERATORS)}")
        if self.band_eps is not None:
            if self.band_eps < 0:
                raise ValueError("band_eps must be >= 0")
            if self.operator == "soft_clamp_band" and self.band_eps >= min(self.gamma_max, self.beta_max, self.alpha_max):
                raise ValueError("band_eps must be smaller than every modulation limit")

    @property
    def kind(self) -> int:
        return OPERATORS[self.operator]

    def band(self, limit: float) -> float:
        """Half-width of the soft band for ``limit`` (default ``0.1 * limit``)."""
        if math.isinf(limit):
            return 0.0
        return 0.1 * limit if self.band_eps is None else self.band_eps

    def scaled(self, factor: float) -> "BoundConfig":
        return replace(self, c_max=self.c_max * factor, gamma_max=self.gamma_max * factor,
                       beta_max=self.beta_max * factor, alpha_max=self.alpha_max * factor)

    @classmethod
    def unbounded(cls, operator: str = "tanh") -> "BoundConfig":
        inf = math.inf
        return cls(inf, inf, inf, inf, operator=operator)


@dataclass(frozen=True)
class ModulationParams:
    gamma: np.ndarray
    beta: np.ndarray
    alpha: np.ndarray


@dataclass(frozen=True)
class ParamPartition:
    cond_ids: frozenset
    other_ids: frozenset

    @classmethod
    def from_names(cls, names) -> "ParamPartition":
        names = list(names)
        cond = frozenset(n for n in names if is_conditioning_param(n))
        return cls(cond, frozenset(names) - cond)

    def check(self, names):
        names = set(names)
        if self.cond_ids & self.other_ids:
            raise ValueError(f"partition overlaps on {sorted(self.cond_ids & self.other_ids)}")
        missing = names - self.cond_ids - self.other_ids
        if missing:
            raise KeyError(f"parameters in neither partition: {sorted(missing)}")


def is_conditioning_param(name: str) -> bool:
    return name.startswith("cond.") or ".mod." in name


# ---------------------------------------------------------------- bounding


def project_condition(c, c_max: float) -> np.ndarray:
    """l2 projection onto the ball of radius ``c_max`` (last axis)."""
    return ad.project_ball(np.asarray(c, dtype=np.float64), c_max).value.copy()


def bound_op(x, M: float, kind="tanh", band_eps: float = 0.0):
    """Bound ``x`` into ``[-M, M]``; ``kind`` is an operator name or kernel code."""
    if not M > 0:
        raise ValueError("M must be > 0")
    code = OPERATORS[kind] if isinstance(kind, str) else int(kind)
    out = kernels.bound_forward(np.asarray(x, dtype=np.float64), float(M), code, float(band_eps))
    return float(np.reshape(out, -1)[0]) if np.ndim(x) == 0 else out


def bound_grad(x, M: float, kind="tanh", band_eps: float = 0.0):
    """Derivative used by backprop (1 everywhere for ``clamp_ste``)."""
    code = OPERATORS[kind] if isinstance(kind, str) else int(kind)
    out = kernels.bound_derivative(np.asarray(x, dtype=np.float64), float(M), code, float(band_eps))
    return float(np.reshape(out, -1)[0]) if np.ndim(x) == 0 else out


def _modulate(raw: Var, hidden: int, bounds: BoundConfig | None):
    parts = (raw[..., :hidden], raw[..., hidden:2 * hidden], raw[..., 2 * hidden:])
    if bounds is None or not bounds.bound_modulation:
        return parts
    limits = (bounds.gamma_max, bounds.beta_max, bounds.alpha_max)
    return tuple(ad.bound(p, m, bounds.kind, bounds.band(m)) for p, m in zip(parts, limits))


def modulation(c_hat, W, b, bounds: BoundConfig | None) -> ModulationParams:
    """``(gamma, beta, alpha) = B(W^T c_hat + b)`` for a projected condition."""
    c_hat = np.asarray(c_hat, dtype=np.float64)
    W = np.asarray(W, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if W.shape[0] != c_hat.shape[-1] or W.shape[1] != b.shape[0] or W.shape[1] % 3:
        raise ad.ShapeError(f"modulation: W {W.shape}, b {b.shape}, c {c_hat.shape} do not fit")
    raw = ad.constant(c_hat @ W + b)
    g, be, a = _modulate(raw, W.shape[1] // 3, bounds)
    return ModulationParams(g.value.copy(), be.value.copy(), a.value.copy())


# ------------------------------------------------------------------- blocks


def _attention(p, pre, v: Var, heads: int) -> Var:
    _, L, d = v.shape
    dh = d // heads

    def split(t):
        return t.reshape(-1, L, heads, dh).transpose(0, 2, 1, 3)

    q = split(v @ p[pre + "attn.Wq"]) * (1.0 / math.sqrt(dh))
    k = split(v @ p[pre + "attn.Wk"])
    vv = split(v @ p[pre + "attn.Wv"])
    scores = q @ k.swapaxes(-1, -2)
    o = ad.softmax(scores, axis=-1) @ vv
    return o.transpose(0, 2, 1, 3).reshape(-1, L, d) @ p[pre + "attn.Wo"]


def inner_network(p, pre: str, v: Var, heads: int) -> Var:
    """``F(v)``: residual self-attention followed by a residual tanh MLP."""
    a = v + _attention(p, pre, v, heads)
    m = ad.tanh(a @ p[pre + "mlp.W1"] + p[pre + "mlp.b1"]) @ p[pre + "mlp.W2"] + p[pre + "mlp.b2"]
    return a + m


def block_forward(p, pre: str, h: Var, c_hat: Var, hidden: int, bounds: BoundConfig | None,
                  F: Callable[[Var], Var]):
    raw = c_hat @ p[pre + "mod.W"] + p[pre + "mod.b"]
    gamma, beta, alpha = _modulate(raw, hidden, bounds)
    v = gamma * ad.layer_norm(h) + beta
    return h + alpha * F(v), (gamma, beta, alpha)


def adaln_block(x, c_hat, block_params: dict, bounds: BoundConfig | None = None, heads: int = 1,
                F: Callable | None = None) -> np.ndarray:
    """One AdaLN-Zero block on ``x`` of shape ``(L, d)`` (or ``(N, L, d)``).

    ``block_params`` holds ``mod.W``/``mod.b`` and, unless ``F`` is given, the
    attention/MLP weights under their ``attn.*``/``mlp.*`` names.
    """
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 2
    xb = x[None] if squeeze else x
    hidden = xb.shape[-1]
    p = {k: ad.constant(v) for k, v in block_params.items()}
    c = ad.constant(np.asarray(c_hat, dtype=np.float64).reshape(-1, 1, np.shape(c_hat)[-1]))
    fn = F if F is not None else (lambda v: inner_network(p, "", v, heads))
    y, _ = block_forward(p, "", ad.constant(xb), c, hidden, bounds, fn)
    return y.value[0].copy() if squeeze else y.value.copy()


# -------------------------------------------------------------------- model


def sinusoidal(positions, dim: int) -> np.ndarray:
    positions = np.asarray(positions, dtype=np.float64)
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    ang = positions[..., None] * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


def init_params(cfg: ModelConfig, seed: int) -> dict[str, np.ndarray]:
    rng = CounterRNG(seed, STREAM_INIT)
    d, k, K = cfg.hidden, cfg.cond_dim, cfg.channels
    md = cfg.mlp_ratio * d

    def normal(shape, std):
        return rng.normal(shape) * std

    p = {
        "in.W": normal((K + 1, d), 1.0 / math.sqrt(K + 1)),
        "in.b": np.zeros((1, d)),
        "cond.W": normal((cfg.n_features, k), 1.0 / math.sqrt(cfg.n_features)),
        "cond.b": np.zeros((1, k)),
    }
    for i in range(cfg.depth):
        pre = f"block{i}."
        W = np.zeros((k, 3 * d))
        W[:, :2 * d] = normal((k, 2 * d), 0.1 / math.sqrt(k))
        b = np.zeros((1, 3 * d))
        b[0, :d] = 1.0
        p[pre + "mod.W"] = W
        p[pre + "mod.b"] = b
        for name in ("Wq", "Wk", "Wv", "Wo"):
            p[pre + "attn." + name] = normal((d, d), 1.0 / math.sqrt(d))
        p[pre + "mlp.W1"] = normal((d, md), 1.0 / math.sqrt(d))
        p[pre + "mlp.b1"] = np.zeros((1, md))
        p[pre + "mlp.W2"] = normal((md, d), 1.0 / math.sqrt(md))
        p[pre + "mlp.b2"] = np.zeros((1, d))
    p["out.W"] = normal((d, K), 1.0 / math.sqrt(d))
    p["out.b"] = np.zeros((1, K))
    return p


@dataclass
class DiffusionTransformer:
    """Noise-prediction network. ``bounds=None`` is the unbounded (vanilla) model.

    Inputs (all with a leading batch axis ``N``):
      ``tokens`` ``(N, L, K+1)`` values plus the observed bit,
      ``feat`` ``(N, 1, n_features)`` condition features,
      ``target`` ``(N, L, K)`` and ``weight`` ``(N, L, K)`` for the loss.
    """

    config: ModelConfig
    bounds: BoundConfig | None = None
    params: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not self.params:
            self.params = init_params(self.config, 0)
        self._pos = sinusoidal(np.arange(self.config.seq_len), self.config.hidden)

    @classmethod
    def create(cls, config: ModelConfig, bounds: BoundConfig | None, seed: int) -> "DiffusionTransformer":
        return cls(config, bounds, init_params(config, seed))

    @property
    def partition(self) -> ParamPartition:
        return ParamPartition.from_names(self.params)

    def apply(self, p: dict, inputs: dict) -> dict:
        cfg, bounds = self.config, self.bounds
        h = inputs["tokens"] @ p["in.W"] + p["in.b"] + self._pos
        c = inputs["feat"] @ p["cond.W"] + p["cond.b"]
        c_hat = c
        if bounds is not None and bounds.bound_condition:
            c_hat = ad.project_ball(c, bounds.c_max)
        out = {"c": c, "c_hat": c_hat}
        for i in range(cfg.depth):
            pre = f"block{i}."
            h, mods = block_forward(p, pre, h, c_hat, cfg.hidden, bounds,
                                    lambda v, pre=pre: inner_network(p, pre, v, cfg.heads))
            out[pre + "gamma"], out[pre + "beta"], out[pre + "alpha"] = mods
        eps_hat = ad.layer_norm(h) @ p["out.W"] + p["out.b"]
        out["eps_hat"] = eps_hat
        if "target" in inputs:
            diff = eps_hat - inputs["target"]
            out["loss"] = (inputs["weight"] * diff * diff).sum(axis=(1, 2))
        return out

    def graph(self) -> Graph:
        L, K = self.config.seq_len, self.config.channels
        shapes = {"tokens": (None, L, K + 1), "feat": (None, 1, self.config.n_features)}
        return Graph(self.apply, self.params, shapes)

    def predict(self, tokens, feat, params: dict | None = None) -> np.ndarray:
        trace = ad.forward(self.graph(), {"tokens": tokens, "feat": feat},
                           params=params, track=False)
        return trace.outputs["eps_hat"].value

    def evaluate(self, inputs: dict, params: dict | None = None) -> dict[str, np.ndarray]:
        trace = ad.forward(self.graph(), inputs, params=params, track=False)
        return {k: v.value for k, v in trace.outputs.items()}


def partition_gradient(g: GradientVector, part: ParamPartition):
    """Split ``g`` into conditioning and other coordinates.

    Returns ``(g_cond, g_other, (total, cond, other))``; norms are arrays when
    ``g`` is per-example.
    """
    part.check(g.names())
    cond = GradientVector({k: v for k, v in g.arrays.items() if k in part.cond_ids}, g.batch)
    other = GradientVector({k: v for k, v in g.arrays.items() if k in part.other_ids}, g.batch)
    zero = 0.0 if g.batch is None else np.zeros(g.batch)
    nc = cond.norm() if len(cond) else zero
    no = other.norm() if len(other) else zero
    return cond, other, (g.norm(), nc, no)


# -------------------------------------------------------------- checkpoints


def _atomic_write(path: str, data: bytes):
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_checkpoint(params: dict, config: ModelConfig, bounds: BoundConfig | None,
                      extra: dict | None = None, ema: dict | None = None) -> bytes:
    index, blobs, offset = [], [], 0
    groups = [("params", params)] + ([("ema", ema)] if ema is not None else [])
    for group, arrays in groups:
        for name, arr in arrays.items():
            a = np.ascontiguousarray(arr, dtype="<f8")
            index.append({"group": group, "name": name, "shape": list(a.shape), "offset": offset})
            blobs.append(a.tobytes())
            offset += a.nbytes
    header = {
        "version": CHECKPOINT_VERSION,
        "model": asdict(config),
        "bounds": None if bounds is None else asdict(bounds),
        "extra": extra or {},
        "index": index,
    }
    head = json.dumps(header, sort_keys=True).encode()
    return CHECKPOINT_MAGIC + b" %d %d\n" % (CHECKPOINT_VERSION, len(head)) + head + b"\n" + b"".join(blobs)


def save_checkpoint(path: str, params: dict, config: ModelConfig, bounds: BoundConfig | None,
                    extra: dict | None = None, ema: dict | None = None):
    _atomic_write(path, encode_checkpoint(params, config, bounds, extra, ema))


def load_checkpoint(path: str) -> dict:
    with open(path, "rb") as fh:
        raw = fh.read()
    first, _, rest = raw.partition(b"\n")
    magic, version, hlen = first.split(b" ")
    if magic != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint")
    if int(version) != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {int(version)}")
    hlen = int(hlen)
    header = json.loads(rest[:hlen])
    body = rest[hlen + 1:]
    out = {"params": {}, "ema": {}}
    for item in header["index"]:
        n = int(np.prod(item["shape"])) * 8
        arr = np.frombuffer(body, dtype="<f8", count=n // 8, offset=item["offset"])
        out[item["group"]][item["name"]] = arr.reshape(item["shape"]).astype(np.float64)
    out["config"] = ModelConfig(**header["model"])
    out["bounds"] = None if header["bounds"] is None else BoundConfig(**header["bounds"])
    out["extra"] = header["extra"]
    return out
