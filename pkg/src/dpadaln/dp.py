"""DP-SGD mechanics: per-example clipping, Gaussian noise, AdamW with warmup and EMA."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .autodiff import GradientVector
from .rng import CounterRNG


@dataclass(frozen=True)
class DPConfig:
    """``clip_C = inf`` together with ``noise_sigma = 0`` disables the mechanism."""

    clip_C: float = 1.0
    noise_sigma: float = 0.0
    batch_B: int = 16

    def __post_init__(self):
        if not self.clip_C > 0:
            raise ValueError(f"clip_C must be > 0, got {self.clip_C}")
        if not self.noise_sigma >= 0 or math.isinf(self.noise_sigma):
            raise ValueError(f"noise_sigma must be finite and >= 0, got {self.noise_sigma}")
        if int(self.batch_B) != self.batch_B or self.batch_B < 1:
            raise ValueError(f"batch_B must be a positive integer, got {self.batch_B}")
        if math.isinf(self.clip_C) and self.noise_sigma > 0:
            raise ValueError("noise needs a finite clip_C")

    @property
    def active(self) -> bool:
        return not math.isinf(self.clip_C)


def clip_factor(norm, C: float):
    """``min(1, C / norm)`` with factor 1 for a zero norm or infinite ``C``."""
    norm = np.asarray(norm, dtype=np.float64)
    if math.isinf(C):
        return np.ones_like(norm) if norm.ndim else 1.0
    safe = np.where(norm > C, norm, 1.0)
    eta = np.where(norm > C, C / safe, 1.0)
    return eta if eta.ndim else float(eta)


def _flat(g):
    if isinstance(g, GradientVector):
        if g.batch is not None:
            raise ValueError("expected a single gradient, got a per-example batch")
        return g.flatten(), {k: v.shape for k, v in g.arrays.items()}
    return np.asarray(g, dtype=np.float64).reshape(-1), None


def clip_gradient(g, C: float):
    """Return ``(eta * g, eta)`` with ``eta = min(1, C / ||g||)``."""
    if not C > 0:
        raise ValueError("C must be > 0")
    flat, template = _flat(g)
    eta = clip_factor(math.sqrt(float(flat @ flat)), C)
    out = flat * eta if eta != 1.0 else flat.copy()
    if template is None:
        return out.reshape(np.shape(g)), eta
    return GradientVector.unflatten(out, template), eta


def _stack(grads):
    if isinstance(grads, GradientVector):
        if grads.batch is None:
            raise ValueError("expected per-example gradients")
        return grads.flatten(), {k: v.shape[1:] for k, v in grads.arrays.items()}
    grads = list(grads)
    if not grads:
        raise ValueError("empty batch")
    if isinstance(grads[0], GradientVector):
        template = {k: v.shape for k, v in grads[0].arrays.items()}
        return np.stack([g.flatten() for g in grads]), template
    return np.stack([np.asarray(g, dtype=np.float64).reshape(-1) for g in grads]), None


@dataclass
class PrivatizedBatch:
    update: np.ndarray
    norms: np.ndarray
    eta: np.ndarray
    clipped_sum: np.ndarray


def privatize_flat(G, cfg: DPConfig, rng: CounterRNG | None) -> PrivatizedBatch:
    """Noisy mean ``(sum_i clip(g_i) + sigma C z) / B`` of the rows of ``G``."""
    G = np.ascontiguousarray(G, dtype=np.float64)
    if G.ndim != 2 or G.shape[0] == 0:
        raise ValueError("empty batch")
    if G.shape[0] != cfg.batch_B:
        raise ValueError(f"batch has {G.shape[0]} examples, config says {cfg.batch_B}")
    total, norms, eta = kernels.clip_accumulate(G, float(cfg.clip_C))
    noisy = total
    if cfg.noise_sigma > 0:
        if rng is None:
            raise ValueError("noise requires an rng")
        noisy = total + (cfg.noise_sigma * cfg.clip_C) * rng.normal(G.shape[1])
    return PrivatizedBatch(noisy / cfg.batch_B, norms, eta, total)


def privatize_batch(grads, cfg: DPConfig, rng: CounterRNG | None = None) -> GradientVector:
    """Clip every per-example gradient, sum, add noise and divide by ``B``."""
    G, template = _stack(grads)
    out = privatize_flat(G, cfg, rng).update
    if template is None:
        return out
    return GradientVector.unflatten(out, template)


def sensitivity_probe(batch_D, batch_D_prime, cfg: DPConfig) -> float:
    """``||q(D) - q(D')||`` for batches differing in exactly one example, without noise.

    The mean of clipped gradients moves by at most ``2C / B`` under
    replacement of one example and by ``C / B`` under addition or removal.
    """
    A, _ = _stack(batch_D)
    Bm, _ = _stack(batch_D_prime)
    if A.shape != Bm.shape:
        raise ValueError(f"batches have shapes {A.shape} and {Bm.shape}")
    differ = np.flatnonzero(np.any(A != Bm, axis=1))
    if differ.size == 0:
        raise ValueError("batches are identical; a neighbouring pair differs in one example")
    if differ.size > 1:
        raise ValueError(f"batches differ in {differ.size} examples, expected exactly one")
    quiet = DPConfig(cfg.clip_C, 0.0, A.shape[0])
    d = privatize_flat(A, quiet, None).update - privatize_flat(Bm, quiet, None).update
    return float(np.sqrt(d @ d))


def replacement_bound(C: float, B: int) -> float:
    return 2.0 * C / B


def add_remove_bound(C: float, B: int) -> float:
    return C / B


# ---------------------------------------------------------------- optimizer


class NonFiniteUpdateError(FloatingPointError):
    pass


@dataclass
class OptimState:
    m: dict
    v: dict
    ema: dict
    step: int = 0
    lr: float = 7e-4
    weight_decay: float = 2e-5
    warmup: int = 1000
    ema_decay: float = 0.999
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    rejected: int = field(default=0)

    @classmethod
    def create(cls, params: dict, lr=7e-4, weight_decay=2e-5, warmup=1000, ema_decay=0.999,
               beta1=0.9, beta2=0.999, eps=1e-8) -> "OptimState":
        if not lr > 0 or weight_decay < 0 or warmup < 0 or not 0 <= ema_decay < 1:
            raise ValueError("invalid optimizer settings")
        zeros = {k: np.zeros_like(v, dtype=np.float64) for k, v in params.items()}
        return cls({k: z.copy() for k, z in zeros.items()}, zeros,
                   {k: np.array(v, dtype=np.float64) for k, v in params.items()},
                   0, lr, weight_decay, warmup, ema_decay, beta1, beta2, eps)

    def lr_at(self, step: int) -> float:
        """Learning rate used by the ``step``-th update (1-indexed)."""
        if self.warmup <= 0:
            return self.lr
        return self.lr * min(1.0, step / self.warmup)


def optimizer_step(params: dict, update, state: OptimState) -> dict:
    """One decoupled-weight-decay Adam step; returns new parameter arrays.

    A non-finite update raises :class:`NonFiniteUpdateError`; parameters,
    moments, EMA and the step counter are left as they were.
    """
    if isinstance(update, GradientVector):
        upd = update.arrays
    elif isinstance(update, dict):
        upd = update
    else:
        upd = GradientVector.unflatten(update, {k: v.shape for k, v in params.items()}).arrays
    if set(upd) != set(params):
        raise KeyError(f"update covers {sorted(upd)} but params are {sorted(params)}")
    for k, g in upd.items():
        if not np.isfinite(g).all():
            state.rejected += 1
            raise NonFiniteUpdateError(f"non-finite update for {k!r}; step {state.step + 1} rejected")
    t = state.step + 1
    lr = state.lr_at(t)
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    out = {}
    for k, p in params.items():
        g = np.asarray(upd[k], dtype=np.float64).reshape(p.shape)
        m = state.m[k] = b1 * state.m[k] + (1.0 - b1) * g
        v = state.v[k] = b2 * state.v[k] + (1.0 - b2) * g * g
        q = p * (1.0 - lr * state.weight_decay)
        q = q - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        out[k] = q
        state.ema[k] = state.ema_decay * state.ema[k] + (1.0 - state.ema_decay) * q
    state.step = t
    return out
