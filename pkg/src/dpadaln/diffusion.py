"""Forward corruption, masked noise-prediction loss and conditional sampling.

Windows are ``(L, K)`` arrays (or ``(N, L, K)`` batches) and masks are
per-time-step bit vectors with 1 marking an observed step. Observed entries
stay clean in the model input; only masked entries carry the noisy ``x_t``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import ModelConfig, sinusoidal
from .rng import CounterRNG

DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 0.02


@dataclass(frozen=True)
class DiffusionSchedule:
    T: int
    beta: np.ndarray
    alpha_bar: np.ndarray

    @property
    def alpha(self) -> np.ndarray:
        return 1.0 - self.beta


def build_schedule(T: int, beta_start: float = DEFAULT_BETA_START,
                   beta_end: float = DEFAULT_BETA_END) -> DiffusionSchedule:
    """Linear beta schedule with endpoints included."""
    if int(T) != T or T < 1:
        raise ValueError(f"T must be a positive integer, got {T}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    T = int(T)
    beta = np.array([beta_start]) if T == 1 else np.linspace(beta_start, beta_end, T)
    alpha_bar = np.cumprod(1.0 - beta)
    return DiffusionSchedule(T, beta, alpha_bar)


def _check_t(t, T):
    t = np.asarray(t)
    if np.any(t < 0) or np.any(t >= T):
        raise IndexError(f"timestep out of range [0, {T}): {t}")
    return t


def q_sample(x0, t, eps, sched: DiffusionSchedule) -> np.ndarray:
    """``sqrt(ab_t) x0 + sqrt(1 - ab_t) eps``; ``t`` may be per-example."""
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ValueError(f"eps shape {eps.shape} differs from x0 shape {x0.shape}")
    t = _check_t(t, sched.T)
    ab = sched.alpha_bar[t]
    if ab.ndim:
        ab = ab.reshape(ab.shape + (1,) * (x0.ndim - ab.ndim))
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def _batched(x0, bits):
    x0 = np.asarray(x0, dtype=np.float64)
    bits = np.asarray(bits)
    single = x0.ndim == 2
    if single:
        x0, bits = x0[None], bits[None]
    if bits.shape != x0.shape[:2]:
        raise ValueError(f"mask shape {bits.shape} does not match windows {x0.shape}")
    return x0, bits.astype(np.float64), single


def condition_features(values, bits, t, T: int, t_embed_dim: int) -> np.ndarray:
    """Mask-aware condition features ``(N, 1, 1 + 2K + t_embed_dim)``.

    Observed fraction, per-channel mean and std of observed entries, and a
    sinusoidal embedding of the diffusion step scaled to ``[0, 1000)``.
    """
    values, obs, _ = _batched(values, bits)
    n_obs = obs.sum(axis=1)
    frac = n_obs / obs.shape[1]
    w = obs[:, :, None]
    denom = np.maximum(n_obs, 1.0)[:, None]
    mean = (w * values).sum(axis=1) / denom
    var = (w * (values - mean[:, None, :]) ** 2).sum(axis=1) / denom
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (values.shape[0],))
    emb = sinusoidal(t * (1000.0 / T), t_embed_dim)
    feat = np.concatenate([frac[:, None], mean, np.sqrt(var), emb], axis=1)
    return feat[:, None, :]


def model_tokens(x_t, x0, bits) -> np.ndarray:
    """Observed steps keep ``x0``, masked steps carry ``x_t``; the bit is appended."""
    x0, obs, _ = _batched(x0, bits)
    x_t = np.asarray(x_t, dtype=np.float64).reshape(x0.shape)
    w = obs[:, :, None]
    return np.concatenate([w * x0 + (1.0 - w) * x_t, w], axis=2)


def loss_weights(bits, K: int) -> np.ndarray:
    """Per-entry weights averaging the squared error over masked entries."""
    obs = np.asarray(bits, dtype=np.float64)
    if obs.ndim == 1:
        obs = obs[None]
    miss = 1.0 - obs
    n = miss.sum(axis=1)
    if np.any(n == 0):
        raise ValueError("mask has no masked positions; the loss would carry no signal")
    return np.repeat((miss / (K * n[:, None]))[:, :, None], K, axis=2)


def training_inputs(x0, bits, t, eps, sched: DiffusionSchedule, config: ModelConfig) -> dict:
    """Graph inputs ``tokens/feat/target/weight`` for a batch of windows."""
    x0b, obs, _ = _batched(x0, bits)
    eps = np.asarray(eps, dtype=np.float64).reshape(x0b.shape)
    t = np.broadcast_to(np.asarray(t), (x0b.shape[0],))
    x_t = q_sample(x0b, t, eps, sched)
    return {
        "tokens": model_tokens(x_t, x0b, obs),
        "feat": condition_features(x0b, obs, t, sched.T, config.t_embed_dim),
        "target": eps,
        "weight": loss_weights(obs, x0b.shape[2]),
    }


def _predictor(model, params=None):
    if hasattr(model, "predict"):
        return lambda tokens, feat, t: model.predict(tokens, feat, params)
    return model


def training_loss(model, x0, bits, t, eps, sched: DiffusionSchedule, config: ModelConfig | None = None,
                  params=None, per_example: bool = False):
    """Masked noise-prediction MSE.

    ``model`` is a network with ``predict`` or a callable ``(tokens, feat, t) -> eps_hat``.
    The condition vector is built inside the network from mask-aware features,
    so it is not passed separately. Returns the batch mean, or the per-example
    losses when ``per_example`` is set.
    """
    if config is None:
        config = model.config
    inputs = training_inputs(x0, bits, t, eps, sched, config)
    eps_hat = np.asarray(_predictor(model, params)(inputs["tokens"], inputs["feat"], t))
    diff = eps_hat.reshape(inputs["target"].shape) - inputs["target"]
    losses = (inputs["weight"] * diff * diff).sum(axis=(1, 2))
    return losses if per_example else float(losses.mean())


def sample_conditional(model, observed, bits, sched: DiffusionSchedule, rng: CounterRNG,
                       config: ModelConfig | None = None, params=None) -> np.ndarray:
    """Ancestral sampling of the masked steps given the observed ones.

    Reverse variance is ``beta_t``; observed entries are reset to their input
    values after every step, so they are returned exactly.
    """
    if config is None:
        config = model.config
    obs_vals, obs, single = _batched(observed, bits)
    predict = _predictor(model, params)
    keep = obs[:, :, None] > 0
    x = np.where(keep, obs_vals, rng.normal(obs_vals.shape))
    if keep.all():
        return obs_vals[0].copy() if single else obs_vals.copy()
    for t in range(sched.T - 1, -1, -1):
        feat = condition_features(obs_vals, obs, t, sched.T, config.t_embed_dim)
        eps_hat = np.asarray(predict(model_tokens(x, obs_vals, obs), feat, t)).reshape(x.shape)
        beta, ab = sched.beta[t], sched.alpha_bar[t]
        mean = (x - beta / np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(1.0 - beta)
        if t > 0:
            x = mean + np.sqrt(beta) * rng.normal(x.shape)
        else:
            x = mean
        x = np.where(keep, obs_vals, x)
    return x[0] if single else x


def oracle_predictor(x0, sched: DiffusionSchedule):
    """A predictor returning the exact noise that produced ``x_t`` from ``x0``."""
    x0 = np.asarray(x0, dtype=np.float64)
    x0 = x0[None] if x0.ndim == 2 else x0

    def predict(tokens, feat, t):
        x_t = tokens[:, :, :x0.shape[2]]
        ab = sched.alpha_bar[np.asarray(t)]
        ab = ab.reshape(ab.shape + (1,) * (3 - ab.ndim))
        return (x_t - np.sqrt(ab) * x0) / np.sqrt(1.0 - ab)

    return predict
