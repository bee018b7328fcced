"""Worst-case per-example gradient bounds for bounded AdaLN conditioning.

The structural bound is ``S = A0 + a_c c_max + a_g gamma_max + a_b beta_max + a_a alpha_max``
and the clipping ratio bound is ``S / C``. A one-block micro-network with a
tanh MLP as ``F`` makes every constant measurable, so the bound can be checked
against brute-force gradient search.

Micro-network constants (all measured on the evaluation grid, then inflated):
with ``G >= ||y - target||``, ``H >= ||F(v)||``, ``U >= ||LN(x)||`` (Frobenius over
tokens), ``w = max(||W1||, ||W2||)`` (spectral) and ``L_F = w^2``, the
chain rule gives

* ``||dl/d alpha|| <= G H`` and ``||dl/d gamma|| <= alpha_max L_F U G``,
  ``||dl/d beta|| <= alpha_max L_F sqrt(L) G``; these combine into ``g_raw``,
  the bound on the gradient at the modulation pre-activations, so
  ``||dl/dW|| <= c_max g_raw`` and ``||dl/db|| <= g_raw``;
* the ``F`` weights contribute ``alpha_max G (sqrt(L m) + sqrt(L) + sqrt(L) w)``
  plus ``alpha_max w G ||V||`` with ``||V|| <= gamma_max U + sqrt(L d) beta_max``.

Products of bounds are folded into the coefficients of the bound that
multiplies them, so the coefficients depend on the other limits.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Graph
from .model import BoundConfig, OPERATORS, block_forward
from .rng import CounterRNG

MARGIN = 1.10


@dataclass(frozen=True)
class ArchConstants:
    A0: float
    a_c: float
    a_gamma: float
    a_beta: float
    a_alpha: float
    L_LN: float = 1.0
    L_F: float = 1.0
    U_max: float = 1.0
    H_max: float = 1.0
    G_ell: float = 1.0
    omega_max: float = 1.0
    X_max: float = 1.0

    def __post_init__(self):
        for name, v in asdict(self).items():
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and non-negative, got {v}")
        for name in ("L_LN", "L_F", "U_max", "H_max", "G_ell", "omega_max", "X_max"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass(frozen=True)
class ReferenceMagnitudes:
    C_ref: float
    Gamma_ref: float
    B_ref: float
    A_ref: float

    def __post_init__(self):
        for name, v in asdict(self).items():
            if not (v > 0 and math.isfinite(v)):
                raise ValueError(f"{name} must be finite and > 0, got {v}")


def _limits(bounds: BoundConfig):
    return bounds.c_max, bounds.gamma_max, bounds.beta_max, bounds.alpha_max


def block_jacobian_bound(consts: ArchConstants, bounds: BoundConfig) -> float:
    return 1.0 + bounds.alpha_max * consts.L_F * bounds.gamma_max * consts.L_LN


def s_aware(consts: ArchConstants, bounds: BoundConfig) -> float:
    c, g, b, a = _limits(bounds)
    return consts.A0 + consts.a_c * c + consts.a_gamma * g + consts.a_beta * b + consts.a_alpha * a


def rho_bound(S: float, C: float) -> float:
    if not C > 0:
        raise ValueError("C must be > 0")
    return S / C


def convex_ratio(consts: ArchConstants, bounds: BoundConfig, refs: ReferenceMagnitudes):
    """Bound at ``bounds`` relative to the bound at the reference magnitudes.

    Returns ``(ratio, lambdas, rs)`` where ``lambdas`` are the five convex
    weights (constant term first) and ``rs`` the four ``bound / reference``
    ratios; ``ratio = lambdas[0] + lambdas[1:] @ rs``.
    """
    u = np.array([consts.A0, consts.a_c * refs.C_ref, consts.a_gamma * refs.Gamma_ref,
                  consts.a_beta * refs.B_ref, consts.a_alpha * refs.A_ref])
    D = u.sum()
    if not D > 0:
        raise ValueError("all weights vanish; the ratio is undefined")
    lam = u / D
    if abs(lam.sum() - 1.0) > 1e-12:
        raise ArithmeticError(f"weights sum to {lam.sum()!r}")
    rs = np.array(_limits(bounds)) / np.array([refs.C_ref, refs.Gamma_ref, refs.B_ref, refs.A_ref])
    return float(lam[0] + lam[1:] @ rs), lam, rs


# ------------------------------------------------------------- micro model


@dataclass
class MicroAdaLN:
    """One AdaLN block with ``F(v) = tanh(v W1 + b1) W2 + b2`` and loss ``0.5 ||y - target||^2``."""

    L: int
    d: int
    m: int
    k: int
    bounds: BoundConfig
    params: dict
    target: np.ndarray

    @classmethod
    def random(cls, seed: int, L=3, d=4, m=6, k=3, bounds: BoundConfig | None = None,
               scale: float = 1.0) -> "MicroAdaLN":
        rng = CounterRNG(seed, 11)
        if bounds is None:
            lim = 0.3 + 2.7 * rng.uniform(4)
            ops = sorted(OPERATORS)
            bounds = BoundConfig(*map(float, lim), operator=ops[rng.integers(len(ops))])
        p = {
            "mod.W": scale * rng.normal((k, 3 * d)),
            "mod.b": scale * rng.normal((1, 3 * d)),
            "F.W1": scale * rng.normal((d, m)) / math.sqrt(d),
            "F.b1": scale * 0.5 * rng.normal((1, m)),
            "F.W2": scale * rng.normal((m, d)) / math.sqrt(m),
            "F.b2": scale * 0.5 * rng.normal((1, d)),
        }
        return cls(L, d, m, k, bounds, p, rng.normal((L, d)))

    @property
    def n_params(self) -> int:
        return sum(v.size for v in self.params.values())

    def inner(self, p, v):
        return ad.tanh(v @ p["F.W1"] + p["F.b1"]) @ p["F.W2"] + p["F.b2"]

    def apply(self, p, inputs):
        x, c = inputs["x"], inputs["c"]
        c_hat = ad.project_ball(c, self.bounds.c_max) if self.bounds.bound_condition else c
        v_seen = {}

        def F(v):
            v_seen["v"] = v
            out = self.inner(p, v)
            v_seen["F"] = out
            return out

        y, (g, b, a) = block_forward(p, "", x, c_hat, self.d, self.bounds, F)
        diff = y - inputs["target"]
        return {"y": y, "loss": 0.5 * (diff * diff).sum(axis=(1, 2)), "F": v_seen["F"],
                "u": ad.layer_norm(x), "gamma": g, "beta": b, "alpha": a, "c_hat": c_hat}

    def graph(self) -> Graph:
        return Graph(self.apply, self.params, {"x": (None, self.L, self.d), "c": (None, 1, self.k)})

    def inputs(self, x, c) -> dict:
        x = np.asarray(x, dtype=np.float64).reshape(-1, self.L, self.d)
        c = np.asarray(c, dtype=np.float64).reshape(-1, 1, self.k)
        return {"x": x, "c": c, "target": np.broadcast_to(self.target, x.shape).copy()}

    def grid(self, input_grid, cond_grid) -> dict:
        """All ``(x, c)`` pairs of the two grids."""
        xs = np.asarray(input_grid, dtype=np.float64).reshape(-1, self.L, self.d)
        cs = np.asarray(cond_grid, dtype=np.float64).reshape(-1, self.k)
        return self.inputs(np.repeat(xs, len(cs), axis=0), np.tile(cs, (len(xs), 1)))


def sample_grids(model: MicroAdaLN, seed: int, n_x=24, n_c=24, x_scale=2.0, c_scale=3.0):
    """Random input and condition grids; conditions span norms inside and beyond ``c_max``."""
    rng = CounterRNG(seed, 12)
    xs = x_scale * rng.normal((n_x, model.L, model.d))
    dirs = rng.normal((n_c, model.k))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    radii = c_scale * model.bounds.c_max * rng.uniform(n_c)
    return xs, dirs * radii[:, None]


def brute_force_grad_max(model, input_grid, cond_grid=None, chunk: int = 4096) -> float:
    """Largest per-example parameter-gradient norm over a grid.

    ``model`` exposes ``graph()`` and either ``grid(input_grid, cond_grid)`` or
    ``inputs(input_grid)`` returning batched graph inputs.
    """
    inputs = model.grid(input_grid, cond_grid) if cond_grid is not None else model.inputs(input_grid)
    n = len(next(iter(inputs.values())))
    graph = model.graph()
    best = 0.0
    for start in range(0, n, chunk):
        part = {k: v[start:start + chunk] for k, v in inputs.items()}
        _, grads, _ = ad.per_example_gradients(graph, part, len(next(iter(part.values()))))
        best = max(best, float(np.max(grads.norm())))
    return best


def spectral_norm(M) -> float:
    return float(np.linalg.norm(np.asarray(M, dtype=np.float64), 2))


def measure_constants(model: MicroAdaLN, input_grid, cond_grid, margin: float = MARGIN) -> ArchConstants:
    """Constants for the micro-network over the given grids (see module docstring)."""
    inputs = model.grid(input_grid, cond_grid)
    out = ad.forward(model.graph(), inputs, track=False).outputs
    y, F, u = out["y"].value, out["F"].value, out["u"].value
    flat = lambda a: np.sqrt((a.reshape(len(a), -1) ** 2).sum(axis=1)).max()
    G = margin * flat(y - inputs["target"])
    H = margin * flat(F)
    U = margin * flat(u)
    xs = inputs["x"]
    var = xs.var(axis=2)
    L_LN = margin * float((1.0 / np.sqrt(var + ad.LN_EPS)).max())
    X = margin * flat(xs)
    w = max(spectral_norm(model.params["F.W1"]), spectral_norm(model.params["F.W2"]))
    L_F = w * w
    b = model.bounds
    L, m, d = model.L, model.m, model.d
    g_raw = math.sqrt((b.alpha_max * L_F * U * G) ** 2 + (b.alpha_max * L_F * math.sqrt(L) * G) ** 2 + (G * H) ** 2)
    a_alpha = G * (math.sqrt(L * m) + math.sqrt(L) + math.sqrt(L) * w)
    return ArchConstants(
        A0=g_raw,
        a_c=g_raw,
        a_gamma=b.alpha_max * w * G * U,
        a_beta=b.alpha_max * w * G * math.sqrt(L * d),
        a_alpha=a_alpha,
        L_LN=L_LN, L_F=L_F, U_max=U, H_max=H, G_ell=G, omega_max=w, X_max=X,
    )


def block_jacobian(model: MicroAdaLN, x, c) -> np.ndarray:
    """Jacobian ``dy/dx`` of the block output for one ``(x, c)``, shape ``(L d, L d)``."""
    n = model.L * model.d
    x = np.asarray(x, dtype=np.float64).reshape(1, model.L, model.d)
    consts = {k: ad.constant(v) for k, v in model.params.items()}
    xv = ad.leaf(x, "x")
    c = ad.constant(np.asarray(c, dtype=np.float64).reshape(1, 1, model.k))
    c_hat = ad.project_ball(c, model.bounds.c_max) if model.bounds.bound_condition else c
    y, _ = block_forward(consts, "", xv, c_hat, model.d, model.bounds, lambda v: model.inner(consts, v))
    J = np.empty((n, n))
    for i in range(n):
        seed = np.zeros(n)
        seed[i] = 1.0
        J[i] = ad.grad((y * seed.reshape(y.shape)).sum(), [xv])[0].reshape(-1)
    return J


def power_iteration(J, iters: int = 200, seed: int = 0) -> float:
    """Largest singular value of ``J`` by power iteration on ``J^T J``."""
    J = np.asarray(J, dtype=np.float64)
    v = CounterRNG(seed, 13).normal(J.shape[1])
    v /= np.linalg.norm(v)
    s = 0.0
    for _ in range(iters):
        w = J.T @ (J @ v)
        nw = np.linalg.norm(w)
        if nw == 0:
            return 0.0
        v = w / nw
        s = math.sqrt(nw)
    return float(np.linalg.norm(J @ v)) if s else 0.0


# ------------------------------------------------------------ calibration


def reference_magnitudes(c_norms, gammas, betas, alphas, q: float = 0.99) -> ReferenceMagnitudes:
    """References from the ``q`` quantile of observed magnitudes."""
    from .diagnostics import percentile

    vals = [percentile(np.abs(np.asarray(a, dtype=np.float64)).reshape(-1), q)
            for a in (c_norms, gammas, betas, alphas)]
    return ReferenceMagnitudes(*vals)


def bound_report(consts: ArchConstants, bounds: BoundConfig, refs: ReferenceMagnitudes | None,
                 C: float, title: str = "sensitivity bound") -> str:
    lines = [f"# {title}", "[constants]"]
    lines += [f"{k} = {float(v)!r}" for k, v in asdict(consts).items()]
    lines += ["[bounds]"] + [f"{k} = {getattr(bounds, k)!r}"
                             for k in ("c_max", "gamma_max", "beta_max", "alpha_max", "operator")]
    S = float(s_aware(consts, bounds))
    lines += ["[summary]", f"S_aware = {S!r}", f"clip_C = {C!r}", f"rho_bound = {rho_bound(S, C)!r}",
              f"block_jacobian_bound = {float(block_jacobian_bound(consts, bounds))!r}"]
    if refs is not None:
        ratio, lam, rs = convex_ratio(consts, bounds, refs)
        lines += ["[references]"] + [f"{k} = {float(v)!r}" for k, v in asdict(refs).items()]
        lines += ["[convex_ratio]", f"ratio = {float(ratio)!r}",
                  "lambda = " + ", ".join(repr(float(v)) for v in lam),
                  "r = " + ", ".join(repr(float(v)) for v in rs),
                  f"max_r = {max(1.0, float(rs.max()))!r}"]
    return "\n".join(lines) + "\n"
