"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 20] [--check]

Prints one line per kernel with the best time of each backend and the speedup.
With ``--check`` the outputs of both backends are compared first.
"""

from __future__ import annotations

import argparse
import sys
import timeit

import numpy as np

from dpadaln import kernels
from dpadaln.kernels import KIND_BAND, KIND_HARD, KIND_STE, KIND_TANH


def cases(rng):
    x = rng.normal(size=(96, 24, 96)) * 3
    ln_x = rng.normal(size=(96 * 24, 64))
    gy = rng.normal(size=ln_x.shape)
    G = rng.normal(size=(96, 20000))
    out = [
        ("splitmix64 (1e6)", lambda k: k.splitmix64(12345, 0, 1_000_000)),
        ("counter_uniform (1e6)", lambda k: k.counter_uniform(12345, 0, 1_000_000)),
        ("counter_normal (1e6)", lambda k: k.counter_normal(12345, 0, 1_000_000)),
    ]
    for name, kind in (("tanh", KIND_TANH), ("hard", KIND_HARD), ("band", KIND_BAND), ("ste", KIND_STE)):
        out.append((f"bound_forward[{name}]", lambda k, kind=kind: k.bound_forward(x, 1.5, kind, 0.15)))
        out.append((f"bound_derivative[{name}]", lambda k, kind=kind: k.bound_derivative(x, 1.5, kind, 0.15)))

    def ln_pair(k):
        y, rstd = k.layer_norm_forward(ln_x, 1e-6)
        return k.layer_norm_backward(gy, y, rstd)

    out.append(("layer_norm_forward", lambda k: k.layer_norm_forward(ln_x, 1e-6)))
    out.append(("layer_norm fwd+bwd", ln_pair))
    out.append(("clip_accumulate (96x20000)", lambda k: k.clip_accumulate(G, 1.0)))
    return out


def _flat(v):
    if isinstance(v, tuple):
        return np.concatenate([np.asarray(a, dtype=np.float64).reshape(-1) for a in v])
    return np.asarray(v, dtype=np.float64).reshape(-1)


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--check", action="store_true", help="compare backend outputs before timing")
    args = ap.parse_args(argv)
    impls = kernels.implementations()
    if "compiled" not in impls:
        print("compiled extension not built; timing the fallback only", file=sys.stderr)
    rng = np.random.default_rng(0)
    names = list(impls)
    print(f"{'kernel':<28}" + "".join(f"{n + ' (ms)':>16}" for n in names) + ("    speedup" if len(names) > 1 else ""))
    for label, fn in cases(rng):
        if args.check and len(names) > 1:
            a, b = (_flat(fn(impls[n])) for n in names)
            err = float(np.max(np.abs(a - b) / np.maximum(1.0, np.abs(a))))
            if err > 1e-12:
                print(f"{label}: backends differ (max rel {err:.2e})", file=sys.stderr)
                return 1
        best = {n: min(timeit.repeat(lambda: fn(impls[n]), number=1, repeat=args.repeat)) for n in names}
        line = f"{label:<28}" + "".join(f"{best[n] * 1e3:>16.3f}" for n in names)
        if len(names) > 1:
            line += f"{best['python'] / best['compiled']:>10.2f}x"
        print(line)
    return 0


if __name__ == "__main__":
    sys.exit(main())
