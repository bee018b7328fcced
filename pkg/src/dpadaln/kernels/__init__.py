"""Hot kernels with a compiled core and a numpy fallback.

The compiled extension is used when it imports; set ``DPADALN_KERNELS=python``
to force the fallback. ``BACKEND`` names the active implementation.
"""

import os

from . import _reference

KIND_TANH = _reference.KIND_TANH
KIND_HARD = _reference.KIND_HARD
KIND_BAND = _reference.KIND_BAND
KIND_STE = _reference.KIND_STE

_NAMES = (
    "splitmix64",
    "counter_uniform",
    "counter_normal",
    "bound_forward",
    "bound_derivative",
    "layer_norm_forward",
    "layer_norm_backward",
    "clip_accumulate",
)


def _load(choice):
    if choice == "python":
        return _reference, "python"
    try:
        from . import _core
    except ImportError:
        if choice == "compiled":
            raise
        return _reference, "python"
    return _core, "compiled"


_impl, BACKEND = _load(os.environ.get("DPADALN_KERNELS", "auto").lower())

splitmix64 = _impl.splitmix64
counter_uniform = _impl.counter_uniform
counter_normal = _impl.counter_normal
bound_forward = _impl.bound_forward
bound_derivative = _impl.bound_derivative
layer_norm_forward = _impl.layer_norm_forward
layer_norm_backward = _impl.layer_norm_backward
clip_accumulate = _impl.clip_accumulate


def implementations():
    """Map backend name to module for every backend that imports."""
    out = {"python": _reference}
    try:
        from . import _core
    except ImportError:
        pass
    else:
        out["compiled"] = _core
    return out


__all__ = ["BACKEND", "implementations", *_NAMES]
