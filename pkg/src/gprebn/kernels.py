"""Backend selection for the BN inner loops.

The compiled ``_ckernels`` extension is used when it imports; otherwise the
numpy ``_pykernels`` module. Set ``GPREBN_BACKEND=python`` to force the
fallback (``=compiled`` makes a missing extension an error).
"""
import os

import numpy as np

from . import _pykernels

_requested = os.environ.get("GPREBN_BACKEND", "auto").lower()

_compiled = None
if _requested != "python":
    try:
        from . import _ckernels as _compiled
    except ImportError:
        if _requested == "compiled":
            raise

_impl = _compiled if _compiled is not None else _pykernels
BACKEND = "compiled" if _compiled is not None else "python"


def available_backends():
    return ("compiled", "python") if _compiled is not None else ("python",)


def get_backend(name=None):
    """Return the kernel module for ``name`` (default: the active one)."""
    if name is None:
        return _impl
    if name == "python":
        return _pykernels
    if name == "compiled":
        if _compiled is None:
            raise ImportError("compiled kernels are not built")
        return _compiled
    raise ValueError(f"unknown backend {name!r}")


def _c(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def batch_mean_var(x):
    return _impl.batch_mean_var(_c(x))


def normalize_affine(x, mu, var, gamma, beta, eps):
    return _impl.normalize_affine(_c(x), _c(mu), _c(var), _c(gamma), _c(beta), float(eps))


def bn_input_grad(g, xhat, scale, preserve):
    return _impl.bn_input_grad(_c(g), _c(xhat), _c(scale), bool(preserve))
