"""Dense float64 arithmetic, seeded random streams and a finite-difference oracle.

Matrices are plain 2-D ``numpy.ndarray`` objects of dtype float64 and vectors
are 1-D arrays; the helpers here only add shape validation and the fixed
reduction order the rest of the package relies on.
"""
from dataclasses import dataclass
import zlib

import numpy as np

from . import kernels
from .errors import DegenerateBatchError, NumericalError, ShapeError


@dataclass(frozen=True)
class BatchStats:
    """Per-feature mean and population variance of one batch."""

    mu: np.ndarray
    var: np.ndarray

    @property
    def dim(self):
        return self.mu.shape[0]


def as_matrix(a, name="matrix"):
    arr = np.ascontiguousarray(a, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {arr.shape}", name=name, shape=arr.shape)
    return arr


def as_vector(a, name="vector"):
    arr = np.ascontiguousarray(a, dtype=np.float64)
    if arr.ndim != 1:
        raise ShapeError(f"{name} must be 1-D, got shape {arr.shape}", name=name, shape=arr.shape)
    return arr


def matmul(a, b):
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(
            f"cannot multiply {a.shape[0]}x{a.shape[1]} by {b.shape[0]}x{b.shape[1]}",
            left=a.shape,
            right=b.shape,
        )
    with np.errstate(over="ignore", invalid="ignore"):
        out = a @ b
    if not np.all(np.isfinite(out)):
        raise NumericalError("matmul produced non-finite values", left=a.shape, right=b.shape)
    return out


def batch_mean_var(batch):
    """Column means and divide-by-B variances, summed row by row in order."""
    batch = as_matrix(batch, "batch")
    if batch.shape[0] < 1:
        raise DegenerateBatchError("batch_mean_var needs at least one row", rows=batch.shape[0])
    mu, var = kernels.batch_mean_var(batch)
    return BatchStats(mu, var)


def finite_diff_grad(f, x, h=1e-5):
    """Central-difference gradient of the scalar function ``f`` at ``x``.

    ``x`` may be a matrix or a vector; the result has the same shape. ``x`` is
    not modified.
    """
    x = np.array(x, dtype=np.float64, copy=True)
    grad = np.empty_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + h
        fp = float(f(x))
        flat[k] = orig - h
        fm = float(f(x))
        flat[k] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            idx = np.unravel_index(k, x.shape)
            raise NumericalError(
                f"non-finite function value when perturbing entry {tuple(int(i) for i in idx)}",
                index=tuple(int(i) for i in idx),
                f_plus=fp,
                f_minus=fm,
            )
        gflat[k] = (fp - fm) / (2.0 * h)
    return grad


def max_rel_error(analytic, numeric, floor=1e-8):
    """Largest entrywise ``|a - n| / max(|a|, |n|, floor)``."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - n) / denom))


def _key_to_int(key):
    if isinstance(key, (int, np.integer)):
        return int(key) & 0xFFFFFFFF
    return zlib.crc32(str(key).encode("utf-8"))


class Rng:
    """Seeded Philox (counter-based) stream with deterministic splitting.

    ``derive(*keys)`` returns an independent child stream identified by the
    keys, so two calls with the same keys give the same sequence no matter
    what was drawn from the parent in between.
    """

    def __init__(self, seed, _path=()):
        self.seed = int(seed)
        self._path = tuple(_path)
        ss = np.random.SeedSequence(self.seed, spawn_key=self._path)
        self._gen = np.random.Generator(np.random.Philox(ss))

    def derive(self, *keys):
        return Rng(self.seed, self._path + tuple(_key_to_int(k) for k in keys))

    @property
    def generator(self):
        return self._gen

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self._gen.normal(loc, scale, size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, n):
        return self._gen.permutation(n)

    def random(self, size=None):
        return self._gen.random(size)
