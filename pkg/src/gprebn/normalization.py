"""Batch-normalization variants with hand-derived backward passes.

Four layer variants share one state object (``BNLayerState``):

``STANDARD_TRAIN``
    normalize with the current batch statistics; gradients flow through the
    batch mean and variance (cross-instance backpropagation).
``FROZEN_EVAL``
    normalize with the source running statistics; gradients are per instance.
``DETACHED_STATS``
    normalize with the current batch statistics but treat them as constants
    in the backward pass.
``GPREBN``
    normalize with any statistics chosen by ``StatsSource`` while keeping the
    gradient form of ``STANDARD_TRAIN``. Implemented through the effective
    affine pair ``gamma' = (s_c / s) * gamma`` and
    ``beta' = ((mu_c - mu) / s) * gamma + beta`` applied to the batch-standardized
    input, where ``s_c`` and ``s`` are ``sqrt(var + eps)`` of the batch and of
    the resolved statistics. Both pairs are constants in the backward pass.

With ``StatsSource.CURRENT_BATCH`` the effective affine pair equals
``(gamma, beta)`` bit for bit, so GpreBN reproduces ``STANDARD_TRAIN`` exactly.
"""
from dataclasses import dataclass, field, replace
import enum

import numpy as np

from . import kernels
from .errors import DegenerateBatchError, ShapeError, UninitializedStatsError
from .numerics import BatchStats, as_matrix, batch_mean_var

DEFAULT_EPS = 1e-5
DEFAULT_EMA_MOMENTUM = 0.1

__all__ = [
    "AffineParams",
    "BNForwardTape",
    "BNLayerState",
    "BatchStats",
    "EffectiveAffine",
    "RunningStats",
    "StatsSource",
    "Variant",
    "bn_backward",
    "bn_eval_forward",
    "bn_forward",
    "bn_train_backward",
    "bn_train_forward",
    "detached_backward",
    "effective_affine",
    "frozen_backward",
    "gprebn_backward",
    "gprebn_forward",
    "resolve_stats",
    "update_running",
]


class Variant(str, enum.Enum):
    STANDARD_TRAIN = "standard_train"
    FROZEN_EVAL = "frozen_eval"
    DETACHED_STATS = "detached_stats"
    GPREBN = "gprebn"


@dataclass(frozen=True)
class StatsSource:
    kind: str
    theta: float = None

    CURRENT_BATCH = None  # filled in below
    SOURCE_RUNNING = None
    TESTING_RUNNING = None

    _KINDS = ("current_batch", "source_running", "testing_running", "theta_mixture")

    def __post_init__(self):
        if self.kind not in self._KINDS:
            raise ValueError(f"unknown statistics source {self.kind!r}")
        if self.kind == "theta_mixture":
            if self.theta is None or not 0.0 <= float(self.theta) <= 1.0:
                raise ValueError(f"theta_mixture needs theta in [0, 1], got {self.theta!r}")
        elif self.theta is not None:
            raise ValueError(f"theta is only valid for theta_mixture, not {self.kind}")

    @classmethod
    def theta_mixture(cls, theta):
        return cls("theta_mixture", float(theta))

    @classmethod
    def parse(cls, text):
        """Parse ``"current_batch"``, ``"testing_running"``, ``"theta_mixture:0.3"``..."""
        if isinstance(text, StatsSource):
            return text
        text = str(text).strip().lower()
        if text.startswith("theta_mixture"):
            _, _, val = text.partition(":")
            if not val:
                raise ValueError("theta_mixture needs a weight, e.g. 'theta_mixture:0.5'")
            return cls.theta_mixture(float(val))
        return cls(text)

    def label(self):
        if self.kind == "theta_mixture":
            return f"theta_mixture:{self.theta:g}"
        return self.kind


StatsSource.CURRENT_BATCH = StatsSource("current_batch")
StatsSource.SOURCE_RUNNING = StatsSource("source_running")
StatsSource.TESTING_RUNNING = StatsSource("testing_running")


@dataclass(frozen=True)
class RunningStats:
    """Moving-average statistics track.

    ``mode`` is ``"cma"`` (weight ``1/n`` on the n-th batch) or ``"ema"``
    (fixed ``momentum``).
    """

    mu_r: np.ndarray
    var_r: np.ndarray
    n_tracked: int = 0
    mode: str = "cma"
    momentum: float = DEFAULT_EMA_MOMENTUM

    def __post_init__(self):
        if self.mode not in ("cma", "ema"):
            raise ValueError(f"running-stat mode must be 'cma' or 'ema', got {self.mode!r}")
        if self.mode == "ema" and not 0.0 < self.momentum < 1.0:
            raise ValueError(f"EMA momentum must lie in (0, 1), got {self.momentum}")

    @classmethod
    def fresh(cls, dim, mode="cma", momentum=DEFAULT_EMA_MOMENTUM):
        return cls(np.zeros(dim), np.ones(dim), 0, mode, momentum)

    @property
    def dim(self):
        return self.mu_r.shape[0]

    @property
    def initialized(self):
        return self.n_tracked >= 1

    def reset_count(self):
        return replace(self, n_tracked=0)

    def copy(self):
        return replace(self, mu_r=self.mu_r.copy(), var_r=self.var_r.copy())


def update_running(stats, batch_stats):
    """One moving-average step; returns a new ``RunningStats``."""
    if batch_stats.mu.shape != stats.mu_r.shape:
        raise ShapeError(
            f"running stats have dim {stats.dim}, batch stats have dim {batch_stats.dim}",
            running=stats.dim,
            batch=batch_stats.dim,
        )
    n = stats.n_tracked + 1
    lam = 1.0 / n if stats.mode == "cma" else stats.momentum
    mu = lam * batch_stats.mu + (1.0 - lam) * stats.mu_r
    var = lam * batch_stats.var + (1.0 - lam) * stats.var_r
    return replace(stats, mu_r=mu, var_r=var, n_tracked=n)


@dataclass
class AffineParams:
    gamma: np.ndarray
    beta: np.ndarray

    def copy(self):
        return AffineParams(self.gamma.copy(), self.beta.copy())


@dataclass(frozen=True)
class EffectiveAffine:
    gamma_prime: np.ndarray
    beta_prime: np.ndarray


@dataclass
class BNLayerState:
    affine: AffineParams
    source_running: RunningStats
    testing_running: RunningStats
    variant: Variant = Variant.STANDARD_TRAIN
    stats_source: StatsSource = field(default_factory=lambda: StatsSource.CURRENT_BATCH)
    epsilon: float = DEFAULT_EPS

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        d = self.affine.gamma.shape[0]
        for name, n in (
            ("beta", self.affine.beta.shape[0]),
            ("source_running", self.source_running.dim),
            ("testing_running", self.testing_running.dim),
        ):
            if n != d:
                raise ShapeError(f"{name} has dim {n}, gamma has dim {d}", field=name)

    @classmethod
    def fresh(cls, dim, epsilon=DEFAULT_EPS, source_mode="ema", momentum=DEFAULT_EMA_MOMENTUM):
        return cls(
            AffineParams(np.ones(dim), np.zeros(dim)),
            RunningStats.fresh(dim, source_mode, momentum),
            RunningStats.fresh(dim, "cma"),
            epsilon=epsilon,
        )

    @property
    def dim(self):
        return self.affine.gamma.shape[0]

    @property
    def gamma(self):
        return self.affine.gamma

    @property
    def beta(self):
        return self.affine.beta


@dataclass
class BNForwardTape:
    x_hat: np.ndarray
    batch_stats: BatchStats
    norm_mu: np.ndarray
    norm_var: np.ndarray
    effective: EffectiveAffine
    variant: Variant


def _check_input(batch, layer, min_rows):
    batch = as_matrix(batch, "batch")
    if batch.shape[1] != layer.dim:
        raise ShapeError(
            f"batch has {batch.shape[1]} features, layer expects {layer.dim}",
            batch=batch.shape,
            dim=layer.dim,
        )
    if batch.shape[0] < min_rows:
        raise DegenerateBatchError(
            f"batch statistics need at least {min_rows} rows, got {batch.shape[0]}",
            rows=batch.shape[0],
        )
    return batch


def _check_upstream(upstream, tape):
    upstream = as_matrix(upstream, "upstream")
    if upstream.shape != tape.x_hat.shape:
        raise ShapeError(
            f"upstream shape {upstream.shape} does not match forward output {tape.x_hat.shape}",
            upstream=upstream.shape,
            output=tape.x_hat.shape,
        )
    return upstream


def _require_source(layer):
    if not layer.source_running.initialized:
        raise UninitializedStatsError(
            "source running statistics are uninitialized (n_tracked == 0)", track="source_running"
        )


def _batch_normalized(batch, layer, variant):
    batch = _check_input(batch, layer, 2)
    stats = batch_mean_var(batch)
    out, x_hat = kernels.normalize_affine(
        batch, stats.mu, stats.var, layer.gamma, layer.beta, layer.epsilon
    )
    eff = EffectiveAffine(layer.gamma.copy(), layer.beta.copy())
    return out, BNForwardTape(x_hat, stats, stats.mu, stats.var, eff, variant)


def bn_train_forward(batch, layer):
    """Standard training-mode BN. Does not touch the running statistics."""
    return _batch_normalized(batch, layer, Variant.STANDARD_TRAIN)


def bn_detached_forward(batch, layer):
    return _batch_normalized(batch, layer, Variant.DETACHED_STATS)


def bn_train_backward(upstream, tape, layer):
    upstream = _check_upstream(upstream, tape)
    s_c = np.sqrt(tape.batch_stats.var + layer.epsilon)
    grad_x, sum_g, sum_gx = kernels.bn_input_grad(
        upstream, tape.x_hat, tape.effective.gamma_prime / s_c, True
    )
    return grad_x, sum_gx, sum_g


def detached_backward(upstream, tape, layer):
    """Backward pass with the batch mean and variance held constant."""
    upstream = _check_upstream(upstream, tape)
    s_c = np.sqrt(tape.batch_stats.var + layer.epsilon)
    grad_x, sum_g, sum_gx = kernels.bn_input_grad(
        upstream, tape.x_hat, tape.effective.gamma_prime / s_c, False
    )
    return grad_x, sum_gx, sum_g


def bn_eval_forward(batch, layer, with_tape=False):
    """Normalize with the source running statistics (any batch size).

    With ``with_tape=True`` returns ``(output, tape)`` so the frozen backward
    pass can compute the affine gradients.
    """
    batch = _check_input(batch, layer, 1)
    _require_source(layer)
    run = layer.source_running
    out, x_hat = kernels.normalize_affine(
        batch, run.mu_r, run.var_r, layer.gamma, layer.beta, layer.epsilon
    )
    if not with_tape:
        return out
    eff = EffectiveAffine(layer.gamma.copy(), layer.beta.copy())
    stats = BatchStats(run.mu_r, run.var_r)
    return out, BNForwardTape(x_hat, stats, run.mu_r, run.var_r, eff, Variant.FROZEN_EVAL)


def frozen_backward(upstream, tape, layer):
    upstream = _check_upstream(upstream, tape)
    s_r = np.sqrt(tape.norm_var + layer.epsilon)
    grad_x, sum_g, sum_gx = kernels.bn_input_grad(
        upstream, tape.x_hat, tape.effective.gamma_prime / s_r, False
    )
    return grad_x, sum_gx, sum_g


def resolve_stats(source, batch_stats, layer):
    """Return the ``(mu, var)`` pair that ``source`` selects."""
    kind = source.kind
    if kind == "current_batch":
        return batch_stats.mu, batch_stats.var
    if kind in ("source_running", "theta_mixture"):
        _require_source(layer)
    if kind in ("testing_running", "theta_mixture") and not layer.testing_running.initialized:
        raise UninitializedStatsError(
            "testing running statistics are uninitialized (n_tracked == 0)", track="testing_running"
        )
    src, tst = layer.source_running, layer.testing_running
    if kind == "source_running":
        return src.mu_r, src.var_r
    if kind == "testing_running":
        return tst.mu_r, tst.var_r
    theta = source.theta
    if theta == 0.0:
        return src.mu_r, src.var_r
    if theta == 1.0:
        return tst.mu_r, tst.var_r
    # variances are mixed, not standard deviations
    mu = theta * tst.mu_r + (1.0 - theta) * src.mu_r
    var = theta * tst.var_r + (1.0 - theta) * src.var_r
    return mu, var


def effective_affine(layer, batch_stats, mu, var):
    s_c = np.sqrt(batch_stats.var + layer.epsilon)
    s = np.sqrt(var + layer.epsilon)
    gamma_p = (s_c / s) * layer.gamma
    beta_p = ((batch_stats.mu - mu) / s) * layer.gamma + layer.beta
    return EffectiveAffine(gamma_p, beta_p)


def gprebn_forward(batch, layer, source=None):
    """Gradient-preserving BN forward pass.

    ``source`` overrides ``layer.stats_source``. The testing running track is
    not updated here; callers update it before the forward pass when they
    want the batch to contribute to its own statistics.
    """
    batch = _check_input(batch, layer, 2)
    source = layer.stats_source if source is None else source
    stats = batch_mean_var(batch)
    mu, var = resolve_stats(source, stats, layer)
    eff = effective_affine(layer, stats, mu, var)
    out, x_hat = kernels.normalize_affine(
        batch, stats.mu, stats.var, eff.gamma_prime, eff.beta_prime, layer.epsilon
    )
    return out, BNForwardTape(x_hat, stats, mu, var, eff, Variant.GPREBN)


def gprebn_backward(upstream, tape, layer):
    upstream = _check_upstream(upstream, tape)
    s_c = np.sqrt(tape.batch_stats.var + layer.epsilon)
    s = np.sqrt(tape.norm_var + layer.epsilon)
    grad_x, sum_g, sum_gx = kernels.bn_input_grad(
        upstream, tape.x_hat, tape.effective.gamma_prime / s_c, True
    )
    # d y / d gamma = x_hat * s_c / s + (mu_c - mu) / s
    grad_gamma = (s_c / s) * sum_gx + ((tape.batch_stats.mu - tape.norm_mu) / s) * sum_g
    return grad_x, grad_gamma, sum_g


def bn_forward(batch, layer, variant=None, source=None):
    """Dispatch to the forward pass of ``variant`` (default ``layer.variant``)."""
    variant = Variant(layer.variant if variant is None else variant)
    if variant is Variant.STANDARD_TRAIN:
        return bn_train_forward(batch, layer)
    if variant is Variant.DETACHED_STATS:
        return bn_detached_forward(batch, layer)
    if variant is Variant.FROZEN_EVAL:
        return bn_eval_forward(batch, layer, with_tape=True)
    return gprebn_forward(batch, layer, source)


_BACKWARD = {
    Variant.STANDARD_TRAIN: bn_train_backward,
    Variant.DETACHED_STATS: detached_backward,
    Variant.FROZEN_EVAL: frozen_backward,
    Variant.GPREBN: gprebn_backward,
}


def bn_backward(upstream, tape, layer):
    """Dispatch on the variant recorded in ``tape``."""
    return _BACKWARD[tape.variant](upstream, tape, layer)
