"""Test-time adaptation: entropy objective, affine-only SGD, rT3A centroid classifier."""
from dataclasses import asdict, dataclass, field
import json
import logging

import numpy as np

from .errors import DegenerateBatchError, InvalidProbabilitiesError, NumericalError, ShapeError
from .network import Mode, backward, forward, minibatches, reset_testing_tracks, softmax
from .normalization import StatsSource, Variant
from .numerics import as_matrix

log = logging.getLogger(__name__)


def entropy_loss(probs, atol=1e-6):
    """Mean Shannon entropy (nats) of the rows of ``probs``; ``0 ln 0 = 0``."""
    p = as_matrix(probs, "probs")
    if p.shape[0] == 0:
        raise InvalidProbabilitiesError("empty probability matrix")
    if np.any(p < 0) or not np.all(np.isfinite(p)):
        raise InvalidProbabilitiesError("probabilities must be finite and non-negative")
    sums = p.sum(axis=1)
    bad = np.flatnonzero(np.abs(sums - 1.0) > atol)
    if bad.size:
        raise InvalidProbabilitiesError(
            f"row {int(bad[0])} sums to {sums[bad[0]]!r}, not 1", row=int(bad[0])
        )
    logp = np.log(np.where(p > 0, p, 1.0))
    return float(-(p * logp).sum(axis=1).mean()) + 0.0  # no negative zero


def entropy_logit_grad(logits):
    """d(mean entropy)/d(logits) for softmax probabilities."""
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    p = np.exp(logp)
    h = -(p * logp).sum(axis=1, keepdims=True)
    return -p * (logp + h) / logits.shape[0]


@dataclass
class AdaptConfig:
    rho: float = 1.0
    delta: int = 1
    theta: float = 0.5
    variant: Variant = Variant.GPREBN
    stats_source: StatsSource = StatsSource.TESTING_RUNNING
    base_lr: float = 1e-3
    use_rt3a: bool = False
    episodic: bool = False
    trs_mode: str = "cma"
    trs_momentum: float = 0.1
    per_layer: tuple = None

    def __post_init__(self):
        self.variant = Variant(self.variant)
        if isinstance(self.stats_source, str) and self.stats_source.strip().lower() == "theta_mixture":
            self.stats_source = StatsSource.theta_mixture(self.theta)
        self.stats_source = StatsSource.parse(self.stats_source)
        if self.stats_source.kind == "theta_mixture":
            self.theta = self.stats_source.theta
        if self.rho < 0:
            raise ValueError(f"rho must be >= 0, got {self.rho}")
        if int(self.delta) != self.delta or self.delta < 1:
            raise ValueError(f"delta must be an integer >= 1, got {self.delta}")
        if not 0.0 <= self.theta <= 1.0:
            raise ValueError(f"theta must lie in [0, 1], got {self.theta}")
        if self.base_lr <= 0:
            raise ValueError(f"base_lr must be positive, got {self.base_lr}")
        if self.trs_mode not in ("cma", "ema"):
            raise ValueError(f"trs_mode must be 'cma' or 'ema', got {self.trs_mode!r}")

    @property
    def lr(self):
        return self.rho * self.base_lr

    def mode(self, update_trs):
        return Mode.adapt(self.variant, self.stats_source, self.per_layer, update_trs)


# --------------------------------------------------------------------------- rT3A


@dataclass
class CentroidClassifier:
    centroids: np.ndarray
    counts: np.ndarray

    @classmethod
    def empty(cls, num_classes, dim):
        return cls(np.zeros((num_classes, dim)), np.zeros(num_classes, dtype=np.int64))

    @property
    def num_classes(self):
        return self.centroids.shape[0]

    def copy(self):
        return CentroidClassifier(self.centroids.copy(), self.counts.copy())


def rt3a_update(clf, features, probs):
    """Fold a batch into the per-class moving-average centroids.

    Pseudo-labels are row argmaxes of ``probs`` (ties go to the lowest class).
    Returns ``(new_classifier, probabilities)`` where the probabilities are a
    softmax over ``features @ centroids.T`` using the updated centroids.
    """
    z = as_matrix(features, "features")
    p = as_matrix(probs, "probs")
    if z.shape[0] != p.shape[0]:
        raise ShapeError(f"{z.shape[0]} feature rows vs {p.shape[0]} probability rows",
                         features=z.shape, probs=p.shape)
    if z.shape[1] != clf.centroids.shape[1] or p.shape[1] != clf.num_classes:
        raise ShapeError(
            f"classifier is {clf.centroids.shape}, got features {z.shape} and probs {p.shape}",
            centroids=clf.centroids.shape, features=z.shape, probs=p.shape,
        )
    pseudo = p.argmax(axis=1)
    new = clf.copy()
    for i in range(clf.num_classes):
        sel = pseudo == i
        m = int(sel.sum())
        if m == 0:
            continue
        n_i = int(new.counts[i])
        zbar = z[sel].sum(axis=0) / m
        new.centroids[i] = (n_i / (n_i + m)) * new.centroids[i] + (m / (n_i + m)) * zbar
        new.counts[i] = n_i + m
    return new, softmax(z @ new.centroids.T)


# --------------------------------------------------------------------------- adaptation loop


class AdaptState:
    """A network under adaptation plus the checkpoint values it started from."""

    def __init__(self, net, cfg):
        self.net = net
        reset_testing_tracks(net, cfg.trs_mode, cfg.trs_momentum)
        self.initial_affine = {n: a.copy() for n, a in net.named_parameters().items()
                               if n.endswith((".gamma", ".beta"))}
        self.batches_seen = 0
        self.clf = None

    @classmethod
    def from_checkpoint(cls, ckpt, cfg):
        return cls(ckpt.network(), cfg)

    def affine_snapshot(self):
        params = self.net.named_parameters()
        return {n: params[n].copy() for n in self.initial_affine}

    def restore_affine(self, snap):
        params = self.net.named_parameters()
        for n, v in snap.items():
            params[n][...] = v

    def trs_snapshot(self):
        return [bn.state.testing_running for bn in self.net.bn_layers]

    def restore_trs(self, snap):
        for bn, run in zip(self.net.bn_layers, snap):
            bn.state.testing_running = run


def adapt_batch(state, batch, cfg):
    """Adapt on one batch; returns ``(probs, tapes)`` of the final forward pass.

    Steps: one Adapt-mode forward that folds the batch into the testing
    running statistics, ``delta`` SGD steps on the BN affines minimizing the
    batch entropy, then a final forward whose outputs are returned. A
    non-finite loss restores the pre-batch state and raises ``NumericalError``.
    """
    x = as_matrix(batch, "batch")
    if x.shape[0] < 2:
        raise DegenerateBatchError(f"adaptation batches need >= 2 rows, got {x.shape[0]}",
                                   rows=x.shape[0])
    if cfg.episodic:
        state.restore_affine(state.initial_affine)
    affine_before = state.affine_snapshot()
    trs_before = state.trs_snapshot()
    names = list(state.initial_affine)
    lr = cfg.lr
    try:
        probs, tapes = forward(state.net, x, cfg.mode(update_trs=True))
        for step in range(cfg.delta):
            if step > 0:
                probs, tapes = forward(state.net, x, cfg.mode(update_trs=False))
            loss = entropy_loss(probs, atol=1e-6)
            if not np.isfinite(loss):
                raise NumericalError(f"non-finite entropy at step {step}", step=step)
            if lr == 0.0:
                continue
            grads = backward(state.net, tapes, entropy_logit_grad(tapes.logits), wrt="logits")
            params = state.net.named_parameters()
            for n in names:
                if not np.all(np.isfinite(grads[n])):
                    raise NumericalError(f"non-finite gradient for {n} at step {step}",
                                         step=step, param=n)
                with np.errstate(over="ignore", invalid="ignore"):
                    params[n] -= lr * grads[n]
                if not np.all(np.isfinite(params[n])):
                    raise NumericalError(f"{n} became non-finite at step {step}", step=step, param=n)
        if lr != 0.0:
            probs, tapes = forward(state.net, x, cfg.mode(update_trs=False))
    except (NumericalError, FloatingPointError) as exc:
        state.restore_affine(affine_before)
        state.restore_trs(trs_before)
        if isinstance(exc, NumericalError):
            raise
        raise NumericalError(str(exc)) from exc
    state.batches_seen += 1
    return probs, tapes


@dataclass
class BatchRecord:
    batch: int
    size: int
    entropy: float
    accuracy: float = None
    correct: int = None
    class_counts: list = field(default_factory=list)
    gamma_norm: float = 0.0
    beta_norm: float = 0.0


@dataclass
class PredictionLog:
    records: list = field(default_factory=list)
    predictions: list = field(default_factory=list)

    @property
    def accuracy(self):
        scored = [r for r in self.records if r.correct is not None]
        if not scored:
            return None
        return sum(r.correct for r in scored) / sum(r.size for r in scored)

    @property
    def mean_entropy(self):
        if not self.records:
            return None
        return sum(r.entropy * r.size for r in self.records) / sum(r.size for r in self.records)

    def to_jsonl(self):
        return "".join(json.dumps(asdict(r), sort_keys=True) + "\n" for r in self.records)

    def write(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_jsonl())


def iter_batches(data, batch_size, rng=None):
    """Yield ``(x, y)`` batches of ``data`` (optionally shuffled); no batch has one row."""
    for idx in minibatches(len(data), batch_size, rng):
        yield data.features[idx], data.labels[idx]


def run_adaptation(checkpoint, stream, cfg, state=None):
    """Adapt sequentially over ``stream`` (iterable of ``x`` or ``(x, y)``).

    ``checkpoint`` may be a ``Checkpoint`` or an existing ``AdaptState`` (via
    ``state``). With ``cfg.use_rt3a`` the logged predictions are the rT3A
    probabilities computed from penultimate features.
    """
    if state is None:
        state = AdaptState.from_checkpoint(checkpoint, cfg)
    log_ = PredictionLog()
    for k, item in enumerate(stream):
        x, y = item if isinstance(item, tuple) else (item, None)
        try:
            probs, tapes = adapt_batch(state, x, cfg)
        except (NumericalError, DegenerateBatchError) as exc:
            exc.details.setdefault("batch", k)
            exc.args = (f"batch {k}: {exc.args[0]}",) + exc.args[1:]
            raise
        if cfg.use_rt3a:
            feats = tapes.penultimate()
            if state.clf is None:
                state.clf = CentroidClassifier.empty(probs.shape[1], feats.shape[1])
            state.clf, probs = rt3a_update(state.clf, feats, probs)
        pred = probs.argmax(axis=1)
        params = state.net.named_parameters()
        gam = np.concatenate([params[n] for n in state.initial_affine if n.endswith(".gamma")])
        bet = np.concatenate([params[n] for n in state.initial_affine if n.endswith(".beta")])
        rec = BatchRecord(
            batch=k,
            size=int(x.shape[0]),
            entropy=entropy_loss(probs, atol=1e-6),
            class_counts=np.bincount(pred, minlength=probs.shape[1]).tolist(),
            gamma_norm=float(np.linalg.norm(gam)),
            beta_norm=float(np.linalg.norm(bet)),
        )
        if y is not None:
            rec.correct = int((pred == np.asarray(y)).sum())
            rec.accuracy = rec.correct / rec.size
        log_.records.append(rec)
        log_.predictions.extend(int(v) for v in pred)
    return log_
