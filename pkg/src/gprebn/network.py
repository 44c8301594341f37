"""Fully-connected network with BN slots, manual backprop, ERM training and checkpoints."""
from dataclasses import dataclass, field
import copy
import json
import logging
import struct
import zlib

import numpy as np

from .errors import (
    ChecksumError,
    CheckpointError,
    LabelRangeError,
    NumericalError,
    ShapeError,
    TruncatedFileError,
    VersionError,
)
from .normalization import (
    AffineParams,
    BNLayerState,
    RunningStats,
    StatsSource,
    Variant,
    bn_backward,
    bn_eval_forward,
    bn_forward,
    bn_train_forward,
    update_running,
)
from .numerics import Rng, as_matrix, batch_mean_var

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"GPBNCKPT"
CHECKPOINT_VERSION = 1


# --------------------------------------------------------------------------- layers


class Linear:
    kind = "linear"

    def __init__(self, n_in, n_out, W=None, b=None):
        self.n_in, self.n_out = int(n_in), int(n_out)
        self.W = np.zeros((self.n_in, self.n_out)) if W is None else np.array(W, dtype=np.float64)
        self.b = np.zeros(self.n_out) if b is None else np.array(b, dtype=np.float64)

    def spec(self):
        return {"kind": "linear", "in": self.n_in, "out": self.n_out}

    def params(self):
        return {"W": self.W, "b": self.b}


class ReLU:
    kind = "relu"

    def spec(self):
        return {"kind": "relu"}

    def params(self):
        return {}


class BN:
    kind = "bn"

    def __init__(self, dim, state=None, epsilon=1e-5):
        self.dim = int(dim)
        self.state = BNLayerState.fresh(self.dim, epsilon) if state is None else state

    def spec(self):
        return {"kind": "bn", "d": self.dim}

    def params(self):
        return {"gamma": self.state.affine.gamma, "beta": self.state.affine.beta}


class SoftmaxHead:
    kind = "softmax"

    def __init__(self, classes):
        self.classes = int(classes)

    def spec(self):
        return {"kind": "softmax", "classes": self.classes}

    def params(self):
        return {}


def layer_from_spec(spec):
    kind = spec["kind"]
    if kind == "linear":
        return Linear(spec["in"], spec["out"])
    if kind == "bn":
        return BN(spec["d"])
    if kind == "relu":
        return ReLU()
    if kind == "softmax":
        return SoftmaxHead(spec["classes"])
    raise ShapeError(f"unknown layer kind {kind!r}", kind=kind)


# --------------------------------------------------------------------------- network


class Network:
    def __init__(self, layers):
        self.layers = list(layers)
        self._validate()

    def _validate(self):
        if not self.layers or not isinstance(self.layers[-1], SoftmaxHead):
            raise ShapeError("network must end with exactly one SoftmaxHead")
        if sum(isinstance(l, SoftmaxHead) for l in self.layers) != 1:
            raise ShapeError("network must contain exactly one SoftmaxHead")
        width = None
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Linear):
                if width is not None and layer.n_in != width:
                    raise ShapeError(
                        f"layer {i}: linear expects width {layer.n_in}, receives {width}", layer=i
                    )
                width = layer.n_out
            elif isinstance(layer, BN):
                if width is not None and layer.dim != width:
                    raise ShapeError(f"layer {i}: BN dim {layer.dim}, receives {width}", layer=i)
                width = layer.dim
            elif isinstance(layer, SoftmaxHead):
                if width is not None and layer.classes != width:
                    raise ShapeError(
                        f"softmax head has {layer.classes} classes, receives width {width}", layer=i
                    )
        first = self.layers[0]
        self.input_dim = first.n_in if isinstance(first, Linear) else getattr(first, "dim", None)
        self.num_classes = self.layers[-1].classes

    @property
    def bn_layers(self):
        return [l for l in self.layers if isinstance(l, BN)]

    def named_parameters(self):
        """``{"3.gamma": array, ...}``; arrays are the live parameter storage."""
        out = {}
        for i, layer in enumerate(self.layers):
            for name, arr in layer.params().items():
                out[f"{i}.{name}"] = arr
        return out

    def affine_names(self):
        return [n for n in self.named_parameters() if n.endswith((".gamma", ".beta"))]

    def spec(self):
        return [l.spec() for l in self.layers]

    def copy(self):
        return copy.deepcopy(self)


def build_mlp(input_dim, num_classes, hidden=(64, 64), rng=None, epsilon=1e-5, source_mode="ema",
              momentum=0.1):
    """Linear -> BN -> ReLU blocks followed by Linear -> SoftmaxHead.

    Weights and biases are drawn from U(-sqrt(1/fan_in), sqrt(1/fan_in)); with
    ``rng=None`` they are left at zero.
    """
    layers = []
    width = int(input_dim)
    dims = list(hidden) + [num_classes]
    for k, out in enumerate(dims):
        lin = Linear(width, out)
        if rng is not None:
            bound = np.sqrt(1.0 / width)
            lin.W = rng.uniform(-bound, bound, size=(width, out))
            lin.b = rng.uniform(-bound, bound, size=out)
        layers.append(lin)
        if k < len(hidden):
            layers.append(BN(out, BNLayerState.fresh(out, epsilon, source_mode, momentum)))
            layers.append(ReLU())
        width = out
    layers.append(SoftmaxHead(num_classes))
    return Network(layers)


# --------------------------------------------------------------------------- modes / tapes


@dataclass(frozen=True)
class Mode:
    """Forward-pass mode.

    ``kind`` is ``"train"``, ``"eval"`` or ``"adapt"``. For adapt mode,
    ``variant``/``stats_source`` apply to every BN layer unless ``per_layer``
    gives a ``(variant, stats_source)`` pair for that BN index (0-based among
    BN layers). ``update_trs`` controls whether GpreBN layers fold the batch
    into their testing running statistics before normalizing.
    ``frozen_bn`` (train mode) normalizes with the fixed source statistics.
    """

    kind: str
    variant: Variant = Variant.GPREBN
    stats_source: StatsSource = StatsSource.CURRENT_BATCH
    per_layer: tuple = None
    update_trs: bool = True
    frozen_bn: bool = False

    @classmethod
    def train(cls, frozen_bn=False):
        return cls("train", Variant.STANDARD_TRAIN, frozen_bn=frozen_bn)

    @classmethod
    def eval(cls):
        return cls("eval", Variant.FROZEN_EVAL)

    @classmethod
    def adapt(cls, variant, stats_source=StatsSource.CURRENT_BATCH, per_layer=None, update_trs=True):
        return cls("adapt", Variant(variant), StatsSource.parse(stats_source),
                   None if per_layer is None else tuple(per_layer), update_trs)

    def for_bn(self, index):
        if self.per_layer is not None and index < len(self.per_layer) and self.per_layer[index]:
            v, s = self.per_layer[index]
            return Variant(v), StatsSource.parse(s)
        return self.variant, self.stats_source


@dataclass
class Tapes:
    mode: Mode
    entries: list = field(default_factory=list)
    logits: np.ndarray = None
    probs: np.ndarray = None
    batch_size: int = 0

    def penultimate(self):
        """Input of the final linear layer (the features used by rT3A)."""
        for kind, saved in reversed(self.entries):
            if kind == "linear":
                return saved
        raise ShapeError("network has no linear layer")


def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def log_softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def forward(net, batch, mode):
    """Run the network; returns ``(probs, tapes)``.

    Train mode folds each batch into the source running statistics. Eval mode
    is pure. Adapt mode only touches the testing running statistics.
    """
    x = as_matrix(batch, "batch")
    if x.shape[1] != net.input_dim:
        raise ShapeError(
            f"batch has {x.shape[1]} features, network expects {net.input_dim}",
            batch=x.shape,
            expected=net.input_dim,
        )
    tapes = Tapes(mode, batch_size=x.shape[0])
    bn_index = 0
    for layer in net.layers:
        if isinstance(layer, Linear):
            tapes.entries.append(("linear", x))
            with np.errstate(over="ignore", invalid="ignore"):
                x = x @ layer.W + layer.b
        elif isinstance(layer, ReLU):
            mask = x > 0
            tapes.entries.append(("relu", mask))
            x = np.where(mask, x, 0.0)
        elif isinstance(layer, BN):
            x, tape = _bn_forward(layer.state, x, mode, bn_index)
            tapes.entries.append(("bn", tape))
            bn_index += 1
        else:
            tapes.logits = x
            tapes.probs = softmax(x)
            tapes.entries.append(("softmax", None))
    if not (np.all(np.isfinite(tapes.logits)) and np.all(np.isfinite(tapes.probs))):
        raise NumericalError("forward produced non-finite logits or probabilities", mode=mode.kind)
    return tapes.probs, tapes


def _bn_forward(state, x, mode, index):
    if mode.kind == "eval" or (mode.kind == "train" and mode.frozen_bn):
        return bn_eval_forward(x, state, with_tape=True)
    if mode.kind == "train":
        out, tape = bn_train_forward(x, state)
        state.source_running = update_running(state.source_running, tape.batch_stats)
        return out, tape
    variant, source = mode.for_bn(index)
    if variant is Variant.GPREBN and mode.update_trs:
        # the batch contributes to the statistics that normalize it
        state.testing_running = update_running(state.testing_running, batch_mean_var(x))
    return bn_forward(x, state, variant, source)


def backward(net, tapes, upstream, wrt="probs"):
    """Gradients of a scalar loss for every parameter.

    ``upstream`` is dL/dprobs (``wrt="probs"``) or dL/dlogits
    (``wrt="logits"``). Returns ``{name: grad}`` keyed like
    ``net.named_parameters()``.
    """
    if len(tapes.entries) != len(net.layers):
        raise ShapeError("tapes do not belong to this network",
                         tapes=len(tapes.entries), layers=len(net.layers))
    g = as_matrix(upstream, "upstream")
    expected = (tapes.batch_size, net.num_classes)
    if g.shape != expected:
        raise ShapeError(f"upstream shape {g.shape}, expected {expected}",
                         upstream=g.shape, expected=expected)
    if wrt == "probs":
        p = tapes.probs
        g = p * (g - (g * p).sum(axis=1, keepdims=True))
    elif wrt != "logits":
        raise ValueError(f"wrt must be 'probs' or 'logits', got {wrt!r}")
    grads = {}
    for i in range(len(net.layers) - 2, -1, -1):
        layer = net.layers[i]
        kind, saved = tapes.entries[i]
        if kind != layer.kind:
            raise ShapeError(f"tape entry {i} is {kind!r}, layer is {layer.kind!r}", layer=i)
        if kind == "linear":
            grads[f"{i}.W"] = saved.T @ g
            grads[f"{i}.b"] = g.sum(axis=0)
            g = g @ layer.W.T
        elif kind == "relu":
            g = np.where(saved, g, 0.0)
        else:
            g, ggamma, gbeta = bn_backward(g, saved, layer.state)
            grads[f"{i}.gamma"] = ggamma
            grads[f"{i}.beta"] = gbeta
    return {k: grads[k] for k in net.named_parameters()}


def cross_entropy(probs, labels):
    p = probs[np.arange(len(labels)), labels]
    return float(-np.mean(np.log(np.maximum(p, 1e-300))))


def cross_entropy_logit_grad(probs, labels):
    g = probs.copy()
    g[np.arange(len(labels)), labels] -= 1.0
    return g / len(labels)


def sgd_step(net, grads, lr, names=None):
    params = net.named_parameters()
    for name in params if names is None else names:
        params[name] -= lr * grads[name]


def predict(net, x, batch_size=512):
    """Eval-mode class probabilities, chunked."""
    x = as_matrix(x, "x")
    out = []
    for start in range(0, x.shape[0], batch_size):
        p, _ = forward(net, x[start:start + batch_size], Mode.eval())
        out.append(p)
    return np.vstack(out) if out else np.zeros((0, net.num_classes))


# --------------------------------------------------------------------------- training


@dataclass
class TrainConfig:
    epochs: int = 30
    lr: float = 0.1
    batch_size: int = 64
    seed: int = 0
    frozen_bn: bool = False


def _check_labels(labels, num_classes):
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        bad = int(np.flatnonzero((labels < 0) | (labels >= num_classes))[0])
        raise LabelRangeError(
            f"label {int(labels[bad])} at index {bad} outside [0, {num_classes})",
            index=bad,
            label=int(labels[bad]),
        )
    return labels.astype(np.int64)


def minibatches(n, batch_size, rng):
    """Shuffled index batches; a trailing singleton is merged into the previous batch."""
    order = rng.permutation(n) if rng is not None else np.arange(n)
    batches = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(batches) > 1 and len(batches[-1]) < 2:
        tail = batches.pop()
        batches[-1] = np.concatenate([batches[-1], tail])
    return batches


def train_source(net, data, cfg, progress=None, metadata=None):
    """Minibatch SGD on mean cross-entropy. Mutates ``net``; returns a Checkpoint.

    ``progress`` is called with ``{"epoch", "loss", "accuracy"}`` after every
    epoch. ``cfg.frozen_bn`` keeps every BN layer on its current source
    statistics (no statistic updates, per-instance gradients).
    """
    x = as_matrix(data.features, "features")
    if x.shape[0] == 0:
        raise ShapeError("training set is empty")
    y = _check_labels(data.labels, net.num_classes)
    if cfg.frozen_bn:
        for bn in net.bn_layers:
            if not bn.state.source_running.initialized:
                raise CheckpointError("frozen-BN training needs initialized source statistics")
    rng = Rng(cfg.seed).derive("train-order")
    mode = Mode.train(frozen_bn=cfg.frozen_bn)
    history = []
    for epoch in range(cfg.epochs):
        losses, correct = [], 0
        for step, idx in enumerate(minibatches(x.shape[0], cfg.batch_size, rng)):
            probs, tapes = forward(net, x[idx], mode)
            loss = cross_entropy(probs, y[idx])
            if not np.isfinite(loss):
                raise NumericalError(f"non-finite training loss at epoch {epoch}, step {step}",
                                     epoch=epoch, step=step, loss=loss)
            grads = backward(net, tapes, cross_entropy_logit_grad(probs, y[idx]), wrt="logits")
            with np.errstate(over="ignore", invalid="ignore"):
                sgd_step(net, grads, cfg.lr)
            # ReLU maps NaN to 0, so a diverged parameter can hide behind finite logits
            bad = [n for n, a in net.named_parameters().items() if not np.all(np.isfinite(a))]
            if bad:
                raise NumericalError(f"parameter {bad[0]} became non-finite at epoch {epoch}, "
                                     f"step {step} (lr={cfg.lr:g})",
                                     epoch=epoch, step=step, param=bad[0], loss=loss)
            losses.append(loss * len(idx))
            correct += int((probs.argmax(axis=1) == y[idx]).sum())
        rec = {"epoch": epoch, "loss": sum(losses) / x.shape[0], "accuracy": correct / x.shape[0]}
        history.append(rec)
        if progress is not None:
            progress(rec)
    meta = {"seed": cfg.seed, "epochs": cfg.epochs, "lr": cfg.lr, "batch_size": cfg.batch_size,
            "frozen_bn": bool(cfg.frozen_bn)}
    meta.update(metadata or {})
    ckpt = to_checkpoint(net, meta)
    ckpt.history = history
    return ckpt


def accuracy(net, data):
    probs = predict(net, data.features)
    return float(np.mean(probs.argmax(axis=1) == np.asarray(data.labels)))


# --------------------------------------------------------------------------- checkpoints


@dataclass(eq=False)
class Checkpoint:
    layers: list
    tensors: dict
    bn: list
    metadata: dict = field(default_factory=dict)
    version: int = CHECKPOINT_VERSION
    history: list = field(default_factory=list, compare=False)

    def network(self):
        return from_checkpoint(self)


def to_checkpoint(net, metadata=None):
    tensors = {k: v.copy() for k, v in net.named_parameters().items()}
    bn = []
    for i, layer in enumerate(net.layers):
        if isinstance(layer, BN):
            run = layer.state.source_running
            tensors[f"{i}.mu_r"] = run.mu_r.copy()
            tensors[f"{i}.var_r"] = run.var_r.copy()
            bn.append({"layer": i, "n_tracked": int(run.n_tracked), "mode": run.mode,
                       "momentum": float(run.momentum), "epsilon": float(layer.state.epsilon)})
    return Checkpoint(net.spec(), tensors, bn, dict(metadata or {}))


def from_checkpoint(ckpt, testing_mode="cma", testing_momentum=0.1):
    """Rebuild a Network. Testing tracks start from the source values with a zero count."""
    layers = [layer_from_spec(s) for s in ckpt.layers]
    bn_meta = {m["layer"]: m for m in ckpt.bn}
    for i, layer in enumerate(layers):
        if isinstance(layer, Linear):
            layer.W = ckpt.tensors[f"{i}.W"].copy()
            layer.b = ckpt.tensors[f"{i}.b"].copy()
        elif isinstance(layer, BN):
            m = bn_meta[i]
            mu, var = ckpt.tensors[f"{i}.mu_r"], ckpt.tensors[f"{i}.var_r"]
            layer.state = BNLayerState(
                AffineParams(ckpt.tensors[f"{i}.gamma"].copy(), ckpt.tensors[f"{i}.beta"].copy()),
                RunningStats(mu.copy(), var.copy(), m["n_tracked"], m["mode"], m["momentum"]),
                RunningStats(mu.copy(), var.copy(), 0, testing_mode, testing_momentum),
                epsilon=m["epsilon"],
            )
    return Network(layers)


def reset_testing_tracks(net, mode="cma", momentum=0.1):
    """Start every BN testing track from the source values with a zero count."""
    for bn in net.bn_layers:
        src = bn.state.source_running
        bn.state.testing_running = RunningStats(src.mu_r.copy(), src.var_r.copy(), 0, mode, momentum)


def checkpoint_bytes(ckpt):
    names = list(ckpt.tensors)
    header = {
        "layers": ckpt.layers,
        "bn": ckpt.bn,
        "metadata": ckpt.metadata,
        "tensors": [[n, list(ckpt.tensors[n].shape)] for n in names],
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", ckpt.version, len(hbytes)), hbytes]
    for n in names:
        parts.append(np.ascontiguousarray(ckpt.tensors[n], dtype="<f8").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def checkpoint_from_bytes(raw, source="<bytes>"):
    fixed = len(CHECKPOINT_MAGIC) + 8
    if len(raw) < fixed:
        raise TruncatedFileError(f"{source}: file too short for a checkpoint", path=str(source))
    if raw[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{source}: bad magic, not a checkpoint", path=str(source))
    version, hlen = struct.unpack_from("<II", raw, len(CHECKPOINT_MAGIC))
    if version != CHECKPOINT_VERSION:
        raise VersionError(
            f"{source}: checkpoint format version {version}, this build reads {CHECKPOINT_VERSION}",
            path=str(source), version=version, supported=CHECKPOINT_VERSION,
        )
    if len(raw) < fixed + hlen + 4:
        raise TruncatedFileError(f"{source}: checkpoint truncated in header", path=str(source))
    body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    try:
        header = json.loads(raw[fixed:fixed + hlen].decode("utf-8"))
        shapes = [(name, tuple(shape)) for name, shape in header["tensors"]]
    except (UnicodeDecodeError, ValueError, KeyError, TypeError) as exc:
        if zlib.crc32(body) != crc:
            raise ChecksumError(f"{source}: CRC-32 mismatch, checkpoint corrupted",
                                path=str(source)) from exc
        raise CheckpointError(f"{source}: unreadable header ({exc})", path=str(source)) from exc
    expected = fixed + hlen + 8 * sum(int(np.prod(s)) for _, s in shapes) + 4
    if len(raw) < expected:
        raise TruncatedFileError(f"{source}: checkpoint truncated ({len(raw)} of {expected} bytes)",
                                 path=str(source), size=len(raw), expected=expected)
    if len(raw) > expected:
        raise CheckpointError(f"{source}: {len(raw) - expected} unexpected trailing bytes",
                              path=str(source))
    if zlib.crc32(body) != crc:
        raise ChecksumError(f"{source}: CRC-32 mismatch, checkpoint corrupted", path=str(source))
    offset = fixed + hlen
    tensors = {}
    for name, shape in shapes:
        end = offset + 8 * int(np.prod(shape))
        tensors[name] = np.frombuffer(body[offset:end], dtype="<f8").astype(np.float64).reshape(shape)
        offset = end
    return Checkpoint(header["layers"], tensors, header["bn"], header["metadata"], version)


def save_checkpoint(ckpt, path):
    try:
        with open(path, "wb") as fh:
            fh.write(checkpoint_bytes(ckpt))
    except OSError as exc:
        raise CheckpointError(f"cannot write checkpoint {path}: {exc}", path=str(path)) from exc


def load_checkpoint(path):
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}", path=str(path)) from exc
    return checkpoint_from_bytes(raw, path)
