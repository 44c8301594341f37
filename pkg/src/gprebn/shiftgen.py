"""Synthetic covariate-shift data: rotated/scaled/offset domains and corruption suites.

Everything is a pure function of the spec and seed. Shifts only move
features; labels are never touched.
"""
from dataclasses import dataclass
import csv
import io
import math
import struct
import zlib

import numpy as np

from .errors import (
    ChecksumError,
    ConfigError,
    DataFormatError,
    LabelRangeError,
    ShapeError,
    TruncatedFileError,
    VersionError,
)
from .numerics import Rng

CORRUPTIONS = ("gaussian_noise", "impulse_noise", "feature_dropout", "scaling", "quantize")

DATASET_MAGIC = b"GPBNDATA"
DATASET_VERSION = 1


@dataclass
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray
    domain_tag: str = ""
    num_classes: int = None

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float64)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise ShapeError(f"features must be 2-D, got {self.features.shape}")
        if self.labels.shape != (self.features.shape[0],):
            raise ShapeError(
                f"{self.labels.shape[0]} labels for {self.features.shape[0]} rows",
                rows=self.features.shape[0], labels=self.labels.shape[0],
            )
        if self.num_classes is None:
            self.num_classes = int(self.labels.max()) + 1 if self.labels.size else 0
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            bad = int(np.flatnonzero((self.labels < 0) | (self.labels >= self.num_classes))[0])
            raise LabelRangeError(
                f"label {int(self.labels[bad])} at row {bad} outside [0, {self.num_classes})",
                row=bad, label=int(self.labels[bad]),
            )

    def __len__(self):
        return self.features.shape[0]

    @property
    def dim(self):
        return self.features.shape[1]

    def subset(self, idx, tag=None):
        return LabeledDataset(self.features[idx], self.labels[idx],
                              self.domain_tag if tag is None else tag, self.num_classes)

    @staticmethod
    def concat(parts, tag="concat"):
        return LabeledDataset(
            np.vstack([p.features for p in parts]),
            np.concatenate([p.labels for p in parts]),
            tag,
            max(p.num_classes for p in parts),
        )

    def split(self, fraction, rng):
        """Random ``(first, second)`` split with ``fraction`` of rows in ``second``."""
        order = rng.permutation(len(self))
        cut = len(self) - int(round(fraction * len(self)))
        return self.subset(np.sort(order[:cut])), self.subset(np.sort(order[cut:]))


# --------------------------------------------------------------------------- shift specs


@dataclass(frozen=True)
class DomainShift:
    rotation: float = 0.0
    scale: tuple = None
    offset: tuple = None
    name: str = None

    @property
    def label(self):
        return self.name or f"rot{math.degrees(self.rotation):g}"


@dataclass(frozen=True)
class Corruption:
    kind: str
    severity: int = 1
    magnitude_scale: float = 1.0

    def __post_init__(self):
        if self.kind not in CORRUPTIONS:
            raise ConfigError(f"unknown corruption kind {self.kind!r}; known: {', '.join(CORRUPTIONS)}",
                              kind=self.kind)
        if self.severity not in (1, 2, 3, 4, 5):
            raise ConfigError(f"severity must be in 1..5, got {self.severity}", severity=self.severity)

    @property
    def label(self):
        return f"{self.kind}-{self.severity}"

    @property
    def magnitude(self):
        """Severity-dependent strength (strictly increasing in severity)."""
        return _SEVERITY_BASE[self.kind] * self.severity * self.magnitude_scale


_SEVERITY_BASE = {
    "gaussian_noise": 0.1,  # noise std
    "impulse_noise": 0.03,  # fraction of entries hit
    "feature_dropout": 0.1,  # fraction of entries zeroed
    "scaling": 0.3,  # multiplicative gain minus one
    "quantize": 0.2,  # grid step
}
IMPULSE_AMPLITUDE = 4.0


@dataclass
class GeneratorSpec:
    num_classes: int = 5
    dim: int = 16
    samples_per_domain: int = 2000
    components: int = 2
    class_sep: float = 1.0
    component_spread: float = 0.6
    noise: float = 1.0
    seed: int = 0

    def validate(self):
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}", field="num_classes")
        if self.dim < 2:
            raise ConfigError(f"dim must be >= 2, got {self.dim}", field="dim")
        if self.samples_per_domain < 1:
            raise ConfigError("samples_per_domain must be >= 1", field="samples_per_domain")
        if self.components < 1:
            raise ConfigError("components must be >= 1", field="components")


def default_domain_shifts(dim=16, offset=1.5, scale_step=0.5, names=None):
    """Four domains rotated by 0, 30, 60 and 90 degrees in the first two features.

    Each domain also gets its own per-feature gain and mean offset (a
    deterministic pattern), so domains differ in first and second moments.
    """
    shifts = []
    j = np.arange(dim)
    for k, deg in enumerate((0.0, 30.0, 60.0, 90.0)):
        phase = 2.0 * np.pi * k / 4.0
        scale = 1.0 + scale_step * np.sin(phase + 1.3 * j)
        off = offset * np.cos(phase + 0.7 * j)
        shifts.append(DomainShift(math.radians(deg), tuple(scale), tuple(off),
                                  None if names is None else names[k]))
    return shifts


def _class_params(spec, rng):
    c, d, m = spec.num_classes, spec.dim, spec.components
    centers = rng.normal(0.0, spec.class_sep, size=(c, d))
    comps = centers[:, None, :] + rng.normal(0.0, spec.component_spread, size=(c, m, d))
    return comps


def sample_base(spec, comps, n, rng):
    labels = rng.integers(0, spec.num_classes, size=n)
    which = rng.integers(0, spec.components, size=n)
    x = comps[labels, which] + rng.normal(0.0, spec.noise, size=(n, spec.dim))
    return x, labels


def apply_domain_shift(x, shift):
    x = np.array(x, dtype=np.float64, copy=True)
    if shift.rotation:
        c, s = math.cos(shift.rotation), math.sin(shift.rotation)
        a, b = x[:, 0].copy(), x[:, 1].copy()
        x[:, 0] = c * a - s * b
        x[:, 1] = s * a + c * b
    if shift.scale is not None:
        x *= np.asarray(shift.scale, dtype=np.float64)
    if shift.offset is not None:
        x += np.asarray(shift.offset, dtype=np.float64)
    return x


def generate_domains(spec, shifts):
    """Base source domain followed by one freshly sampled dataset per shift.

    Corruption entries are applied on top of freshly sampled base points.
    """
    spec.validate()
    if not shifts:
        raise ConfigError("generate_domains needs at least one shift", field="shifts")
    rng = Rng(spec.seed)
    comps = _class_params(spec, rng.derive("classes"))
    x, y = sample_base(spec, comps, spec.samples_per_domain, rng.derive("domain", 0))
    out = [LabeledDataset(x, y, "source", spec.num_classes)]
    for k, shift in enumerate(shifts, start=1):
        x, y = sample_base(spec, comps, spec.samples_per_domain, rng.derive("domain", k))
        base = LabeledDataset(x, y, "", spec.num_classes)
        if isinstance(shift, Corruption):
            out.append(apply_corruption(base, shift, rng.derive("corruption", k)))
        else:
            out.append(LabeledDataset(apply_domain_shift(x, shift), y, shift.label, spec.num_classes))
    return out


def sample_domains(spec, shifts, key, n=None):
    """Fresh draws from the class structure of ``spec`` under each shift.

    Points are independent of those returned by ``generate_domains`` (the
    stream is derived from ``key``), but the class mixture is the same.
    """
    spec.validate()
    rng = Rng(spec.seed)
    comps = _class_params(spec, rng.derive("classes"))
    n = spec.samples_per_domain if n is None else int(n)
    out = []
    for k, shift in enumerate(shifts):
        x, y = sample_base(spec, comps, n, rng.derive("fresh", key, k))
        out.append(LabeledDataset(apply_domain_shift(x, shift), y, f"{key}:{shift.label}",
                                  spec.num_classes))
    return out


def apply_corruption(data, c, seed):
    """Return a corrupted copy of ``data`` (labels untouched).

    ``seed`` is an int or an ``Rng``.
    """
    if not isinstance(c, Corruption):
        raise ConfigError(f"not a corruption spec: {c!r}")
    rng = seed if isinstance(seed, Rng) else Rng(seed).derive("corruption", c.kind, c.severity)
    x = data.features
    mag = c.magnitude
    if mag == 0.0:
        out = x.copy()
    elif c.kind == "gaussian_noise":
        out = x + rng.normal(0.0, mag, size=x.shape)
    elif c.kind == "impulse_noise":
        hit = rng.random(x.shape) < mag
        sign = np.where(rng.random(x.shape) < 0.5, -1.0, 1.0)
        out = np.where(hit, sign * IMPULSE_AMPLITUDE, x)
    elif c.kind == "feature_dropout":
        out = np.where(rng.random(x.shape) < mag, 0.0, x)
    elif c.kind == "scaling":
        out = x * (1.0 + mag)
    else:
        out = np.round(x / mag) * mag
    tag = f"{data.domain_tag}+{c.label}" if data.domain_tag else c.label
    return LabeledDataset(out, data.labels.copy(), tag, data.num_classes)


# --------------------------------------------------------------------------- file formats


@dataclass
class CsvSchema:
    dim: int = None
    num_classes: int = None
    domain_tag: str = ""


def save_csv(data, path):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"f{j}" for j in range(data.dim)] + ["label"])
        for row, lab in zip(data.features, data.labels):
            w.writerow([repr(float(v)) for v in row] + [int(lab)])


def load_csv(path, schema=None):
    """Parse ``f0,...,f{d-1},label`` CSV. Errors name the 1-based file line."""
    schema = schema or CsvSchema()
    try:
        with open(path, "r", encoding="utf-8", newline="") as fh:
            text = fh.read()
    except OSError as exc:
        raise DataFormatError(f"cannot read {path}: {exc}", path=str(path)) from exc
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise DataFormatError(f"{path}: empty file", path=str(path)) from None
    header = [h.strip() for h in header]
    d = len(header) - 1
    if d < 1 or header[-1] != "label" or header[:-1] != [f"f{j}" for j in range(d)]:
        raise DataFormatError(f"{path}: header must be f0,...,f{{d-1}},label", path=str(path), line=1)
    if schema.dim is not None and d != schema.dim:
        raise ShapeError(f"{path}: {d} feature columns, schema expects {schema.dim}",
                         path=str(path), dim=d, expected=schema.dim)
    feats, labels = [], []
    for lineno, row in enumerate(reader, start=2):
        if not row or (len(row) == 1 and not row[0].strip()):
            continue
        if len(row) != d + 1:
            raise DataFormatError(
                f"{path}: line {lineno} has {len(row)} fields, expected {d + 1}",
                path=str(path), line=lineno, fields=len(row),
            )
        vals = []
        for col, cell in enumerate(row[:-1]):
            try:
                v = float(cell)
            except ValueError:
                raise DataFormatError(
                    f"{path}: line {lineno}, column {header[col]!r}: not a number: {cell!r}",
                    path=str(path), line=lineno, column=header[col],
                ) from None
            if not math.isfinite(v):
                raise DataFormatError(f"{path}: line {lineno}, column {header[col]!r}: non-finite",
                                      path=str(path), line=lineno, column=header[col])
            vals.append(v)
        try:
            lab = int(row[-1])
        except ValueError:
            raise DataFormatError(
                f"{path}: line {lineno}, column 'label': not an integer: {row[-1]!r}",
                path=str(path), line=lineno, column="label",
            ) from None
        if lab < 0 or (schema.num_classes is not None and lab >= schema.num_classes):
            raise LabelRangeError(f"{path}: line {lineno}: label {lab} out of range",
                                  path=str(path), line=lineno, label=lab)
        feats.append(vals)
        labels.append(lab)
    if not feats:
        raise DataFormatError(f"{path}: no data rows", path=str(path))
    return LabeledDataset(np.array(feats, dtype=np.float64), np.array(labels, dtype=np.int64),
                          schema.domain_tag, schema.num_classes)


def dataset_bytes(data):
    tag = data.domain_tag.encode("utf-8")
    n, d = data.features.shape
    head = DATASET_MAGIC + struct.pack("<IQQII", DATASET_VERSION, n, d, data.num_classes, len(tag)) + tag
    body = (head + np.ascontiguousarray(data.features, dtype="<f8").tobytes()
            + np.ascontiguousarray(data.labels, dtype="<u4").tobytes())
    return body + struct.pack("<I", zlib.crc32(body))


def dataset_from_bytes(raw, source="<bytes>"):
    hsize = len(DATASET_MAGIC) + struct.calcsize("<IQQII")
    if len(raw) < hsize + 4:
        raise TruncatedFileError(f"{source}: too short for a dataset file", path=str(source))
    if raw[:len(DATASET_MAGIC)] != DATASET_MAGIC:
        raise DataFormatError(f"{source}: bad magic", path=str(source))
    version, n, d, c, tlen = struct.unpack_from("<IQQII", raw, len(DATASET_MAGIC))
    if version != DATASET_VERSION:
        raise VersionError(f"{source}: dataset format version {version}, expected {DATASET_VERSION}",
                           path=str(source), version=version)
    expected = hsize + tlen + 8 * n * d + 4 * n + 4
    if len(raw) != expected:
        raise TruncatedFileError(f"{source}: size {len(raw)} != expected {expected}",
                                 path=str(source), size=len(raw), expected=expected)
    body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) != crc:
        raise ChecksumError(f"{source}: CRC-32 mismatch", path=str(source))
    off = hsize
    tag = raw[off:off + tlen].decode("utf-8")
    off += tlen
    feats = np.frombuffer(raw, dtype="<f8", count=n * d, offset=off).astype(np.float64).reshape(n, d)
    off += 8 * n * d
    labels = np.frombuffer(raw, dtype="<u4", count=n, offset=off).astype(np.int64)
    return LabeledDataset(feats, labels, tag, int(c))


def save_binary(data, path):
    with open(path, "wb") as fh:
        fh.write(dataset_bytes(data))


def load_binary(path):
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise DataFormatError(f"cannot read {path}: {exc}", path=str(path)) from exc
    return dataset_from_bytes(raw, path)
