"""Experiment configuration: YAML file -> validated ``ExperimentConfig``.

Every validation failure raises ``ConfigError`` whose ``details["field"]`` is
the dotted path of the offending entry (``adaptation.rho``,
``sweep.theta[2]`` ...).
"""
from dataclasses import asdict, dataclass, field, fields
import hashlib
import json
import os

import yaml

from ..errors import ConfigError
from ..shiftgen import CORRUPTIONS

PROTOCOLS = ("leave_one_out", "corruption")


@dataclass
class GeneratorConfig:
    num_classes: int = 5
    dim: int = 16
    samples_per_domain: int = 2000
    components: int = 2
    class_sep: float = 1.0
    component_spread: float = 0.6
    noise: float = 1.0


@dataclass
class ShiftConfig:
    offset: float = 1.5
    scale_step: float = 0.5


@dataclass
class DataFile:
    path: str
    format: str = "csv"


@dataclass
class TaskConfig:
    protocol: str = "leave_one_out"
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    shift: ShiftConfig = field(default_factory=ShiftConfig)
    # leave_one_out: held-out domain indices (None = every domain)
    targets: list = None
    # corruption protocol: generated domain used as the clean source (0 = unshifted base)
    source_domain: int = 0
    corruptions: list = field(default_factory=lambda: list(CORRUPTIONS))
    severities: list = field(default_factory=lambda: [1, 2, 3, 4, 5])
    val_fraction: float = 0.2
    data_files: list = None


@dataclass
class ModelConfig:
    hidden: list = field(default_factory=lambda: [64, 64])
    epochs: int = 20
    lr: float = 0.1
    batch_size: int = 64
    epsilon: float = 1e-5
    momentum: float = 0.1
    frozen_bn: bool = False


@dataclass
class AdaptationConfig:
    rho: float = 1000.0
    delta: int = 1
    theta: float = 0.5
    base_lr: float = 1e-3
    batch_size: int = 64
    episodic: bool = False
    trs_momentum: float = 0.1
    methods: list = None


@dataclass
class SweepConfig:
    # stand-in grids; the reference grids are not published
    theta: list = field(default_factory=lambda: [0.0, 0.25, 0.5, 0.75, 1.0])
    rho: list = field(default_factory=lambda: [0.1, 1.0, 10.0])
    delta: list = field(default_factory=lambda: [1, 3])
    method: str = "GpreBN+theta-Mixture"


@dataclass
class AblationDConfig:
    narrow_domain: int = 1
    severity: int = 4
    corruptions: list = field(default_factory=lambda: list(CORRUPTIONS))
    pretrain_epochs: int = 20
    finetune_epochs: int = 10
    finetune_lr: float = 0.1


@dataclass
class ExperimentConfig:
    task: TaskConfig = field(default_factory=TaskConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    adaptation: AdaptationConfig = field(default_factory=AdaptationConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    ablation_d: AblationDConfig = field(default_factory=AblationDConfig)
    repetitions: int = 3
    seed: int = 0
    out: str = "runs/default"

    def to_dict(self):
        return asdict(self)

    def fingerprint(self, *sections):
        """Short hash of the named sections (all when none given)."""
        d = self.to_dict()
        if sections:
            d = {k: d[k] for k in sections}
        raw = json.dumps(d, sort_keys=True, separators=(",", ":")).encode("utf-8")
        return hashlib.sha256(raw).hexdigest()[:16]

    @property
    def seeds(self):
        return list(range(self.seed, self.seed + self.repetitions))


_NESTED = {
    "task": TaskConfig,
    "model": ModelConfig,
    "adaptation": AdaptationConfig,
    "sweep": SweepConfig,
    "ablation_d": AblationDConfig,
    "task.generator": GeneratorConfig,
    "task.shift": ShiftConfig,
}


def _build(cls, data, path):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping, got {type(data).__name__}",
                          field=path or "config")
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        where = f"{path}.{unknown[0]}" if path else unknown[0]
        raise ConfigError(f"{where}: unknown field", field=where)
    kwargs = {}
    for f in fields(cls):
        if f.name not in data:
            continue
        sub = f"{path}.{f.name}" if path else f.name
        if sub in _NESTED:
            kwargs[f.name] = _build(_NESTED[sub], data[f.name], sub)
        else:
            kwargs[f.name] = data[f.name]
    return cls(**kwargs)


def _num(value, where, kind=float, low=None, high=None, low_open=False):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{where}: expected a number, got {value!r}", field=where)
    if kind is int and int(value) != value:
        raise ConfigError(f"{where}: expected an integer, got {value!r}", field=where)
    if low is not None and (value <= low if low_open else value < low):
        raise ConfigError(f"{where}: must be {'>' if low_open else '>='} {low}, got {value!r}",
                          field=where)
    if high is not None and value > high:
        raise ConfigError(f"{where}: must be <= {high}, got {value!r}", field=where)
    return kind(value)


def _num_list(values, where, kind=float, **bounds):
    if not isinstance(values, (list, tuple)) or not values:
        raise ConfigError(f"{where}: expected a non-empty list", field=where)
    return [_num(v, f"{where}[{i}]", kind, **bounds) for i, v in enumerate(values)]


def _flag(value, where):
    if not isinstance(value, bool):
        raise ConfigError(f"{where}: expected true/false, got {value!r}", field=where)
    return value


def validate(cfg, check_paths=True):
    """Type/range checks with field paths; normalizes numbers in place."""
    from .experiments import METHODS

    t = cfg.task
    if t.protocol not in PROTOCOLS:
        raise ConfigError(f"task.protocol: must be one of {PROTOCOLS}, got {t.protocol!r}",
                          field="task.protocol")
    g = t.generator
    g.num_classes = _num(g.num_classes, "task.generator.num_classes", int, low=2)
    g.dim = _num(g.dim, "task.generator.dim", int, low=2)
    g.samples_per_domain = _num(g.samples_per_domain, "task.generator.samples_per_domain", int, low=4)
    g.components = _num(g.components, "task.generator.components", int, low=1)
    g.class_sep = _num(g.class_sep, "task.generator.class_sep", low=0)
    g.component_spread = _num(g.component_spread, "task.generator.component_spread", low=0)
    g.noise = _num(g.noise, "task.generator.noise", low=0)
    t.shift.offset = _num(t.shift.offset, "task.shift.offset")
    t.shift.scale_step = _num(t.shift.scale_step, "task.shift.scale_step", low=0, high=0.99)
    t.val_fraction = _num(t.val_fraction, "task.val_fraction", low=0, high=0.9, low_open=True)
    t.source_domain = _num(t.source_domain, "task.source_domain", int, low=0)
    if t.targets is not None:
        t.targets = _num_list(t.targets, "task.targets", int, low=0)
    if t.data_files is not None:
        if not isinstance(t.data_files, list) or len(t.data_files) < 2:
            raise ConfigError("task.data_files: need a list of at least two domain files",
                              field="task.data_files")
        files = []
        for i, entry in enumerate(t.data_files):
            where = f"task.data_files[{i}]"
            if isinstance(entry, str):
                entry = {"path": entry}
            if not isinstance(entry, dict) or "path" not in entry:
                raise ConfigError(f"{where}: expected a path or {{path, format}}", field=where)
            df = _build(DataFile, entry, where)
            if df.format not in ("csv", "binary"):
                raise ConfigError(f"{where}.format: must be csv or binary, got {df.format!r}",
                                  field=f"{where}.format")
            if check_paths and not os.path.isfile(df.path):
                raise ConfigError(f"{where}.path: file not found: {df.path}", field=f"{where}.path")
            files.append(df)
        t.data_files = files
    n_domains = len(t.data_files) if t.data_files is not None else 4
    if t.protocol == "leave_one_out" and t.targets is not None:
        for i, k in enumerate(t.targets):
            if k >= n_domains:
                raise ConfigError(f"task.targets[{i}]: domain {k} does not exist "
                                  f"({n_domains} domains)", field=f"task.targets[{i}]")
    if t.protocol == "corruption":
        if t.data_files is None and t.source_domain > 4:
            raise ConfigError("task.source_domain: generated tasks have domains 0..4",
                              field="task.source_domain")
        if t.data_files is not None and t.source_domain >= n_domains:
            raise ConfigError(f"task.source_domain: only {n_domains} domain files",
                              field="task.source_domain")
    _check_corruptions(t.corruptions, "task.corruptions")
    t.severities = _num_list(t.severities, "task.severities", int, low=1, high=5)

    m = cfg.model
    m.hidden = _num_list(m.hidden, "model.hidden", int, low=1)
    m.epochs = _num(m.epochs, "model.epochs", int, low=0)
    m.lr = _num(m.lr, "model.lr", low=0, low_open=True)
    m.batch_size = _num(m.batch_size, "model.batch_size", int, low=2)
    m.epsilon = _num(m.epsilon, "model.epsilon", low=0, low_open=True)
    m.momentum = _num(m.momentum, "model.momentum", low=0, high=1, low_open=True)
    m.frozen_bn = _flag(m.frozen_bn, "model.frozen_bn")

    a = cfg.adaptation
    a.rho = _num(a.rho, "adaptation.rho", low=0)
    a.delta = _num(a.delta, "adaptation.delta", int, low=1)
    a.theta = _num(a.theta, "adaptation.theta", low=0, high=1)
    a.base_lr = _num(a.base_lr, "adaptation.base_lr", low=0, low_open=True)
    a.batch_size = _num(a.batch_size, "adaptation.batch_size", int, low=2)
    a.episodic = _flag(a.episodic, "adaptation.episodic")
    a.trs_momentum = _num(a.trs_momentum, "adaptation.trs_momentum", low=0, high=1, low_open=True)
    if a.methods is not None:
        if not isinstance(a.methods, list) or not a.methods:
            raise ConfigError("adaptation.methods: expected a non-empty list",
                              field="adaptation.methods")
        for i, name in enumerate(a.methods):
            if name not in METHODS:
                raise ConfigError(f"adaptation.methods[{i}]: unknown method {name!r}; "
                                  f"known: {', '.join(METHODS)}", field=f"adaptation.methods[{i}]")

    s = cfg.sweep
    s.theta = _num_list(s.theta, "sweep.theta", low=0, high=1)
    s.rho = _num_list(s.rho, "sweep.rho", low=0)
    s.delta = _num_list(s.delta, "sweep.delta", int, low=1)
    if s.method not in METHODS:
        raise ConfigError(f"sweep.method: unknown method {s.method!r}", field="sweep.method")

    d = cfg.ablation_d
    d.narrow_domain = _num(d.narrow_domain, "ablation_d.narrow_domain", int, low=0, high=4)
    d.severity = _num(d.severity, "ablation_d.severity", int, low=1, high=5)
    _check_corruptions(d.corruptions, "ablation_d.corruptions")
    d.pretrain_epochs = _num(d.pretrain_epochs, "ablation_d.pretrain_epochs", int, low=0)
    d.finetune_epochs = _num(d.finetune_epochs, "ablation_d.finetune_epochs", int, low=0)
    d.finetune_lr = _num(d.finetune_lr, "ablation_d.finetune_lr", low=0, low_open=True)

    cfg.repetitions = _num(cfg.repetitions, "repetitions", int, low=1)
    cfg.seed = _num(cfg.seed, "seed", int, low=0)
    if not isinstance(cfg.out, str) or not cfg.out:
        raise ConfigError("out: expected a directory path", field="out")
    return cfg


def _check_corruptions(kinds, where):
    if not isinstance(kinds, list) or not kinds:
        raise ConfigError(f"{where}: expected a non-empty list", field=where)
    for i, k in enumerate(kinds):
        if k not in CORRUPTIONS:
            raise ConfigError(f"{where}[{i}]: unknown corruption {k!r}", field=f"{where}[{i}]")


def config_from_dict(data, check_paths=True):
    return validate(_build(ExperimentConfig, data or {}, ""), check_paths)


def load_config(path):
    try:
        with open(path, encoding="utf-8") as fh:
            data = yaml.safe_load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}", field="config") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML ({exc})", field="config") from exc
    return config_from_dict(data)


def dump_config(cfg):
    return yaml.safe_dump(_plain(cfg.to_dict()), sort_keys=True)


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj
