"""Experiment orchestration: tasks, checkpoints, method cells, ablations and sweeps.

A *unit* is one trained checkpoint: ``(seed, held-out domain)`` under the
leave-one-out protocol, ``(seed, "source")`` under the corruption protocol.
Every method cell of a unit adapts a fresh copy of the same checkpoint on the
same shuffled target stream, so cells differ only in the method.
"""
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
import logging
import os

import numpy as np

from ..adaptation import AdaptConfig, AdaptState, iter_batches, run_adaptation
from ..errors import CheckpointError, ConfigError
from ..network import (
    TrainConfig,
    accuracy,
    build_mlp,
    load_checkpoint,
    save_checkpoint,
    train_source,
)
from ..numerics import Rng
from ..shiftgen import (
    Corruption,
    DomainShift,
    GeneratorSpec,
    LabeledDataset,
    apply_corruption,
    default_domain_shifts,
    generate_domains,
    load_binary,
    load_csv,
    sample_domains,
)
from .config import config_from_dict
from .report import ResultTable

log = logging.getLogger(__name__)

# label -> AdaptConfig overrides; cells without ``rho`` use the configured rho
METHODS = {
    "source-stats eval": dict(variant="frozen_eval", rho=0.0),
    "target-stats eval": dict(variant="standard_train", stats_source="current_batch", rho=0.0),
    "TRS eval": dict(variant="gprebn", stats_source="testing_running", rho=0.0),
    "Tent": dict(variant="standard_train", stats_source="current_batch"),
    "Tent(de)": dict(variant="detached_stats", stats_source="current_batch"),
    "GpreBN(CurrentBatch)": dict(variant="gprebn", stats_source="current_batch"),
    "BN(mu_r)+opt": dict(variant="frozen_eval"),
    "GpreBN(mu_r)+opt": dict(variant="gprebn", stats_source="source_running"),
    "GpreBN+TRS": dict(variant="gprebn", stats_source="testing_running"),
    "GpreBN+TRS(EMA)": dict(variant="gprebn", stats_source="testing_running", trs_mode="ema"),
    "GpreBN+theta-Mixture": dict(variant="gprebn", stats_source="theta_mixture"),
    "GpreBN+TRS+rT3A": dict(variant="gprebn", stats_source="testing_running", use_rt3a=True),
}

ADAPT_METHODS = ("source-stats eval", "target-stats eval", "Tent", "Tent(de)",
                 "GpreBN(CurrentBatch)", "GpreBN+TRS", "GpreBN+theta-Mixture", "GpreBN+TRS+rT3A")

ABLATIONS = {
    "A": ("target-stats eval", "Tent(de)", "Tent"),
    "B": ("target-stats eval", "TRS eval", "BN(mu_r)+opt", "GpreBN(mu_r)+opt",
          "GpreBN(CurrentBatch)", "GpreBN+TRS"),
    "C": ("GpreBN+TRS", "GpreBN+TRS(EMA)"),
}

# ablation D holds out this fraction of the narrow source domain as its test pool
D_TEST_FRACTION = 0.5


def adapt_config(cfg, method, **override):
    a = cfg.adaptation
    kw = dict(rho=a.rho, delta=a.delta, theta=a.theta, base_lr=a.base_lr,
              episodic=a.episodic, trs_momentum=a.trs_momentum)
    kw.update(METHODS[method])
    kw.update(override)
    return AdaptConfig(**kw)


# --------------------------------------------------------------------------- tasks


@dataclass
class Task:
    """Domains of one seed, each split into ``(train, val)``."""

    domains: list
    train: list
    val: list
    labels: list
    protocol: str

    @property
    def dim(self):
        return self.domains[0].dim

    @property
    def num_classes(self):
        return max(d.num_classes for d in self.domains)


def generator_spec(cfg, seed):
    g = cfg.task.generator
    return GeneratorSpec(num_classes=g.num_classes, dim=g.dim, samples_per_domain=g.samples_per_domain,
                         components=g.components, class_sep=g.class_sep,
                         component_spread=g.component_spread, noise=g.noise, seed=seed)


def domain_shifts(cfg):
    return default_domain_shifts(cfg.task.generator.dim, cfg.task.shift.offset,
                                 cfg.task.shift.scale_step)


def _load_files(cfg):
    out = []
    for df in cfg.task.data_files:
        data = load_csv(df.path) if df.format == "csv" else load_binary(df.path)
        if not data.domain_tag:
            data.domain_tag = os.path.splitext(os.path.basename(df.path))[0]
        out.append(data)
    dims = {d.dim for d in out}
    if len(dims) != 1:
        raise ConfigError(f"task.data_files: feature widths differ ({sorted(dims)})",
                          field="task.data_files")
    k = max(d.num_classes for d in out)
    for d in out:
        d.num_classes = k
    return out


def build_task(cfg, seed):
    """Domains for ``seed``. Leave-one-out uses the four shifted domains (or the files)."""
    t = cfg.task
    if t.data_files is not None:
        all_domains = _load_files(cfg)
        loo = all_domains
    else:
        all_domains = generate_domains(generator_spec(cfg, seed), domain_shifts(cfg))
        loo = all_domains[1:]
    domains = loo if t.protocol == "leave_one_out" else [all_domains[t.source_domain]]
    train, val = [], []
    for k, d in enumerate(domains):
        a, b = d.split(t.val_fraction, Rng(seed).derive("split", k))
        train.append(a)
        val.append(b)
    labels = []
    for k, d in enumerate(domains):
        lab = d.domain_tag or f"d{k}"
        labels.append(lab if lab not in labels else f"{lab}#{k}")
    return Task(domains, train, val, labels, t.protocol)


def units(cfg, task):
    """Unit keys of one seed: held-out domain indices, or ``["source"]``."""
    if cfg.task.protocol == "corruption":
        return ["source"]
    return list(cfg.task.targets) if cfg.task.targets is not None else list(range(len(task.domains)))


def unit_training_data(task, unit):
    if unit == "source":
        return task.train[0], [task.val[0]]
    idx = [k for k in range(len(task.domains)) if k != unit]
    return (LabeledDataset.concat([task.train[k] for k in idx], "train"),
            [task.val[k] for k in idx])


def unit_targets(cfg, task, unit, seed):
    """``[(target label, severity, dataset)]`` evaluated for one unit."""
    if unit != "source":
        return [(task.labels[unit], 0, task.domains[unit])]
    out = []
    for kind in cfg.task.corruptions:
        for sev in cfg.task.severities:
            data = apply_corruption(task.val[0], Corruption(kind, sev),
                                    Rng(seed).derive("corrupt", kind, sev))
            out.append((kind, sev, data))
    return out


def target_stream(cfg, data, seed, label, severity):
    rng = Rng(seed).derive("stream", label, severity)
    return list(iter_batches(data, cfg.adaptation.batch_size, rng))


# --------------------------------------------------------------------------- checkpoints


class CheckpointStore:
    """Trained checkpoints keyed by name, in memory and optionally on disk.

    A stored checkpoint whose fingerprint differs from the config is retrained
    when ``retrain`` is set, and rejected otherwise.
    """

    def __init__(self, directory=None, retrain=True):
        self.directory = directory
        self.retrain = retrain
        self.memory = {}
        if directory:
            os.makedirs(directory, exist_ok=True)

    def path(self, name):
        return os.path.join(self.directory, f"{name}.ckpt") if self.directory else None

    def get(self, name, fingerprint, build):
        ck = self.memory.get(name)
        if ck is not None and ck.metadata.get("fingerprint") == fingerprint:
            return ck
        path = self.path(name)
        if path and os.path.exists(path):
            ck = load_checkpoint(path)
            if ck.metadata.get("fingerprint") == fingerprint:
                self.memory[name] = ck
                return ck
            if not self.retrain:
                raise CheckpointError(
                    f"{path}: checkpoint was trained with a different task/model config",
                    path=path, expected=fingerprint, found=ck.metadata.get("fingerprint"))
            log.info("retraining stale checkpoint %s", path)
        ck = build()
        ck.metadata["fingerprint"] = fingerprint
        if path:
            save_checkpoint(ck, path)
        self.memory[name] = ck
        return ck


def _train(cfg, data, seed, key, progress=None, frozen_from=None, epochs=None, lr=None):
    m = cfg.model
    net = build_mlp(data.dim, data.num_classes, tuple(m.hidden), rng=Rng(seed).derive("init", key),
                    epsilon=m.epsilon, momentum=m.momentum)
    meta = {"unit": str(key)}
    if frozen_from is not None:
        pre_epochs = cfg.ablation_d.pretrain_epochs
        train_source(net, frozen_from, TrainConfig(pre_epochs, m.lr, m.batch_size, seed),
                     progress=_tag(progress, "pretrain"))
        meta["pretrain_epochs"] = pre_epochs
    tc = TrainConfig(m.epochs if epochs is None else epochs, m.lr if lr is None else lr,
                     m.batch_size, seed, frozen_bn=frozen_from is not None)
    return train_source(net, data, tc, progress=_tag(progress, "train"), metadata=meta)


def _tag(progress, phase):
    if progress is None:
        return None
    return lambda rec: progress(dict(rec, phase=phase))


def pretrain_pool(cfg, seed, exclude=None):
    """Broad pretraining data for frozen-BN fine-tuning: fresh draws of every domain."""
    if cfg.task.data_files is not None:
        files = _load_files(cfg)
        return LabeledDataset.concat([d for k, d in enumerate(files) if k != exclude], "pool")
    shifts = [DomainShift(name="base")] + domain_shifts(cfg)
    parts = sample_domains(generator_spec(cfg, seed), shifts, "pretrain")
    return LabeledDataset.concat([d for k, d in enumerate(parts) if k != exclude], "pool")


def unit_checkpoint(cfg, task, seed, unit, store, progress=None):
    name = f"seed{seed}_{'source' if unit == 'source' else f'target{unit}'}"
    fp = cfg.fingerprint("task", "model", "ablation_d") if cfg.model.frozen_bn \
        else cfg.fingerprint("task", "model")

    def build():
        data, vals = unit_training_data(task, unit)
        pool = pretrain_pool(cfg, seed) if cfg.model.frozen_bn else None
        prog = None if progress is None else (lambda r: progress(dict(r, seed=seed, unit=str(unit))))
        ck = _train(cfg, data, seed, name, prog, frozen_from=pool)
        net = ck.network()
        ck.metadata["source_val_accuracy"] = float(np.mean([accuracy(net, v) for v in vals]))
        return ck

    ck = store.get(name, fp, build)
    _check_compatible(ck, task, name)
    return ck


def _check_compatible(ck, task, name):
    first = ck.layers[0]
    last = ck.layers[-1]
    if first.get("in") != task.dim or last.get("classes") != task.num_classes:
        raise CheckpointError(
            f"checkpoint {name} expects {first.get('in')} features / {last.get('classes')} classes, "
            f"task has {task.dim} / {task.num_classes}",
            checkpoint=name, expected=(first.get("in"), last.get("classes")),
            task=(task.dim, task.num_classes))


# --------------------------------------------------------------------------- cells


def run_cell(ckpt, stream, acfg):
    """Adapt a fresh copy of ``ckpt`` over ``stream``; returns the record metrics."""
    state = AdaptState.from_checkpoint(ckpt, acfg)
    init = np.concatenate([v.ravel() for v in state.initial_affine.values()])
    plog = run_adaptation(ckpt, stream, acfg, state=state)
    final = np.concatenate([v.ravel() for v in state.affine_snapshot().values()])
    return {
        "accuracy": float(plog.accuracy),
        "entropy": float(plog.mean_entropy),
        "entropy_first": float(plog.records[0].entropy),
        "entropy_last": float(plog.records[-1].entropy),
        "affine_delta": float(np.linalg.norm(final - init)),
        "n": int(sum(r.size for r in plog.records)),
    }


def _unit_records(cfg_dict, seed, unit, methods, ckpt_dir):
    cfg = config_from_dict(cfg_dict, check_paths=False)
    store = CheckpointStore(ckpt_dir)
    return _unit_records_cfg(cfg, seed, unit, methods, store)


def _unit_records_cfg(cfg, seed, unit, methods, store, task=None):
    task = task or build_task(cfg, seed)
    ck = unit_checkpoint(cfg, task, seed, unit, store)
    out = []
    for label, sev, data in unit_targets(cfg, task, unit, seed):
        stream = target_stream(cfg, data, seed, label, sev)
        for m in methods:
            rec = run_cell(ck, stream, adapt_config(cfg, m))
            out.append(dict(method=m, target=label, severity=sev, seed=seed, **rec))
    return out, {"seed": seed, "unit": str(unit),
                 "source_val_accuracy": ck.metadata.get("source_val_accuracy")}


def _map_units(cfg, jobs, store, fn_local, fn_remote, work):
    """Run ``work`` items serially (sharing ``store``) or in a process pool."""
    if jobs <= 1 or len(work) <= 1:
        return [fn_local(*w) for w in work]
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        futs = [ex.submit(fn_remote, cfg.to_dict(), *w, store.directory) for w in work]
        return [f.result() for f in futs]


def _order(records, methods, cfg_seeds):
    mpos = {m: i for i, m in enumerate(methods)}
    spos = {s: i for i, s in enumerate(cfg_seeds)}
    tpos = {}
    for r in records:
        tpos.setdefault((r["target"], r["severity"]), len(tpos))
    return sorted(records, key=lambda r: (mpos[r["method"]], tpos[(r["target"], r["severity"])],
                                          spos[r["seed"]]))


def run_experiment(cfg, methods=None, seeds=None, jobs=1, store=None, name="adapt"):
    """Every method cell over units x targets x severities x seeds -> ``ResultTable``."""
    methods = list(methods or cfg.adaptation.methods or ADAPT_METHODS)
    for m in methods:
        if m not in METHODS:
            raise ConfigError(f"unknown method {m!r}", field="adaptation.methods")
    seeds = list(cfg.seeds if seeds is None else seeds)
    store = store or CheckpointStore()
    work = []
    tasks = {}
    for s in seeds:
        tasks[s] = build_task(cfg, s)
        work.extend((s, u, methods) for u in units(cfg, tasks[s]))

    def local(s, u, ms):
        return _unit_records_cfg(cfg, s, u, ms, store, tasks[s])

    results = _map_units(cfg, jobs, store, local, _unit_records, work)
    records, training = [], []
    for recs, info in results:
        records.extend(recs)
        training.append(info)
    meta = {"methods": methods, "seeds": seeds, "protocol": cfg.task.protocol,
            "training": training}
    return ResultTable(name, _order(records, methods, seeds), meta)


def run_ablation(cfg, which, seeds=None, jobs=1, store=None):
    which = str(which).upper()
    if which == "D":
        return run_ablation_d(cfg, seeds, jobs)
    if which not in ABLATIONS:
        raise ConfigError(f"unknown ablation {which!r}; choose A, B, C or D", field="ablation")
    return run_experiment(cfg, ABLATIONS[which], seeds, jobs, store, name=f"ablation_{which}")


# --------------------------------------------------------------------------- ablation D


D_REGIMES = ("finetuned", "trained")
D_CELLS = (
    ("source stats", "source-stats eval"),
    ("target stats", "target-stats eval"),
    ("source stats + Tent", "BN(mu_r)+opt"),
    ("target stats + Tent", "Tent"),
)


def d_label(regime, cell):
    return f"{regime} / {cell}"


def _ablation_d_seed(cfg, seed):
    if cfg.task.data_files is not None:
        raise ConfigError("ablation D needs the synthetic generator (task.data_files is set)",
                          field="task.data_files")
    d = cfg.ablation_d
    spec = generator_spec(cfg, seed)
    doms = generate_domains(spec, domain_shifts(cfg))
    narrow = doms[d.narrow_domain]
    rng = Rng(seed).derive("ablation_d")
    train, test = narrow.split(D_TEST_FRACTION, rng.derive("split"))
    broad = LabeledDataset.concat([x for k, x in enumerate(doms) if k != d.narrow_domain], "broad")
    trained = _train(cfg, train, seed, "ablation_d/trained")
    finetuned = _train(cfg, train, seed, "ablation_d/finetuned", frozen_from=broad,
                       epochs=d.finetune_epochs, lr=d.finetune_lr)
    out = []
    for kind in d.corruptions:
        data = apply_corruption(test, Corruption(kind, d.severity), rng.derive("corrupt", kind))
        stream = target_stream(cfg, data, seed, kind, d.severity)
        for regime, ck in (("finetuned", finetuned), ("trained", trained)):
            for cell, method in D_CELLS:
                rec = run_cell(ck, stream, adapt_config(cfg, method))
                out.append(dict(method=d_label(regime, cell), target=kind, severity=d.severity,
                                seed=seed, **rec))
    return out


def _ablation_d_remote(cfg_dict, seed, _dir):
    return _ablation_d_seed(config_from_dict(cfg_dict, check_paths=False), seed)


def run_ablation_d(cfg, seeds=None, jobs=1):
    """Frozen-BN fine-tuned vs fully trained source models, crossed with
    {source, target} statistics and {no adaptation, Tent}."""
    seeds = list(cfg.seeds if seeds is None else seeds)
    results = _map_units(cfg, jobs, CheckpointStore(), lambda s: _ablation_d_seed(cfg, s),
                         _ablation_d_remote, [(s,) for s in seeds])
    records = [r for recs in results for r in recs]
    methods = [d_label(g, c) for g in D_REGIMES for c, _ in D_CELLS]
    meta = {"seeds": seeds, "narrow_domain": cfg.ablation_d.narrow_domain,
            "severity": cfg.ablation_d.severity}
    return ResultTable("ablation_D", _order(records, methods, seeds), meta)


# --------------------------------------------------------------------------- sweep


def sweep_label(theta, rho, delta):
    return f"theta={theta:g} rho={rho:g} delta={delta}"


def _sweep_unit(cfg, seed, unit, store, task=None):
    task = task or build_task(cfg, seed)
    ck = unit_checkpoint(cfg, task, seed, unit, store)
    _, vals = unit_training_data(task, unit)
    target = "source" if unit == "source" else task.labels[unit]
    streams = [target_stream(cfg, v, seed, f"val{k}", 0) for k, v in enumerate(vals)]
    s = cfg.sweep
    out = []
    for theta in s.theta:
        for rho in s.rho:
            for delta in s.delta:
                acfg = adapt_config(cfg, s.method, theta=theta, rho=rho, delta=delta)
                recs = [run_cell(ck, st, acfg) for st in streams]
                rec = {k: float(np.mean([r[k] for r in recs])) for k in recs[0]}
                rec["n"] = sum(r["n"] for r in recs)
                out.append(dict(method=sweep_label(theta, rho, delta), target=target, severity=0,
                                seed=seed, **rec))
    return out


def _sweep_remote(cfg_dict, seed, unit, ckpt_dir):
    cfg = config_from_dict(cfg_dict, check_paths=False)
    return _sweep_unit(cfg, seed, unit, CheckpointStore(ckpt_dir))


def run_sweep(cfg, seeds=None, jobs=1, store=None):
    """Grid over theta x rho x delta scored on held-out source-domain validation streams.

    Returns ``(best, table)``; ``best`` holds the winning cell (first in grid
    order on ties) and its mean validation accuracy.
    """
    s = cfg.sweep
    if not (s.theta and s.rho and s.delta):
        raise ConfigError("sweep grids must be non-empty", field="sweep")
    seeds = list(cfg.seeds if seeds is None else seeds)
    store = store or CheckpointStore()
    tasks = {x: build_task(cfg, x) for x in seeds}
    work = [(x, u) for x in seeds for u in units(cfg, tasks[x])]
    results = _map_units(cfg, jobs, store, lambda x, u: _sweep_unit(cfg, x, u, store, tasks[x]),
                         _sweep_remote, work)
    records = [r for recs in results for r in recs]
    grid = [(t, r, d) for t in s.theta for r in s.rho for d in s.delta]
    labels = [sweep_label(*g) for g in grid]
    table = ResultTable("sweep", _order(records, list(dict.fromkeys(labels)), seeds),
                        {"method": s.method, "seeds": seeds})
    scores = {}
    for label in labels:
        per_seed = table.per_seed(label)
        scores[label] = float(np.mean(list(per_seed.values())))
    best_i = max(range(len(grid)), key=lambda i: (scores[labels[i]], -i))
    theta, rho, delta = grid[best_i]
    best = {"method": s.method, "theta": theta, "rho": rho, "delta": delta,
            "score": scores[labels[best_i]], "base_lr": cfg.adaptation.base_lr}
    table.meta["best"] = best
    return best, table


# --------------------------------------------------------------------------- train / eval


def train_all(cfg, seeds=None, store=None, progress=None):
    """Train (or load) every unit checkpoint; returns ``[(name, checkpoint)]``."""
    seeds = list(cfg.seeds if seeds is None else seeds)
    store = store or CheckpointStore()
    out = []
    for s in seeds:
        task = build_task(cfg, s)
        for u in units(cfg, task):
            ck = unit_checkpoint(cfg, task, s, u, store, progress)
            out.append((f"seed{s}_{'source' if u == 'source' else f'target{u}'}", ck))
    return out


def run_eval(cfg, seeds=None, jobs=1, store=None):
    """Unadapted source-statistics evaluation (the FrozenEval baseline)."""
    return run_experiment(cfg, ["source-stats eval"], seeds, jobs, store, name="eval")

