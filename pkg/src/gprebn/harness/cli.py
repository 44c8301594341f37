"""Command line entry point: ``gprebn {train,eval,adapt,ablate,sweep,report}``.

Exit codes: 0 success, 2 configuration error, 3 numerical failure, 4 I/O error.
Everything a command writes lands under ``--out`` and is listed, with SHA-256
digests, in ``<out>/manifest.json``.
"""
import argparse
import copy
import glob
import hashlib
import json
import logging
import os
import sys

from .. import BACKEND, __version__
from ..errors import CheckpointError, ConfigError, DataFormatError, GpreBNError, NumericalError
from .config import ExperimentConfig, dump_config, load_config, validate
from .experiments import (
    CheckpointStore,
    run_ablation,
    run_eval,
    run_experiment,
    run_sweep,
    train_all,
)
from .report import emit_report, reaggregate, to_markdown

log = logging.getLogger("gprebn")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_IO = 0, 2, 3, 4


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML experiment config (defaults when omitted)")
    common.add_argument("--seed", type=int, help="master seed (overrides config)")
    common.add_argument("--out", help="output directory (overrides config)")
    common.add_argument("--jobs", type=int, default=1, help="worker processes for independent cells")
    common.add_argument("--checkpoints", help="directory of trained checkpoints to reuse as-is")
    common.add_argument("--quiet", action="store_true", help="no per-epoch progress records")

    p = argparse.ArgumentParser(prog="gprebn", description="Test-time BN adaptation experiments")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="train source checkpoints")
    sub.add_parser("eval", parents=[common], help="unadapted source-statistics evaluation")
    a = sub.add_parser("adapt", parents=[common], help="run every configured method cell")
    a.add_argument("--methods", nargs="+", help="method labels (default: config or built-in list)")
    b = sub.add_parser("ablate", parents=[common], help="ablation matrix A, B, C or D")
    b.add_argument("which", choices=["A", "B", "C", "D", "a", "b", "c", "d"])
    sub.add_parser("sweep", parents=[common], help="theta x rho x delta grid on source validation")
    sub.add_parser("report", parents=[common], help="re-aggregate stored tables into report.md")
    return p


class Run:
    """Output directory bookkeeping for one command."""

    def __init__(self, out, command):
        self.out = out
        self.command = command
        self.written = []
        try:
            os.makedirs(out, exist_ok=True)
        except OSError as exc:
            raise OSError(f"cannot create output directory {out}: {exc.strerror}") from exc
        if not os.access(out, os.W_OK):
            raise OSError(f"output directory {out} is not writable")

    def path(self, *parts):
        p = os.path.join(self.out, *parts)
        os.makedirs(os.path.dirname(p), exist_ok=True)
        return p

    def write_text(self, rel, text):
        p = self.path(rel)
        with open(p, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        self.written.append(p)
        return p

    def table(self, table):
        self.written.extend(emit_report(table, self.path("tables"), table.name))

    def manifest(self, cfg, extra=None):
        mpath = os.path.join(self.out, "manifest.json")
        doc = {"files": {}, "commands": []}
        if os.path.exists(mpath):
            try:
                with open(mpath, encoding="utf-8") as fh:
                    doc = json.load(fh)
            except ValueError:
                log.warning("ignoring unreadable manifest %s", mpath)
        entry = {"command": self.command, "seed": cfg.seed, "config": cfg.fingerprint()}
        entry.update(extra or {})
        doc["commands"].append(entry)
        for p in self.written:
            with open(p, "rb") as fh:
                raw = fh.read()
            rel = os.path.relpath(p, self.out).replace(os.sep, "/")
            doc["files"][rel] = {"sha256": hashlib.sha256(raw).hexdigest(), "bytes": len(raw)}
        doc["package"] = {"name": "gprebn", "version": __version__, "backend": BACKEND}
        with open(mpath, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, sort_keys=True, indent=1)
            fh.write("\n")


def _progress(quiet):
    if quiet:
        return None

    def emit(rec):
        print(json.dumps(rec, sort_keys=True), flush=True)
    return emit


def resolve_config(args):
    cfg = load_config(args.config) if args.config else validate(ExperimentConfig())
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigError("--seed must be >= 0", field="seed")
        cfg.seed = args.seed
    if args.out:
        cfg.out = args.out
    if args.jobs < 1:
        raise ConfigError("--jobs must be >= 1", field="jobs")
    return cfg


def _store(args, run):
    if args.checkpoints:
        if not os.path.isdir(args.checkpoints):
            raise ConfigError(f"--checkpoints: no such directory {args.checkpoints}",
                              field="checkpoints")
        return CheckpointStore(args.checkpoints, retrain=False)
    return CheckpointStore(run.path("checkpoints", ""), retrain=True)


def cmd_train(cfg, args, run):
    store = _store(args, run)
    log_lines = []
    show = _progress(args.quiet)

    def progress(rec):
        log_lines.append(json.dumps(rec, sort_keys=True))
        if show:
            show(rec)

    trained = train_all(cfg, store=store, progress=progress)
    summary = [{"name": name, "source_val_accuracy": ck.metadata.get("source_val_accuracy"),
                "file": os.path.relpath(store.path(name), run.out).replace(os.sep, "/")}
               for name, ck in trained]
    for name, _ in trained:
        p = store.path(name)
        if os.path.abspath(p).startswith(os.path.abspath(run.out)):
            run.written.append(p)
    run.write_text("train_log.jsonl", "".join(line + "\n" for line in log_lines))
    run.write_text("train_summary.json", json.dumps(summary, sort_keys=True, indent=1) + "\n")


def cmd_eval(cfg, args, run):
    run.table(run_eval(cfg, jobs=args.jobs, store=_store(args, run)))


def cmd_adapt(cfg, args, run):
    run.table(run_experiment(cfg, args.methods, jobs=args.jobs, store=_store(args, run)))


def cmd_ablate(cfg, args, run):
    run.table(run_ablation(cfg, args.which.upper(), jobs=args.jobs, store=_store(args, run)))


def cmd_sweep(cfg, args, run):
    best, table = run_sweep(cfg, jobs=args.jobs, store=_store(args, run))
    run.table(table)
    run.write_text("best.json", json.dumps(best, sort_keys=True, indent=1) + "\n")
    tuned = copy.deepcopy(cfg)
    tuned.adaptation.theta = best["theta"]
    tuned.adaptation.rho = best["rho"]
    tuned.adaptation.delta = best["delta"]
    run.write_text("best_config.yaml", dump_config(tuned))


def cmd_report(cfg, args, run):
    paths = sorted(glob.glob(os.path.join(run.out, "tables", "*.json")))
    parts = ["# Results", ""]
    for p in paths:
        with open(p, encoding="utf-8") as fh:
            table = reaggregate(fh.read())
        parts.append(to_markdown(table))
    if not paths:
        parts.append("(no result tables)\n")
    run.write_text("report.md", "\n".join(parts))


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "adapt": cmd_adapt,
    "ablate": cmd_ablate,
    "sweep": cmd_sweep,
    "report": cmd_report,
}


def main(argv=None):
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        run = Run(cfg.out, args.command)
        if args.command != "report":
            run.write_text("config.yaml", dump_config(cfg))
        COMMANDS[args.command](cfg, args, run)
        extra = {"which": args.which.upper()} if args.command == "ablate" else {}
        run.manifest(cfg, extra)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, "config error", exc)
    except NumericalError as exc:
        return _fail(EXIT_NUMERICAL, "numerical failure", exc)
    except (CheckpointError, DataFormatError, OSError) as exc:
        return _fail(EXIT_IO, "I/O error", exc)
    except GpreBNError as exc:
        return _fail(exc.exit_code, "error", exc)
    return EXIT_OK


def _fail(code, kind, exc):
    details = getattr(exc, "details", None)
    msg = f"gprebn: {kind}: {exc}"
    if details:
        msg += f" {json.dumps(details, sort_keys=True, default=str)}"
    print(msg, file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
