"""Result tables: row-level records, seed aggregates and markdown/JSON/CSV emission."""
from dataclasses import dataclass, field
import csv
import io
import itertools
import json
import os

import numpy as np

from ..errors import NumericalError

RECORD_FIELDS = ("method", "target", "severity", "seed", "accuracy", "entropy",
                 "entropy_first", "entropy_last", "affine_delta", "n")
AVG = "avg"


@dataclass
class ResultTable:
    name: str
    records: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def add(self, **rec):
        missing = [k for k in RECORD_FIELDS if k not in rec]
        if missing:
            raise ValueError(f"record missing fields {missing}")
        self.records.append({k: rec[k] for k in RECORD_FIELDS})

    def methods(self):
        return list(dict.fromkeys(r["method"] for r in self.records))

    def columns(self):
        return list(dict.fromkeys((r["target"], r["severity"]) for r in self.records))

    def select(self, method, target=None):
        return [r for r in self.records if r["method"] == method
                and (target is None or r["target"] == target)]

    def per_seed(self, method):
        """Per-seed accuracy averaged over every target/severity cell of ``method``."""
        by_seed = {}
        for r in self.select(method):
            by_seed.setdefault(r["seed"], []).append(r["accuracy"])
        return {s: float(np.mean(v)) for s, v in by_seed.items()}

    def aggregates(self):
        return aggregate(self.records)


def _mean_std(values):
    arr = np.asarray(values, dtype=np.float64)
    std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return float(arr.mean()), std


def aggregate(records):
    """Mean and sample std across seeds, per cell and per method (``target="avg"``).

    The method average first averages each seed's cells, then aggregates the
    per-seed values, so its std is a seed-to-seed spread.
    """
    cells, per_seed = {}, {}
    for r in records:
        cells.setdefault((r["method"], r["target"], r["severity"]), []).append(r["accuracy"])
        per_seed.setdefault(r["method"], {}).setdefault(r["seed"], []).append(r["accuracy"])
    out = []
    for (method, target, severity), accs in cells.items():
        mean, std = _mean_std(accs)
        out.append({"method": method, "target": target, "severity": severity,
                    "n": len(accs), "mean": mean, "std": std})
    for method, seeds in per_seed.items():
        mean, std = _mean_std([float(np.mean(v)) for v in seeds.values()])
        out.append({"method": method, "target": AVG, "severity": 0,
                    "n": len(seeds), "mean": mean, "std": std})
    return out


def _col_label(target, severity):
    return f"{target}" if not severity else f"{target}-s{severity}"


def to_markdown(table):
    aggs = {(a["method"], a["target"], a["severity"]): a for a in table.aggregates()}
    cols = table.columns()
    head = ["Method"] + [_col_label(t, s) for t, s in cols] + (["Avg"] if cols else [])
    lines = [f"### {table.name}", "", "| " + " | ".join(head) + " |",
             "|" + "|".join(["---"] + [":---:"] * (len(head) - 1)) + "|"]
    for m in table.methods():
        cells = [m]
        for t, s in cols + [(AVG, 0)]:
            a = aggs.get((m, t, s))
            cells.append("-" if a is None else f"{100 * a['mean']:.1f} ± {100 * a['std']:.1f}")
        lines.append("| " + " | ".join(cells) + " |")
    if not table.records:
        lines.append("")
        lines.append("(no records)")
    return "\n".join(lines) + "\n"


def to_json(table):
    doc = {"name": table.name, "meta": table.meta, "records": table.records,
           "aggregates": table.aggregates()}
    return json.dumps(doc, sort_keys=True, indent=1) + "\n"


def to_csv(table):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RECORD_FIELDS)
    for r in table.records:
        w.writerow([repr(r[k]) if isinstance(r[k], float) else r[k] for k in RECORD_FIELDS])
    return buf.getvalue()


def table_from_json(text):
    doc = json.loads(text)
    return ResultTable(doc["name"], doc["records"], doc.get("meta", {})), doc.get("aggregates", [])


def reaggregate(text):
    """Recompute aggregates from the records of a JSON report and compare bitwise."""
    table, stored = table_from_json(text)
    fresh = table.aggregates()
    if fresh != stored:
        bad = next((a, b) for a, b in itertools.zip_longest(fresh, stored) if a != b)
        raise NumericalError(f"table {table.name!r}: stored aggregates differ from records",
                             table=table.name, recomputed=bad[0], stored=bad[1])
    return table


def emit_report(table, out_dir, stem=None):
    """Write ``<stem>.md``, ``<stem>.json`` and ``<stem>.csv``; returns the paths."""
    stem = stem or table.name
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for ext, text in (("md", to_markdown(table)), ("json", to_json(table)), ("csv", to_csv(table))):
        p = os.path.join(out_dir, f"{stem}.{ext}")
        with open(p, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        paths.append(p)
    return paths
