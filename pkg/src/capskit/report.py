"""CSV tables and SVG charts for run records."""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path

import matplotlib

matplotlib.use("svg")
matplotlib.rcParams["svg.hashsalt"] = "capskit"  # stable element ids across runs
import matplotlib.pyplot as plt  # noqa: E402

from .experiments import RunRecord  # noqa: E402

COLUMNS = ("method", "set", "mIoU", "precision", "recall", "f1", "mvIoU", "mvda", "seed")
METRICS = COLUMNS[2:8]


def fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def rows_to_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COLUMNS)
    for r in rows:
        w.writerow([fmt(r[c]) for c in COLUMNS])
    return buf.getvalue()


def parse_csv(text: str) -> list:
    rows = []
    reader = csv.DictReader(io.StringIO(text))
    if tuple(reader.fieldnames or ()) != COLUMNS:
        raise ValueError(f"unexpected CSV header {reader.fieldnames}")
    for r in reader:
        row = {"method": r["method"], "set": r["set"], "seed": int(r["seed"])}
        row.update({m: float(r[m]) for m in METRICS})
        rows.append(row)
    return rows


def checks_to_csv(checks) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["check", "result", "expected", "detail"])
    for c in checks:
        result = "pass" if c["passed"] else "fail"
        want = "pass" if c["expected"] else "fail (expected)"
        w.writerow([c["name"], result, want, c["detail"]])
    return buf.getvalue()


def _mean_by_method(rows, metric, test_set):
    out = {}
    for r in rows:
        if r["set"] == test_set and "sweep" not in r:
            out.setdefault(r["method"], []).append(r[metric])
    return {m: sum(v) / len(v) for m, v in out.items()}


def bar_chart(rows, path, metrics=("mvda", "mvIoU")):
    """One panel per (metric, test set); one bar per method (mean over seeds)."""
    sets = sorted({r["set"] for r in rows})
    fig, axes = plt.subplots(len(metrics), max(1, len(sets)), squeeze=False,
                             figsize=(4.5 * max(1, len(sets)), 3.2 * len(metrics)))
    for i, metric in enumerate(metrics):
        for j, test_set in enumerate(sets):
            ax = axes[i][j]
            means = _mean_by_method(rows, metric, test_set)
            names = list(means)
            bars = ax.bar(range(len(names)), [means[n] for n in names], color="#4c72b0")
            for bar, name in zip(bars, names):
                bar.set_gid(f"bar:{metric}:{test_set}:{name}")
            ax.set_xticks(range(len(names)), names, rotation=30, ha="right", fontsize=8)
            ax.set_title(f"{metric} ({test_set})", fontsize=9)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def line_chart(rows, path, metric="mvda"):
    """One panel per sweep axis, one line per test set (mean over seeds)."""
    sweeps = sorted({r["sweep"] for r in rows if "sweep" in r})
    if not sweeps:
        return False
    fig, axes = plt.subplots(1, len(sweeps), squeeze=False, figsize=(4.5 * len(sweeps), 3.2))
    for j, sweep in enumerate(sweeps):
        ax = axes[0][j]
        for test_set in sorted({r["set"] for r in rows}):
            pts = {}
            for r in rows:
                if r.get("sweep") == sweep and r["set"] == test_set:
                    pts.setdefault(r["x"], []).append(r[metric])
            xs = sorted(pts)
            (line,) = ax.plot(xs, [sum(pts[x]) / len(pts[x]) for x in xs], marker="o",
                              label=test_set)
            line.set_gid(f"line:{sweep}:{test_set}")
        if sweep == "T":
            ax.set_xscale("log")
        ax.set_xlabel(sweep)
        ax.set_ylabel(metric)
        ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return True


def emit_report(record: RunRecord, out_dir, formats=("csv", "svg")) -> list:
    """Write results.csv (and checks.csv), record.json and charts; returns the paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    name = "ablation" if record.command == "ablate" else "results"
    if "csv" in formats:
        p = out / f"{name}.csv"
        p.write_text(rows_to_csv(record.rows))
        written.append(p)
        if record.checks:
            p = out / "checks.csv"
            p.write_text(checks_to_csv(record.checks))
            written.append(p)
    p = out / "record.json"
    p.write_text(json.dumps(record.to_dict(), indent=1, sort_keys=True))
    written.append(p)
    if "svg" in formats and record.rows:
        p = out / f"{name}_bars.svg"
        bar_chart(record.rows, p)
        written.append(p)
        p = out / f"{name}_sweeps.svg"
        if line_chart(record.rows, p):
            written.append(p)
    return written


def load_record(path) -> RunRecord:
    path = Path(path)
    if path.is_dir():
        path = path / "record.json"
    return RunRecord.from_dict(json.loads(path.read_text()))
