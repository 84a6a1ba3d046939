"""Report emission for flywheel runs: per-iteration metric table (CSV) and
SR/NE-vs-iteration line chart (SVG)."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

REPORT_COLUMNS = ["iteration", "split", "ne", "sr", "os", "spl", "ndtw"]


def load_run_record(run_dir) -> dict:
    path = Path(run_dir) / "run.json"
    with open(path) as fh:
        return json.load(fh)


def report_rows(record: dict) -> list:
    """Flatten a run record into table rows; baseline appears as iteration 0."""
    rows = [{"iteration": 0, "split": "val", **record["baseline"]["val"]}]
    for entry in record["iterations"]:
        rows.append({"iteration": entry["index"], "split": "train", **entry["train"]})
        rows.append({"iteration": entry["index"], "split": "val", **entry["val"]})
    return rows


def write_report_csv(record: dict, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS)
        writer.writeheader()
        for row in report_rows(record):
            writer.writerow(row)


def write_report_chart(record: dict, path) -> None:
    """Validation SR and NE per flywheel iteration (baseline at 0)."""
    iters = [0] + [e["index"] for e in record["iterations"]]
    sr = [record["baseline"]["val"]["sr"]] + [e["val"]["sr"] for e in record["iterations"]]
    ne = [record["baseline"]["val"]["ne"]] + [e["val"]["ne"] for e in record["iterations"]]
    fig, ax_sr = plt.subplots(figsize=(6, 4))
    ax_sr.plot(iters, sr, marker="o", color="tab:blue", label="SR (%)")
    ax_sr.set_xlabel("flywheel iteration")
    ax_sr.set_ylabel("success rate (%)", color="tab:blue")
    ax_sr.set_xticks(iters)
    ax_ne = ax_sr.twinx()
    ax_ne.plot(iters, ne, marker="s", color="tab:red", label="NE (m)")
    ax_ne.set_ylabel("navigation error (m)", color="tab:red")
    if record.get("best_iteration") is not None:
        ax_sr.axvline(record["best_iteration"], color="gray", linestyle="--", linewidth=1)
    fig.suptitle("Held-out performance per self-correction iteration")
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def write_report(run_dir, out_dir) -> dict:
    """Render report.csv and report.svg for a run directory; returns the
    record."""
    record = load_run_record(run_dir)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_report_csv(record, out / "report.csv")
    write_report_chart(record, out / "report.svg")
    return record
