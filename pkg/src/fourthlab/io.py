"""
Run-directory persistence: comma tables, SVG plots and a JSON summary.
"""

from __future__ import annotations

import csv
import io
import json
import math
from pathlib import Path
from typing import Iterable, Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

plt.rcParams["svg.hashsalt"] = "fourthlab"

SUMMARY_NAME = "summary.json"
CONFIG_NAME = "config.yaml"


def _cell(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return "%.17g" % v
    if hasattr(v, "item"):
        return _cell(v.item())
    return str(v)


def table_text(rows: Sequence[dict], columns: Optional[Sequence[str]] = None) -> str:
    """Comma-delimited text with a header row; floats are written round-trip exact."""
    if columns is None:
        columns = list(rows[0].keys()) if rows else []
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_cell(r.get(c, "")) for c in columns])
    return buf.getvalue()


def write_table(path, rows: Sequence[dict], columns: Optional[Sequence[str]] = None) -> Path:
    path = Path(path)
    path.write_text(table_text(rows, columns))
    return path


def read_table(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))


def _jsonable(v):
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if hasattr(v, "item"):
        v = v.item()
    if isinstance(v, float) and not math.isfinite(v):
        return str(v)
    return v


def write_summary(path, summary: dict) -> Path:
    path = Path(path)
    path.write_text(json.dumps(_jsonable(summary), indent=2, sort_keys=True) + "\n")
    return path


def read_summary(path) -> dict:
    return json.loads(Path(path).read_text())


def line_plot(
    path,
    series: Iterable[tuple[str, Sequence[float], Sequence[float]]],
    xlabel: str,
    ylabel: str,
    logx: bool = False,
    logy: bool = False,
    title: Optional[str] = None,
) -> Path:
    path = Path(path)
    fig, ax = plt.subplots(figsize=(5.5, 4.0))
    for label, x, y in series:
        ax.plot(list(x), list(y), marker="o", ms=3, label=label)
    if logx:
        ax.set_xscale("log")
    if logy:
        ax.set_yscale("log")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    ax.legend(fontsize=8)
    ax.grid(True, which="both", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path
