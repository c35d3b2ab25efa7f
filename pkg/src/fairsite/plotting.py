"""Figures for sweep tables and evaluation reports.

Plots are presentation only: the CSV tables they are drawn from remain the
record of a run.
"""

from __future__ import annotations

import csv
import math
from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .records import RACE_GROUPS, DataError  # noqa: E402

REQUIRED_KEYS = ("lambda", "relative_error_mean", "entropy_mean")
# PNG metadata pinned so identical tables give identical bytes.
_PNG_META = {"Software": None}


def read_table(path) -> list[dict]:
    """Read a report/sweep CSV; numeric cells become floats."""
    path = Path(path)
    try:
        with path.open(newline="") as fh:
            rows = list(csv.DictReader(fh))
    except OSError as exc:
        raise DataError(f"{path}: {exc.strerror}") from exc
    if not rows:
        raise DataError(f"{path}: table has no rows")
    missing = [k for k in REQUIRED_KEYS if k not in rows[0]]
    if missing:
        raise DataError(f"{path}: missing columns {missing}")
    out = []
    for lineno, row in enumerate(rows, start=2):
        parsed = {}
        for key, value in row.items():
            try:
                parsed[key] = float(value)
            except (TypeError, ValueError):
                parsed[key] = value
        for key in REQUIRED_KEYS:
            if not isinstance(parsed[key], float) or math.isnan(parsed[key]):
                raise DataError(f"{path}:{lineno}: column {key!r} is not a number")
        out.append(parsed)
    return out


def write_table(rows: Sequence[Mapping], path) -> None:
    if not rows:
        raise DataError("refusing to write an empty table")
    keys = list(rows[0])
    with Path(path).open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=keys, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def _series_label(rows, fallback):
    label = rows[0].get("model")
    return label if isinstance(label, str) and label else fallback


def tradeoff_figure(series: Mapping[str, Sequence[Mapping]], out_path) -> Path:
    """Relative error against entropy, one line per series, lambda written at each point."""
    if not series or any(not rows for rows in series.values()):
        raise DataError("cannot plot an empty table")
    fig, ax = plt.subplots(figsize=(5.5, 4.0))
    for label, rows in series.items():
        rows = sorted(rows, key=lambda r: r["lambda"])
        x = [r["entropy_mean"] for r in rows]
        y = [r["relative_error_mean"] for r in rows]
        ax.plot(x, y, marker="o", label=label)
        for r, xi, yi in zip(rows, x, y):
            ax.annotate(f"λ={r['lambda']:g}", (xi, yi), textcoords="offset points", xytext=(4, 4), fontsize=7)
    ax.set_xlabel("population entropy (nats)")
    ax.set_ylabel("relative error")
    ax.set_title("Enrollment vs. diversity")
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    out_path = Path(out_path)
    fig.savefig(out_path, dpi=120, metadata=_PNG_META)
    plt.close(fig)
    return out_path


def race_columns(row: Mapping) -> list[float]:
    return [float(row.get(f"race_{g.lower()}_mean", float("nan"))) for g in RACE_GROUPS]


def race_table(series: Mapping[str, Sequence[Mapping]]) -> list[dict]:
    """Mean selected-cohort race mix for every (series, lambda) row, in percent."""
    table = []
    for label, rows in series.items():
        for r in sorted(rows, key=lambda r: r["lambda"]):
            entry = {"series": label, "lambda": r["lambda"]}
            for group, value in zip(RACE_GROUPS, race_columns(r)):
                entry[group] = round(100.0 * value, 2)
            table.append(entry)
    return table


def race_figure(series: Mapping[str, Sequence[Mapping]], out_path) -> Path:
    table = race_table(series)
    if not table:
        raise DataError("cannot plot an empty table")
    fig, ax = plt.subplots(figsize=(6.5, 3.8))
    width = 0.8 / len(table)
    for j, entry in enumerate(table):
        xs = [i + (j - (len(table) - 1) / 2) * width for i in range(len(RACE_GROUPS))]
        ax.bar(xs, [entry[g] for g in RACE_GROUPS], width, label=f"{entry['series']} λ={entry['lambda']:g}")
    ax.set_xticks(range(len(RACE_GROUPS)))
    ax.set_xticklabels(RACE_GROUPS)
    ax.set_ylabel("share of enrolled population (%)")
    ax.legend(fontsize=7)
    fig.tight_layout()
    out_path = Path(out_path)
    fig.savefig(out_path, dpi=120, metadata=_PNG_META)
    plt.close(fig)
    return out_path


def render_all(series: Mapping[str, Sequence[Mapping]], out_dir) -> list[Path]:
    """Write tradeoff.png, race.png and race_table.csv into ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = [tradeoff_figure(series, out_dir / "tradeoff.png"), race_figure(series, out_dir / "race.png")]
    write_table(race_table(series), out_dir / "race_table.csv")
    paths.append(out_dir / "race_table.csv")
    return paths
