"""Aggregate raw study CSVs into one tidy table per figure analog."""

from __future__ import annotations

import logging
from collections import defaultdict
from pathlib import Path

import numpy as np

from .records import read_csv, write_csv

log = logging.getLogger(__name__)

# figure -> raw study CSV, relative to the run directory
FIGURES = {
    "fig3a": "inference/inference.csv",
    "fig3b": "inference/inference.csv",
    "fig4": "diversity/diversity.csv",
    "table1": "noise/noise.csv",
    "fig5": "ood/ood.csv",
    "figA1": "behavior/behavior.csv",
}


def _group(rows, keys, value, convert=float):
    """(key tuple, n, mean, std) per group, groups in first-appearance order.

    The population standard deviation is reported; identical values
    (including a column of ``inf``) give 0.
    """
    groups = defaultdict(list)
    for r in rows:
        groups[tuple(r[k] for k in keys)].append(convert(r[value]))
    out = []
    for key, vals in groups.items():
        a = np.array(vals, dtype=np.float64)
        std = 0.0 if np.all(a == a[0]) else float(a.std())
        out.append((*key, len(a), float(a.mean()), std))
    return out


def _fig3a(rows):
    rows = [r for r in rows if r["selected"] == "1"]
    return ["T", "iteration", "count", "l1_mean", "l1_std"], _group(rows, ("T", "iteration"), "l1")


def _fig3b(rows):
    # iterations summed over every start of a case
    last = {}
    for r in rows:
        last[(r["T"], r["seed"], r["start"])] = int(r["iteration"])
    total = defaultdict(int)
    for (T, seed, _), it in last.items():
        total[(T, seed)] += it
    per_t = defaultdict(list)
    for (T, _), it in total.items():
        per_t[T].append(it)
    out = [(T, len(v), float(np.mean(v)), float(np.std(v)), float(np.median(v))) for T, v in per_t.items()]
    return ["T", "count", "iterations_mean", "iterations_std", "iterations_median"], out


def _fig4(rows):
    return (["n", "mode", "count", "reward_mean", "reward_std"], _group(rows, ("n", "mode"), "mean_reward"))


def _table1(rows):
    header = ["sigma", "count"]
    merged = {}
    for col in ("acc", "l1", "snr_db"):
        header += [f"{col}_mean", f"{col}_std"]
        for key, n, mean, std in _group(rows, ("sigma",), col):
            merged.setdefault(key, [key, n]).extend([mean, std])
    return header, list(merged.values())


def _fig5(rows):
    header = ["case", "kind", "probe", "count"]
    merged = {}
    for col in ("mean_c_hat", "abs_error"):
        header += [f"{col}_mean", f"{col}_std"]
        for *key, n, mean, std in _group(rows, ("case", "kind", "probe"), col):
            merged.setdefault(tuple(key), [*key, n]).extend([mean, std])
    return header, list(merged.values())


def _figA1(rows):
    header = ["component", "value", "count"]
    merged = {}
    for col in ("mean_velocity", "mean_follower_gap", "lane_changes"):
        header += [f"{col}_mean", f"{col}_std"]
        for *key, n, mean, std in _group(rows, ("component", "value"), col):
            merged.setdefault(tuple(key), [*key, n]).extend([mean, std])
    return header, list(merged.values())


BUILDERS = {"fig3a": _fig3a, "fig3b": _fig3b, "fig4": _fig4, "table1": _table1, "fig5": _fig5, "figA1": _figA1}


def cmd_export_plotdata(run_dir, out=None) -> dict:
    """Write ``<run_dir>/plotdata/<figure>.csv`` for every figure whose study ran.

    Returns ``{"written": {figure: path}, "skipped": {figure: reason}}``.
    """
    run_dir = Path(run_dir)
    if not run_dir.is_dir():
        raise FileNotFoundError(f"run directory not found: {run_dir}")
    dest = Path(out) if out is not None else run_dir / "plotdata"
    written, skipped = {}, {}
    for fig, rel in FIGURES.items():
        src = run_dir / rel
        if not src.exists():
            skipped[fig] = f"missing {rel}"
            log.warning("skipping %s: missing %s", fig, rel)
            continue
        _, rows = read_csv(src)
        header, table = BUILDERS[fig](rows)
        written[fig] = write_csv(dest / f"{fig}.csv", header, table)
    return {"written": written, "skipped": skipped}
